use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use herl_core::ablation::{first_view_ari, mean_ari, run_ablation, AblationSpec, Variant, ABLATION_HEADER};
use herl_core::config::RunConfig;
use herl_core::dataio::{synth_dataset, Dataset, MaskSpec, SynthSpec};
use herl_core::gradsuite::{end_to_end_check, quadratic_check, run_op_suite, LOSS_TOLERANCE, OP_TOLERANCE, QUADRATIC_TOLERANCE};
use herl_core::netmodel::ModelState;
use herl_core::train::{evaluate, train, EpochLog, LOG_HEADER, METRICS_HEADER};
use herl_core::treebed::{
    build_regular_tree, euclidean_lower_bound, measure_distortion, read_embedding_csv, sarkar_embed,
    write_embedding_csv, PairFilter, TreeSpec,
};

const THREADS_ENV: &str = "HERL_THREADS";
const DISTORTION_HEADER: &str = "pair_filter,D,s_star,max_ratio,min_ratio,euclidean_lower_bound";

#[derive(Parser)]
#[command(name = "herl", version, about = "Hyperbolic multi-view clustering toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the complete samples of a dataset directory.
    Train(TrainArgs),
    /// Complete missing views, cluster and score against the labels.
    Eval(EvalArgs),
    /// Embed a regular tree in the Poincare disk.
    Sarkar(SarkarArgs),
    /// Measure the distortion of an embedding written by `sarkar`.
    Distortion(DistortionArgs),
    /// Write a synthetic tree-structured two-view dataset.
    Synth(SynthArgs),
    /// Finite-difference checks of every tape op and the full objective.
    Gradcheck(GradcheckArgs),
    /// Compare loss-term variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory (view1.csv, view2.csv, labels.csv, mask.csv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of clusters; defaults to the config value, then the label count.
    #[arg(long)]
    k: Option<usize>,
    /// k-means seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TreeArgs {
    /// Branching factor.
    #[arg(long, default_value_t = 2)]
    b: usize,
    /// Depth.
    #[arg(long)]
    depth: usize,
    /// Curvature of the disk.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Multiplier on the radial step ln b.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

impl TreeArgs {
    fn spec(&self) -> Result<TreeSpec> {
        Ok(TreeSpec::new(self.b, self.depth)?.with_curvature(self.c)?.with_scale(self.scale)?)
    }
}

#[derive(Args)]
struct SarkarArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistortionArgs {
    #[command(flatten)]
    tree: TreeArgs,
    /// Embedding CSV (`node_id,level,x,y`).
    #[arg(long)]
    emb: PathBuf,
    /// Pair sets to report; defaults to all, edges and siblings.
    #[arg(long = "filter")]
    filters: Vec<PairFilter>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    b: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 50)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim1: usize,
    #[arg(long, default_value_t = 12)]
    dim2: usize,
    /// Gaussian step between parent and child class centers.
    #[arg(long, default_value_t = 1.0)]
    center_step: f64,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    /// Upper bound on the singular values of the view-2 map.
    #[arg(long, default_value_t = 2.0)]
    cross_view: f64,
    /// Fraction of samples that lose one view.
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random points per op.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Seeds 0..n.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    /// Per-run CSV; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let data = Dataset::read(&args.data)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml_string())?;

    let log_path = args.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "{LOG_HEADER}")?;
    let (state, rows) = train(&cfg, &data, |row: &EpochLog| {
        writeln!(log, "{}", row.csv_row()).map_err(|e| herl_core::HerlError::Io {
            path: log_path.clone(),
            source: e,
        })
    })?;
    state.save(&args.out.join("model"))?;
    if let Some(last) = rows.last() {
        eprintln!("trained {} epochs, final loss {:.6}", last.epoch, last.losses.total);
    } else {
        eprintln!("0 epochs: wrote the initial model");
    }
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("model");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let state = ModelState::load(&checkpoint_dir(&args.checkpoint))?;
    let data = Dataset::read(&args.data)?;
    let k = args.k.unwrap_or_else(|| cfg.cluster_count(data.classes()));
    let result = evaluate(&state, &data, k, args.seed.unwrap_or(cfg.seed), &cfg)?;
    let text = format!("{METRICS_HEADER}\n{}\n", result.csv_row());
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn cmd_sarkar(args: &SarkarArgs) -> Result<()> {
    let spec = args.tree.spec()?;
    let tree = build_regular_tree(&spec)?;
    let emb = sarkar_embed(&tree, &spec)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_embedding_csv(&emb, &tree, &args.out)?;
    eprintln!("embedded {} nodes into {}", tree.len(), args.out.display());
    Ok(())
}

fn cmd_distortion(args: &DistortionArgs) -> Result<()> {
    let spec = args.tree.spec()?;
    let tree = build_regular_tree(&spec)?;
    let emb = read_embedding_csv(&args.emb, &spec)?;
    let bound = euclidean_lower_bound(spec.branching, spec.depth, 2)?;
    let filters = if args.filters.is_empty() {
        vec![PairFilter::All, PairFilter::Edges, PairFilter::Siblings]
    } else {
        args.filters.clone()
    };
    let mut text = format!("{DISTORTION_HEADER}\n");
    for f in filters {
        let r = measure_distortion(&emb, &tree, f)?;
        text.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            f.name(),
            r.distortion,
            r.s_star,
            r.max_ratio,
            r.min_ratio,
            bound
        ));
    }
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        tree: TreeSpec::new(args.b, args.depth)?,
        samples_per_class: args.samples_per_class,
        dims: [args.dim1, args.dim2],
        center_step: args.center_step,
        noise: args.noise,
        cross_view: args.cross_view,
        seed: args.seed,
    };
    let mask = MaskSpec {
        eta: args.eta,
        views: 2,
        seed: args.seed.wrapping_add(1_000),
    };
    let data = synth_dataset(&spec, &mask)?;
    data.write(&args.out)?;
    eprintln!(
        "wrote {} samples in {} classes to {}",
        data.labels.len(),
        data.classes(),
        args.out.display()
    );
    Ok(())
}

/// Prints a pass/fail table; returns whether every row passed.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    println!("check,points,max_rel_error,tolerance,status");
    let mut ok = true;
    let mut row = |name: &str, points: usize, err: f64, tol: f64| {
        let pass = err < tol;
        ok &= pass;
        println!("{name},{points},{err:.3e},{tol:.0e},{}", if pass { "pass" } else { "FAIL" });
    };
    row("quadratic", 1, quadratic_check()?.max_rel_error, QUADRATIC_TOLERANCE);
    for op in run_op_suite(args.points, args.seed)? {
        row(op.name, op.points, op.max_rel_error, OP_TOLERANCE);
    }
    row("objective", 1, end_to_end_check(args.seed)?.max_rel_error, LOSS_TOLERANCE);
    Ok(ok)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.cfg.load()?;
    let defaults = AblationSpec::default();
    let spec = AblationSpec {
        synth: SynthSpec {
            noise: args.noise,
            ..defaults.synth
        },
        eta: args.eta,
        seeds: (0..args.seeds).collect(),
        run: RunConfig {
            epochs: args.epochs,
            ..base
        },
    };
    if spec.seeds.is_empty() {
        bail!("--seeds must be >= 1");
    }
    let baseline = first_view_ari(&spec)?;
    eprintln!(
        "first-view k-means ARI: mean {:.4}",
        baseline.iter().sum::<f64>() / baseline.len() as f64
    );
    let rows = run_ablation(&spec, &Variant::ALL)?;
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    print!("{text}");
    for v in Variant::ALL {
        eprintln!("{:>13}: mean ARI {:.4}", v.name(), mean_ari(&rows, v));
    }
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    init_threads()?;
    match &cli.cmd {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Sarkar(a) => cmd_sarkar(a)?,
        Command::Distortion(a) => cmd_distortion(a)?,
        Command::Synth(a) => cmd_synth(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
