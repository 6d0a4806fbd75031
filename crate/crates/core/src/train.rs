//! Training with an EMA teacher and evaluation by completion plus k-means.

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::affinity::build_graph;
use crate::clustereval::{kmeans, score, ClusterResult, Scores};
use crate::config::RunConfig;
use crate::dataio::Dataset;
use crate::diffeng::{Matrix, Tape};
use crate::error::{HerlError, Result};
use crate::impute::{assemble, recover};
use crate::losses::{alpha_at, total_loss, AlphaSchedule, LossBreakdown};
use crate::netmodel::{init_model, ModelState};

pub const LOG_HEADER: &str = "epoch,l_con,l_ang,l_dis,l_pro,alpha,total";
pub const METRICS_HEADER: &str = "seed,eta,acc,nmi,ari,inertia";

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl Iterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Matrix> = shapes.map(Matrix::zeros).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[i]` is `None` for a parameter the loss ignores.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Option<Matrix>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.epoch, l.l_con, l.l_ang, l.l_dis, l.l_pro, l.alpha, l.total
        )
    }
}

pub fn write_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| HerlError::io(path, e))?;
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| HerlError::io(path, e))
}

/// Trains on the complete samples of `data`. `on_epoch` sees every log row
/// as soon as the epoch finishes.
pub fn train<F>(cfg: &RunConfig, data: &Dataset, mut on_epoch: F) -> Result<(ModelState, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    cfg.validate()?;
    let dims = data.data.views.iter().map(|x| x.ncols()).collect();
    let spec = cfg.model_spec(dims, data.classes())?;
    let mut state = init_model(&spec)?;
    state.momentum = cfg.momentum;

    let complete = data.data.complete_subset();
    let n = complete[0].nrows();
    if n == 0 && cfg.epochs > 0 {
        return Err(HerlError::EmptyInput("complete samples for training"));
    }
    let shapes: Vec<(usize, usize)> = state.student_params_mut().iter().map(|m| m.dim()).collect();
    let mut opt = Adam::new(cfg.lr, shapes.into_iter());
    let sched = AlphaSchedule {
        alpha_final: cfg.alpha_final,
        total_epochs: cfg.epochs,
    };
    let (gcfg, lcfg, toggles, hyp) = (cfg.graph(), cfg.loss(), cfg.toggles(), spec.hyp);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let alpha = alpha_at(epoch, &sched);
        if n > cfg.batch_size {
            order.shuffle(&mut rng);
        }
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Matrix> = complete.iter().map(|x| x.select(Axis(0), chunk)).collect();
            let graphs = batch
                .iter()
                .enumerate()
                .map(|(v, x)| build_graph(&state.teacher_features(v, x)?, &gcfg, epoch))
                .collect::<Result<Vec<_>>>()?;

            let mut tape = Tape::new();
            let vars = state.bind_student(&mut tape);
            let step = state
                .forward_views(&mut tape, &vars, &batch)
                .and_then(|outs| total_loss(&mut tape, &outs, &graphs, &hyp, &lcfg, toggles, alpha));
            let (loss, parts) = step.map_err(|e| match e {
                HerlError::NonFinite(what) => {
                    HerlError::NonFinite(format!("{what} at epoch {epoch}, batch {batches}"))
                }
                other => other,
            })?;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Option<Matrix>> = vars.flat().into_iter().map(|v| grads.take(v)).collect();
            opt.step(state.student_params_mut(), &grads);
            let m = state.momentum;
            state.ema_update(m)?;

            sum.l_con += parts.l_con;
            sum.l_ang += parts.l_ang;
            sum.l_dis += parts.l_dis;
            sum.l_pro += parts.l_pro;
            sum.total += parts.total;
            batches += 1;
        }
        let k = batches as f64;
        let row = EpochLog {
            epoch,
            losses: LossBreakdown {
                l_con: sum.l_con / k,
                l_ang: sum.l_ang / k,
                l_dis: sum.l_dis / k,
                l_pro: sum.l_pro / k,
                alpha,
                total: sum.total / k,
            },
        };
        if !row.losses.total.is_finite() {
            return Err(HerlError::NonFinite(format!("mean loss at epoch {epoch}")));
        }
        on_epoch(&row)?;
        log.push(row);
    }
    Ok((state, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub seed: u64,
    /// Fraction of samples with a missing view.
    pub eta: f64,
    pub scores: Scores,
    pub clusters: ClusterResult,
}

impl EvalResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.seed, self.eta, self.scores.acc, self.scores.nmi, self.scores.ari, self.clusters.inertia
        )
    }
}

/// Completes missing views, concatenates them and clusters with `k` centers.
pub fn evaluate(state: &ModelState, data: &Dataset, k: usize, seed: u64, cfg: &RunConfig) -> Result<EvalResult> {
    let z = recover(state, &data.data)?;
    let x = assemble(&z)?;
    let clusters = kmeans(&x, k, seed, &cfg.kmeans())?;
    let scores = score(&data.labels, &clusters.assignments)?;
    let n = data.data.len();
    let incomplete = n - data.data.complete_rows().len();
    Ok(EvalResult {
        seed,
        eta: incomplete as f64 / n as f64,
        scores,
        clusters,
    })
}
