//! Finite-difference checks for every differentiable tape operation and for
//! the full training objective. Shared by the test suites and `herl gradcheck`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::affinity::{build_graph, GraphConfig};
use crate::diffeng::{grad_check, GradCheck, Matrix, Tape, Var};
use crate::error::{HerlError, Result};
use crate::hypmath::HypConfig;
use crate::losses::{total_loss, LossConfig, LossToggles};
use crate::netmodel::{init_model, ModelSpec, StudentVars};

pub const OP_STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn normal(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Entries with magnitude in `[0.1, 2)` and random sign. Inputs and output
/// weights drawn this way keep gradient coordinates away from zero, where the
/// relative error would only measure finite-difference roundoff.
fn away_from_zero(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| {
        let mag: f64 = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Rows with norms in `[lo, hi)`.
fn rows_with_norm(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let mut m = normal(rng, rows, cols);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        let target: f64 = rng.random_range(lo..hi);
        r.mapv_inplace(|v| v / n * target);
    }
    m
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// that every output coordinate contributes to the gradient.
fn weighted_sum(t: &mut Tape, y: Var, weights: &Matrix) -> Result<Var> {
    let w = t.constant(balanced_signs(weights));
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Unit weights with both signs in every row: the larger half of each row (by
/// magnitude) becomes +1, the rest -1. Unit magnitudes keep the roundoff in
/// the scalarized output small, and mixed signs stop row-invariant ops such
/// as softmax from having an identically zero gradient.
fn balanced_signs(weights: &Matrix) -> Matrix {
    let mut out = Matrix::from_elem(weights.raw_dim(), -1.0);
    for (i, r) in weights.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()));
        for &k in &order[r.len() / 2..] {
            out[[i, k]] = 1.0;
        }
    }
    out
}

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Matrix>,
    program: Program,
}

fn unary<F>(name: &'static str, x: Matrix, weights: Matrix, f: F) -> Case
where
    F: Fn(&mut Tape, Var) -> Result<Var> + 'static,
{
    Case {
        name,
        inputs: vec![x],
        program: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            weighted_sum(t, y, &weights)
        }),
    }
}

fn binary<F>(name: &'static str, a: Matrix, b: Matrix, weights: Matrix, f: F) -> Case
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
{
    Case {
        name,
        inputs: vec![a, b],
        program: Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted_sum(t, y, &weights)
        }),
    }
}

fn cases(rng: &mut Xoshiro256PlusPlus) -> Vec<Case> {
    let (n, d) = (3, 4);
    let c: f64 = [0.1, 0.5, 1.0][rng.random_range(0..3)];
    let cr: f64 = rng.random_range(1.0..2.0);
    let cfg = HypConfig::new(c, cr).expect("valid config");
    let ball = 0.7 / c.sqrt();
    let mut out = Vec::new();

    let (x, w, b) = (away_from_zero(rng, n, d), away_from_zero(rng, d, 2), away_from_zero(rng, 1, 2));
    let wt = away_from_zero(rng, n, 2);
    out.push(Case {
        name: "affine",
        inputs: vec![x, w, b],
        program: Box::new(move |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            weighted_sum(t, y, &wt)
        }),
    });
    out.push(binary("matmul", away_from_zero(rng, n, d), away_from_zero(rng, d, 2), away_from_zero(rng, n, 2), |t, a, b| t.matmul(a, b)));
    out.push(unary("transpose", away_from_zero(rng, n, d), away_from_zero(rng, d, n), |t, x| t.transpose(x)));
    out.push(binary("add", away_from_zero(rng, n, d), away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, a, b| t.add(a, b)));
    out.push(binary("sub", away_from_zero(rng, n, d), away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, a, b| t.sub(a, b)));
    out.push(binary("mul", away_from_zero(rng, n, d), away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, a, b| t.mul(a, b)));
    let k: f64 = rng.sample(StandardNormal);
    out.push(unary("scale", away_from_zero(rng, n, d), away_from_zero(rng, n, d), move |t, x| t.scale(x, k)));
    out.push(unary("add_scalar", away_from_zero(rng, n, d), away_from_zero(rng, n, d), move |t, x| t.add_scalar(x, k)));
    out.push(unary("relu", away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, x| t.relu(x)));
    out.push(unary("tanh", away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, x| t.tanh(x)));
    out.push(unary("exp", away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, x| t.exp(x)));
    out.push(unary("l2_normalize_rows", rows_with_norm(rng, n, d, 0.3, 3.0), away_from_zero(rng, n, d), |t, x| t.l2_normalize_rows(x)));
    out.push(unary("log_softmax_rows", away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, x| t.log_softmax_rows(x)));
    out.push(unary("softmax_rows", away_from_zero(rng, n, d), away_from_zero(rng, n, d), |t, x| t.softmax_rows(x)));
    out.push(unary("clip_rows (inside)", rows_with_norm(rng, n, d, 0.1, 0.9 * cr), away_from_zero(rng, n, d), move |t, x| t.clip_rows(x, &cfg)));
    out.push(unary("clip_rows (clipped)", rows_with_norm(rng, n, d, 1.1 * cr, 3.0 * cr), away_from_zero(rng, n, d), move |t, x| t.clip_rows(x, &cfg)));
    out.push(unary("exp_map_rows", rows_with_norm(rng, n, d, 0.05, 3.0), away_from_zero(rng, n, d), move |t, x| t.exp_map_rows(x, &cfg)));
    out.push(binary(
        "mobius_add_rows",
        rows_with_norm(rng, n, d, 0.0, ball),
        rows_with_norm(rng, n, d, 0.0, ball),
        away_from_zero(rng, n, d),
        move |t, a, b| t.mobius_add_rows(a, b, &cfg),
    ));
    // the distance has a kink where two points coincide, so keep pairs apart
    let a = rows_with_norm(rng, n, d, 0.0, ball);
    let b = loop {
        let b = rows_with_norm(rng, 2, d, 0.0, ball);
        let apart = a.rows().into_iter().all(|ai| {
            b.rows().into_iter().all(|bj| (&ai - &bj).dot(&(&ai - &bj)).sqrt() > 0.25 * ball)
        });
        if apart {
            break b;
        }
    };
    out.push(binary(
        "hyp_distance_pairwise",
        a,
        b,
        away_from_zero(rng, n, 2),
        move |t, a, b| t.hyp_distance_pairwise(a, b, &cfg),
    ));
    out.push(Case {
        name: "sum",
        inputs: vec![away_from_zero(rng, n, d)],
        program: Box::new(|t, v| {
            let s = t.sum(v[0])?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
    });
    out.push(Case {
        name: "mean",
        inputs: vec![away_from_zero(rng, n, d)],
        program: Box::new(|t, v| {
            let s = t.mean(v[0])?;
            let sq = t.mul(s, s)?;
            t.sum(sq)
        }),
    });
    out
}

/// Smallest nonzero gradient magnitude accepted at a sample point. Central
/// differences at `OP_STEP` carry absolute roundoff near 1e-9, so coordinates
/// much smaller than this would measure noise rather than the derivative.
/// Exactly zero coordinates (relu below zero, unused inputs) are exact in both
/// estimates and stay admissible.
pub const MIN_GRADIENT: f64 = 1e-3;

fn well_conditioned(case: &Case) -> Result<bool> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = (case.program)(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().all(|v| {
        grads
            .get(*v)
            .is_none_or(|g| g.iter().all(|&x| x == 0.0 || x.abs() >= MIN_GRADIENT))
    }))
}

/// Runs every op at `points` random well-conditioned points and reports the
/// worst relative error per op.
pub fn run_op_suite(points: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut report: Vec<OpCheck> = Vec::new();
    for _ in 0..points {
        let batch = cases(&mut rng);
        for (slot, first) in batch.into_iter().enumerate() {
            let mut case = first;
            let mut attempts = 0;
            while !well_conditioned(&case)? {
                attempts += 1;
                if attempts > 1000 {
                    return Err(HerlError::Unsupported(format!(
                        "no well-conditioned sample point for {}",
                        case.name
                    )));
                }
                case = cases(&mut rng).swap_remove(slot);
            }
            let r = grad_check(&case.inputs, OP_STEP, &case.program)?;
            match report.iter_mut().find(|o| o.name == case.name) {
                Some(entry) => {
                    entry.points += 1;
                    if r.max_rel_error > entry.max_rel_error {
                        entry.max_rel_error = r.max_rel_error;
                        entry.worst_values = r.worst_values;
                    }
                }
                None => report.push(OpCheck {
                    name: case.name,
                    points: 1,
                    max_rel_error: r.max_rel_error,
                    worst_values: r.worst_values,
                }),
            }
        }
    }
    Ok(report)
}

pub const QUADRATIC_TOLERANCE: f64 = 1e-10;

/// `sum((x A) ∘ x)` with a fixed symmetric `A`. Central differences carry no
/// truncation error on a quadratic, so the step is widened to cut roundoff.
pub fn quadratic_check() -> Result<GradCheck> {
    let a = ndarray::array![[2.0, 0.5, 0.0], [0.5, 1.0, -0.25], [0.0, -0.25, 3.0]];
    let x = ndarray::array![[0.7, -1.3, 0.4], [1.1, 0.2, -0.6]];
    grad_check(&[x], 1e-3, |t, v| {
        let am = t.constant(a.clone());
        let ax = t.matmul(v[0], am)?;
        let q = t.mul(ax, v[0])?;
        t.sum(q)
    })
}

/// Gradient of the full objective with respect to every student parameter on
/// a 4-sample, 2-view batch, past the graph warmup and with a teacher that has
/// drifted from the student.
pub fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let spec = ModelSpec {
        input_dims: vec![5, 3],
        hidden: vec![6],
        embed_dim: 4,
        prototypes: 3,
        hyp: HypConfig::new(0.1, 2.0)?,
        seed,
        prototype_softmax: false,
    };
    let mut state = init_model(&spec)?;
    for l in state.teacher.iter_mut().flat_map(|m| m.layers.iter_mut()) {
        l.w.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        l.b.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let batch: Vec<Matrix> = spec.input_dims.iter().map(|&d| normal(&mut rng, 4, d)).collect();

    // sigma = 1 keeps off-diagonal affinities visible for unit-norm features
    let gcfg = GraphConfig {
        sigma: 1.0,
        warmup_epochs: 0,
        ..GraphConfig::default()
    };
    let graphs = (0..2)
        .map(|v| build_graph(&state.teacher_features(v, &batch[v])?, &gcfg, 1))
        .collect::<Result<Vec<_>>>()?;
    let cfg = LossConfig {
        beta: 0.5,
        ..LossConfig::default()
    };

    let inputs: Vec<Matrix> = state.student_params_mut().into_iter().map(|m| m.clone()).collect();
    grad_check(&inputs, OP_STEP, |tape, vars| {
        let sv = StudentVars::from_flat(&state, vars)?;
        let outs = state.forward_views(tape, &sv, &batch)?;
        let (loss, _) = total_loss(tape, &outs, &graphs, &spec.hyp, &cfg, LossToggles::default(), 0.3)?;
        Ok(loss)
    })
}
