//! Contrastive objectives on the tape: the affinity-guided softmax
//! cross-entropy and the backbone, instance and prototype losses built from it.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityGraph;
use crate::diffeng::{Matrix, Tape, Var};
use crate::error::{HerlError, Result};
use crate::hypmath::HypConfig;
use crate::netmodel::ViewOutputs;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Cosine,
    /// Cosine of the angle between ball points, seen from the origin.
    Angular,
    /// Negative geodesic distance.
    HypDist(HypConfig),
}

/// `-(1/N) Σ_ij G_ij · logsoftmax_j(S(u_i, v_j)/tau)`.
pub fn contrastive(
    tape: &mut Tape,
    u: Var,
    v: Var,
    g: &Matrix,
    sim: Similarity,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(HerlError::config(format!("temperature must be positive, got {tau}")));
    }
    let (su, sv) = (tape.shape(u), tape.shape(v));
    if su.1 != sv.1 || su.0 != sv.0 {
        return Err(HerlError::ShapeMismatch {
            op: "contrastive",
            left: su,
            right: sv,
        });
    }
    let n = su.0;
    if g.dim() != (n, n) {
        return Err(HerlError::ShapeMismatch {
            op: "contrastive graph",
            left: g.dim(),
            right: (n, n),
        });
    }
    if n == 0 {
        return Err(HerlError::EmptyInput("contrastive"));
    }
    let logits = match sim {
        Similarity::Cosine | Similarity::Angular => {
            let un = tape.l2_normalize_rows(u)?;
            let vn = tape.l2_normalize_rows(v)?;
            let vt = tape.transpose(vn)?;
            let s = tape.matmul(un, vt)?;
            tape.scale(s, 1.0 / tau)?
        }
        Similarity::HypDist(cfg) => {
            let d = tape.hyp_distance_pairwise(u, v, &cfg)?;
            tape.scale(d, -1.0 / tau)?
        }
    };
    let logp = tape.log_softmax_rows(logits)?;
    let gv = tape.constant(g.clone());
    let weighted = tape.mul(logp, gv)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature for the cosine and angular terms.
    pub tau: f64,
    /// Temperature for the distance term.
    pub tau_hyp: f64,
    pub beta: f64,
    pub alpha_final: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            tau_hyp: 1.0,
            beta: 0.1,
            alpha_final: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_hyp > 0.0) {
            return Err(HerlError::config("temperatures must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(HerlError::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.alpha_final) {
            return Err(HerlError::config(format!(
                "alpha_final must lie in [0, 1], got {}",
                self.alpha_final
            )));
        }
        Ok(())
    }
}

/// Which hyperbolic terms enter the total. The backbone term is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub ang: bool,
    pub dis: bool,
    pub pro: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            ang: true,
            dis: true,
            pro: true,
        }
    }
}

impl LossToggles {
    pub const BACKBONE_ONLY: LossToggles = LossToggles {
        ang: false,
        dis: false,
        pro: false,
    };
    pub const NO_PROTOTYPE: LossToggles = LossToggles {
        ang: true,
        dis: true,
        pro: false,
    };
}

/// Linear ramp from 0 at epoch 0 to `alpha_final` at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub alpha_final: f64,
    pub total_epochs: usize,
}

pub fn alpha_at(e: usize, sched: &AlphaSchedule) -> f64 {
    if sched.total_epochs == 0 {
        return sched.alpha_final;
    }
    let e = e.min(sched.total_epochs);
    sched.alpha_final * (e as f64 / sched.total_epochs as f64)
}

fn ordered_pairs(views: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..views).flat_map(move |v| (0..views).filter(move |&u| u != v).map(move |u| (v, u)))
}

fn add_all(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or(HerlError::EmptyInput("loss terms"))?;
    it.try_fold(first, |acc, t| tape.add(acc, t))
}

fn check_views(outs: &[ViewOutputs], graphs: Option<&[AffinityGraph]>) -> Result<()> {
    if outs.len() < 2 {
        return Err(HerlError::DimensionMismatch {
            expected: 2,
            actual: outs.len(),
        });
    }
    if let Some(g) = graphs {
        if g.len() != outs.len() {
            return Err(HerlError::DimensionMismatch {
                expected: outs.len(),
                actual: g.len(),
            });
        }
    }
    Ok(())
}

/// `Σ_v con(F^v, F_t^v; G^v) + Σ_{v≠u} con(Z^v, F_t^u; G^u)`, cosine.
pub fn euclidean_backbone_loss(
    tape: &mut Tape,
    outs: &[ViewOutputs],
    graphs: &[AffinityGraph],
    cfg: &LossConfig,
) -> Result<Var> {
    check_views(outs, Some(graphs))?;
    let mut terms = Vec::new();
    for (o, g) in outs.iter().zip(graphs) {
        terms.push(contrastive(tape, o.f, o.f_t, g.matrix(), Similarity::Cosine, cfg.tau)?);
    }
    for (v, u) in ordered_pairs(outs.len()) {
        let g = graphs[u].matrix();
        terms.push(contrastive(tape, outs[v].z, outs[u].f_t, g, Similarity::Cosine, cfg.tau)?);
    }
    add_all(tape, terms)
}

/// `Σ_{v≠u} con(Q̂^v, Q^u; G^u)` with angular similarity.
pub fn angular_loss(
    tape: &mut Tape,
    outs: &[ViewOutputs],
    graphs: &[AffinityGraph],
    cfg: &LossConfig,
) -> Result<Var> {
    check_views(outs, Some(graphs))?;
    let mut terms = Vec::new();
    for (v, u) in ordered_pairs(outs.len()) {
        let g = graphs[u].matrix();
        terms.push(contrastive(tape, outs[v].q_hat, outs[u].q, g, Similarity::Angular, cfg.tau)?);
    }
    add_all(tape, terms)
}

/// `Σ_{v≠u} con(Q̂^v, Q^u; I)` with negative geodesic distance.
pub fn distance_loss(
    tape: &mut Tape,
    outs: &[ViewOutputs],
    hyp: &HypConfig,
    cfg: &LossConfig,
) -> Result<Var> {
    check_views(outs, None)?;
    let n = tape.shape(outs[0].q_hat).0;
    let eye: Matrix = Array2::eye(n);
    let mut terms = Vec::new();
    for (v, u) in ordered_pairs(outs.len()) {
        let sim = Similarity::HypDist(*hyp);
        terms.push(contrastive(tape, outs[v].q_hat, outs[u].q, &eye, sim, cfg.tau_hyp)?);
    }
    add_all(tape, terms)
}

/// `alpha·dis + (1 - alpha)·ang`.
pub fn instance_loss(tape: &mut Tape, ang: Var, dis: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HerlError::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let a = tape.scale(ang, 1.0 - alpha)?;
    let d = tape.scale(dis, alpha)?;
    tape.add(a, d)
}

/// Columns of the prototype matrices are the contrasted units:
/// `Σ_{v≠u} con(P̂^vᵀ, P^uᵀ; I)` with angular similarity.
pub fn prototype_loss(tape: &mut Tape, outs: &[ViewOutputs], tau: f64) -> Result<Var> {
    check_views(outs, None)?;
    let k = tape.shape(outs[0].p_hat).1;
    let eye: Matrix = Array2::eye(k);
    let mut terms = Vec::new();
    for (v, u) in ordered_pairs(outs.len()) {
        let ph = tape.transpose(outs[v].p_hat)?;
        let p = tape.transpose(outs[u].p)?;
        terms.push(contrastive(tape, ph, p, &eye, Similarity::Angular, tau)?);
    }
    add_all(tape, terms)
}

/// Scalar values of every term, as logged per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_ang: f64,
    pub l_dis: f64,
    pub l_pro: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `L_con + L_ins + beta·L_pro` for one batch. Disabled terms contribute zero
/// and are reported as zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    outs: &[ViewOutputs],
    graphs: &[AffinityGraph],
    hyp: &HypConfig,
    cfg: &LossConfig,
    toggles: LossToggles,
    alpha: f64,
) -> Result<(Var, LossBreakdown)> {
    let con = euclidean_backbone_loss(tape, outs, graphs, cfg)?;
    let mut b = LossBreakdown {
        l_con: tape.item(con),
        alpha,
        ..LossBreakdown::default()
    };
    let mut total = con;
    if toggles.ang || toggles.dis {
        let ang = if toggles.ang {
            angular_loss(tape, outs, graphs, cfg)?
        } else {
            tape.scalar(0.0)
        };
        let dis = if toggles.dis {
            distance_loss(tape, outs, hyp, cfg)?
        } else {
            tape.scalar(0.0)
        };
        b.l_ang = tape.item(ang);
        b.l_dis = tape.item(dis);
        let ins = instance_loss(tape, ang, dis, alpha)?;
        total = tape.add(total, ins)?;
    }
    if toggles.pro {
        let pro = prototype_loss(tape, outs, cfg.tau)?;
        b.l_pro = tape.item(pro);
        let weighted = tape.scale(pro, cfg.beta)?;
        total = tape.add(total, weighted)?;
    }
    b.total = tape.item(total);
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    const LN2: f64 = std::f64::consts::LN_2;

    fn con(u: &Matrix, v: &Matrix, g: &Matrix, sim: Similarity, tau: f64) -> Result<f64> {
        let mut t = Tape::new();
        let (uv, vv) = (t.param(u.clone()), t.constant(v.clone()));
        let l = contrastive(&mut t, uv, vv, g, sim, tau)?;
        Ok(t.item(l))
    }

    /// Plain softmax cross-entropy with diagonal targets, one scalar at a time.
    fn infonce_oracle(u: &Matrix, v: &Matrix, tau: f64) -> f64 {
        let n = u.nrows();
        let norm = |r: ndarray::ArrayView1<f64>| r.dot(&r).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| u.row(i).dot(&v.row(j)) / (norm(u.row(i)) * norm(v.row(j))) / tau)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[i];
        }
        total / n as f64
    }

    fn random(rng: &mut Xoshiro256PlusPlus, n: usize, d: usize) -> Matrix {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn closed_forms() {
        let one = array![[0.3, 0.4]];
        assert_eq!(con(&one, &one, &array![[1.0]], Similarity::Cosine, 0.5).unwrap(), 0.0);

        let same = array![[1.0, 0.0], [1.0, 0.0]];
        let eye: Matrix = Array2::eye(2);
        let v = con(&same, &same, &eye, Similarity::Cosine, 0.5).unwrap();
        assert!((v - LN2).abs() < 1e-12);

        let v = con(&eye, &eye, &eye, Similarity::Cosine, 0.5).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn matches_infonce_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for n in [1, 2, 4, 8] {
            for tau in [0.1, 0.5, 1.0] {
                let (u, v) = (random(&mut rng, n, 5), random(&mut rng, n, 5));
                let eye: Matrix = Array2::eye(n);
                let got = con(&u, &v, &eye, Similarity::Cosine, tau).unwrap();
                assert!((got - infonce_oracle(&u, &v, tau)).abs() < 1e-12, "n={n} tau={tau}");
            }
        }
    }

    #[test]
    fn soft_targets_weight_log_probs() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let (u, v) = (random(&mut rng, 3, 2), random(&mut rng, 3, 2));
        let g = array![[0.5, 0.25, 0.25], [0.0, 1.0, 0.0], [0.2, 0.3, 0.5]];
        let got = con(&u, &v, &g, Similarity::Cosine, 0.5).unwrap();
        // mixture of one-hot targets is the mixture of the losses
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut one_hot = Array2::zeros((3, 3));
                one_hot[[i, j]] = 1.0;
                expected += g[[i, j]] * con(&u, &v, &one_hot, Similarity::Cosine, 0.5).unwrap();
            }
        }
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        // a per-row constant added to the logits leaves the log-probabilities alone
        let mut t = Tape::new();
        let s = t.param(array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]]);
        let shift = t.constant(array![[5.0, 5.0, 5.0], [-3.0, -3.0, -3.0]]);
        let shifted = t.add(s, shift).unwrap();
        let a = t.log_softmax_rows(s).unwrap();
        let b = t.log_softmax_rows(shifted).unwrap();
        for (x, y) in t.value(a).iter().zip(t.value(b).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_errors() {
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let eye: Matrix = Array2::eye(2);
        assert!(con(&u, &u, &eye, Similarity::Cosine, 0.0).is_err());
        assert!(con(&u, &u, &Array2::eye(3), Similarity::Cosine, 0.5).is_err());
        let zero = array![[0.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            con(&zero, &u, &eye, Similarity::Angular, 0.5),
            Err(HerlError::ZeroVector(_))
        ));
    }

    #[test]
    fn distance_closed_form() {
        let hyp = HypConfig::new(1.0, 2.0).unwrap();
        // D(0, 0.5·e1) = 2·artanh(0.5) = ln 3
        let q = array![[0.0, 0.0], [0.5, 0.0]];
        let eye: Matrix = Array2::eye(2);
        let v = con(&q, &q, &eye, Similarity::HypDist(hyp), 1.0).unwrap();
        assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((v - 0.287682).abs() < 1e-6);
        let origin = array![[0.0, 0.0]];
        assert_eq!(con(&origin, &origin, &array![[1.0]], Similarity::HypDist(hyp), 1.0).unwrap(), 0.0);
    }

    fn outputs(tape: &mut Tape, views: &[(Matrix, Matrix, Matrix)]) -> Vec<ViewOutputs> {
        // (q_hat = q, f = f_t = z, p_hat = p) per view
        views
            .iter()
            .map(|(f, q, p)| {
                let fv = tape.param(f.clone());
                let qv = tape.param(q.clone());
                let pv = tape.param(p.clone());
                ViewOutputs {
                    f: fv,
                    f_t: tape.constant(f.clone()),
                    z: fv,
                    q_hat: qv,
                    q: tape.constant(q.clone()),
                    p_hat: pv,
                    p: tape.constant(p.clone()),
                }
            })
            .collect()
    }

    #[test]
    fn distance_loss_two_views() {
        let hyp = HypConfig::new(1.0, 2.0).unwrap();
        let q = array![[0.0, 0.0], [0.5, 0.0]];
        let f = array![[1.0, 0.2], [0.1, 1.0]];
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        let mut t = Tape::new();
        let outs = outputs(&mut t, &[(f.clone(), q.clone(), p.clone()), (f, q, p)]);
        let d = distance_loss(&mut t, &outs, &hyp, &LossConfig::default()).unwrap();
        assert!((t.item(d) - 2.0 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        let swapped = [outs[1], outs[0]];
        let d2 = distance_loss(&mut t, &swapped, &hyp, &LossConfig::default()).unwrap();
        assert_eq!(t.item(d), t.item(d2));
    }

    #[test]
    fn prototype_closed_forms() {
        let p = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let f = array![[1.0, 0.2], [0.1, 1.0], [0.3, 0.3]];
        let mut t = Tape::new();
        let outs = outputs(&mut t, &[(f.clone(), f.clone(), p.clone()), (f.clone(), f.clone(), p.clone())]);
        let l = prototype_loss(&mut t, &outs, 0.5).unwrap();
        let expected = 2.0 * (1.0 + (-2.0f64).exp()).ln();
        assert!((t.item(l) - expected).abs() < 1e-12);
        assert!((t.item(l) - 0.253856).abs() < 1e-6);

        let k1 = array![[0.2], [0.1], [-0.3]];
        let mut t = Tape::new();
        let outs = outputs(&mut t, &[(f.clone(), f.clone(), k1.clone()), (f.clone(), f.clone(), k1)]);
        let l = prototype_loss(&mut t, &outs, 0.5).unwrap();
        assert_eq!(t.item(l), 0.0);
    }

    #[test]
    fn prototype_row_permutation_invariant() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let (p1, p2, f) = (random(&mut rng, 5, 3), random(&mut rng, 5, 3), random(&mut rng, 5, 2));
        let perm = [3, 0, 4, 1, 2];
        let value = |a: &Matrix, b: &Matrix| {
            let mut t = Tape::new();
            let outs = outputs(&mut t, &[(f.clone(), f.clone(), a.clone()), (f.clone(), f.clone(), b.clone())]);
            let l = prototype_loss(&mut t, &outs, 0.5).unwrap();
            t.item(l)
        };
        let base = value(&p1, &p2);
        let permuted = value(&p1.select(Axis(0), &perm), &p2.select(Axis(0), &perm));
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn angular_scale_invariant_below_clip() {
        let hyp = HypConfig::new(0.1, 2.0).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let z = random(&mut rng, 4, 3).mapv(|v| v * 0.5);
        let teacher = random(&mut rng, 4, 3).mapv(|v| v * 0.5);
        let value = |scale: f64| {
            let mut t = Tape::new();
            let zv = t.param(z.mapv(|v| v * scale));
            let qh = t.hyp_project_rows(zv, &hyp).unwrap();
            let tv = t.constant(teacher.clone());
            let q = t.hyp_project_rows(tv, &hyp).unwrap();
            let l = contrastive(&mut t, qh, q, &Array2::eye(4), Similarity::Angular, 0.5).unwrap();
            t.item(l)
        };
        assert!((value(1.0) - value(2.0)).abs() < 1e-12);
    }

    #[test]
    fn backbone_counts_four_terms() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
        let views: Vec<_> = (0..2)
            .map(|_| (random(&mut rng, 4, 3), random(&mut rng, 4, 3).mapv(|v| v * 0.5), random(&mut rng, 4, 2)))
            .collect();
        let graphs = vec![AffinityGraph::identity(4), AffinityGraph::identity(4)];
        let cfg = LossConfig::default();
        let mut t = Tape::new();
        let outs = outputs(&mut t, &views);
        let total = euclidean_backbone_loss(&mut t, &outs, &graphs, &cfg).unwrap();
        let eye: Matrix = Array2::eye(4);
        let mut by_hand = 0.0;
        for (f, _, _) in &views {
            by_hand += con(f, f, &eye, Similarity::Cosine, 0.5).unwrap();
        }
        by_hand += con(&views[0].0, &views[1].0, &eye, Similarity::Cosine, 0.5).unwrap();
        by_hand += con(&views[1].0, &views[0].0, &eye, Similarity::Cosine, 0.5).unwrap();
        assert!((t.item(total) - by_hand).abs() < 1e-12);

        let mut t = Tape::new();
        let first = |m: &Matrix| m.slice(ndarray::s![..1, ..]).to_owned();
        let one: Vec<_> = views.iter().map(|(f, q, p)| (first(f), first(q), first(p))).collect();
        let outs = outputs(&mut t, &one);
        let g1 = vec![AffinityGraph::identity(1), AffinityGraph::identity(1)];
        let l = euclidean_backbone_loss(&mut t, &outs, &g1, &cfg).unwrap();
        assert_eq!(t.item(l), 0.0);
        assert!(euclidean_backbone_loss(&mut t, &outs, &g1[..1], &cfg).is_err());
    }

    #[test]
    fn alpha_schedule() {
        let s = AlphaSchedule {
            alpha_final: 0.2,
            total_epochs: 200,
        };
        assert_eq!(alpha_at(0, &s), 0.0);
        assert_eq!(alpha_at(200, &s), 0.2);
        assert_eq!(alpha_at(100, &s), 0.1);
        let mut last = 0.0;
        for e in 0..=200 {
            let a = alpha_at(e, &s);
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn instance_combination() {
        let mut t = Tape::new();
        let (a, d) = (t.scalar(0.2), t.scalar(0.4));
        let mix = |t: &mut Tape, alpha| {
            let v = instance_loss(t, a, d, alpha).unwrap();
            t.item(v)
        };
        assert_eq!(mix(&mut t, 0.0), 0.2);
        assert_eq!(mix(&mut t, 1.0), 0.4);
        assert!((mix(&mut t, 0.5) - 0.3).abs() < 1e-15);
        assert!(instance_loss(&mut t, a, d, 1.5).is_err());
    }

    #[test]
    fn total_recomposes() {
        let hyp = HypConfig::new(0.1, 2.0).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
        let views: Vec<_> = (0..2)
            .map(|_| (random(&mut rng, 4, 3), random(&mut rng, 4, 3).mapv(|v| v * 0.5), random(&mut rng, 4, 2)))
            .collect();
        let graphs = vec![AffinityGraph::identity(4), AffinityGraph::identity(4)];
        let cfg = LossConfig { beta: 0.5, ..LossConfig::default() };
        let mut t = Tape::new();
        let outs = outputs(&mut t, &views);
        let (total, b) = total_loss(&mut t, &outs, &graphs, &hyp, &cfg, LossToggles::default(), 0.25).unwrap();
        let con = euclidean_backbone_loss(&mut t, &outs, &graphs, &cfg).unwrap();
        let ang = angular_loss(&mut t, &outs, &graphs, &cfg).unwrap();
        let dis = distance_loss(&mut t, &outs, &hyp, &cfg).unwrap();
        let pro = prototype_loss(&mut t, &outs, cfg.tau).unwrap();
        let expected = t.item(con) + 0.25 * t.item(dis) + 0.75 * t.item(ang) + 0.5 * t.item(pro);
        assert!((t.item(total) - expected).abs() < 1e-12);
        assert_eq!(b.total, t.item(total));
        assert_eq!(b.l_pro, t.item(pro));

        let cfg0 = LossConfig { beta: 0.0, ..cfg };
        let (t0, _) = total_loss(&mut t, &outs, &graphs, &hyp, &cfg0, LossToggles::default(), 0.25).unwrap();
        assert!((t.item(t0) - (expected - 0.5 * t.item(pro))).abs() < 1e-12);

        let (only, bo) = total_loss(&mut t, &outs, &graphs, &hyp, &cfg, LossToggles::BACKBONE_ONLY, 0.25).unwrap();
        assert_eq!(t.item(only), t.item(con));
        assert_eq!((bo.l_ang, bo.l_dis, bo.l_pro), (0.0, 0.0, 0.0));
    }

    #[test]
    fn losses_finite_near_boundary() {
        let hyp = HypConfig::new(1.0, 50.0).unwrap();
        let mut t = Tape::new();
        let z = t.param(array![[40.0, 0.0], [0.0, -45.0]]);
        let q = t.hyp_project_rows(z, &hyp).unwrap();
        let l = contrastive(&mut t, q, q, &Array2::eye(2), Similarity::HypDist(hyp), 1.0).unwrap();
        assert!(t.item(l).is_finite());
    }
}
