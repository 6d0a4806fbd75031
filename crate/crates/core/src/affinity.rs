//! Soft-supervision graphs built from teacher features: heat-kernel
//! adjacency, row normalisation and a t-step random walk mixed with the
//! identity.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffeng::Matrix;
use crate::error::{HerlError, Result};

/// Row sums must be within this of 1 for a matrix to count as stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub sigma: f64,
    pub t: usize,
    pub xi: f64,
    pub warmup_epochs: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            sigma: 0.1,
            t: 3,
            xi: 0.5,
            warmup_epochs: 100,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(HerlError::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.t == 0 {
            return Err(HerlError::config("walk steps t must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(HerlError::config(format!("xi must lie in [0, 1], got {}", self.xi)));
        }
        Ok(())
    }
}

/// Row-stochastic N×N affinity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    g: Matrix,
}

impl AffinityGraph {
    pub fn identity(n: usize) -> Self {
        AffinityGraph { g: Array2::eye(n) }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.g
    }

    pub fn into_matrix(self) -> Matrix {
        self.g
    }

    pub fn len(&self) -> usize {
        self.g.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.g.nrows() == 0
    }
}

/// `A_ij = exp(-|f_i - f_j|^2 / sigma)`.
pub fn heat_kernel_adjacency(f: &Matrix, sigma: f64) -> Result<Matrix> {
    if f.nrows() == 0 {
        return Err(HerlError::EmptyInput("heat_kernel_adjacency"));
    }
    if !(sigma > 0.0) {
        return Err(HerlError::config(format!("sigma must be positive, got {sigma}")));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(HerlError::NonFinite("heat_kernel_adjacency features".into()));
    }
    let n = f.nrows();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = 1.0;
        let fi = f.row(i);
        for j in (i + 1)..n {
            let d2: f64 = fi.iter().zip(f.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            let v = (-d2 / sigma).exp();
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    Ok(a)
}

pub fn row_normalize(a: &Matrix) -> Result<Matrix> {
    let mut t = a.clone();
    for (i, mut r) in t.rows_mut().into_iter().enumerate() {
        let s: f64 = r.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(HerlError::Graph(format!("row {i} of the adjacency sums to {s}")));
        }
        r.mapv_inplace(|v| v / s);
    }
    Ok(t)
}

fn check_stochastic(t: &Matrix) -> Result<()> {
    if t.nrows() != t.ncols() {
        return Err(HerlError::ShapeMismatch {
            op: "random_walk_graph",
            left: t.dim(),
            right: (t.nrows(), t.nrows()),
        });
    }
    for (i, r) in t.rows().into_iter().enumerate() {
        if r.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(HerlError::Graph(format!("row {i} has a negative or non-finite entry")));
        }
        let s = r.sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(HerlError::Graph(format!("row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `G = xi*I + (1 - xi)*T^t`, with `T` replaced by the identity while
/// `epoch <= warmup_epochs`.
pub fn random_walk_graph(t: &Matrix, cfg: &GraphConfig, epoch: usize) -> Result<AffinityGraph> {
    cfg.validate()?;
    check_stochastic(t)?;
    let n = t.nrows();
    if epoch <= cfg.warmup_epochs {
        return Ok(AffinityGraph::identity(n));
    }
    let mut power = t.clone();
    for _ in 1..cfg.t {
        power = power.dot(t);
    }
    let mut g = power * (1.0 - cfg.xi);
    for i in 0..n {
        g[[i, i]] += cfg.xi;
    }
    Ok(AffinityGraph { g })
}

/// Full pipeline from teacher features to the affinity graph.
pub fn build_graph(features: &Matrix, cfg: &GraphConfig, epoch: usize) -> Result<AffinityGraph> {
    if epoch <= cfg.warmup_epochs {
        cfg.validate()?;
        return Ok(AffinityGraph::identity(features.nrows()));
    }
    let a = heat_kernel_adjacency(features, cfg.sigma)?;
    let t = row_normalize(&a)?;
    random_walk_graph(&t, cfg, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn after_warmup(t: usize, xi: f64) -> GraphConfig {
        GraphConfig {
            t,
            xi,
            warmup_epochs: 0,
            ..GraphConfig::default()
        }
    }

    #[test]
    fn heat_kernel_values() {
        let sigma: f64 = 0.1;
        let f = array![[0.0, 0.0], [sigma.sqrt(), 0.0], [0.0, 0.0]];
        let a = heat_kernel_adjacency(&f, sigma).unwrap();
        assert_eq!(a[[0, 2]], 1.0);
        assert!((a[[0, 1]] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((a[[0, 1]] - 0.367879).abs() < 1e-6);
        for i in 0..3 {
            assert_eq!(a[[i, i]], 1.0);
        }
    }

    #[test]
    fn heat_kernel_symmetric() {
        let f = array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4], [-0.7, 0.6, 0.2]];
        let a = heat_kernel_adjacency(&f, 0.7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d2: f64 = (0..3).map(|k| (f[[j, k]] - f[[i, k]]).powi(2)).sum();
                assert!((a[[i, j]] - (-d2 / 0.7).exp()).abs() < 1e-15);
                assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn heat_kernel_rejects_nan() {
        let f = array![[0.0, f64::NAN]];
        assert!(matches!(heat_kernel_adjacency(&f, 0.1), Err(HerlError::NonFinite(_))));
    }

    #[test]
    fn normalize_examples() {
        let eye: Matrix = Array2::eye(3);
        assert_eq!(row_normalize(&eye).unwrap(), eye);
        let ones = Array2::from_elem((2, 2), 1.0);
        assert_eq!(row_normalize(&ones).unwrap(), array![[0.5, 0.5], [0.5, 0.5]]);
        let zero_row = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(row_normalize(&zero_row), Err(HerlError::Graph(_))));
    }

    #[test]
    fn walk_example() {
        let t = array![[0.5, 0.5], [0.5, 0.5]];
        let g = random_walk_graph(&t, &after_warmup(2, 0.5), 1).unwrap();
        assert_eq!(g.matrix(), &array![[0.75, 0.25], [0.25, 0.75]]);
    }

    #[test]
    fn walk_identity_cases() {
        let t = array![[0.2, 0.8], [0.6, 0.4]];
        let g = random_walk_graph(&t, &after_warmup(3, 1.0), 500).unwrap();
        assert_eq!(g.matrix(), &Array2::<f64>::eye(2));
        let cfg = GraphConfig::default();
        for epoch in [0, 1, 100] {
            let g = random_walk_graph(&t, &cfg, epoch).unwrap();
            assert_eq!(g.matrix(), &Array2::<f64>::eye(2));
        }
        assert_ne!(random_walk_graph(&t, &cfg, 101).unwrap().matrix(), &Array2::<f64>::eye(2));
    }

    #[test]
    fn walk_plain_t() {
        let t = array![[0.2, 0.8], [0.6, 0.4]];
        let g = random_walk_graph(&t, &after_warmup(1, 0.0), 1).unwrap();
        assert_eq!(g.matrix(), &t);
    }

    #[test]
    fn walk_rejects_non_stochastic() {
        let t = array![[0.2, 0.7], [0.6, 0.4]];
        assert!(matches!(random_walk_graph(&t, &after_warmup(2, 0.5), 1), Err(HerlError::Graph(_))));
        let bad = GraphConfig { t: 0, ..GraphConfig::default() };
        assert!(bad.validate().is_err());
    }

    fn features() -> impl Strategy<Value = Matrix> {
        (1usize..7, 1usize..4).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-1.0f64..1.0, n * d)
                .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn graph_is_stochastic(f in features(), t in 1usize..5, xi in 0.0f64..=1.0, sigma in 0.05f64..2.0) {
            let cfg = GraphConfig { sigma, t, xi, warmup_epochs: 0 };
            let a = heat_kernel_adjacency(&f, sigma).unwrap();
            let tm = row_normalize(&a).unwrap();
            for r in tm.rows() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-12);
            }
            let g = build_graph(&f, &cfg, 1).unwrap();
            for (i, r) in g.matrix().rows().into_iter().enumerate() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-10);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
                prop_assert!(r[i] >= xi - 1e-15);
            }
        }

        #[test]
        fn permutation_equivariant(f in features(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = f.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed));
            let pf = f.select(ndarray::Axis(0), &perm);
            let cfg = GraphConfig { sigma: 0.5, warmup_epochs: 0, ..GraphConfig::default() };
            let g = build_graph(&f, &cfg, 1).unwrap();
            let pg = build_graph(&pf, &cfg, 1).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((pg.matrix()[[i, j]] - g.matrix()[[perm[i], perm[j]]]).abs() < 1e-12);
                }
            }
        }
    }
}
