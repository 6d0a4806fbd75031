//! A small tape-based reverse-mode differentiation engine over dense `f64`
//! matrices.
//!
//! Values live on a [`Tape`] and are addressed through [`Var`] handles. Leaves
//! are either parameters (gradients requested) or constants. Every operation
//! appends one node; [`Tape::backward`] walks the nodes in exact reverse order.
//! Scalars are `1×1` matrices and vectors are single rows.

mod gradcheck;
mod rowops;

pub use gradcheck::{grad_check, GradCheck};

use ndarray::{Array2, Axis};

use crate::error::{HerlError, Result};
use crate::hypmath::{self, HypConfig};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    NormalizeRows(Var),
    LogSoftmaxRows(Var),
    ClipRows { x: Var, cr: f64 },
    ExpMapRows { x: Var, c: f64 },
    MobiusAddRows { x: Var, y: Var, c: f64 },
    HypDistance { a: Var, b: Var, c: f64, eps: f64 },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient slots indexed by node; `None` for nodes no parameter flows into.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

fn compensated_sum(m: &Matrix) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for &v in m.iter() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant; gradients never reach it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Value of a `1×1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(HerlError::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: value.as_standard_layout().into_owned(),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(HerlError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    /// `x·W + b` with `b` a `1×out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 {
            return Err(HerlError::ShapeMismatch {
                op: "affine",
                left: sx,
                right: sw,
            });
        }
        if sb != (1, sw.1) {
            return Err(HerlError::ShapeMismatch {
                op: "affine bias",
                left: sw,
                right: sb,
            });
        }
        let out = self.value(x).dot(self.value(w)) + self.value(b);
        self.push("affine", out, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(HerlError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let out = self.value(a).dot(self.value(b));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).t().to_owned();
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x) * k;
        self.push("scale", out, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x) + k;
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    /// Divides each row by its Euclidean norm; zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n < hypmath::ZERO_NORM {
                return Err(HerlError::ZeroVector("l2_normalize_rows"));
            }
            row.mapv_inplace(|v| v / n);
        }
        self.push("l2_normalize_rows", out, Op::NormalizeRows(x), &[x])
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.fold(0.0, |s, &v| s + (v - max).exp()).ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Row-wise softmax, built from `exp ∘ log_softmax`.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ls = self.log_softmax_rows(x)?;
        self.exp(ls)
    }

    pub fn clip_rows(&mut self, x: Var, cfg: &HypConfig) -> Result<Var> {
        let src = self.value(x);
        let mut out = src.clone();
        for (row, mut dst) in src.rows().into_iter().zip(out.rows_mut()) {
            hypmath::clip_into(
                row.as_slice().expect("standard layout"),
                cfg.cr,
                dst.as_slice_mut().expect("standard layout"),
            );
        }
        self.push("clip", out, Op::ClipRows { x, cr: cfg.cr }, &[x])
    }

    pub fn exp_map_rows(&mut self, x: Var, cfg: &HypConfig) -> Result<Var> {
        let src = self.value(x);
        let mut out = src.clone();
        for (row, mut dst) in src.rows().into_iter().zip(out.rows_mut()) {
            hypmath::exp_map_origin_into(
                row.as_slice().expect("standard layout"),
                cfg.c,
                dst.as_slice_mut().expect("standard layout"),
            );
        }
        self.push("exp_map_origin", out, Op::ExpMapRows { x, c: cfg.c }, &[x])
    }

    /// Clip followed by the exponential map, row by row.
    pub fn hyp_project_rows(&mut self, x: Var, cfg: &HypConfig) -> Result<Var> {
        let clipped = self.clip_rows(x, cfg)?;
        self.exp_map_rows(clipped, cfg)
    }

    /// Row-wise Möbius addition `x_i ⊕ y_i`.
    pub fn mobius_add_rows(&mut self, x: Var, y: Var, cfg: &HypConfig) -> Result<Var> {
        self.same_shape("mobius_add", x, y)?;
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = xv.clone();
        for ((xr, yr), mut dst) in xv.rows().into_iter().zip(yv.rows()).zip(out.rows_mut()) {
            hypmath::mobius_add_into(
                xr.as_slice().expect("standard layout"),
                yr.as_slice().expect("standard layout"),
                cfg.c,
                dst.as_slice_mut().expect("standard layout"),
            );
        }
        self.push("mobius_add", out, Op::MobiusAddRows { x, y, c: cfg.c }, &[x, y])
    }

    /// Pairwise geodesic distances: `out[i][j] = D(a_i, b_j)`.
    pub fn hyp_distance_pairwise(&mut self, a: Var, b: Var, cfg: &HypConfig) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(HerlError::ShapeMismatch {
                op: "hyp_distance",
                left: sa,
                right: sb,
            });
        }
        let out = rowops::pairwise_distance(self.value(a), self.value(b), cfg.c, cfg.eps);
        self.push(
            "hyp_distance",
            out,
            Op::HypDistance {
                a,
                b,
                c: cfg.c,
                eps: cfg.eps,
            },
            &[a, b],
        )
    }

    /// Compensated (Neumaier) sum of all entries.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), compensated_sum(self.value(x)));
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(HerlError::EmptyInput("mean"));
        }
        let out = Array2::from_elem((1, 1), compensated_sum(self.value(x)) / n as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(HerlError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(HerlError::Graph(
                "loss does not depend on any parameter".into(),
            ));
        }
        let mut slots: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let Some(g) = slots[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        slots.resize(self.nodes.len(), None);
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Matrix, slots: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if self.requires_grad(x) {
                    self.accumulate(slots, x, g.dot(&self.value(w).t()));
                }
                if self.requires_grad(w) {
                    self.accumulate(slots, w, self.value(x).t().dot(g));
                }
                if self.requires_grad(b) {
                    self.accumulate(slots, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(slots, a, g.dot(&self.value(b).t()));
                }
                if self.requires_grad(b) {
                    self.accumulate(slots, b, self.value(a).t().dot(g));
                }
            }
            Op::Transpose(x) => {
                self.accumulate(slots, x, g.t().as_standard_layout().into_owned());
            }
            Op::Add(a, b) => {
                self.accumulate(slots, a, g.clone());
                self.accumulate(slots, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, a, g.clone());
                self.accumulate(slots, b, -g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(slots, a, g * self.value(b));
                }
                if self.requires_grad(b) {
                    self.accumulate(slots, b, g * self.value(a));
                }
            }
            Op::Scale(x, k) => self.accumulate(slots, x, g * k),
            Op::AddScalar(x) => self.accumulate(slots, x, g.clone()),
            Op::Relu(x) => {
                // relu'(0) = 0
                let mask = self.value(x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(slots, x, g * &mask);
            }
            Op::Tanh(x) => {
                let d = y.mapv(|t| 1.0 - t * t);
                self.accumulate(slots, x, g * &d);
            }
            Op::Exp(x) => self.accumulate(slots, x, g * y),
            Op::NormalizeRows(x) => {
                let gx = rowops::normalize_rows_vjp(self.value(x), y, g);
                self.accumulate(slots, x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = g.clone();
                for ((mut gr, yr), ur) in gx.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let total = ur.sum();
                    gr.zip_mut_with(&yr, |gi, &yi| *gi -= yi.exp() * total);
                }
                self.accumulate(slots, x, gx);
            }
            Op::ClipRows { x, cr } => {
                let gx = rowops::clip_rows_vjp(self.value(x), cr, g);
                self.accumulate(slots, x, gx);
            }
            Op::ExpMapRows { x, c } => {
                let gx = rowops::exp_map_rows_vjp(self.value(x), c, g);
                self.accumulate(slots, x, gx);
            }
            Op::MobiusAddRows { x, y: yv, c } => {
                let (gx, gy) = rowops::mobius_rows_vjp(self.value(x), self.value(yv), c, g);
                self.accumulate(slots, x, gx);
                self.accumulate(slots, yv, gy);
            }
            Op::HypDistance { a, b, c, eps } => {
                let (ga, gb) =
                    rowops::pairwise_distance_vjp(self.value(a), self.value(b), c, eps, g);
                self.accumulate(slots, a, ga);
                self.accumulate(slots, b, gb);
            }
            Op::Sum(x) => {
                let s = self.shape(x);
                self.accumulate(slots, x, Array2::from_elem(s, g[[0, 0]]));
            }
            Op::Mean(x) => {
                let s = self.shape(x);
                let n = (s.0 * s.1) as f64;
                self.accumulate(slots, x, Array2::from_elem(s, g[[0, 0]] / n));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_backward_example() {
        let mut t = Tape::new();
        let x = t.param(array![[-1.0, 2.0]]);
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(array![[0.0]]);
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn sum_and_half_square() {
        let mut t = Tape::new();
        let x = t.param(array![[1.5, -2.0, 0.25]]);
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &array![[1.0, 1.0, 1.0]]);

        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.scale(s, 0.5).unwrap();
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), t.value(x));
    }

    #[test]
    fn normalized_norm_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(array![[0.3, -1.2, 2.0], [1.0, 0.0, 0.0]]);
        let y = t.l2_normalize_rows(x).unwrap();
        let sq = t.mul(y, y).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-15));
        // unit rows pass through
        assert_eq!(t.value(y).row(1), array![1.0, 0.0, 0.0]);
    }

    #[test]
    fn arctanh_derivative_through_distance() {
        // D(0, x) = 2·artanh(|x|) for c = 1; slope along x̂ at |x| = 0.5 is 8/3
        let cfg = HypConfig::new(1.0, 2.0).unwrap();
        let mut t = Tape::new();
        let o = t.constant(array![[0.0, 0.0]]);
        let x = t.param(array![[0.5, 0.0]]);
        let d = t.hyp_distance_pairwise(o, x, &cfg).unwrap();
        let s = t.sum(d).unwrap();
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert!((gx[[0, 0]] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(gx[[0, 1]], 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.param(Array2::zeros((2, 3)));
        let b = t.param(Array2::zeros((2, 2)));
        assert!(matches!(t.add(a, b), Err(HerlError::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, b), Err(HerlError::ShapeMismatch { .. })));
        let bias = t.param(Array2::zeros((1, 3)));
        assert!(t.affine(a, b, bias).is_err());
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let mut t = Tape::new();
        let a = t.param(Array2::ones((2, 2)));
        assert!(t.backward(a).is_err());
        let c = t.constant(Array2::ones((2, 2)));
        let s = t.sum(c).unwrap();
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn non_finite_fails_fast() {
        let mut t = Tape::new();
        let a = t.param(array![[1000.0]]);
        assert!(matches!(t.exp(a), Err(HerlError::NonFinite(_))));
    }

    #[test]
    fn zero_row_normalization_rejected() {
        let mut t = Tape::new();
        let a = t.param(array![[0.0, 0.0]]);
        assert!(matches!(
            t.l2_normalize_rows(a),
            Err(HerlError::ZeroVector(_))
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let w = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let c = t.constant(array![[0.5, -0.5]]);
        let y = t.matmul(c, w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn hyperbolic_forward_matches_pure_functions() {
        let cfg = HypConfig::new(0.7, 1.1).unwrap();
        let z = array![[0.3, -0.9, 1.4], [0.01, 0.02, -0.03], [0.0, 0.0, 0.0]];
        let mut t = Tape::new();
        let x = t.constant(z.clone());
        let p = t.hyp_project_rows(x, &cfg).unwrap();
        for (i, row) in z.rows().into_iter().enumerate() {
            let pure = hypmath::hyp_project(row.as_slice().unwrap(), &cfg).unwrap();
            assert_eq!(t.value(p).row(i).as_slice().unwrap(), pure.coords());
        }
        let d = t.hyp_distance_pairwise(p, p, &cfg).unwrap();
        let pts: Vec<_> = (0..3)
            .map(|i| hypmath::BallPoint::new(t.value(p).row(i).to_vec(), cfg.c).unwrap())
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let pure = hypmath::hyp_distance(&pts[i], &pts[j]).unwrap();
                assert_eq!(t.value(d)[[i, j]], pure);
            }
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let cfg = HypConfig::new(1.0, 1.0).unwrap();
        let mut t = Tape::new();
        let a = t.param(array![[0.2, 0.1], [-0.3, 0.4]]);
        let b = t.param(array![[0.5, -0.1], [0.0, 0.3]]);
        let pa = t.hyp_project_rows(a, &cfg).unwrap();
        let d = t.hyp_distance_pairwise(pa, b, &cfg).unwrap();
        let s = t.mean(d).unwrap();
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }
}
