//! Poincaré-ball primitives.
//!
//! The ball of curvature `-c` is `{a : c·|a|² < 1}`. Everything here works in
//! `f64`. The slice kernels (`*_into`, [`distance_kernel`]) are shared with the
//! tape operations in [`crate::diffeng`], so the differentiable forward pass
//! produces the same bits as these pure functions.

use crate::error::{HerlError, Result};

/// Norms below this are treated as exactly zero by `clip` and the exp map.
pub const ZERO_NORM: f64 = 1e-12;

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HypConfig {
    /// Curvature magnitude.
    pub c: f64,
    /// Clipping threshold applied before the exponential map.
    pub cr: f64,
    /// Boundary guard.
    pub eps: f64,
}

impl HypConfig {
    pub fn new(c: f64, cr: f64) -> Result<Self> {
        Self::with_eps(c, cr, DEFAULT_EPS)
    }

    pub fn with_eps(c: f64, cr: f64, eps: f64) -> Result<Self> {
        let cfg = HypConfig { c, cr, eps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(HerlError::config(format!("curvature must be > 0, got {}", self.c)));
        }
        if !(self.cr.is_finite() && self.cr > 0.0) {
            return Err(HerlError::config(format!("clip threshold must be > 0, got {}", self.cr)));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(HerlError::config(format!("eps must lie in (0, 1e-3), got {}", self.eps)));
        }
        Ok(())
    }
}

/// A point strictly inside the Poincaré ball of curvature `-c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    c: f64,
}

impl BallPoint {
    pub fn new(coords: Vec<f64>, c: f64) -> Result<Self> {
        if coords.is_empty() {
            return Err(HerlError::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(HerlError::config(format!("curvature must be > 0, got {c}")));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(HerlError::NonFinite("ball point coordinates".into()));
        }
        let value = c * norm_sq(&coords);
        if value >= 1.0 {
            return Err(HerlError::BoundaryViolation { value, limit: 1.0 });
        }
        Ok(BallPoint { coords, c })
    }

    pub fn origin(dim: usize, c: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], c)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> f64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }

    pub fn neg(&self) -> BallPoint {
        BallPoint {
            coords: self.coords.iter().map(|v| -v).collect(),
            c: self.c,
        }
    }

    fn check_same_ball(&self, other: &BallPoint) -> Result<()> {
        if self.c != other.c {
            return Err(HerlError::CurvatureMismatch {
                left: self.c,
                right: other.c,
            });
        }
        if self.dim() != other.dim() {
            return Err(HerlError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `λ_c(x) = 2 / (1 - c|x|²)`.
pub fn conformal_factor(x: &BallPoint) -> Result<f64> {
    let value = x.c * norm_sq(&x.coords);
    if value >= 1.0 - DEFAULT_EPS {
        return Err(HerlError::BoundaryViolation {
            value,
            limit: 1.0 - DEFAULT_EPS,
        });
    }
    Ok(2.0 / (1.0 - value))
}

/// Möbius addition written out term by term; `out` must have the length of `x`.
pub fn mobius_add_into(x: &[f64], y: &[f64], c: f64, out: &mut [f64]) {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let coef_x = 1.0 + 2.0 * c * xy + c * y2;
    let coef_y = 1.0 - c * x2;
    let denom = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = (coef_x * xi + coef_y * yi) / denom;
    }
}

pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    x.check_same_ball(y)?;
    let mut out = vec![0.0; x.dim()];
    mobius_add_into(&x.coords, &y.coords, x.c, &mut out);
    // Rounding can land a hair outside when both inputs hug the boundary.
    pull_inside(&mut out, x.c);
    BallPoint::new(out, x.c)
}

/// Keeps `√c|v|` at most `1 - DEFAULT_EPS`.
fn pull_inside(v: &mut [f64], c: f64) {
    let n = (c * norm_sq(v)).sqrt();
    if n > 1.0 - DEFAULT_EPS {
        let scale = (1.0 - DEFAULT_EPS) / n;
        v.iter_mut().for_each(|x| *x *= scale);
    }
}

/// `tanh(√c|z|)·z/(√c|z|)`, identity below [`ZERO_NORM`].
pub fn exp_map_origin_into(z: &[f64], c: f64, out: &mut [f64]) {
    let n = norm_sq(z).sqrt();
    if n < ZERO_NORM {
        out.copy_from_slice(z);
        return;
    }
    let sc = c.sqrt() * n;
    let factor = sc.tanh() / sc;
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = factor * zi;
    }
}

pub fn exp_map_origin(z: &[f64], cfg: &HypConfig) -> Result<BallPoint> {
    check_finite(z, "exp_map_origin")?;
    let mut out = vec![0.0; z.len()];
    exp_map_origin_into(z, cfg.c, &mut out);
    // tanh saturates to 1.0 in f64 for very large arguments.
    pull_inside(&mut out, cfg.c);
    BallPoint::new(out, cfg.c)
}

/// `min{1, cr/|z|}·z`. Exactly at `|z| = cr` the input passes through.
///
/// Norms within a few ulps above `cr` also pass through so that a clipped
/// vector is a fixed point.
pub fn clip_into(z: &[f64], cr: f64, out: &mut [f64]) {
    let n = norm_sq(z).sqrt();
    if n < ZERO_NORM || !is_clipped(n, cr) {
        out.copy_from_slice(z);
        return;
    }
    let factor = cr / n;
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = factor * zi;
    }
}

#[inline]
pub(crate) fn is_clipped(norm: f64, cr: f64) -> bool {
    norm > cr * (1.0 + 4.0 * f64::EPSILON)
}

pub fn clip(z: &[f64], cfg: &HypConfig) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    clip_into(z, cfg.cr, &mut out);
    out
}

/// Clip then exp map; the composition every hyperbolic feature goes through.
pub fn hyp_project_into(z: &[f64], cfg: &HypConfig, scratch: &mut [f64], out: &mut [f64]) {
    clip_into(z, cfg.cr, scratch);
    exp_map_origin_into(scratch, cfg.c, out);
}

pub fn hyp_project(z: &[f64], cfg: &HypConfig) -> Result<BallPoint> {
    check_finite(z, "hyp_project")?;
    let clipped = clip(z, cfg);
    exp_map_origin(&clipped, cfg)
}

/// Geodesic distance between two rows; `buf` needs `2·len` scratch slots.
///
/// The arctanh argument is clamped to `1 - eps`.
pub fn distance_kernel(a: &[f64], b: &[f64], c: f64, eps: f64, buf: &mut [f64]) -> f64 {
    let d = a.len();
    let (neg_a, sum) = buf.split_at_mut(d);
    for (n, &ai) in neg_a.iter_mut().zip(a) {
        *n = -ai;
    }
    mobius_add_into(neg_a, b, c, &mut sum[..d]);
    let sqrt_c = c.sqrt();
    let arg = (sqrt_c * norm_sq(&sum[..d]).sqrt()).min(1.0 - eps);
    2.0 / sqrt_c * arg.atanh()
}

pub fn hyp_distance(a: &BallPoint, b: &BallPoint) -> Result<f64> {
    a.check_same_ball(b)?;
    let mut buf = vec![0.0; 2 * a.dim()];
    Ok(distance_kernel(&a.coords, &b.coords, a.c, DEFAULT_EPS, &mut buf))
}

/// Cosine of the angle between two coordinate vectors.
pub fn angular_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HerlError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm_sq(a).sqrt();
    let nb = norm_sq(b).sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(HerlError::ZeroVector("angular_sim"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn dist_sim(a: &BallPoint, b: &BallPoint) -> Result<f64> {
    Ok(-hyp_distance(a, b)?)
}

fn check_finite(z: &[f64], what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HerlError::NonFinite(what.into()))
    }
}
