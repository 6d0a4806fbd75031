//! Row-wise kernels and their vector-Jacobian products.

use ndarray::Array2;

use super::Matrix;
use crate::hypmath::{self, dot, norm_sq, ZERO_NORM};

fn row(m: &Matrix, i: usize) -> &[f64] {
    let cols = m.ncols();
    &m.as_slice().expect("standard layout")[i * cols..(i + 1) * cols]
}

fn row_mut(m: &mut Matrix, i: usize) -> &mut [f64] {
    let cols = m.ncols();
    &mut m.as_slice_mut().expect("standard layout")[i * cols..(i + 1) * cols]
}

pub(super) fn normalize_rows_vjp(x: &Matrix, y: &Matrix, g: &Matrix) -> Matrix {
    let mut gx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let n = norm_sq(row(x, i)).sqrt();
        let yi = row(y, i);
        let gi = row(g, i);
        let proj = dot(yi, gi);
        for ((o, &gk), &yk) in row_mut(&mut gx, i).iter_mut().zip(gi).zip(yi) {
            *o = (gk - yk * proj) / n;
        }
    }
    gx
}

pub(super) fn clip_rows_vjp(x: &Matrix, cr: f64, g: &Matrix) -> Matrix {
    let mut gx = g.clone();
    for i in 0..x.nrows() {
        let xi = row(x, i);
        let n = norm_sq(xi).sqrt();
        if n < ZERO_NORM || !hypmath::is_clipped(n, cr) {
            continue;
        }
        // d(cr·z/|z|) = (cr/|z|)(I - ẑẑᵀ)
        let gi = row(g, i);
        let radial = dot(xi, gi) / (n * n);
        for ((o, &gk), &xk) in row_mut(&mut gx, i).iter_mut().zip(gi).zip(xi) {
            *o = cr / n * (gk - xk * radial);
        }
    }
    gx
}

/// `f(n) = tanh(√c n)/(√c n)`; returns `(f, f'(n)/n)`.
fn exp_map_factors(n: f64, c: f64) -> (f64, f64) {
    let u = c.sqrt() * n;
    let t = u.tanh();
    let f = t / u;
    // (u·sech²u - tanh u)/u³, expanded near zero to dodge cancellation
    let h = if u < 1e-3 {
        let u2 = u * u;
        -2.0 / 3.0 + 8.0 / 15.0 * u2
    } else {
        let sech2 = 1.0 - t * t;
        (u * sech2 - t) / (u * u * u)
    };
    (f, c * h)
}

pub(super) fn exp_map_rows_vjp(x: &Matrix, c: f64, g: &Matrix) -> Matrix {
    let mut gx = g.clone();
    for i in 0..x.nrows() {
        let xi = row(x, i);
        let n = norm_sq(xi).sqrt();
        if n < ZERO_NORM {
            continue;
        }
        let (f, h) = exp_map_factors(n, c);
        let gi = row(g, i);
        let zg = dot(xi, gi);
        for ((o, &gk), &xk) in row_mut(&mut gx, i).iter_mut().zip(gi).zip(xi) {
            *o = f * gk + h * zg * xk;
        }
    }
    gx
}

/// Accumulates the Möbius-addition VJP for one row pair into `gx`, `gy`.
fn mobius_vjp(x: &[f64], y: &[f64], c: f64, g: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    // g·out, with out = (a·x + b·y)/den
    let g_out = (a * dot(g, x) + b * dot(g, y)) / den;
    let g_den = -g_out / den;
    let gn_x = dot(g, x) / den;
    let gn_y = dot(g, y) / den;
    for k in 0..x.len() {
        let gn = g[k] / den;
        gx[k] += a * gn + 2.0 * c * gn_x * y[k] - 2.0 * c * gn_y * x[k]
            + g_den * (2.0 * c * y[k] + 2.0 * c * c * y2 * x[k]);
        gy[k] += b * gn + 2.0 * c * gn_x * (x[k] + y[k])
            + g_den * (2.0 * c * x[k] + 2.0 * c * c * x2 * y[k]);
    }
}

pub(super) fn mobius_rows_vjp(x: &Matrix, y: &Matrix, c: f64, g: &Matrix) -> (Matrix, Matrix) {
    let mut gx = Array2::zeros(x.raw_dim());
    let mut gy = Array2::zeros(y.raw_dim());
    for i in 0..x.nrows() {
        let (mut ax, mut ay) = (vec![0.0; x.ncols()], vec![0.0; x.ncols()]);
        mobius_vjp(row(x, i), row(y, i), c, row(g, i), &mut ax, &mut ay);
        row_mut(&mut gx, i).copy_from_slice(&ax);
        row_mut(&mut gy, i).copy_from_slice(&ay);
    }
    (gx, gy)
}

pub(super) fn pairwise_distance(a: &Matrix, b: &Matrix, c: f64, eps: f64) -> Matrix {
    let (n, m, d) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = Array2::zeros((n, m));
    let mut buf = vec![0.0; 2 * d];
    for i in 0..n {
        let ai = row(a, i);
        for j in 0..m {
            out[[i, j]] = hypmath::distance_kernel(ai, row(b, j), c, eps, &mut buf);
        }
    }
    out
}

pub(super) fn pairwise_distance_vjp(
    a: &Matrix,
    b: &Matrix,
    c: f64,
    eps: f64,
    g: &Matrix,
) -> (Matrix, Matrix) {
    let (n, m, d) = (a.nrows(), b.nrows(), a.ncols());
    let mut ga = Array2::zeros((n, d));
    let mut gb = Array2::zeros((m, d));
    let sqrt_c = c.sqrt();
    let mut neg_a = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut gw = vec![0.0; d];
    let mut gx = vec![0.0; d];
    for i in 0..n {
        for (o, &v) in neg_a.iter_mut().zip(row(a, i)) {
            *o = -v;
        }
        for j in 0..m {
            let up = g[[i, j]];
            if up == 0.0 {
                continue;
            }
            let bj = row(b, j);
            hypmath::mobius_add_into(&neg_a, bj, c, &mut w);
            let r = norm_sq(&w).sqrt();
            // coincident points (kink of |w|) and clamped arguments get a zero subgradient
            if r < ZERO_NORM || sqrt_c * r >= 1.0 - eps {
                continue;
            }
            let slope = 2.0 / (1.0 - c * r * r);
            for (o, &wk) in gw.iter_mut().zip(&w) {
                *o = up * slope * wk / r;
            }
            gx.iter_mut().for_each(|v| *v = 0.0);
            let gbj = row_mut(&mut gb, j);
            mobius_vjp(&neg_a, bj, c, &gw, &mut gx, gbj);
            for (o, &v) in row_mut(&mut ga, i).iter_mut().zip(&gx) {
                *o -= v;
            }
        }
    }
    (ga, gb)
}
