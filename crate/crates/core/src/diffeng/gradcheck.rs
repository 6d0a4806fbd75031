use super::{Matrix, Tape, Var};
use crate::error::{HerlError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Input index and flat coordinate where the worst error occurred.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar program against central
/// differences `(f(x+h) - f(x-h))/(2h)`, one coordinate at a time.
///
/// Every input is registered as a parameter. The program must be smooth in a
/// `10h` neighbourhood of the point.
pub fn grad_check<F>(inputs: &[Matrix], h: f64, program: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |point: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|m| tape.param(m.clone())).collect();
        let out = program(&mut tape, &vars)?;
        let v = tape.item(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(HerlError::NonFinite("grad_check evaluation".into()))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut point: Vec<Matrix> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[k].raw_dim()));
        for flat in 0..inputs[k].len() {
            let base = inputs[k].as_slice().expect("standard layout")[flat];
            point[k].as_slice_mut().expect("standard layout")[flat] = base + h;
            let plus = eval(&point)?;
            point[k].as_slice_mut().expect("standard layout")[flat] = base - h;
            let minus = eval(&point)?;
            point[k].as_slice_mut().expect("standard layout")[flat] = base;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice().expect("standard layout")[flat];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, flat);
                report.worst_values = (a, numeric);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
