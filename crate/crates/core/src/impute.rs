//! Completion of missing views with the projection head and assembly of the
//! clustering input.

use ndarray::{concatenate, Array2, Axis};

use crate::diffeng::Matrix;
use crate::error::{HerlError, Result};
use crate::netmodel::ModelState;

/// `mask[[i, v]] == 1` iff view `v` of sample `i` was observed.
pub type Mask = Array2<u8>;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    /// Per-view `N × d_v` features. Rows of missing views are ignored.
    pub views: Vec<Matrix>,
    pub mask: Mask,
}

impl MaskedDataset {
    pub fn new(views: Vec<Matrix>, mask: Mask) -> Result<Self> {
        let data = MaskedDataset { views, mask };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.mask.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.ncols() != self.views.len() {
            return Err(HerlError::DimensionMismatch {
                expected: self.views.len(),
                actual: self.mask.ncols(),
            });
        }
        for x in &self.views {
            if x.nrows() != self.mask.nrows() {
                return Err(HerlError::DimensionMismatch {
                    expected: self.mask.nrows(),
                    actual: x.nrows(),
                });
            }
        }
        for (i, r) in self.mask.rows().into_iter().enumerate() {
            if r.iter().any(|&m| m > 1) {
                return Err(HerlError::config(format!("mask row {i} has an entry outside {{0, 1}}")));
            }
            if r.iter().all(|&m| m == 0) {
                return Err(HerlError::config(format!("sample {i} has no observed view")));
            }
        }
        Ok(())
    }

    /// Indices of samples with every view observed.
    pub fn complete_rows(&self) -> Vec<usize> {
        self.mask
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().all(|&m| m == 1))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-view features of the complete samples.
    pub fn complete_subset(&self) -> Vec<Matrix> {
        let rows = self.complete_rows();
        self.views.iter().map(|x| x.select(Axis(0), &rows)).collect()
    }
}

fn rows_where(mask: &Mask, v: usize, observed: bool) -> Vec<usize> {
    let want = u8::from(observed);
    (0..mask.nrows()).filter(|&i| mask[[i, v]] == want).collect()
}

/// `Z̃^v = M_v ⊙ F_t^v + (1 - M_v) ⊙ g(F_t^u)` for two views. Observed rows
/// are copied from the teacher features unchanged.
pub fn recover(state: &ModelState, data: &MaskedDataset) -> Result<Vec<Matrix>> {
    data.validate()?;
    if data.views.len() != 2 {
        return Err(HerlError::Unsupported(format!(
            "recovery is defined for two views, got {}",
            data.views.len()
        )));
    }
    let n = data.len();
    let d = state.spec.embed_dim;
    let mut out = Vec::with_capacity(2);
    for v in 0..2 {
        let u = 1 - v;
        let mut z = Array2::zeros((n, d));
        let seen = rows_where(&data.mask, v, true);
        if !seen.is_empty() {
            let ft = state.teacher_features(v, &data.views[v].select(Axis(0), &seen))?;
            for (k, &i) in seen.iter().enumerate() {
                z.row_mut(i).assign(&ft.row(k));
            }
        }
        let missing = rows_where(&data.mask, v, false);
        if !missing.is_empty() {
            let ft_u = state.teacher_features(u, &data.views[u].select(Axis(0), &missing))?;
            let filled = state.apply_g(&ft_u)?;
            for (k, &i) in missing.iter().enumerate() {
                z.row_mut(i).assign(&filled.row(k));
            }
        }
        out.push(z);
    }
    Ok(out)
}

/// Column-wise concatenation in view order.
pub fn assemble(views: &[Matrix]) -> Result<Matrix> {
    let first = views.first().ok_or(HerlError::EmptyInput("assemble"))?;
    for x in views {
        if x.nrows() != first.nrows() {
            return Err(HerlError::DimensionMismatch {
                expected: first.nrows(),
                actual: x.nrows(),
            });
        }
    }
    let blocks: Vec<_> = views.iter().map(|x| x.view()).collect();
    Ok(concatenate(Axis(1), &blocks).expect("row counts checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypmath::HypConfig;
    use crate::netmodel::{init_model, ModelSpec};
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn setup(n: usize) -> (ModelState, Vec<Matrix>) {
        let spec = ModelSpec {
            input_dims: vec![4, 3],
            hidden: vec![5],
            embed_dim: 3,
            prototypes: 2,
            hyp: HypConfig::new(0.1, 2.0).unwrap(),
            seed: 2,
            prototype_softmax: false,
        };
        let mut state = init_model(&spec).unwrap();
        // make teacher differ from student so the two paths are distinguishable
        for l in state.teacher.iter_mut().flat_map(|m| m.layers.iter_mut()) {
            l.w.mapv_inplace(|v| v * 1.1 + 0.01);
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let views = [4, 3]
            .iter()
            .map(|&d| Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)))
            .collect();
        (state, views)
    }

    #[test]
    fn full_mask_returns_teacher_features() {
        let (state, views) = setup(9);
        let data = MaskedDataset::new(views.clone(), Array2::ones((9, 2))).unwrap();
        let z = recover(&state, &data).unwrap();
        for v in 0..2 {
            assert_eq!(z[v], state.teacher_features(v, &views[v]).unwrap());
        }
    }

    #[test]
    fn missing_view_uses_translation() {
        let (state, views) = setup(6);
        let mut mask = Array2::ones((6, 2));
        mask.column_mut(1).fill(0);
        let data = MaskedDataset::new(views.clone(), mask).unwrap();
        let z = recover(&state, &data).unwrap();
        let expected = state.apply_g(&state.teacher_features(0, &views[0]).unwrap()).unwrap();
        assert_eq!(z[1], expected);
    }

    #[test]
    fn mixed_mask_keeps_observed_rows() {
        let (state, mut views) = setup(40);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let mut mask: Mask = Array2::ones((40, 2));
        for i in 0..40 {
            if rng.random_bool(0.4) {
                let v = rng.random_range(0..2);
                mask[[i, v]] = 0;
                views[v].row_mut(i).fill(0.0);
            }
        }
        let data = MaskedDataset::new(views.clone(), mask.clone()).unwrap();
        let z = recover(&state, &data).unwrap();
        for v in 0..2 {
            let full = state.teacher_features(v, &views[v]).unwrap();
            let other = state.apply_g(&state.teacher_features(1 - v, &views[1 - v]).unwrap()).unwrap();
            for i in 0..40 {
                if mask[[i, v]] == 1 {
                    assert_eq!(z[v].row(i), full.row(i), "view {v} row {i}");
                } else {
                    assert_eq!(z[v].row(i), other.row(i), "view {v} row {i}");
                }
            }
        }
        assert_eq!(recover(&state, &data).unwrap(), z);
    }

    #[test]
    fn rejects_bad_masks() {
        let (state, views) = setup(3);
        let mut mask: Mask = Array2::ones((3, 2));
        mask[[1, 0]] = 0;
        mask[[1, 1]] = 0;
        assert!(MaskedDataset::new(views.clone(), mask).is_err());

        let three = MaskedDataset {
            views: vec![views[0].clone(), views[1].clone(), views[1].clone()],
            mask: Array2::ones((3, 3)),
        };
        assert!(matches!(recover(&state, &three), Err(HerlError::Unsupported(_))));
    }

    #[test]
    fn complete_subset_rows() {
        let (_, views) = setup(5);
        let mut mask: Mask = Array2::ones((5, 2));
        mask[[0, 1]] = 0;
        mask[[3, 0]] = 0;
        let data = MaskedDataset::new(views.clone(), mask).unwrap();
        assert_eq!(data.complete_rows(), vec![1, 2, 4]);
        let sub = data.complete_subset();
        assert_eq!(sub[0].row(1), views[0].row(2));
    }

    #[test]
    fn assemble_examples() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let b = Array2::from_shape_fn((3, 2), |(i, j)| -((i * 2 + j) as f64));
        assert_eq!(assemble(std::slice::from_ref(&a)).unwrap(), a);
        let ab = assemble(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.dim(), (3, 4));
        assert_eq!(ab.slice(s![.., 0..2]), a);
        assert_eq!(ab.slice(s![.., 2..4]), b);
        assert!(assemble(&[a, Array2::zeros((2, 2))]).is_err());
    }
}
