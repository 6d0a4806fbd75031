//! Synthetic hierarchical two-view data, missing-view masks and CSV storage.
//!
//! Random streams come from `Xoshiro256PlusPlus` seeded through splitmix64
//! (`seed_from_u64`), with Gaussians drawn by `rand_distr::StandardNormal`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::diffeng::Matrix;
use crate::error::{HerlError, Result};
use crate::impute::{Mask, MaskedDataset};
use crate::treebed::{build_regular_tree, RegularTree, TreeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Classes are the leaves of this tree.
    pub tree: TreeSpec,
    pub samples_per_class: usize,
    pub dims: [usize; 2],
    /// Scale of the Gaussian step from a parent center to a child center.
    pub center_step: f64,
    pub noise: f64,
    /// Singular values of the view-2 map are drawn from `[1, cross_view]`.
    pub cross_view: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        if self.samples_per_class == 0 {
            return Err(HerlError::config("samples_per_class must be >= 1"));
        }
        if self.dims.contains(&0) {
            return Err(HerlError::config("view dimensions must be positive"));
        }
        if !(self.center_step >= 0.0 && self.noise >= 0.0) {
            return Err(HerlError::config("center_step and noise must be >= 0"));
        }
        if !(self.cross_view >= 1.0 && self.cross_view.is_finite()) {
            return Err(HerlError::config(format!("cross_view bound must be >= 1, got {}", self.cross_view)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub views: [Matrix; 2],
    pub labels: Vec<usize>,
    pub tree: RegularTree,
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Gram-Schmidt on the columns of a Gaussian matrix.
fn orthonormal_columns(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Matrix {
    loop {
        let mut q = gaussian(rng, rows, cols);
        let mut ok = true;
        for j in 0..cols {
            let mut col = q.column(j).to_owned();
            for k in 0..j {
                let prev = q.column(k);
                let proj = col.dot(&prev);
                col.scaled_add(-proj, &prev);
            }
            let n = col.dot(&col).sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).assign(&(col / n));
        }
        if ok {
            return q;
        }
    }
}

/// Samples are grouped by class in leaf order; `labels[i]` is the leaf index.
pub fn synth_tree_data(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let tree = build_regular_tree(&spec.tree)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let [d1, d2] = spec.dims;

    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(tree.len());
    for node in tree.nodes() {
        let c = match node.parent {
            None => Array1::zeros(d1),
            Some(p) => {
                let step: Array1<f64> = (0..d1).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                &centers[p] + &(step * spec.center_step)
            }
        };
        centers.push(c);
    }

    let r = d1.min(d2);
    let u = orthonormal_columns(&mut rng, d2, r);
    let v = orthonormal_columns(&mut rng, d1, r);
    let s: Vec<f64> = (0..r).map(|_| rng.random_range(1.0..=spec.cross_view)).collect();
    let mut us = u;
    for (j, sv) in s.iter().enumerate() {
        us.column_mut(j).mapv_inplace(|x| x * sv);
    }
    // d2 × d1
    let a = us.dot(&v.t());

    let classes = tree.leaf_count();
    let n = classes * spec.samples_per_class;
    // row i holds the center of sample i's class
    let mut means = Array2::zeros((n, d1));
    let mut labels = Vec::with_capacity(n);
    for (class, leaf) in tree.leaves().enumerate() {
        for k in 0..spec.samples_per_class {
            means.row_mut(class * spec.samples_per_class + k).assign(&centers[leaf]);
            labels.push(class);
        }
    }
    // views are independent given the class
    let x1 = &means + &(gaussian(&mut rng, n, d1) * spec.noise);
    let x2 = means.dot(&a.t()) + gaussian(&mut rng, n, d2) * spec.noise;
    Ok(SynthData {
        views: [x1, x2],
        labels,
        tree,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub eta: f64,
    pub views: usize,
    pub seed: u64,
}

/// Exactly `round(eta·n)` rows, chosen without replacement, lose one
/// uniformly chosen view.
pub fn gen_mask(spec: &MaskSpec, n: usize) -> Result<Mask> {
    if spec.views != 2 {
        return Err(HerlError::Unsupported(format!(
            "masks are generated for two views, got {}",
            spec.views
        )));
    }
    if !(0.0..=1.0).contains(&spec.eta) {
        return Err(HerlError::config(format!("eta must lie in [0, 1], got {}", spec.eta)));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let m = (spec.eta * n as f64).round() as usize;
    let mut mask: Mask = Array2::ones((n, 2));
    let mut rows = index::sample(&mut rng, n, m).into_vec();
    rows.sort_unstable();
    for i in rows {
        let v = rng.random_range(0..2);
        mask[[i, v]] = 0;
    }
    Ok(mask)
}

fn csv_err(path: &Path, e: csv::Error) -> HerlError {
    match e.kind() {
        csv::ErrorKind::Io(io) => HerlError::io(path, std::io::Error::new(io.kind(), io.to_string())),
        _ => HerlError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
    }
}

fn write_table<T: std::fmt::Display>(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<T>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HerlError::io(path, e))
}

/// Reads a rectangular CSV with one header row; cells are parsed by `parse`.
fn read_table<T, F>(path: &Path, parse: F) -> Result<(Vec<String>, Vec<Vec<T>>)>
where
    F: Fn(&str) -> Option<T>,
{
    let text = fs::read_to_string(path).map_err(|e| HerlError::io(path, e))?;
    if text.trim().is_empty() {
        return Err(HerlError::Parse {
            path: path.to_path_buf(),
            msg: "file is empty; expected a header row".into(),
        });
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|cell| {
                parse(cell.trim()).ok_or_else(|| HerlError::Parse {
                    path: path.to_path_buf(),
                    msg: format!("bad value {cell:?} in data row {}", line + 1),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn column_header(k: usize) -> Vec<String> {
    (0..k).map(|j| format!("c{j}")).collect()
}

/// Header `c0,c1,...`; values carry 17 significant digits so reading back is
/// exact.
pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let rows = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>());
    write_table(path, &column_header(m.ncols()), rows)
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let (header, rows) = read_table(path, |s| s.parse::<f64>().ok())?;
    let k = header.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / k.max(1);
    Array2::from_shape_vec((n, k), flat).map_err(|e| HerlError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_labels_csv(labels: &[usize], path: &Path) -> Result<()> {
    write_table(path, &["label".to_string()], labels.iter().map(|l| vec![*l]))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let (header, rows) = read_table(path, |s| s.parse::<usize>().ok())?;
    if header.len() != 1 {
        return Err(HerlError::Parse {
            path: path.to_path_buf(),
            msg: format!("expected one label column, found {}", header.len()),
        });
    }
    Ok(rows.into_iter().map(|r| r[0]).collect())
}

pub fn write_mask_csv(mask: &Mask, path: &Path) -> Result<()> {
    let rows = mask.rows().into_iter().map(|r| r.to_vec());
    write_table(path, &column_header(mask.ncols()), rows)
}

pub fn read_mask_csv(path: &Path) -> Result<Mask> {
    let (header, rows) = read_table(path, |s| match s {
        "0" => Some(0u8),
        "1" => Some(1u8),
        _ => None,
    })?;
    let k = header.len();
    let n = rows.len();
    Array2::from_shape_vec((n, k), rows.into_iter().flatten().collect()).map_err(|e| HerlError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub const VIEW_FILES: [&str; 2] = ["view1.csv", "view2.csv"];
pub const LABELS_FILE: &str = "labels.csv";
pub const MASK_FILE: &str = "mask.csv";

/// Views, labels and mask as stored in a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: MaskedDataset,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Zeroes the rows of missing views, as they are written to disk.
    pub fn from_parts(views: Vec<Matrix>, labels: Vec<usize>, mask: Mask) -> Result<Self> {
        let mut views = views;
        for (v, x) in views.iter_mut().enumerate() {
            for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
                if mask[[i, v]] == 0 {
                    row.fill(0.0);
                }
            }
        }
        let data = MaskedDataset::new(views, mask)?;
        if labels.len() != data.len() {
            return Err(HerlError::DimensionMismatch {
                expected: data.len(),
                actual: labels.len(),
            });
        }
        Ok(Dataset { data, labels })
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HerlError::io(dir, e))?;
        for (x, name) in self.data.views.iter().zip(VIEW_FILES) {
            write_matrix_csv(x, &dir.join(name))?;
        }
        write_labels_csv(&self.labels, &dir.join(LABELS_FILE))?;
        write_mask_csv(&self.data.mask, &dir.join(MASK_FILE))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let views = VIEW_FILES
            .iter()
            .map(|name| read_matrix_csv(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let labels = read_labels_csv(&dir.join(LABELS_FILE))?;
        let mask = read_mask_csv(&dir.join(MASK_FILE))?;
        Dataset::from_parts(views, labels, mask)
    }
}

/// Synthetic data plus a mask, with missing rows zeroed.
pub fn synth_dataset(spec: &SynthSpec, mask: &MaskSpec) -> Result<Dataset> {
    let synth = synth_tree_data(spec)?;
    let n = synth.labels.len();
    let m = gen_mask(mask, n)?;
    let [x1, x2] = synth.views;
    Dataset::from_parts(vec![x1, x2], synth.labels, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            tree: TreeSpec::new(2, 3).unwrap(),
            samples_per_class: 4,
            dims: [5, 3],
            center_step: 2.0,
            noise: 0.3,
            cross_view: 3.0,
            seed: 17,
        }
    }

    #[test]
    fn class_count_and_layout() {
        let d = synth_tree_data(&spec()).unwrap();
        assert_eq!(d.tree.leaf_count(), 8);
        assert_eq!(d.labels.len(), 32);
        assert_eq!(*d.labels.iter().max().unwrap(), 7);
        assert_eq!(d.views[0].dim(), (32, 5));
        assert_eq!(d.views[1].dim(), (32, 3));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_tree_data(&spec()).unwrap();
        let b = synth_tree_data(&spec()).unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.labels, b.labels);
        let c = synth_tree_data(&SynthSpec { seed: 18, ..spec() }).unwrap();
        assert_ne!(a.views, c.views);
    }

    #[test]
    fn noiseless_samples_sit_on_centers() {
        let d = synth_tree_data(&SynthSpec { noise: 0.0, ..spec() }).unwrap();
        for class in 0..8 {
            let rows: Vec<_> = (0..4).map(|k| d.views[0].row(class * 4 + k).to_owned()).collect();
            assert!(rows.iter().all(|r| *r == rows[0]));
        }
        assert_ne!(d.views[0].row(0), d.views[0].row(4));
    }

    #[test]
    fn mask_counts() {
        let all = gen_mask(&MaskSpec { eta: 0.0, views: 2, seed: 1 }, 10).unwrap();
        assert!(all.iter().all(|&m| m == 1));
        let one = gen_mask(&MaskSpec { eta: 1.0, views: 2, seed: 1 }, 10).unwrap();
        assert!(one.rows().into_iter().all(|r| r.sum() == 1));
        let half = gen_mask(&MaskSpec { eta: 0.5, views: 2, seed: 1 }, 10).unwrap();
        assert_eq!(half.rows().into_iter().filter(|r| r.sum() == 1).count(), 5);
        assert!(gen_mask(&MaskSpec { eta: 0.5, views: 3, seed: 1 }, 10).is_err());
    }

    #[test]
    fn mask_view_choice_balanced() {
        let (mut first, mut total) = (0usize, 0usize);
        for seed in 0..10_000 {
            let m = gen_mask(&MaskSpec { eta: 0.5, views: 2, seed }, 4).unwrap();
            for r in m.rows() {
                if r[0] == 0 {
                    first += 1;
                }
                if r.sum() == 1 {
                    total += 1;
                }
            }
        }
        let frac = first as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let m = Array2::from_shape_fn((5, 3), |_| rng.sample::<f64, _>(StandardNormal) * 1e3);
        write_matrix_csv(&m, &p).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        let head = fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("c0,c1,c2\n"));
    }

    #[test]
    fn matrix_csv_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "").unwrap();
        assert!(matches!(read_matrix_csv(&p), Err(HerlError::Parse { .. })));
        fs::write(&p, "c0,c1,c2\n").unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap().dim(), (0, 3));
        fs::write(&p, "c0,c1\n1,2\n3\n").unwrap();
        assert!(matches!(read_matrix_csv(&p), Err(HerlError::Parse { .. })));
        fs::write(&p, "c0,c1\n1,x\n").unwrap();
        assert!(matches!(read_matrix_csv(&p), Err(HerlError::Parse { .. })));
        assert!(matches!(read_matrix_csv(&dir.path().join("nope.csv")), Err(HerlError::Io { .. })));
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&spec(), &MaskSpec { eta: 0.3, views: 2, seed: 5 }).unwrap();
        assert_eq!(ds.data.complete_rows().len(), 32 - (0.3f64 * 32.0).round() as usize);
        for (v, x) in ds.data.views.iter().enumerate() {
            for i in 0..32 {
                if ds.data.mask[[i, v]] == 0 {
                    assert!(x.row(i).iter().all(|&e| e == 0.0));
                }
            }
        }
        ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), ds);
        assert_eq!(ds.classes(), 8);
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(HerlError::Io { .. })));
    }
}
