//! Student encoders, the shared projection head `g`, per-view prototype heads
//! and the EMA teacher.
//!
//! Each view has an MLP encoder (tanh hidden layers, linear output of width
//! `embed_dim`). Encoder outputs are l2-normalised rows. `g` is
//! affine-tanh-affine on `embed_dim`, and each prototype head is an affine map
//! to `prototypes` columns followed by the ball projection. The teacher holds
//! copies of the encoders only.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::diffeng::{Matrix, Tape, Var};
use crate::error::{HerlError, Result};
use crate::hypmath::HypConfig;

pub const DEFAULT_MOMENTUM: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub prototypes: usize,
    pub hyp: HypConfig,
    pub seed: u64,
    /// Softmax the head output before projecting into the ball.
    #[serde(default)]
    pub prototype_softmax: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(HerlError::config("every view needs a positive input dimension"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(HerlError::config("hidden widths must be a nonempty list of positive sizes"));
        }
        if self.embed_dim < 2 {
            return Err(HerlError::config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        if self.prototypes == 0 {
            return Err(HerlError::config("prototype count must be >= 1"));
        }
        self.hyp.validate()
    }

    pub fn views(&self) -> usize {
        self.input_dims.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub w: Matrix,
    /// `1 × out`.
    pub b: Matrix,
}

impl Linear {
    fn init(rng: &mut Xoshiro256PlusPlus, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound));
        let w = draw(fan_in, fan_out);
        let b = draw(1, fan_out);
        Linear { w, b }
    }
}

/// Affine layers with tanh between them and no activation after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(rng: &mut Xoshiro256PlusPlus, widths: &[usize]) -> Self {
        let layers = widths.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Mlp { layers }
    }

    fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub encoders: Vec<Mlp>,
    pub g: Mlp,
    pub heads: Vec<Linear>,
    pub teacher: Vec<Mlp>,
    pub momentum: f64,
}

pub fn init_model(spec: &ModelSpec) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let d = spec.embed_dim;
    let encoders: Vec<Mlp> = spec
        .input_dims
        .iter()
        .map(|&din| {
            let mut widths = vec![din];
            widths.extend(&spec.hidden);
            widths.push(d);
            Mlp::init(&mut rng, &widths)
        })
        .collect();
    let g = Mlp::init(&mut rng, &[d, d, d]);
    let heads = (0..spec.views())
        .map(|_| Linear::init(&mut rng, d, spec.prototypes))
        .collect();
    Ok(ModelState {
        spec: spec.clone(),
        teacher: encoders.clone(),
        encoders,
        g,
        heads,
        momentum: DEFAULT_MOMENTUM,
    })
}

/// Tape handles for one affine layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct StudentVars {
    pub encoders: Vec<Vec<LinearVars>>,
    pub g: Vec<LinearVars>,
    pub heads: Vec<LinearVars>,
}

impl StudentVars {
    /// Vars in the same order as [`ModelState::student_params_mut`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let layers = self.encoders.iter().flatten().chain(&self.g).chain(&self.heads);
        for l in layers {
            out.push(l.w);
            out.push(l.b);
        }
        out
    }

    /// Inverse of [`StudentVars::flat`] for a model with `state`'s layout.
    pub fn from_flat(state: &ModelState, flat: &[Var]) -> Result<Self> {
        let expected = 2 * (state.encoders.iter().map(|m| m.layers.len()).sum::<usize>()
            + state.g.layers.len()
            + state.heads.len());
        if flat.len() != expected {
            return Err(HerlError::DimensionMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let mut it = flat.chunks_exact(2).map(|p| LinearVars { w: p[0], b: p[1] });
        let mut take = |n: usize| -> Vec<LinearVars> { it.by_ref().take(n).collect() };
        let encoders = state.encoders.iter().map(|m| take(m.layers.len())).collect();
        let g = take(state.g.layers.len());
        let heads = take(state.heads.len());
        Ok(StudentVars { encoders, g, heads })
    }
}

/// Per-view representations on the tape. `f_t`, `q` and `p` are constants.
#[derive(Debug, Clone, Copy)]
pub struct ViewOutputs {
    pub f: Var,
    pub f_t: Var,
    pub z: Var,
    pub q_hat: Var,
    pub q: Var,
    pub p_hat: Var,
    pub p: Var,
}

fn bind(tape: &mut Tape, l: &Linear, trainable: bool) -> LinearVars {
    if trainable {
        LinearVars {
            w: tape.param(l.w.clone()),
            b: tape.param(l.b.clone()),
        }
    } else {
        LinearVars {
            w: tape.constant(l.w.clone()),
            b: tape.constant(l.b.clone()),
        }
    }
}

fn mlp_on_tape(tape: &mut Tape, layers: &[LinearVars], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = tape.affine(h, l.w, l.b)?;
        if i + 1 < layers.len() {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

impl ModelState {
    /// Student tensors: encoders, then `g`, then heads; weights before biases.
    pub fn student_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        let layers = self
            .encoders
            .iter_mut()
            .flat_map(|m| m.layers.iter_mut())
            .chain(self.g.layers.iter_mut())
            .chain(self.heads.iter_mut());
        for l in layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Every tensor with a stable name, student first, then teacher.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        fn push_mlp<'a>(prefix: String, m: &'a Mlp, out: &mut Vec<(String, &'a Matrix)>) {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.w"), &l.w));
                out.push((format!("{prefix}.{i}.b"), &l.b));
            }
        }
        let mut out = Vec::new();
        for (v, m) in self.encoders.iter().enumerate() {
            push_mlp(format!("encoder{v}"), m, &mut out);
        }
        push_mlp("g".into(), &self.g, &mut out);
        for (v, h) in self.heads.iter().enumerate() {
            out.push((format!("head{v}.w"), &h.w));
            out.push((format!("head{v}.b"), &h.b));
        }
        for (v, m) in self.teacher.iter().enumerate() {
            push_mlp(format!("teacher{v}"), m, &mut out);
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let layers = self
            .encoders
            .iter_mut()
            .flat_map(|m| m.layers.iter_mut())
            .chain(self.g.layers.iter_mut())
            .chain(self.heads.iter_mut())
            .chain(self.teacher.iter_mut().flat_map(|m| m.layers.iter_mut()));
        let mut tensors = Vec::new();
        for l in layers {
            tensors.push(&mut l.w);
            tensors.push(&mut l.b);
        }
        names.into_iter().zip(tensors).collect()
    }

    /// Registers the student parameters on `tape` as trainable leaves.
    pub fn bind_student(&self, tape: &mut Tape) -> StudentVars {
        StudentVars {
            encoders: self
                .encoders
                .iter()
                .map(|m| m.layers.iter().map(|l| bind(tape, l, true)).collect())
                .collect(),
            g: self.g.layers.iter().map(|l| bind(tape, l, true)).collect(),
            heads: self.heads.iter().map(|l| bind(tape, l, true)).collect(),
        }
    }

    fn check_batch(&self, batch: &[Matrix]) -> Result<usize> {
        if batch.len() != self.spec.views() {
            return Err(HerlError::DimensionMismatch {
                expected: self.spec.views(),
                actual: batch.len(),
            });
        }
        let n = batch[0].nrows();
        for (x, m) in batch.iter().zip(&self.encoders) {
            if x.ncols() != m.input_dim() {
                return Err(HerlError::DimensionMismatch {
                    expected: m.input_dim(),
                    actual: x.ncols(),
                });
            }
            if x.nrows() != n {
                return Err(HerlError::DimensionMismatch {
                    expected: n,
                    actual: x.nrows(),
                });
            }
        }
        if n == 0 {
            return Err(HerlError::EmptyInput("forward_views batch"));
        }
        Ok(n)
    }

    fn prototype_on_tape(&self, tape: &mut Tape, head: LinearVars, x: Var) -> Result<Var> {
        let mut logits = tape.affine(x, head.w, head.b)?;
        if self.spec.prototype_softmax {
            logits = tape.softmax_rows(logits)?;
        }
        tape.hyp_project_rows(logits, &self.spec.hyp)
    }

    /// Builds all representation families for a batch of complete samples.
    /// Teacher-side outputs enter the tape as constants.
    pub fn forward_views(
        &self,
        tape: &mut Tape,
        vars: &StudentVars,
        batch: &[Matrix],
    ) -> Result<Vec<ViewOutputs>> {
        self.check_batch(batch)?;
        let mut out = Vec::with_capacity(batch.len());
        for (v, x) in batch.iter().enumerate() {
            let xv = tape.constant(x.clone());
            let raw = mlp_on_tape(tape, &vars.encoders[v], xv)?;
            let f = tape.l2_normalize_rows(raw)?;
            let z = mlp_on_tape(tape, &vars.g, f)?;
            let q_hat = tape.hyp_project_rows(z, &self.spec.hyp)?;
            let p_hat = self.prototype_on_tape(tape, vars.heads[v], z)?;

            let ft = self.teacher_features(v, x)?;
            let q_val = self.detached(|t, _| {
                let ftv = t.constant(ft.clone());
                t.hyp_project_rows(ftv, &self.spec.hyp)
            })?;
            let p_val = self.detached(|t, this| {
                let ftv = t.constant(ft.clone());
                let head = bind(t, &this.heads[v], false);
                this.prototype_on_tape(t, head, ftv)
            })?;
            out.push(ViewOutputs {
                f,
                f_t: tape.constant(ft),
                z,
                q_hat,
                q: tape.constant(q_val),
                p_hat,
                p: tape.constant(p_val),
            });
        }
        Ok(out)
    }

    fn detached<F>(&self, f: F) -> Result<Matrix>
    where
        F: FnOnce(&mut Tape, &Self) -> Result<Var>,
    {
        let mut t = Tape::new();
        let v = f(&mut t, self)?;
        Ok(t.value(v).clone())
    }

    /// Row-normalised teacher encoder output `F_t` for view `v`.
    pub fn teacher_features(&self, v: usize, x: &Matrix) -> Result<Matrix> {
        let enc = self.teacher.get(v).ok_or(HerlError::DimensionMismatch {
            expected: self.teacher.len(),
            actual: v + 1,
        })?;
        if x.ncols() != enc.input_dim() {
            return Err(HerlError::DimensionMismatch {
                expected: enc.input_dim(),
                actual: x.ncols(),
            });
        }
        self.detached(|t, _| {
            let layers: Vec<LinearVars> = enc.layers.iter().map(|l| bind(t, l, false)).collect();
            let xv = t.constant(x.clone());
            let raw = mlp_on_tape(t, &layers, xv)?;
            t.l2_normalize_rows(raw)
        })
    }

    /// The student projection head applied outside any training tape.
    pub fn apply_g(&self, f: &Matrix) -> Result<Matrix> {
        self.detached(|t, this| {
            let layers: Vec<LinearVars> = this.g.layers.iter().map(|l| bind(t, l, false)).collect();
            let fv = t.constant(f.clone());
            mlp_on_tape(t, &layers, fv)
        })
    }

    /// Prototype head `v` applied to `x` outside any training tape.
    pub fn prototype_head(&self, v: usize, x: &Matrix) -> Result<Matrix> {
        self.detached(|t, this| {
            let head = bind(t, &this.heads[v], false);
            let xv = t.constant(x.clone());
            this.prototype_on_tape(t, head, xv)
        })
    }

    /// `teacher <- m*teacher + (1 - m)*student`, encoders only.
    /// `θ_t ← m θ_t + (1 - m) θ_s`, exact at `m ∈ {0, 1}` and at `θ_t = θ_s`.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(HerlError::config(format!("momentum must lie in [0, 1], got {m}")));
        }
        for (t, s) in self.teacher.iter_mut().zip(&self.encoders) {
            if t.layers.len() != s.layers.len() {
                return Err(HerlError::Graph("teacher and student encoders differ in depth".into()));
            }
            for (tl, sl) in t.layers.iter_mut().zip(&s.layers) {
                if tl.w.dim() != sl.w.dim() || tl.b.dim() != sl.b.dim() {
                    return Err(HerlError::ShapeMismatch {
                        op: "ema_update",
                        left: tl.w.dim(),
                        right: sl.w.dim(),
                    });
                }
                tl.w.zip_mut_with(&sl.w, |a, &b| *a = ema(*a, b, m));
                tl.b.zip_mut_with(&sl.b, |a, &b| *a = ema(*a, b, m));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HerlError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut arrays = Vec::new();
        for (name, m) in self.named_params() {
            arrays.push(ArrayEntry {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                offset: blob.len() / 8,
            });
            for v in m.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            momentum: self.momentum,
            arrays,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, json).map_err(|e| HerlError::io(&mpath, e))?;
        let ppath = dir.join(PARAMS);
        fs::write(&ppath, blob).map_err(|e| HerlError::io(&ppath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| HerlError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| HerlError::Parse {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        let ppath = dir.join(PARAMS);
        let blob = fs::read(&ppath).map_err(|e| HerlError::io(&ppath, e))?;
        let parse_err = |msg: String| HerlError::Parse {
            path: ppath.clone(),
            msg,
        };
        if blob.len() % 8 != 0 {
            return Err(parse_err(format!("length {} is not a multiple of 8", blob.len())));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();

        let mut state = init_model(&manifest.spec)?;
        state.momentum = manifest.momentum;
        let slots = state.named_params_mut();
        if slots.len() != manifest.arrays.len() {
            return Err(parse_err(format!(
                "manifest lists {} arrays, the spec needs {}",
                manifest.arrays.len(),
                slots.len()
            )));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&manifest.arrays) {
            if name != entry.name || slot.dim() != (entry.rows, entry.cols) {
                return Err(parse_err(format!("array {} does not match {name}", entry.name)));
            }
            let end = entry.offset + entry.rows * entry.cols;
            let data = values
                .get(entry.offset..end)
                .ok_or_else(|| parse_err(format!("array {} runs past the end", entry.name)))?;
            *slot = Array2::from_shape_vec((entry.rows, entry.cols), data.to_vec())
                .expect("length checked");
        }
        Ok(state)
    }
}

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// In f64 units.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    momentum: f64,
    arrays: Vec<ArrayEntry>,
}

fn ema(teacher: f64, student: f64, m: f64) -> f64 {
    if m == 0.0 {
        student
    } else {
        teacher + (1.0 - m) * (student - teacher)
    }
}
