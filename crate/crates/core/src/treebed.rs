//! Regular trees embedded in the Poincaré disk by radial recursion, plus a flat
//! layout with the same angular schedule for comparison.
//!
//! Nodes are numbered breadth first: level `k` occupies the contiguous index
//! range starting at `(b^k - 1)/(b - 1)`.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{HerlError, Result};
use crate::hypmath::{self, BallPoint, DEFAULT_EPS};

pub const MAX_TREE_NODES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TreeSpec {
    pub branching: usize,
    pub depth: usize,
    /// Radial step per level, `ln b` unless overridden.
    pub tau_step: f64,
    /// Multiplier on `tau_step`.
    pub scale: f64,
    pub c: f64,
}

impl TreeSpec {
    pub fn new(branching: usize, depth: usize) -> Result<Self> {
        let spec = TreeSpec {
            branching,
            depth,
            tau_step: (branching as f64).ln(),
            scale: 1.0,
            c: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn with_curvature(mut self, c: f64) -> Result<Self> {
        self.c = c;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(HerlError::config("branching factor must be >= 2"));
        }
        if self.depth < 1 {
            return Err(HerlError::config("tree depth must be >= 1"));
        }
        if !(self.tau_step > 0.0 && self.tau_step.is_finite()) {
            return Err(HerlError::config("radial step must be > 0"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(HerlError::config("scale must be > 0"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(HerlError::config("curvature must be > 0"));
        }
        Ok(())
    }

    /// Radial distance between consecutive levels.
    pub fn step(&self) -> f64 {
        self.scale * self.tau_step
    }

    /// `(b^(R+1) - 1)/(b - 1)`, or `None` on overflow.
    pub fn node_count(&self) -> Option<usize> {
        let mut total: usize = 0;
        let mut width: usize = 1;
        for level in 0..=self.depth {
            total = total.checked_add(width)?;
            if level < self.depth {
                width = width.checked_mul(self.branching)?;
            }
        }
        Some(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub level: usize,
    /// Position within its level, left to right.
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct RegularTree {
    branching: usize,
    depth: usize,
    nodes: Vec<TreeNode>,
    level_offsets: Vec<usize>,
}

impl RegularTree {
    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.level_offsets[level + 1] - self.level_offsets[level]
    }

    pub fn node_at(&self, level: usize, rank: usize) -> usize {
        self.level_offsets[level] + rank
    }

    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.level_offsets[self.depth]..self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.level_width(self.depth)
    }

    /// Shortest-path distance, `level(u) + level(v) - 2·level(lca)`.
    pub fn distance(&self, u: usize, v: usize) -> usize {
        let (mut a, mut b) = (u, v);
        let mut hops = 0;
        while self.nodes[a].level > self.nodes[b].level {
            a = self.nodes[a].parent.expect("non-root has a parent");
            hops += 1;
        }
        while self.nodes[b].level > self.nodes[a].level {
            b = self.nodes[b].parent.expect("non-root has a parent");
            hops += 1;
        }
        while a != b {
            a = self.nodes[a].parent.expect("non-root has a parent");
            b = self.nodes[b].parent.expect("non-root has a parent");
            hops += 2;
        }
        hops
    }
}

pub fn build_regular_tree(spec: &TreeSpec) -> Result<RegularTree> {
    spec.validate()?;
    let total = spec
        .node_count()
        .filter(|&n| n <= MAX_TREE_NODES)
        .ok_or_else(|| {
            HerlError::ResourceLimit(format!(
                "tree with b = {}, R = {} exceeds {MAX_TREE_NODES} nodes",
                spec.branching, spec.depth
            ))
        })?;
    let b = spec.branching;
    let mut nodes = Vec::with_capacity(total);
    let mut level_offsets = Vec::with_capacity(spec.depth + 2);
    level_offsets.push(0);
    nodes.push(TreeNode {
        parent: None,
        level: 0,
        rank: 0,
    });
    level_offsets.push(1);
    for level in 1..=spec.depth {
        let parent_start = level_offsets[level - 1];
        let parent_width = level_offsets[level] - parent_start;
        for rank in 0..parent_width * b {
            nodes.push(TreeNode {
                parent: Some(parent_start + rank / b),
                level,
                rank,
            });
        }
        level_offsets.push(nodes.len());
    }
    Ok(RegularTree {
        branching: b,
        depth: spec.depth,
        nodes,
        level_offsets,
    })
}

/// Angle at the center of a node's sector. A level-`k` node owns an arc of
/// width `2π/b^k`; children split their parent's arc evenly.
fn sector_center(tree: &RegularTree, node: usize) -> f64 {
    let n = tree.nodes[node];
    if n.level == 0 {
        return 0.0;
    }
    let width = tree.level_width(n.level) as f64;
    2.0 * PI * (n.rank as f64 + 0.5) / width
}

/// Euclidean norm of a point at hyperbolic distance `r` from the origin.
pub fn ball_radius(r: f64, c: f64) -> f64 {
    (c.sqrt() * r / 2.0).tanh() / c.sqrt()
}

#[derive(Debug, Clone)]
pub struct TreeEmbedding {
    pub placement: Vec<BallPoint>,
    pub spec: TreeSpec,
}

impl TreeEmbedding {
    pub fn distance(&self, u: usize, v: usize) -> f64 {
        hypmath::hyp_distance(&self.placement[u], &self.placement[v])
            .expect("placements share one ball")
    }
}

pub fn sarkar_embed(tree: &RegularTree, spec: &TreeSpec) -> Result<TreeEmbedding> {
    spec.validate()?;
    if tree.branching != spec.branching || tree.depth != spec.depth {
        return Err(HerlError::config("tree was not built from this spec"));
    }
    let sqrt_c = spec.c.sqrt();
    let deepest = tree.depth as f64 * spec.step();
    if (sqrt_c * deepest / 2.0).tanh() >= 1.0 - DEFAULT_EPS {
        return Err(HerlError::DepthLimit(format!(
            "hyperbolic radius {deepest:.3} saturates the ball at depth {}",
            tree.depth
        )));
    }
    let placement = (0..tree.len())
        .map(|node| {
            let level = tree.nodes[node].level as f64;
            let rho = ball_radius(level * spec.step(), spec.c);
            let theta = sector_center(tree, node);
            BallPoint::new(vec![rho * theta.cos(), rho * theta.sin()], spec.c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeEmbedding {
        placement,
        spec: *spec,
    })
}

/// Same angles as [`sarkar_embed`], Euclidean radius `k·step`.
pub fn euclidean_analog_layout(tree: &RegularTree, spec: &TreeSpec) -> Vec<[f64; 2]> {
    (0..tree.len())
        .map(|node| {
            let r = tree.nodes[node].level as f64 * spec.step();
            let theta = sector_center(tree, node);
            [r * theta.cos(), r * theta.sin()]
        })
        .collect()
}

pub fn euclidean_distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairFilter {
    All,
    Edges,
    Siblings,
}

impl PairFilter {
    pub fn name(&self) -> &'static str {
        match self {
            PairFilter::All => "all",
            PairFilter::Edges => "edges",
            PairFilter::Siblings => "siblings",
        }
    }
}

impl std::str::FromStr for PairFilter {
    type Err = HerlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PairFilter::All),
            "edges" => Ok(PairFilter::Edges),
            "siblings" => Ok(PairFilter::Siblings),
            other => Err(HerlError::config(format!("unknown pair filter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionReport {
    /// `max_ratio / min_ratio`.
    pub distortion: f64,
    /// Optimal global scale (the smallest ratio).
    pub s_star: f64,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub pairs: usize,
}

fn selected_pairs(tree: &RegularTree, filter: PairFilter) -> Vec<(usize, usize)> {
    let n = tree.len();
    match filter {
        PairFilter::All => (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .collect(),
        PairFilter::Edges => (1..n)
            .map(|v| (tree.nodes[v].parent.unwrap(), v))
            .collect(),
        PairFilter::Siblings => {
            let b = tree.branching;
            let mut out = Vec::new();
            for first in (1..n).step_by(b) {
                for i in 0..b {
                    for j in i + 1..b {
                        out.push((first + i, first + j));
                    }
                }
            }
            out
        }
    }
}

/// Distortion of an arbitrary metric over the tree's nodes.
pub fn measure_distortion_with<F>(
    tree: &RegularTree,
    filter: PairFilter,
    metric: F,
) -> Result<DistortionReport>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let pairs = selected_pairs(tree, filter);
    if pairs.is_empty() {
        return Err(HerlError::EmptyInput("distortion pair set"));
    }
    let (min_ratio, max_ratio) = pairs
        .par_iter()
        .map(|&(u, v)| metric(u, v) / tree.distance(u, v) as f64)
        .fold(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), r| (lo.min(r), hi.max(r)),
        )
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |(a, b), (c, d)| (a.min(c), b.max(d)),
        );
    Ok(DistortionReport {
        distortion: max_ratio / min_ratio,
        s_star: min_ratio,
        max_ratio,
        min_ratio,
        pairs: pairs.len(),
    })
}

pub fn measure_distortion(
    emb: &TreeEmbedding,
    tree: &RegularTree,
    filter: PairFilter,
) -> Result<DistortionReport> {
    if emb.placement.len() != tree.len() {
        return Err(HerlError::DimensionMismatch {
            expected: tree.len(),
            actual: emb.placement.len(),
        });
    }
    measure_distortion_with(tree, filter, |u, v| emb.distance(u, v))
}

/// Lower bound `b^(R/n)/R` on the distortion of any embedding into `R^n`.
pub fn euclidean_lower_bound(b: usize, depth: usize, dim: usize) -> Result<f64> {
    if b < 2 || depth < 1 || dim < 1 {
        return Err(HerlError::config("lower bound needs b >= 2, R >= 1, n >= 1"));
    }
    let (b, r, n) = (b as f64, depth as f64, dim as f64);
    let direct = b.powf(r / n) / r;
    if direct.is_finite() {
        return Ok(direct);
    }
    let log_value = r / n * b.ln() - r.ln();
    if log_value >= f64::MAX.ln() {
        return Err(HerlError::ResourceLimit(format!(
            "lower bound e^{log_value:.1} is not representable"
        )));
    }
    Ok(log_value.exp())
}

/// Distance between the first two children of the leftmost node one level up.
pub fn adjacent_sibling_distance<F>(tree: &RegularTree, level: usize, metric: F) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    assert!(level >= 1 && level <= tree.depth, "level out of range");
    metric(tree.node_at(level, 0), tree.node_at(level, 1))
}

pub fn write_embedding_csv(emb: &TreeEmbedding, tree: &RegularTree, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["node_id", "level", "x", "y"])
        .map_err(|e| csv_err(path, e))?;
    for (id, p) in emb.placement.iter().enumerate() {
        let xy = p.coords();
        w.write_record([
            id.to_string(),
            tree.nodes[id].level.to_string(),
            format!("{:.16e}", xy[0]),
            format!("{:.16e}", xy[1]),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HerlError::io(path, e))
}

/// Reads `node_id,level,x,y` rows back into an embedding for `spec`.
pub fn read_embedding_csv(path: &Path, spec: &TreeSpec) -> Result<TreeEmbedding> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<(usize, BallPoint)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let parse_err = |what: &str| HerlError::Parse {
            path: path.to_path_buf(),
            msg: format!("bad {what} in row {:?}", rec),
        };
        let id: usize = field(0).parse().map_err(|_| parse_err("node_id"))?;
        let x: f64 = field(2).parse().map_err(|_| parse_err("x"))?;
        let y: f64 = field(3).parse().map_err(|_| parse_err("y"))?;
        rows.push((id, BallPoint::new(vec![x, y], spec.c)?));
    }
    rows.sort_by_key(|(id, _)| *id);
    if rows.iter().enumerate().any(|(i, (id, _))| i != *id) {
        return Err(HerlError::Parse {
            path: path.to_path_buf(),
            msg: "node ids must be 0..n without gaps".into(),
        });
    }
    Ok(TreeEmbedding {
        placement: rows.into_iter().map(|(_, p)| p).collect(),
        spec: *spec,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> HerlError {
    HerlError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}
