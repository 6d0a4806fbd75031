//! Loss-term ablation over seeds on synthetic tree data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustereval::{ari, kmeans, Scores};
use crate::config::RunConfig;
use crate::dataio::{synth_dataset, synth_tree_data, MaskSpec, SynthSpec};
use crate::error::Result;
use crate::losses::LossToggles;
use crate::train::{evaluate, train};
use crate::treebed::TreeSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone contrastive term only.
    Backbone,
    /// Backbone plus instance alignment, no prototype term.
    NoPrototype,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Backbone, Variant::NoPrototype, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::NoPrototype => "no_prototype",
            Variant::Full => "full",
        }
    }

    pub fn toggles(&self) -> LossToggles {
        match self {
            Variant::Backbone => LossToggles::BACKBONE_ONLY,
            Variant::NoPrototype => LossToggles::NO_PROTOTYPE,
            Variant::Full => LossToggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    /// Data template; its seed is replaced per run.
    pub synth: SynthSpec,
    pub eta: f64,
    pub seeds: Vec<u64>,
    /// Training template; seed and loss toggles are replaced per run.
    pub run: RunConfig,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            synth: SynthSpec {
                tree: TreeSpec::new(2, 3).expect("valid tree"),
                samples_per_class: 50,
                dims: [16, 12],
                center_step: 1.0,
                noise: 2.0,
                cross_view: 2.0,
                seed: 0,
            },
            eta: 0.3,
            seeds: (0..5).collect(),
            run: RunConfig {
                epochs: 200,
                ..RunConfig::default()
            },
        }
    }
}

impl AblationSpec {
    fn synth_for(&self, seed: u64) -> SynthSpec {
        SynthSpec { seed, ..self.synth }
    }

    fn mask_for(&self, seed: u64) -> MaskSpec {
        MaskSpec {
            eta: self.eta,
            views: 2,
            seed: seed.wrapping_add(1_000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub scores: Scores,
}

pub const ABLATION_HEADER: &str = "variant,seed,acc,nmi,ari";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e}",
            self.variant.name(),
            self.seed,
            self.scores.acc,
            self.scores.nmi,
            self.scores.ari
        )
    }
}

/// ARI of k-means on the complete first view, one value per seed.
pub fn first_view_ari(spec: &AblationSpec) -> Result<Vec<f64>> {
    spec.seeds
        .par_iter()
        .map(|&seed| {
            let data = synth_tree_data(&spec.synth_for(seed))?;
            let k = data.tree.leaf_count();
            let res = kmeans(&data.views[0], k, seed, &spec.run.kmeans())?;
            ari(&data.labels, &res.assignments)
        })
        .collect()
}

/// Trains and scores every (variant, seed) pair. Rows come back in
/// variant-major order regardless of scheduling.
pub fn run_ablation(spec: &AblationSpec, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let data = synth_dataset(&spec.synth_for(seed), &spec.mask_for(seed))?;
            let t = variant.toggles();
            let cfg = RunConfig {
                seed,
                use_ang: t.ang,
                use_dis: t.dis,
                use_pro: t.pro,
                ..spec.run.clone()
            };
            let (state, _) = train(&cfg, &data, |_| Ok(()))?;
            let k = cfg.cluster_count(data.classes());
            let eval = evaluate(&state, &data, k, seed, &cfg)?;
            Ok(AblationRow {
                variant,
                seed,
                scores: eval.scores,
            })
        })
        .collect()
}

/// Mean ARI of `variant` over its rows.
pub fn mean_ari(rows: &[AblationRow], variant: Variant) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.scores.ari)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}
