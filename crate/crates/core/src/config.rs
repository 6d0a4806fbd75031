//! Flat `key = value` run configuration. Every key has a default; overrides
//! given as `key=value` strings replace file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::GraphConfig;
use crate::clustereval::KMeansConfig;
use crate::error::{HerlError, Result};
use crate::hypmath::HypConfig;
use crate::losses::{LossConfig, LossToggles};
use crate::netmodel::{ModelSpec, DEFAULT_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,

    pub warmup: usize,
    pub xi: f64,
    pub sigma: f64,
    pub walk_steps: usize,

    pub tau: f64,
    pub tau_hyp: f64,
    pub beta: f64,
    pub alpha_final: f64,
    pub use_ang: bool,
    pub use_dis: bool,
    pub use_pro: bool,

    pub c: f64,
    pub cr: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// 0 means one prototype per cluster.
    pub prototypes: usize,
    pub prototype_softmax: bool,

    /// 0 means the number of classes in the labels.
    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let graph = GraphConfig::default();
        let loss = LossConfig::default();
        let km = KMeansConfig::default();
        RunConfig {
            seed: 0,
            epochs: 500,
            batch_size: 1024,
            lr: 2e-3,
            momentum: DEFAULT_MOMENTUM,
            warmup: graph.warmup_epochs,
            xi: graph.xi,
            sigma: graph.sigma,
            walk_steps: graph.t,
            tau: loss.tau,
            tau_hyp: loss.tau_hyp,
            beta: loss.beta,
            alpha_final: loss.alpha_final,
            use_ang: true,
            use_dis: true,
            use_pro: true,
            c: 0.1,
            cr: 2.0,
            hidden: vec![64],
            embed_dim: 32,
            prototypes: 0,
            prototype_softmax: false,
            clusters: 0,
            kmeans_restarts: km.restarts,
            kmeans_max_iter: km.max_iter,
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HerlError::config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HerlError::config(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HerlError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` when given, otherwise starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| HerlError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HerlError::config("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HerlError::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(HerlError::config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        self.graph().validate()?;
        self.loss().validate()?;
        self.hyp()?;
        if self.kmeans_restarts == 0 || self.kmeans_max_iter == 0 {
            return Err(HerlError::config("kmeans_restarts and kmeans_max_iter must be >= 1"));
        }
        Ok(())
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            sigma: self.sigma,
            t: self.walk_steps,
            xi: self.xi,
            warmup_epochs: self.warmup,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            tau_hyp: self.tau_hyp,
            beta: self.beta,
            alpha_final: self.alpha_final,
        }
    }

    pub fn toggles(&self) -> LossToggles {
        LossToggles {
            ang: self.use_ang,
            dis: self.use_dis,
            pro: self.use_pro,
        }
    }

    pub fn hyp(&self) -> Result<HypConfig> {
        HypConfig::new(self.c, self.cr)
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            restarts: self.kmeans_restarts,
            max_iter: self.kmeans_max_iter,
        }
    }

    pub fn cluster_count(&self, classes: usize) -> usize {
        if self.clusters == 0 {
            classes
        } else {
            self.clusters
        }
    }

    pub fn model_spec(&self, input_dims: Vec<usize>, classes: usize) -> Result<ModelSpec> {
        let prototypes = if self.prototypes == 0 {
            self.cluster_count(classes)
        } else {
            self.prototypes
        };
        Ok(ModelSpec {
            input_dims,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            prototypes,
            hyp: self.hyp()?,
            seed: self.seed,
            prototype_softmax: self.prototype_softmax,
        })
    }
}
