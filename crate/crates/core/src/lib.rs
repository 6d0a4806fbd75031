//! Poincare-ball contrastive features for clustering multi-view data with
//! missing views, plus tools for embedding regular trees in the disk.

pub mod ablation;
pub mod error;
pub mod hypmath;
pub mod treebed;
pub mod clustereval;
pub mod config;
pub mod dataio;
pub mod diffeng;
pub mod affinity;
pub mod gradsuite;
pub mod impute;
pub mod losses;
pub mod netmodel;
pub mod train;

pub use error::{HerlError, Result};
