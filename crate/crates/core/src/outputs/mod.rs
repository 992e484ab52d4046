//! Reporting artifacts derived from fits and datasets.

pub mod ellipse;
pub mod render;
pub mod scene;
pub mod tables;
pub mod weights;

use thiserror::Error;

use crate::data::DataError;

pub use ellipse::{credible_ellipse, Ellipse};
pub use render::{render, OutputFormat, Renderable};
pub use scene::{sroc_scene, sroc_scene_groups, subgroup_scene, SceneOptions, SrocScene};
pub use tables::{forest_data, prevalence_tree, ForestData, ForestOrder, HsrocRecord, TreeCounts, TreeOrdering};
pub use weights::{study_weights, WeightTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OutputError {
    #[error("point cloud has a singular covariance")]
    DegenerateCloud,
    #[error("at least {needed} points are required, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("level {0} must lie in (0, 1)")]
    BadLevel(f64),
    #[error("QUADAS overlay requested but the dataset has no QUADAS ratings")]
    MissingQuadas,
    #[error("unsupported format {0:?}")]
    UnsupportedFormat(String),
    #[error("fit has no parameter {0}")]
    MissingParameter(String),
    #[error("study weights need a bivariate fit")]
    NotBivariate,
    #[error("study {0} is not in the dataset")]
    UnknownStudy(String),
    #[error("no fitted group to plot")]
    NothingToPlot,
    #[error("{0}")]
    BadInput(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
