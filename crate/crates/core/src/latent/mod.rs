//! Latent-space feature engineering: PCA over voxel cohorts, voxel-wise
//! Euclidean/cosine variability maps, and atlas-based region selection.

mod maps;
mod matrix;
mod pca;
mod regions;

pub use maps::{
    cosine_map, euclidean_map, first_component_group_comparison, global_variability, project_group,
    MapKind, ProjectedGroup, VariabilityMap,
};
pub use matrix::{CohortMatrix, RowLabel};
pub use pca::{fit_pca, select_k_by_variance, PcaBasis};
pub use regions::{
    percentile_linear, significant_regions_cosine, significant_regions_euclidean, RegionReport,
    RegionRow,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("component count {k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },
    #[error("requested {requested} components but the data rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("cohort needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("projected groups come from different PCA bases")]
    BasisMismatch,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("duplicate cohort row for {0}")]
    LabelCollision(String),
    #[error("map kind mismatch: expected {expected}, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

pub type Result<T> = std::result::Result<T, LatentError>;
