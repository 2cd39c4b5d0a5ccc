//! Volume, atlas, and cohort-manifest file formats plus the
//! normalization and augmentation used by the training pipeline.
//!
//! Volumes use a custom binary container (`XVOL0001` magic, little-endian
//! header, raw payload) so round trips are bit-exact. Atlas label tables
//! live in a plain-text sidecar next to the payload.

mod augment;
mod manifest;
mod normalize;
mod volume;

pub use augment::{augment, AugmentConfig};
pub use manifest::{load_manifest, save_manifest, CohortManifest, Group, ManifestRecord, Stage};
pub use normalize::{
    minmax_normalize, minmax_normalized, zscore_destandardize, zscore_standardize, StandardizeStats,
};
pub use volume::{
    read_atlas, read_volume, write_atlas, write_volume, Atlas, DType, Volume, VolumeHeader,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic number in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: String },
    #[error("truncated payload in {path}: expected {expected} values, got {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("header dims {dims:?} overflow the addressable volume size")]
    DimOverflow { dims: [u32; 3] },
    #[error("invalid header field: {0}")]
    InvalidHeader(String),
    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DTypeMismatch {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("manifest parse error at {path}:{line}: {message}")]
    ManifestParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("manifest entry {id}/{stage}: unresolvable path {path}")]
    UnresolvablePath {
        id: String,
        stage: String,
        path: String,
    },
    #[error("duplicate manifest entry for subject {id} stage {stage}")]
    DuplicateEntry { id: String, stage: String },
    #[error("atlas label {label} missing from label table")]
    MissingLabel { label: i32 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, IoError>;
