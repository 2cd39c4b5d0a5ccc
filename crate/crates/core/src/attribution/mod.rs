//! Local attribution methods for volumetric classifiers plus PCA
//! globalization of cohort saliency maps.
//!
//! All path/coalition methods use the zero volume ("black") as baseline
//! and attribute the pre-softmax logit of the chosen class.

mod globalize;
mod kernel_shap;
mod methods;

pub use globalize::{globalize, GlobalizationResult};
pub use kernel_shap::kernel_shap;
pub use methods::{
    grad_cam, gradient_shap, guided_backprop, guided_grad_cam, input_x_gradient,
    integrated_gradients,
};

use std::fmt;

use thiserror::Error;

use crate::io::VolumeHeader;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("class {class} out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },
    #[error("integrated gradients needs at least 2 steps, got {0}")]
    InvalidSteps(usize),
    #[error("kernel SHAP needs at least {needed} coalitions for {groups} groups, got {got}")]
    InsufficientCoalitions {
        needed: usize,
        groups: usize,
        got: usize,
    },
    #[error("singular weighted least-squares system; draw more coalitions")]
    SingularSystem,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("globalization needs at least 4 maps, got {0}")]
    TooFewMaps(usize),
    #[error("no faithfulness weight supplied for method {0}")]
    MissingWeight(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Latent(#[from] crate::latent::LatentError),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

/// The attribution method that produced a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    InputXGradient,
    IntegratedGradients,
    GradientShap,
    GuidedBackprop,
    GradCam,
    GuidedGradCam,
    KernelShap,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::InputXGradient,
        Method::IntegratedGradients,
        Method::GradientShap,
        Method::GuidedBackprop,
        Method::GradCam,
        Method::GuidedGradCam,
        Method::KernelShap,
    ];

    /// The six local methods evaluated as baselines (Grad-CAM itself is an
    /// intermediate of guided Grad-CAM).
    pub const BASELINES: [Method; 6] = [
        Method::InputXGradient,
        Method::IntegratedGradients,
        Method::GradientShap,
        Method::GuidedBackprop,
        Method::GuidedGradCam,
        Method::KernelShap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::InputXGradient => "input_x_gradient",
            Method::IntegratedGradients => "integrated_gradients",
            Method::GradientShap => "gradient_shap",
            Method::GuidedBackprop => "guided_backprop",
            Method::GradCam => "grad_cam",
            Method::GuidedGradCam => "guided_grad_cam",
            Method::KernelShap => "kernel_shap",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-voxel relevance scores produced by one method for one input and
/// one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub header: VolumeHeader,
    pub values: Vec<f32>,
    pub method: Method,
    pub target_class: usize,
    pub subject_id: String,
}

impl AttributionMap {
    pub fn with_subject(mut self, id: &str) -> AttributionMap {
        self.subject_id = id.to_string();
        self
    }

    pub fn to_volume(&self) -> crate::io::Volume {
        crate::io::Volume {
            header: self.header.clone(),
            voxels: self.values.clone(),
        }
    }
}
