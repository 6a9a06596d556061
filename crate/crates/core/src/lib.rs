//! Linear mixed models with conditional AIC selection and post-selection
//! confidence intervals.

pub mod caic;
pub mod ci;
pub mod dataset;
pub mod error;
pub mod io;
pub mod lmm;
pub mod region;
pub mod rng;
pub mod scalar;
pub mod tmvn;
pub mod variance;

pub use ci::{IntervalMethod, IntervalResult};
pub use caic::{select_model, BiasMethod, CandidateSet, CandidateStructure, SelectionResult};
pub use dataset::{Cluster, ClusteredDataset, ModelSpec};
pub use error::{LmmError, Result};
pub use lmm::{FitOptions, FittedLmm, KBlocks, Method, MixedTarget};
pub use region::{ConstraintSet, QuadraticConstraint, Sense, SigmaEstimate};
pub use scalar::Scalar;
pub use tmvn::{SampleBatch, SamplerConfig, SamplerMethod};
pub use variance::{VarianceParams, VarianceStructure};

pub type Dataset = ClusteredDataset<f64>;
pub type Fit = FittedLmm<f64>;
pub type Variance = VarianceParams<f64>;
pub type Structure = VarianceStructure<f64>;
pub type Target = MixedTarget<f64>;
pub type Selection = SelectionResult<f64>;
pub type Dataset32 = ClusteredDataset<f32>;
pub type Fit32 = FittedLmm<f32>;
pub type Variance32 = VarianceParams<f32>;
