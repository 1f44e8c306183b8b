//! GBP Learning: training and prediction in deep Gaussian factor graphs.
//!
//! Inputs, activations, and parameters are all scalar random variables in one
//! factor graph; Gaussian Belief Propagation (GBP) infers their marginals, so
//! both training and prediction are the same inference procedure and continual
//! learning is Bayesian filtering of the parameter posterior.
//!
//! Module map:
//! - [`gaussian`]/[`linalg`]: natural-parameter Gaussians and the small dense
//!   kernels behind factor updates.
//! - [`factor`]: the factor energy catalogue (measurements, Jacobians, robust
//!   reweighting, linearization).
//! - [`graph`]: bipartite topology, per-edge messages, beliefs.
//! - [`engine`]: message passing — naive and Woodbury fast paths, damping,
//!   dropout, schedules.
//! - [`layers`]: layer specs and the model builder (parameters shared across
//!   a batch, activations replicated per datapoint).
//! - [`learning`]: filtering-based training, prior interpolation, prediction,
//!   video denoising.
//! - [`data`]: IDX / portable-anymap / CSV ingestion, splits, batching.
//! - [`synth`]: seeded synthetic datasets for the paper's experiments.
//! - [`baseline`]: linear least-squares baselines used by acceptance gates.
//! - [`oracle`]: reference implementations (dense joint solves, finite
//!   differences, conjugate posteriors) used for validation.
//!
//! All numerics are generic over the scalar type [`Real`]; use [`Real64`]
//! (acceptance grade) or [`Real32`].

pub mod baseline;
pub mod data;
pub mod engine;
pub mod error;
pub mod factor;
pub mod gaussian;
pub mod graph;
pub mod layers;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod real;
pub mod synth;

pub use data::{load_idx, load_image, save_image, Dataset, Image};
pub use engine::{run_inference, EngineConfig, EngineStats, InferenceResult, Schedule};
pub use error::{CoreError, Result};
pub use gaussian::GaussianInfo;
pub use layers::{build_model, BuildOptions, LayerKind, LayerSpec, ModelSpec, ModelVars, Shape};
pub use learning::{
    argmax_class, corrupt_salt_pepper, denoise_video, interpolate_prior, predict,
    predict_chunked, psnr, train_filtering, DenoiseMode, DriverConfig, FrameResult,
    LayerPosterior, ParamPosterior, TaskBatch, TaskSequence,
};
pub use real::Real;

/// Acceptance-grade scalar (64-bit); all paper experiments run in this type.
pub type Real64 = f64;
/// Reduced-precision scalar available as a configuration option.
pub type Real32 = f32;
