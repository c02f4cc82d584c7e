//! Decoupled data consistency with diffusion purification for linear
//! inverse problems, on analytic Gaussian-mixture priors.
//!
//! Every algorithm is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file fix the scalar type for the common cases.

// `!(a > b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod fidelity;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod operators;
pub mod purify;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod solver;
pub mod tasks;
pub mod score;

pub use error::{Error, Result};
pub use eval::{gaussian_posterior_oracle, mse, psnr, ssim, MetricReport, SsimConfig};
pub use fidelity::{data_fidelity, data_fidelity_latent, FidelityConfig, FidelityOutput};
pub use latent::{make_pca_codec, re_encode, LinearCodec};
pub use linalg::Matrix;
pub use operators::{
    make_blur, make_centered_inpainting, make_downsample, make_inpainting, make_named_blur,
    measure, ImageShape, LinearOperator, Measurement,
};
pub use purify::{dpur, PurifyBackend};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, PurificationSchedule};
pub use solver::{
    dcdp_solve, dcdp_solve_latent, dps_solve, fidelity_only_solve, nfe_counter, DpsConfig,
    LatentApproach, NfeCount, SolveResult, SolverConfig,
};
pub use tasks::{preset_for, ImagePriorSpec, OperatorSpec, Preset};
pub use score::{CountingScore, Covariance, GaussianMixture, GmmScore, ScoreModel};

pub type NoiseSchedule64 = NoiseSchedule<f64>;
pub type NoiseSchedule32 = NoiseSchedule<f32>;
pub type GaussianMixture64 = GaussianMixture<f64>;
pub type GaussianMixture32 = GaussianMixture<f32>;
pub type GmmScore64 = GmmScore<f64>;
pub type GmmScore32 = GmmScore<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type LinearCodec64 = LinearCodec<f64>;
pub type LinearCodec32 = LinearCodec<f32>;
pub type SolverConfig64 = SolverConfig<f64>;
pub type SolverConfig32 = SolverConfig<f32>;
pub type SolveResult64 = SolveResult<f64>;
pub type SolveResult32 = SolveResult<f32>;
