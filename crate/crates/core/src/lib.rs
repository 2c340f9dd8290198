//! Transfer learning with multiple sources through convolved Gaussian
//! processes: block-structured covariance, penalized fitting with source
//! selection, domain-mismatch handling and the benchmark scenarios.

pub mod bench;
pub mod covblock;
pub mod dame;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod train;

pub use bench::{
    bgcp_combine, generate_case1, generate_case2, generate_case3, run_benchmark, BenchConfig, BenchResult, Case,
    Method, Scenario, ScenarioSpec,
};
pub use covblock::{
    assemble_covariance, dense_log_likelihood, log_likelihood_schur, log_likelihood_with_gradient,
    marginalize_sources, predict, CovarianceBundle, Jitter, OutputData, PredictiveDistribution, Role,
    TransferData,
};
pub use dame::{
    adapt_source, expand, expand_with, marginalize, select_bandwidth, BandwidthChoice, DameConfig, DomainSpec,
    ExpansionNoise, InducedSet, UniqueValues,
};
pub use error::{MgcpError, Result};
pub use kernels::{cov_auto_source, cov_auto_target, cov_cross, smoothing_kernel_eval, KernelParams};
pub use linalg::{Cholesky, Matrix};
pub use params::{Hyperparameters, ParamLayout, SharedKernels, SourceParams};
pub use scalar::Real;
pub use seed::derive_seed;
pub use train::{
    fit, huber_l1, objective_gradient, penalized_objective, select_gamma, CvRow, FitResult, PenaltyMode,
    TrainConfig,
};

pub type Matrix64 = Matrix<f64>;
pub type KernelParams64 = KernelParams<f64>;
pub type Hyperparameters64 = Hyperparameters<f64>;
pub type TransferData64 = TransferData<f64>;
pub type OutputData64 = OutputData<f64>;
pub type CovarianceBundle64 = CovarianceBundle<f64>;
pub type FitResult64 = FitResult<f64>;
