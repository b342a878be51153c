//! Option pricing under the Stein-Stein stochastic volatility model with
//! particle filtering and log-homotopy particle transport.
//!
//! The estimators condition the price of a European call on an observed
//! log-price path:
//!
//! - [`mc`]: plain Monte Carlo over unconditioned paths;
//! - [`filter`]: bootstrap particle filter;
//! - [`flow`]: homotopy transport of an unweighted cloud;
//! - [`reweight`]: homotopy transport followed by likelihood reweighting.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`). The `*64`
//! and `*32` aliases below fix the scalar type.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod filter;
pub mod flow;
pub mod mc;
pub mod model;
pub mod numeric;
pub mod reference;
pub mod reweight;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use experiment::{
    generate_market_path, run_experiment, ExperimentConfig, ExperimentOutput, MarketPath,
};
pub use filter::{pf_init, pf_price, pf_step, FilterConfig, MaturityWeights, ParticleCloud};
pub use flow::{
    flow_velocity, homotopy_price, prior_hessian_estimate, transport_cloud, CovarianceRefresh,
    FlowVariant, HomotopySchedule, LambdaEvaluation, LambdaSpacing, TransportConfig,
    TransportDiagnostics,
};
pub use mc::mc_price;
pub use model::{Observation, StatePoint, StateSpaceModel, SteinSteinModel, SteinSteinParams};
pub use numeric::{ParticleStreams, RandomStream};
pub use reweight::{rw_price, rw_step, RwConfig, RwMaturity, TransportWeightLedger};
pub use scalar::Real;
pub use stats::{
    compute_report, discounted_call_payoff, EstimatorReport, Method, ReportRow, ReportStats,
};

pub type SteinSteinParams64 = SteinSteinParams<f64>;
pub type SteinSteinParams32 = SteinSteinParams<f32>;
pub type SteinSteinModel64 = SteinSteinModel<f64>;
pub type SteinSteinModel32 = SteinSteinModel<f32>;
pub type ParticleCloud64 = ParticleCloud<f64>;
pub type ParticleCloud32 = ParticleCloud<f32>;
pub type HomotopySchedule64 = HomotopySchedule<f64>;
pub type HomotopySchedule32 = HomotopySchedule<f32>;
pub type TransportWeightLedger64 = TransportWeightLedger<f64>;
pub type TransportWeightLedger32 = TransportWeightLedger<f32>;
