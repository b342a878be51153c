//! Log-homotopy particle flow.
//!
//! The posterior at pseudo-time `λ ∈ [0, 1]` is `p_λ ∝ g·h^λ` (prior `g`,
//! likelihood `h`). Each particle moves along
//!
//! ```text
//! dx/dλ = −(∇² log g + λ ∇² log h)⁻¹ ∇ log h
//! ```
//!
//! integrated with explicit Euler steps over a λ grid. The prior Hessian is
//! estimated from the cloud as `−1/S`, with `S` its sample variance.
//!
//! By default `S` is frozen at `λ = 0` and the likelihood gradient is
//! evaluated relative to the cloud mean,
//! `∇ log h(xᵢ) − ½ ∇² log h(xᵢ)(xᵢ − x̄)`. For a linear-Gaussian likelihood this
//! moves the cloud mean and variance exactly along the Bayes posterior path.
//! [`FlowVariant::Plain`] and [`CovarianceRefresh::EveryStep`] give the
//! uncorrected flow.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{mutate, observations, ParticleCloud, PAR_MIN_LEN};
use crate::model::{Observation, StateSpaceModel, SteinSteinModel, SteinSteinParams};
use crate::numeric::{mean, sample_covariance, ParticleStreams, RandomStream};
use crate::scalar::Real;
use crate::stats::weighted_call_price;

/// Floor on the sample variance behind the prior Hessian.
pub const COVARIANCE_FLOOR: f64 = 1e-8;
/// `|H|` at or below this is treated as singular by [`flow_velocity`].
pub const SINGULAR_HESSIAN: f64 = 1e-12;
/// Relative margin by which the total curvature must be negative.
const CURVATURE_MARGIN: f64 = 1e-6;

/// Strictly increasing pseudo-time grid `0 = λ₀ < … < λ_K = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HomotopySchedule<T> {
    grid: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum LambdaSpacing {
    #[default]
    Uniform,
    /// Step sizes grow by `ratio` per step, so the grid is finest near 0.
    Geometric { ratio: f64 },
}

impl<T: Real> HomotopySchedule<T> {
    pub fn new(steps: usize, spacing: LambdaSpacing) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParams(
                "homotopy needs at least one lambda step".into(),
            ));
        }
        let k = steps as f64;
        let raw: Vec<f64> = match spacing {
            LambdaSpacing::Uniform => (0..=steps).map(|i| i as f64 / k).collect(),
            LambdaSpacing::Geometric { ratio } => {
                if !(ratio > 1.0 && ratio.is_finite()) {
                    return Err(Error::InvalidParams("geometric ratio must exceed 1".into()));
                }
                let total = ratio.powf(k) - 1.0;
                (0..=steps)
                    .map(|i| (ratio.powi(i as i32) - 1.0) / total)
                    .collect()
            }
        };
        let mut grid: Vec<T> = raw.into_iter().map(T::lit).collect();
        grid[0] = T::zero();
        grid[steps] = T::one();
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParams(
                "lambda grid is not strictly increasing".into(),
            ));
        }
        Ok(Self { grid })
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        Self::new(steps, LambdaSpacing::Uniform)
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CovarianceRefresh {
    /// Prior Hessian estimated once from the cloud at `λ = 0`.
    #[default]
    Frozen,
    /// Re-estimated from the current cloud before every λ step.
    EveryStep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowVariant {
    /// Gradient taken relative to the cloud mean.
    #[default]
    Centered,
    /// Raw likelihood gradient at each particle.
    Plain,
}

/// Where in each λ step the velocity is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LambdaEvaluation {
    /// At `λ_{k+1}`: pseudo-time is advanced before the flow is computed.
    /// For a linear-Gaussian likelihood the cloud mean then telescopes onto
    /// the exact posterior mean for any grid.
    #[default]
    StepEnd,
    /// At `λ_k` (textbook explicit Euler).
    StepStart,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransportConfig {
    pub lambda_steps: usize,
    pub spacing: LambdaSpacing,
    pub evaluation: LambdaEvaluation,
    pub refresh: CovarianceRefresh,
    pub variant: FlowVariant,
    /// Accumulate `log |∂x_final/∂x_initial|` per particle.
    pub track_jacobian: bool,
    /// Record the cloud variance after each λ step.
    pub trace_variance: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            lambda_steps: 20,
            spacing: LambdaSpacing::Uniform,
            evaluation: LambdaEvaluation::StepEnd,
            refresh: CovarianceRefresh::Frozen,
            variant: FlowVariant::Centered,
            track_jacobian: false,
            trace_variance: false,
        }
    }
}

impl TransportConfig {
    pub fn with_lambda_steps(mut self, steps: usize) -> Self {
        self.lambda_steps = steps;
        self
    }
}

/// Counters and optional traces from one or more transports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransportDiagnostics<T> {
    /// Particle-steps whose total curvature was not safely negative; the
    /// likelihood curvature was dropped for them.
    pub regularized: usize,
    /// Particle-steps whose displacement hit the `√S` cap.
    pub capped: usize,
    /// Particle-steps left in place because the velocity was not finite.
    pub frozen: usize,
    pub log_jacobian: Option<Vec<T>>,
    pub variance: Vec<T>,
}

impl<T: Real> TransportDiagnostics<T> {
    pub fn absorb(&mut self, other: &TransportDiagnostics<T>) {
        self.regularized += other.regularized;
        self.capped += other.capped;
        self.frozen += other.frozen;
    }
}

/// `−1/max(S, 1e-8)` from the sample variance `S` of the positions.
pub fn prior_hessian_estimate<T: Real>(positions: &[T]) -> Result<T> {
    let s = sample_covariance(positions, None)?;
    if !s.is_finite() {
        return Err(Error::NonFinite("cloud variance"));
    }
    Ok(-T::one() / s.max(T::lit(COVARIANCE_FLOOR)))
}

/// Flow velocity `−(H_g + λ H_h)⁻¹ ∇ log h`.
pub fn flow_velocity<T: Real>(prior_hessian: T, lambda: T, grad_l: T, hess_l: T) -> Result<T> {
    let total = prior_hessian + lambda * hess_l;
    if !(total.abs() > T::lit(SINGULAR_HESSIAN)) {
        return Err(Error::SingularHessian(total.to_f64_lossy()));
    }
    Ok(-grad_l / total)
}

struct Velocity<T> {
    v: T,
    regularized: bool,
}

struct FlowStep<'a, T, M> {
    model: &'a M,
    obs: Observation<T>,
    prior_hessian: T,
    lambda: T,
    centre: T,
    variant: FlowVariant,
}

impl<T: Real, M: StateSpaceModel<T>> FlowStep<'_, T, M> {
    fn velocity(&self, x: T) -> Result<Velocity<T>> {
        let gl = self.model.loglik_gradient(x, self.obs)?;
        let hl = self.model.loglik_hessian(x, self.obs)?;
        let total = self.prior_hessian + self.lambda * hl;
        let margin = T::lit(CURVATURE_MARGIN) * self.prior_hessian.abs();
        // A non-concave posterior has no Gaussian flow; fall back to the prior curvature.
        if !(total < -margin) {
            return Ok(Velocity {
                v: flow_velocity(self.prior_hessian, self.lambda, gl, T::zero())?,
                regularized: true,
            });
        }
        let g = match self.variant {
            FlowVariant::Centered => gl - T::lit(0.5) * hl * (x - self.centre),
            FlowVariant::Plain => gl,
        };
        Ok(Velocity {
            v: flow_velocity(self.prior_hessian, self.lambda, g, hl)?,
            regularized: false,
        })
    }
}

#[derive(Default)]
struct Moved<T> {
    dx: T,
    dlogj: T,
    regularized: bool,
    capped: bool,
    frozen: bool,
}

/// Moves the cloud positions from prior to posterior for one observation.
/// Weights are left untouched.
pub fn transport_cloud<T: Real, M: StateSpaceModel<T>>(
    cloud: &mut ParticleCloud<T>,
    obs: Observation<T>,
    model: &M,
    cfg: &TransportConfig,
) -> Result<TransportDiagnostics<T>> {
    let schedule = HomotopySchedule::<T>::new(cfg.lambda_steps, cfg.spacing)?;
    let mut diag = TransportDiagnostics {
        log_jacobian: cfg.track_jacobian.then(|| vec![T::zero(); cloud.len()]),
        ..Default::default()
    };
    let floor = T::lit(COVARIANCE_FLOOR);
    let mut spread = sample_covariance(&cloud.x, None)?.max(floor);
    if !spread.is_finite() {
        return Err(Error::NonFinite("cloud variance"));
    }
    for w in schedule.grid().windows(2) {
        let dl = w[1] - w[0];
        let lambda = match cfg.evaluation {
            LambdaEvaluation::StepEnd => w[1],
            LambdaEvaluation::StepStart => w[0],
        };
        if cfg.refresh == CovarianceRefresh::EveryStep {
            spread = sample_covariance(&cloud.x, None)?.max(floor);
        }
        let step = FlowStep {
            model,
            obs,
            prior_hessian: -T::one() / spread,
            lambda,
            centre: mean(&cloud.x),
            variant: cfg.variant,
        };
        let cap = spread.sqrt();
        let track = cfg.track_jacobian;
        let moved: Vec<Moved<T>> = cloud
            .x
            .par_iter()
            .with_min_len(PAR_MIN_LEN)
            .map(|&x| {
                let Ok(vel) = step.velocity(x) else {
                    return Moved {
                        frozen: true,
                        ..Default::default()
                    };
                };
                let dx = dl * vel.v;
                if !dx.is_finite() {
                    return Moved {
                        frozen: true,
                        ..Default::default()
                    };
                }
                let dlogj = if track {
                    let h = T::lit(1e-6) * (T::one() + x.abs());
                    match (step.velocity(x + h), step.velocity(x - h)) {
                        (Ok(a), Ok(b)) => (T::one() + dl * (a.v - b.v) / (h + h)).abs().ln(),
                        _ => T::zero(),
                    }
                } else {
                    T::zero()
                };
                Moved {
                    dx: dx.max(-cap).min(cap),
                    dlogj,
                    regularized: vel.regularized,
                    capped: dx.abs() > cap,
                    frozen: false,
                }
            })
            .collect();
        for (i, m) in moved.iter().enumerate() {
            cloud.x[i] = cloud.x[i] + m.dx;
            diag.regularized += m.regularized as usize;
            diag.capped += m.capped as usize;
            diag.frozen += m.frozen as usize;
            if let Some(lj) = diag.log_jacobian.as_mut() {
                lj[i] = lj[i] + m.dlogj;
            }
        }
        if cfg.trace_variance {
            diag.variance.push(sample_covariance(&cloud.x, None)?);
        }
    }
    Ok(diag)
}

/// Result of a transport-based run over a whole observation path.
#[derive(Clone, Debug)]
pub struct TransportRun<T> {
    pub cloud: ParticleCloud<T>,
    /// Mean volatility after each step's transport (index 0 is the prior).
    pub filtered_means: Vec<T>,
    pub diagnostics: TransportDiagnostics<T>,
    pub resample_count: usize,
}

/// Unweighted homotopy filter: at each step mutate through the transition
/// kernel, then transport the cloud to the posterior.
pub fn run_homotopy<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    obs: &[Observation<T>],
    cfg: &TransportConfig,
    streams: &mut ParticleStreams,
) -> Result<TransportRun<T>> {
    let mut cloud = crate::filter::pf_init(model, streams)?;
    let mut means = vec![mean(&cloud.x)];
    let mut diagnostics = TransportDiagnostics::default();
    for o in obs {
        mutate(&mut cloud, model, streams);
        let d = transport_cloud(&mut cloud, *o, model, cfg)?;
        diagnostics.absorb(&d);
        means.push(mean(&cloud.x));
    }
    cloud.check_finite()?;
    Ok(TransportRun {
        cloud,
        filtered_means: means,
        diagnostics,
        resample_count: 0,
    })
}

/// Homotopy call price: the equally weighted mean discounted payoff of the
/// transported cloud at maturity.
pub fn homotopy_price<T: Real>(
    params: &SteinSteinParams<T>,
    n_particles: usize,
    y_path: &[T],
    cfg: &TransportConfig,
    rng: &RandomStream,
) -> Result<T> {
    let model = SteinSteinModel::new(*params);
    let obs = observations(params, y_path)?;
    let mut streams = ParticleStreams::new(rng, n_particles);
    let run = run_homotopy(&model, &obs, cfg, &mut streams)?;
    weighted_call_price(params, &run.cloud)
}
