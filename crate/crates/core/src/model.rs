//! State-space model abstraction and the Stein-Stein stochastic volatility
//! instance.
//!
//! The hidden state is the volatility `X_t` (an unconstrained Ornstein-Uhlenbeck
//! process, negative values allowed) and the observation is the log-price
//! `Y_t = log S_t`. Both are discretised with Euler-Maruyama; the return over
//! `(t-1, t]` is driven by the previous-step volatility, so the one-step
//! likelihood is a Gaussian in `Y_t` whose mean and variance depend on
//! `X_{t-1}`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{finite_difference, FdOrder};
use crate::scalar::Real;

/// Below this magnitude the likelihood variance `x²Δt` is treated as zero.
pub const ZERO_VOL_GUARD: f64 = 1e-10;
/// Floor (and mirrored ceiling) for log-densities of degenerate Gaussians.
pub const LOG_DENSITY_FLOOR: f64 = -1e10;

/// Model and market constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteinSteinParams<T> {
    pub mu: T,
    pub kappa: T,
    pub theta: T,
    pub sigma: T,
    pub r: T,
    pub s0: T,
    pub strike: T,
    pub maturity: T,
    pub v0: T,
    pub dividend: T,
    /// `maturity / n_steps`.
    pub dt: T,
    pub n_steps: usize,
}

/// On-disk form of [`SteinSteinParams`]. `dt` is derived, never read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub r: f64,
    pub s0: f64,
    pub strike: f64,
    pub maturity: f64,
    pub v0: f64,
    pub dividend: f64,
    pub n_steps: usize,
}

impl ParamsFile {
    pub fn into_params<T: Real>(self) -> Result<SteinSteinParams<T>> {
        SteinSteinParams::new(
            T::lit(self.mu),
            T::lit(self.kappa),
            T::lit(self.theta),
            T::lit(self.sigma),
            T::lit(self.r),
            T::lit(self.s0),
            T::lit(self.strike),
            T::lit(self.maturity),
            T::lit(self.v0),
            T::lit(self.dividend),
            self.n_steps,
        )
    }
}

impl<T: Real> SteinSteinParams<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mu: T,
        kappa: T,
        theta: T,
        sigma: T,
        r: T,
        s0: T,
        strike: T,
        maturity: T,
        v0: T,
        dividend: T,
        n_steps: usize,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidParams("n_steps must be at least 1".into()));
        }
        let dt = maturity / T::from_usize(n_steps).expect("step count fits in scalar");
        let p = Self {
            mu,
            kappa,
            theta,
            sigma,
            r,
            s0,
            strike,
            maturity,
            v0,
            dividend,
            dt,
            n_steps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Stein-Stein call benchmark: S₀ = 100, K = 90, r = μ = 0.0953, σ = 0.2,
    /// κ = 4, θ = 0.25, V₀ = 0.25, T = 1/2, d = 0, 64 steps.
    pub fn benchmark() -> Self {
        Self::new(
            T::lit(0.0953),
            T::lit(4.0),
            T::lit(0.25),
            T::lit(0.2),
            T::lit(0.0953),
            T::lit(100.0),
            T::lit(90.0),
            T::lit(0.5),
            T::lit(0.25),
            T::zero(),
            64,
        )
        .expect("benchmark parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu", self.mu),
            ("kappa", self.kappa),
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("r", self.r),
            ("s0", self.s0),
            ("strike", self.strike),
            ("maturity", self.maturity),
            ("v0", self.v0),
            ("dividend", self.dividend),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("{name} is not finite")));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidParams("n_steps must be at least 1".into()));
        }
        if !(self.maturity > T::zero()) || !(self.dt > T::zero()) {
            return Err(Error::InvalidParams(
                "maturity and dt must be positive".into(),
            ));
        }
        if !(self.sigma > T::zero()) {
            return Err(Error::InvalidParams("sigma must be positive".into()));
        }
        if !(self.strike > T::zero()) || !(self.s0 > T::zero()) {
            return Err(Error::InvalidParams(
                "strike and s0 must be positive".into(),
            ));
        }
        let n = T::from_usize(self.n_steps).expect("step count fits in scalar");
        let span = self.dt * n;
        if (span - self.maturity).abs() > self.maturity * T::epsilon() * T::lit(2.0) {
            return Err(Error::InvalidParams(
                "dt * n_steps must equal maturity".into(),
            ));
        }
        Ok(())
    }

    /// Same parameters with a different step count (`dt` re-derived).
    pub fn with_steps(&self, n_steps: usize) -> Result<Self> {
        Self::new(
            self.mu,
            self.kappa,
            self.theta,
            self.sigma,
            self.r,
            self.s0,
            self.strike,
            self.maturity,
            self.v0,
            self.dividend,
            n_steps,
        )
    }

    pub fn to_file(&self) -> ParamsFile {
        ParamsFile {
            mu: self.mu.to_f64_lossy(),
            kappa: self.kappa.to_f64_lossy(),
            theta: self.theta.to_f64_lossy(),
            sigma: self.sigma.to_f64_lossy(),
            r: self.r.to_f64_lossy(),
            s0: self.s0.to_f64_lossy(),
            strike: self.strike.to_f64_lossy(),
            maturity: self.maturity.to_f64_lossy(),
            v0: self.v0.to_f64_lossy(),
            dividend: self.dividend.to_f64_lossy(),
            n_steps: self.n_steps,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: ParamsFile = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        file.into_params()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Log-return drift per unit time, `μ − d`.
    #[inline]
    pub fn drift(&self) -> T {
        self.mu - self.dividend
    }

    #[inline]
    pub fn discount(&self) -> T {
        (-self.r * self.maturity).exp()
    }
}

/// One particle's joint state.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct StatePoint<T> {
    /// Volatility `X_t`.
    pub x: T,
    /// Log-price `Y_t`.
    pub y: T,
}

/// The pair of observed log-prices a one-step likelihood conditions on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation<T> {
    pub prev: T,
    pub current: T,
}

/// Which hidden state the time-`t` observation depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikelihoodTiming {
    /// `Y_t` depends on `X_{t-1}` (Euler-discretised stochastic volatility).
    Previous,
    /// `Y_t` depends on `X_t`.
    Current,
}

/// Hidden-process / measurement-process pair.
///
/// Randomness enters only through caller-supplied standard normal draws, so
/// every method is a pure function of its arguments.
pub trait StateSpaceModel<T: Real>: Sync {
    fn dim(&self) -> usize {
        1
    }

    fn timing(&self) -> LikelihoodTiming;

    /// Draw from the prior `p₀` given one standard normal variate.
    fn initial_state(&self, draw: T) -> StatePoint<T>;

    /// One transition of the joint state.
    fn propagate(&self, prev: StatePoint<T>, eps: T, eta: T) -> StatePoint<T>;

    fn transition_logdensity(&self, x_prev: T, x_next: T) -> T;

    /// `log ρ(obs.current | x, obs.prev)`.
    fn likelihood_logdensity(&self, x: T, obs: Observation<T>) -> T;

    /// `∂/∂x log ρ`. The default is a central finite difference.
    fn loglik_gradient(&self, x: T, obs: Observation<T>) -> Result<T> {
        let h = T::lit(1e-5) * (T::one() + x.abs());
        finite_difference(|z| self.likelihood_logdensity(z, obs), x, FdOrder::First, h)
    }

    /// `∂²/∂x² log ρ`. The default is a central finite difference.
    fn loglik_hessian(&self, x: T, obs: Observation<T>) -> Result<T> {
        let h = T::lit(1e-4) * (T::one() + x.abs());
        finite_difference(
            |z| self.likelihood_logdensity(z, obs),
            x,
            FdOrder::Second,
            h,
        )
    }
}

/// Euler-Maruyama step of the joint (volatility, log-price) state.
pub fn euler_step<T: Real>(
    params: &SteinSteinParams<T>,
    prev: StatePoint<T>,
    eps: T,
    eta: T,
) -> StatePoint<T> {
    let sqrt_dt = params.dt.sqrt();
    let x = prev.x;
    let half = T::lit(0.5);
    StatePoint {
        y: prev.y + (params.drift() - half * x * x) * params.dt + x * sqrt_dt * eps,
        x: x + params.kappa * (params.theta - x) * params.dt + params.sigma * sqrt_dt * eta,
    }
}

fn gaussian_logpdf<T: Real>(z: T, mean: T, var: T) -> T {
    let d = z - mean;
    -T::lit(0.5) * (T::lit(2.0 * PI) * var).ln() - d * d / (T::lit(2.0) * var)
}

/// Log transition density of the volatility,
/// `N(x_next; x_prev + κ(θ − x_prev)Δt, σ²Δt)`.
pub fn transition_logdensity<T: Real>(params: &SteinSteinParams<T>, x_prev: T, x_next: T) -> T {
    let mean = x_prev + params.kappa * (params.theta - x_prev) * params.dt;
    let var = params.sigma * params.sigma * params.dt;
    gaussian_logpdf(x_next, mean, var)
}

/// Mean `m = y_prev + (μ − d − x²/2)Δt` and variance `x²Δt` of the next
/// log-price given the previous volatility.
#[inline]
pub fn likelihood_moments<T: Real>(params: &SteinSteinParams<T>, x_prev: T, y_prev: T) -> (T, T) {
    let m = y_prev + (params.drift() - T::lit(0.5) * x_prev * x_prev) * params.dt;
    (m, x_prev * x_prev * params.dt)
}

/// One-step log-likelihood `log N(y_obs; m(x_prev), x_prev²Δt)`.
///
/// For `|x_prev| < 1e-10` the Gaussian is degenerate: the result is the floor
/// `-1e10`, or `+1e10` if `y_obs` sits exactly on the mean.
pub fn likelihood_logdensity<T: Real>(
    params: &SteinSteinParams<T>,
    x_prev: T,
    y_prev: T,
    y_obs: T,
) -> T {
    let (m, var) = likelihood_moments(params, x_prev, y_prev);
    if x_prev.abs() < T::lit(ZERO_VOL_GUARD) {
        return if y_obs == m {
            -T::lit(LOG_DENSITY_FLOOR)
        } else {
            T::lit(LOG_DENSITY_FLOOR)
        };
    }
    gaussian_logpdf(y_obs, m, var).max(T::lit(LOG_DENSITY_FLOOR))
}

fn check_vol<T: Real>(x: T) -> Result<()> {
    if x.abs() < T::lit(ZERO_VOL_GUARD) || !x.is_finite() {
        Err(Error::SingularVariance(x.to_f64_lossy()))
    } else {
        Ok(())
    }
}

/// Pieces of the negative log-likelihood `ψ = (Y−m)²/(2σᵖ) + ½log σᵖ`
/// needed by its first two derivatives: `u/v` is the residual part of
/// `∂ψ/∂x` (times −2) and `u'`, `v'` feed the quotient rule.
struct ResidualTerms<T> {
    u: T,
    du: T,
    v: T,
    dv: T,
}

fn residual_terms<T: Real>(
    params: &SteinSteinParams<T>,
    x: T,
    y_prev: T,
    y_obs: T,
) -> ResidualTerms<T> {
    let dt = params.dt;
    let two = T::lit(2.0);
    let (m, var) = likelihood_moments(params, x, y_prev);
    let res = y_obs - m;
    let grad_m = -x * dt;
    let grad_var = two * x * dt;
    // w = 2σᵖ∇m + (Y−m)∇σᵖ = −2x³Δt² + 2(Y−m)xΔt
    let w = two * var * grad_m + res * grad_var;
    let d_res = -grad_m;
    let dw = -T::lit(6.0) * x * x * dt * dt + two * dt * (res + x * d_res);
    ResidualTerms {
        u: res * w,
        du: d_res * w + res * dw,
        v: var * var,
        dv: T::lit(4.0) * x * x * x * dt * dt,
    }
}

/// `∂/∂x log ρ` at `x_prev`, i.e. `−∂ψ/∂x` with
/// `∂ψ/∂x = ½(∇σᵖ/σᵖ − (Y−m)(2σᵖ∇m + (Y−m)∇σᵖ)/σᵖ²)`, `∇m = −xΔt`,
/// `∇σᵖ = 2xΔt`.
pub fn loglik_gradient<T: Real>(
    params: &SteinSteinParams<T>,
    x_prev: T,
    y_prev: T,
    y_obs: T,
) -> Result<T> {
    check_vol(x_prev)?;
    let half = T::lit(0.5);
    let (_, var) = likelihood_moments(params, x_prev, y_prev);
    let grad_var = T::lit(2.0) * x_prev * params.dt;
    let t = residual_terms(params, x_prev, y_prev, y_obs);
    let dpsi = half * (grad_var / var - t.u / t.v);
    Ok(-dpsi)
}

/// `∂²/∂x² log ρ` at `x_prev`: the log-variance curvature `d²/dx²[−½log(x²Δt)]
/// = 1/x²` plus the residual part via the quotient rule `(u'v − v'u)/v²`.
pub fn loglik_hessian<T: Real>(
    params: &SteinSteinParams<T>,
    x_prev: T,
    y_prev: T,
    y_obs: T,
) -> Result<T> {
    check_vol(x_prev)?;
    let t = residual_terms(params, x_prev, y_prev, y_obs);
    let log_var_curv = T::one() / (x_prev * x_prev);
    let residual_curv = T::lit(0.5) * (t.du * t.v - t.dv * t.u) / (t.v * t.v);
    Ok(log_var_curv + residual_curv)
}

/// The Stein-Stein model bound to its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteinSteinModel<T> {
    pub params: SteinSteinParams<T>,
}

impl<T: Real> SteinSteinModel<T> {
    pub fn new(params: SteinSteinParams<T>) -> Self {
        Self { params }
    }
}

impl<T: Real> StateSpaceModel<T> for SteinSteinModel<T> {
    fn timing(&self) -> LikelihoodTiming {
        LikelihoodTiming::Previous
    }

    /// Degenerate prior: every particle starts at `(V₀, log S₀)`.
    fn initial_state(&self, _draw: T) -> StatePoint<T> {
        StatePoint {
            x: self.params.v0,
            y: self.params.s0.ln(),
        }
    }

    fn propagate(&self, prev: StatePoint<T>, eps: T, eta: T) -> StatePoint<T> {
        euler_step(&self.params, prev, eps, eta)
    }

    fn transition_logdensity(&self, x_prev: T, x_next: T) -> T {
        transition_logdensity(&self.params, x_prev, x_next)
    }

    fn likelihood_logdensity(&self, x: T, obs: Observation<T>) -> T {
        likelihood_logdensity(&self.params, x, obs.prev, obs.current)
    }

    fn loglik_gradient(&self, x: T, obs: Observation<T>) -> Result<T> {
        loglik_gradient(&self.params, x, obs.prev, obs.current)
    }

    fn loglik_hessian(&self, x: T, obs: Observation<T>) -> Result<T> {
        loglik_hessian(&self.params, x, obs.prev, obs.current)
    }
}
