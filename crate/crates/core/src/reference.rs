//! Models with closed-form answers, used to check the estimators.

use crate::error::Result;
use crate::model::{LikelihoodTiming, Observation, StatePoint, StateSpaceModel};
use crate::numeric::RandomStream;
use crate::scalar::Real;

/// Scalar linear-Gaussian state space model:
/// `x_t = a·x_{t−1} + q·η`, `y_t = c·x_t + r·ε`, `x_0 ~ N(m0, p0)`.
///
/// The observation depends on the current state. The `y` component of a
/// particle carries a simulated observation and is otherwise unused.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussian {
    pub a: f64,
    pub q: f64,
    pub c: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        Self {
            a: 0.9,
            q: 0.5,
            c: 1.0,
            r: 0.5,
            m0: 0.0,
            p0: 1.0,
        }
    }
}

impl LinearGaussian {
    /// Simulates `n` observations; returns them with the hidden path `x_1..x_n`.
    pub fn simulate(&self, n: usize, seed: u64) -> (Vec<Observation<f64>>, Vec<f64>) {
        let mut rng = RandomStream::new(seed, 0);
        let mut x = self.m0 + self.p0.sqrt() * rng.normal();
        let mut prev = 0.0;
        let mut obs = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            x = self.a * x + self.q * rng.normal();
            let y = self.c * x + self.r * rng.normal();
            obs.push(Observation { prev, current: y });
            xs.push(x);
            prev = y;
        }
        (obs, xs)
    }

    /// Kalman filter posterior `(mean, variance)` after each observation.
    pub fn kalman(&self, obs: &[Observation<f64>]) -> Vec<(f64, f64)> {
        let (mut m, mut p) = (self.m0, self.p0);
        obs.iter()
            .map(|o| {
                let mp = self.a * m;
                let pp = self.a * self.a * p + self.q * self.q;
                (m, p) = kalman_update(mp, pp, self.c, self.r * self.r, o.current);
                (m, p)
            })
            .collect()
    }
}

/// Measurement update of `N(m, p)` by `y = c·x + N(0, r2)`.
pub fn kalman_update(m: f64, p: f64, c: f64, r2: f64, y: f64) -> (f64, f64) {
    let gain = p * c / (c * c * p + r2);
    (m + gain * (y - c * m), (1.0 - gain * c) * p)
}

impl<T: Real> StateSpaceModel<T> for LinearGaussian {
    fn timing(&self) -> LikelihoodTiming {
        LikelihoodTiming::Current
    }

    fn initial_state(&self, draw: T) -> StatePoint<T> {
        StatePoint {
            x: T::lit(self.m0) + T::lit(self.p0.sqrt()) * draw,
            y: T::zero(),
        }
    }

    fn propagate(&self, prev: StatePoint<T>, eps: T, eta: T) -> StatePoint<T> {
        let x = T::lit(self.a) * prev.x + T::lit(self.q) * eta;
        StatePoint {
            x,
            y: T::lit(self.c) * x + T::lit(self.r) * eps,
        }
    }

    fn transition_logdensity(&self, x_prev: T, x_next: T) -> T {
        let d = (x_next - T::lit(self.a) * x_prev).to_f64_lossy();
        T::lit(
            -0.5 * (2.0 * std::f64::consts::PI * self.q * self.q).ln()
                - d * d / (2.0 * self.q * self.q),
        )
    }

    fn likelihood_logdensity(&self, x: T, obs: Observation<T>) -> T {
        let d = (obs.current - T::lit(self.c) * x).to_f64_lossy();
        T::lit(
            -0.5 * (2.0 * std::f64::consts::PI * self.r * self.r).ln()
                - d * d / (2.0 * self.r * self.r),
        )
    }

    fn loglik_gradient(&self, x: T, obs: Observation<T>) -> Result<T> {
        let c = T::lit(self.c);
        Ok(c * (obs.current - c * x) / T::lit(self.r * self.r))
    }

    fn loglik_hessian(&self, _x: T, _obs: Observation<T>) -> Result<T> {
        Ok(T::lit(-self.c * self.c / (self.r * self.r)))
    }
}

/// Wraps a model and feeds zero noise to its transition, making every
/// particle path deterministic.
#[derive(Clone, Copy, Debug)]
pub struct ZeroNoise<M>(pub M);

impl<T: Real, M: StateSpaceModel<T>> StateSpaceModel<T> for ZeroNoise<M> {
    fn timing(&self) -> LikelihoodTiming {
        self.0.timing()
    }

    fn initial_state(&self, _draw: T) -> StatePoint<T> {
        self.0.initial_state(T::zero())
    }

    fn propagate(&self, prev: StatePoint<T>, _eps: T, _eta: T) -> StatePoint<T> {
        self.0.propagate(prev, T::zero(), T::zero())
    }

    fn transition_logdensity(&self, x_prev: T, x_next: T) -> T {
        self.0.transition_logdensity(x_prev, x_next)
    }

    fn likelihood_logdensity(&self, x: T, obs: Observation<T>) -> T {
        self.0.likelihood_logdensity(x, obs)
    }

    fn loglik_gradient(&self, x: T, obs: Observation<T>) -> Result<T> {
        self.0.loglik_gradient(x, obs)
    }

    fn loglik_hessian(&self, x: T, obs: Observation<T>) -> Result<T> {
        self.0.loglik_hessian(x, obs)
    }
}

/// Wraps a model and replaces its likelihood with a constant, so that
/// observations carry no information.
#[derive(Clone, Copy, Debug)]
pub struct Uninformative<M>(pub M);

impl<T: Real, M: StateSpaceModel<T>> StateSpaceModel<T> for Uninformative<M> {
    fn timing(&self) -> LikelihoodTiming {
        self.0.timing()
    }

    fn initial_state(&self, draw: T) -> StatePoint<T> {
        self.0.initial_state(draw)
    }

    fn propagate(&self, prev: StatePoint<T>, eps: T, eta: T) -> StatePoint<T> {
        self.0.propagate(prev, eps, eta)
    }

    fn transition_logdensity(&self, x_prev: T, x_next: T) -> T {
        self.0.transition_logdensity(x_prev, x_next)
    }

    fn likelihood_logdensity(&self, _x: T, _obs: Observation<T>) -> T {
        T::lit(-1.5)
    }

    fn loglik_gradient(&self, _x: T, _obs: Observation<T>) -> Result<T> {
        Ok(T::zero())
    }

    fn loglik_hessian(&self, _x: T, _obs: Observation<T>) -> Result<T> {
        Ok(T::zero())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kalman_update_examples() {
        let (m, p) = kalman_update(0.0, 1.0, 1.0, 1.0, 2.0);
        assert_eq!((m, p), (1.0, 0.5));
        // flat likelihood leaves the prior untouched
        let (m, p) = kalman_update(0.3, 2.0, 0.0, 1.0, 5.0);
        assert_eq!((m, p), (0.3, 2.0));
    }

    #[test]
    fn analytic_derivatives_match_fd_defaults() {
        let lg = LinearGaussian::default();
        let o = Observation {
            prev: 0.0,
            current: 0.7,
        };
        let g: f64 = lg.loglik_gradient(0.2, o).unwrap();
        let h = 1e-5;
        let fd = (StateSpaceModel::<f64>::likelihood_logdensity(&lg, 0.2 + h, o)
            - StateSpaceModel::<f64>::likelihood_logdensity(&lg, 0.2 - h, o))
            / (2.0 * h);
        assert!((g - fd).abs() < 1e-7);
    }
}
