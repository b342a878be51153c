//! Bootstrap particle filter: mutation through the transition kernel,
//! likelihood weighting, ESS-triggered systematic resampling, and the
//! filtered call-price estimator.
//!
//! The proposal is the prior kernel itself, so the kernel ratio `k/k̃` in the
//! sequential importance weight is one and each step's log-weight increment
//! is exactly the one-step log-likelihood.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    LikelihoodTiming, Observation, StateSpaceModel, SteinSteinModel, SteinSteinParams,
    LOG_DENSITY_FLOOR,
};
use crate::numeric::{
    effective_sample_size, log_sum_exp, normalize_log_weights, systematic_resample,
    ParticleStreams, RandomStream,
};
use crate::scalar::Real;
use crate::stats::weighted_call_price;

pub(crate) const PAR_MIN_LEN: usize = 512;

/// Particle positions, log-prices and normalised log-weights at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub logw: Vec<T>,
    pub t: usize,
}

impl<T: Real> ParticleCloud<T> {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Normalised linear weights.
    pub fn weights(&self) -> Result<Vec<T>> {
        normalize_log_weights(&self.logw)
    }

    pub fn ess(&self) -> Result<T> {
        Ok(effective_sample_size(&self.weights()?))
    }

    /// Weighted mean of the volatility states.
    pub fn filtered_mean(&self) -> Result<T> {
        let w = self.weights()?;
        Ok(self.x.iter().zip(&w).map(|(x, w)| *x * *w).sum())
    }

    pub fn set_uniform_weights(&mut self) {
        let lw = -T::from_usize(self.len())
            .expect("count fits in scalar")
            .ln();
        self.logw.iter_mut().for_each(|l| *l = lw);
    }

    /// Rewrites `logw` as normalised log-weights (`log Σ exp = 0`).
    pub fn renormalize(&mut self) -> Result<()> {
        let lse = log_sum_exp(&self.logw)?;
        self.logw.iter_mut().for_each(|l| *l = *l - lse);
        Ok(())
    }

    /// Replaces every particle by its ancestor and resets weights to uniform.
    pub fn resample_from(&mut self, ancestors: &[usize]) {
        self.x = ancestors.iter().map(|&a| self.x[a]).collect();
        self.y = ancestors.iter().map(|&a| self.y[a]).collect();
        self.logw = vec![T::zero(); ancestors.len()];
        self.set_uniform_weights();
    }

    /// Reorders particles: slot `i` receives particle `perm[i]`.
    pub fn permute(&mut self, perm: &[usize]) {
        self.x = perm.iter().map(|&i| self.x[i]).collect();
        self.y = perm.iter().map(|&i| self.y[i]).collect();
        self.logw = perm.iter().map(|&i| self.logw[i]).collect();
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("particle state"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResampleScheme {
    #[default]
    Systematic,
}

/// Which weights price the payoff at maturity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaturityWeights {
    /// Weights after the final step's resampling decision (uniform if it fired).
    #[default]
    AfterFinalResample,
    /// The final step never resamples; its importance weights are used.
    BeforeFinalResample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when `ESS < ess_threshold · n`.
    pub ess_threshold: f64,
    pub resample_scheme: ResampleScheme,
    pub maturity_weights: MaturityWeights,
}

impl FilterConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            ess_threshold: 0.5,
            resample_scheme: ResampleScheme::Systematic,
            maturity_weights: MaturityWeights::AfterFinalResample,
        }
    }

    pub fn with_ess_threshold(mut self, threshold: f64) -> Self {
        self.ess_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidParams("at least 2 particles required".into()));
        }
        // 0 is accepted: it disables resampling entirely.
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::InvalidParams(
                "ess_threshold must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    /// ESS after weighting, before any resampling.
    pub ess: T,
    pub resampled: bool,
}

/// Builds a cloud of `streams.len()` particles drawn from the model prior,
/// with uniform weights.
pub fn pf_init<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    streams: &mut ParticleStreams,
) -> Result<ParticleCloud<T>> {
    let n = streams.len();
    if n < 2 {
        return Err(Error::InvalidParams("at least 2 particles required".into()));
    }
    let states: Vec<_> = streams
        .particles_mut()
        .iter_mut()
        .map(|s| model.initial_state(T::lit(s.normal())))
        .collect();
    let mut cloud = ParticleCloud {
        x: states.iter().map(|s| s.x).collect(),
        y: states.iter().map(|s| s.y).collect(),
        logw: vec![T::zero(); n],
        t: 0,
    };
    cloud.set_uniform_weights();
    Ok(cloud)
}

/// Moves every particle one step through the transition kernel and returns
/// the pre-mutation volatilities.
pub(crate) fn mutate<T: Real, M: StateSpaceModel<T>>(
    cloud: &mut ParticleCloud<T>,
    model: &M,
    streams: &mut ParticleStreams,
) -> Vec<T> {
    let prev = cloud.x.clone();
    cloud
        .x
        .par_iter_mut()
        .zip(cloud.y.par_iter_mut())
        .zip(streams.particles_mut().par_iter_mut())
        .with_min_len(PAR_MIN_LEN)
        .for_each(|((x, y), s)| {
            let eps = T::lit(s.normal());
            let eta = T::lit(s.normal());
            let next = model.propagate(crate::model::StatePoint { x: *x, y: *y }, eps, eta);
            *x = next.x;
            *y = next.y;
        });
    cloud.t += 1;
    prev
}

/// Log-likelihood increments for each particle, evaluated at the state the
/// observation depends on.
pub(crate) fn likelihood_increments<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    states: &[T],
    obs: Observation<T>,
) -> Vec<T> {
    states
        .par_iter()
        .with_min_len(PAR_MIN_LEN)
        .map(|x| model.likelihood_logdensity(*x, obs))
        .collect()
}

/// Adds increments to the cloud's log-weights and renormalises. Fails if
/// every increment sits on the degenerate-density floor.
pub(crate) fn reweigh<T: Real>(cloud: &mut ParticleCloud<T>, increments: &[T]) -> Result<()> {
    let floor = T::lit(LOG_DENSITY_FLOOR);
    if increments.iter().all(|l| *l <= floor) {
        return Err(Error::DegenerateWeights("every likelihood is on the floor"));
    }
    for (lw, inc) in cloud.logw.iter_mut().zip(increments) {
        *lw = *lw + *inc;
    }
    cloud.renormalize()
}

/// Resamples when the ESS falls below the threshold. Returns the ESS before
/// resampling and the ancestor indices if it fired.
pub(crate) fn maybe_resample<T: Real>(
    cloud: &mut ParticleCloud<T>,
    threshold: f64,
    allow: bool,
    streams: &mut ParticleStreams,
) -> Result<(T, Option<Vec<usize>>)> {
    let w = cloud.weights()?;
    let ess = effective_sample_size(&w);
    let n = cloud.len();
    let trigger = T::lit(threshold) * T::from_usize(n).expect("count fits in scalar");
    if allow && ess < trigger {
        let u = T::lit(streams.control_mut().uniform());
        let ancestors = systematic_resample(&w, u, n);
        cloud.resample_from(&ancestors);
        Ok((ess, Some(ancestors)))
    } else {
        Ok((ess, None))
    }
}

/// One bootstrap filter step: mutate, weight by the likelihood, renormalise
/// and resample if the ESS drops below `cfg.ess_threshold · n`.
pub fn pf_step<T: Real, M: StateSpaceModel<T>>(
    cloud: &mut ParticleCloud<T>,
    obs: Observation<T>,
    model: &M,
    cfg: &FilterConfig,
    streams: &mut ParticleStreams,
    allow_resample: bool,
) -> Result<StepReport<T>> {
    if !obs.current.is_finite() || !obs.prev.is_finite() {
        return Err(Error::NonFinite("observation"));
    }
    let prev = mutate(cloud, model, streams);
    let at = match model.timing() {
        LikelihoodTiming::Previous => &prev,
        LikelihoodTiming::Current => &cloud.x,
    };
    let inc = likelihood_increments(model, at, obs);
    reweigh(cloud, &inc)?;
    let (ess, anc) = maybe_resample(cloud, cfg.ess_threshold, allow_resample, streams)?;
    Ok(StepReport {
        ess,
        resampled: anc.is_some(),
    })
}

/// Result of running an estimator over a whole observation path.
#[derive(Clone, Debug)]
pub struct FilterRun<T> {
    pub cloud: ParticleCloud<T>,
    /// Filtered volatility mean after each step's update (index 0 is the prior).
    pub filtered_means: Vec<T>,
    pub resample_count: usize,
}

/// Observation pairs `(y_{t-1}, y_t)` for `t = 1..=N`, with `y_0 = log S₀`.
pub fn observations<T: Real>(
    params: &SteinSteinParams<T>,
    y_path: &[T],
) -> Result<Vec<Observation<T>>> {
    if y_path.len() != params.n_steps {
        return Err(Error::PathLength {
            expected: params.n_steps,
            got: y_path.len(),
        });
    }
    let mut prev = params.s0.ln();
    Ok(y_path
        .iter()
        .map(|&y| {
            let o = Observation { prev, current: y };
            prev = y;
            o
        })
        .collect())
}

/// Runs the bootstrap filter over every observation.
pub fn run_particle_filter<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    obs: &[Observation<T>],
    cfg: &FilterConfig,
    streams: &mut ParticleStreams,
) -> Result<FilterRun<T>> {
    cfg.validate()?;
    let mut cloud = pf_init(model, streams)?;
    let mut means = vec![cloud.filtered_mean()?];
    let mut resample_count = 0;
    for (k, o) in obs.iter().enumerate() {
        let last = k + 1 == obs.len();
        let allow = !(last && cfg.maturity_weights == MaturityWeights::BeforeFinalResample);
        let prev = mutate(&mut cloud, model, streams);
        let at = match model.timing() {
            LikelihoodTiming::Previous => &prev,
            LikelihoodTiming::Current => &cloud.x,
        };
        let inc = likelihood_increments(model, at, *o);
        reweigh(&mut cloud, &inc)?;
        means.push(cloud.filtered_mean()?);
        if maybe_resample(&mut cloud, cfg.ess_threshold, allow, streams)?
            .1
            .is_some()
        {
            resample_count += 1;
        }
    }
    cloud.check_finite()?;
    Ok(FilterRun {
        cloud,
        filtered_means: means,
        resample_count,
    })
}

/// Particle-filter call price conditioned on the observed log-prices
/// `y_1..y_N`: `e^{−rT} Σ ŵᵢ max(e^{yᵢ} − K, 0)` over the final cloud.
pub fn pf_price<T: Real>(
    params: &SteinSteinParams<T>,
    cfg: &FilterConfig,
    y_path: &[T],
    rng: &RandomStream,
) -> Result<T> {
    let model = SteinSteinModel::new(*params);
    let obs = observations(params, y_path)?;
    let mut streams = ParticleStreams::new(rng, cfg.n_particles);
    let run = run_particle_filter(&model, &obs, cfg, &mut streams)?;
    weighted_call_price(params, &run.cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{likelihood_logdensity, StatePoint};
    use crate::reference::{LinearGaussian, ZeroNoise};
    use approx::assert_abs_diff_eq;

    fn bench() -> SteinSteinParams<f64> {
        SteinSteinParams::benchmark()
    }

    #[test]
    fn init_is_uniform_at_prior() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let mut s = ParticleStreams::new(&RandomStream::new(1, 0), 4);
        let c = pf_init(&model, &mut s).unwrap();
        assert_eq!(c.logw, vec![0.25_f64.ln(); 4]);
        assert!(c.y.iter().all(|y| (*y - 4.60517).abs() < 1e-5));
        assert!(c.x.iter().all(|x| *x == 0.25));
        let mut s2 = ParticleStreams::new(&RandomStream::new(1, 0), 4);
        assert_eq!(pf_init(&model, &mut s2).unwrap(), c);
        let mut one = ParticleStreams::new(&RandomStream::new(1, 0), 1);
        assert!(pf_init(&model, &mut one).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::new(1).validate().is_err());
        assert!(FilterConfig::new(10)
            .with_ess_threshold(1.5)
            .validate()
            .is_err());
        assert!(FilterConfig::new(10)
            .with_ess_threshold(1.0)
            .validate()
            .is_ok());
    }

    #[test]
    fn step_increment_is_the_likelihood() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let mut streams = ParticleStreams::new(&RandomStream::new(5, 0), 64);
        let mut cloud = pf_init(&model, &mut streams).unwrap();
        // move off the degenerate prior first
        let cfg = FilterConfig::new(64).with_ess_threshold(0.0);
        let obs = Observation {
            prev: 100f64.ln(),
            current: 100f64.ln() + 0.01,
        };
        pf_step(&mut cloud, obs, &model, &cfg, &mut streams, true).unwrap();

        let before = cloud.clone();
        let mut probe = streams.clone();
        let obs2 = Observation {
            prev: obs.current,
            current: obs.current - 0.02,
        };
        pf_step(&mut cloud, obs2, &model, &cfg, &mut streams, true).unwrap();

        let mut expected: Vec<f64> = before
            .x
            .iter()
            .zip(&before.logw)
            .map(|(x, lw)| lw + likelihood_logdensity(&p, *x, obs2.prev, obs2.current))
            .collect();
        let lse = log_sum_exp(&expected).unwrap();
        expected.iter_mut().for_each(|l| *l -= lse);
        for (a, b) in cloud.logw.iter().zip(&expected) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        // mutation used the same draws as an independent replay
        let sp = StatePoint {
            x: before.x[3],
            y: before.y[3],
        };
        let s3 = &mut probe.particles_mut()[3];
        let (e, h) = (s3.normal(), s3.normal());
        assert_eq!(model.propagate(sp, e, h).x, cloud.x[3]);
    }

    #[test]
    fn two_particle_weight_ratio_matches_oracle() {
        let p = bench();
        let model = ZeroNoise(SteinSteinModel::new(p));
        let mut streams = ParticleStreams::new(&RandomStream::new(2, 0), 2);
        let mut cloud = pf_init(&model, &mut streams).unwrap();
        cloud.x = vec![0.2, 0.3];
        let cfg = FilterConfig::new(2).with_ess_threshold(0.0);
        let obs = Observation {
            prev: 4.6,
            current: 4.615,
        };
        pf_step(&mut cloud, obs, &model, &cfg, &mut streams, true).unwrap();
        let oracle = |x: f64| {
            let m = 4.6 + (0.0953 - x * x / 2.0) / 128.0;
            let var = x * x / 128.0;
            (-(obs.current - m).powi(2) / (2.0 * var)).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let w = cloud.weights().unwrap();
        assert_abs_diff_eq!(w[0] / w[1], oracle(0.2) / oracle(0.3), epsilon = 1e-9);
    }

    #[test]
    fn equal_states_get_equal_weights_and_threshold_zero_never_resamples() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let n = 200;
        let mut streams = ParticleStreams::new(&RandomStream::new(8, 0), n);
        let mut cloud = pf_init(&model, &mut streams).unwrap();
        let cfg = FilterConfig::new(n).with_ess_threshold(0.0);
        let obs = Observation {
            prev: 4.6,
            current: 4.63,
        };
        let rep = pf_step(&mut cloud, obs, &model, &cfg, &mut streams, true).unwrap();
        assert!(!rep.resampled);
        // degenerate prior: every particle had x_prev = V0
        assert!(cloud
            .logw
            .iter()
            .all(|l| (*l - cloud.logw[0]).abs() < 1e-15));
        for _ in 0..10 {
            let r = pf_step(&mut cloud, obs, &model, &cfg, &mut streams, true).unwrap();
            assert!(!r.resampled);
        }
        assert!(cloud.ess().unwrap() < n as f64);
    }

    #[test]
    fn forced_resampling_restores_full_ess() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let n = 300;
        let mut streams = ParticleStreams::new(&RandomStream::new(3, 0), n);
        let mut cloud = pf_init(&model, &mut streams).unwrap();
        let cfg = FilterConfig::new(n).with_ess_threshold(1.0);
        let obs = Observation {
            prev: 4.6,
            current: 4.59,
        };
        for _ in 0..3 {
            let r = pf_step(&mut cloud, obs, &model, &cfg, &mut streams, true).unwrap();
            if r.ess < n as f64 {
                assert!(r.resampled);
                assert_abs_diff_eq!(cloud.ess().unwrap(), n as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn all_floor_likelihoods_fail() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let mut streams = ParticleStreams::new(&RandomStream::new(3, 0), 4);
        let mut cloud = pf_init(&model, &mut streams).unwrap();
        cloud.x = vec![0.0; 4];
        let cfg = FilterConfig::new(4);
        let obs = Observation {
            prev: 4.6,
            current: 4.7,
        };
        assert!(matches!(
            pf_step(&mut cloud, obs, &model, &cfg, &mut streams, true),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn path_length_is_checked() {
        let p = bench();
        let r = pf_price(
            &p,
            &FilterConfig::new(10),
            &[4.6; 10],
            &RandomStream::new(0, 0),
        );
        assert!(matches!(
            r,
            Err(Error::PathLength {
                expected: 64,
                got: 10
            })
        ));
    }

    #[test]
    fn noiseless_price_is_deterministic_payoff() {
        let p = bench();
        let model = ZeroNoise(SteinSteinModel::new(p));
        let mut s = StatePoint {
            x: p.v0,
            y: p.s0.ln(),
        };
        let mut path = Vec::new();
        for _ in 0..p.n_steps {
            s = crate::model::euler_step(&p, s, 0.0, 0.0);
            path.push(s.y);
        }
        let obs = observations(&p, &path).unwrap();
        let mut streams = ParticleStreams::new(&RandomStream::new(4, 0), 50);
        let run = run_particle_filter(&model, &obs, &FilterConfig::new(50), &mut streams).unwrap();
        let price = weighted_call_price(&p, &run.cloud).unwrap();
        let exact = (-p.r * p.maturity).exp()
            * (p.s0 * ((p.mu - p.v0 * p.v0 / 2.0) * p.maturity).exp() - p.strike).max(0.0);
        assert!((price - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn permuting_particles_leaves_price_unchanged_without_resampling() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let path = crate::experiment::generate_market_path(&p, 17).y[1..].to_vec();
        let obs = observations(&p, &path).unwrap();
        let cfg = FilterConfig::new(257).with_ess_threshold(0.0);
        let root = RandomStream::new(12, 1);

        let mut a = ParticleStreams::new(&root, 257);
        let ra = run_particle_filter(&model, &obs, &cfg, &mut a).unwrap();
        let perm: Vec<usize> = (0..257).map(|i| (i * 31 + 7) % 257).collect();
        let mut b = ParticleStreams::new(&root, 257);
        b.permute(&perm);
        let rb = run_particle_filter(&model, &obs, &cfg, &mut b).unwrap();
        let pa = weighted_call_price(&p, &ra.cloud).unwrap();
        let pb = weighted_call_price(&p, &rb.cloud).unwrap();
        assert!((pa - pb).abs() < 1e-9 * pa);
    }

    #[test]
    fn linear_gaussian_posterior_mean_tracks_kalman() {
        let lg = LinearGaussian::default();
        let (obs, _) = lg.simulate(40, 77);
        let kf = lg.kalman(&obs);
        let n = 10_000;
        let mut streams = ParticleStreams::new(&RandomStream::new(31, 0), n);
        let run = run_particle_filter(&lg, &obs, &FilterConfig::new(n), &mut streams).unwrap();
        for (t, (m, (km, kv))) in run.filtered_means.iter().skip(1).zip(kf.iter()).enumerate() {
            let tol = 3.0 * kv.sqrt() / (n as f64).sqrt();
            assert!(
                (m - km).abs() < tol,
                "step {t}: pf {m} kalman {km} tol {tol}"
            );
        }
    }

    #[test]
    fn f32_filter_runs() {
        let p: SteinSteinParams<f32> = SteinSteinParams::benchmark();
        let path64 =
            crate::experiment::generate_market_path(&SteinSteinParams::<f64>::benchmark(), 3);
        let path: Vec<f32> = path64.y[1..].iter().map(|v| *v as f32).collect();
        let price = pf_price(&p, &FilterConfig::new(500), &path, &RandomStream::new(1, 2)).unwrap();
        assert!(price > 5.0 && price < 30.0);
    }
}
