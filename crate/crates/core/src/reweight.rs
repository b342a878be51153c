//! Homotopy transport with importance reweighting.
//!
//! Each step mutates the cloud through the transition kernel, transports it
//! with the homotopy flow, and then weights every particle by the likelihood
//! at its transported position. The proposal kernel is the transition
//! kernel, so the kernel ratio in the weight update is one. Resampling
//! follows the particle filter's ESS rule.
//!
//! Transport already moves the cloud to the posterior, so weighting by the
//! likelihood at the transported points applies the observation twice. On a
//! linear-Gaussian model the filtered mean follows a Kalman filter with half
//! the observation variance rather than the exact one.

use crate::error::Result;
use crate::filter::ParticleCloud;
use crate::filter::{
    likelihood_increments, maybe_resample, mutate, observations, pf_init, reweigh, FilterConfig,
    MaturityWeights,
};
use crate::flow::{transport_cloud, TransportConfig, TransportDiagnostics, TransportRun};
use crate::model::{Observation, StateSpaceModel, SteinSteinModel, SteinSteinParams};
use crate::numeric::{ParticleStreams, RandomStream};
use crate::scalar::Real;
use crate::stats::weighted_call_price;

/// Normalised log-weights of a transported cloud plus, optionally, the
/// ancestor indices of every resampling event.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportWeightLedger<T> {
    pub logw: Vec<T>,
    pub ancestor_history: Option<Vec<Vec<usize>>>,
}

impl<T: Real> TransportWeightLedger<T> {
    pub fn new(cloud: &ParticleCloud<T>, keep_history: bool) -> Self {
        Self {
            logw: cloud.logw.clone(),
            ancestor_history: keep_history.then(Vec::new),
        }
    }
}

/// Which weights price the payoff at maturity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RwMaturity {
    /// Weights after the final reweighting.
    #[default]
    FinalWeights,
    /// Skip the final reweighting and price with the weights carried into
    /// the last step.
    PreviousWeights,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RwConfig {
    pub filter: FilterConfig,
    pub transport: TransportConfig,
    pub maturity: RwMaturity,
    pub keep_ancestry: bool,
}

impl RwConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            filter: FilterConfig::new(n_particles),
            transport: TransportConfig::default(),
            maturity: RwMaturity::FinalWeights,
            keep_ancestry: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RwStepReport<T> {
    pub ess: T,
    pub resampled: bool,
    pub transport: TransportDiagnostics<T>,
}

/// One mutate, transport, reweigh and resample cycle. `last` marks the final
/// observation, where the maturity options apply.
pub fn rw_step<T: Real, M: StateSpaceModel<T>>(
    cloud: &mut ParticleCloud<T>,
    ledger: &mut TransportWeightLedger<T>,
    obs: Observation<T>,
    model: &M,
    cfg: &RwConfig,
    streams: &mut ParticleStreams,
    last: bool,
) -> Result<RwStepReport<T>> {
    mutate(cloud, model, streams);
    let transport = transport_cloud(cloud, obs, model, &cfg.transport)?;
    cloud.logw.clone_from(&ledger.logw);
    if !(last && cfg.maturity == RwMaturity::PreviousWeights) {
        let inc = likelihood_increments(model, &cloud.x, obs);
        reweigh(cloud, &inc)?;
    }
    let allow = !(last && cfg.filter.maturity_weights == MaturityWeights::BeforeFinalResample);
    let (ess, anc) = maybe_resample(cloud, cfg.filter.ess_threshold, allow, streams)?;
    ledger.logw.clone_from(&cloud.logw);
    let resampled = anc.is_some();
    if let (Some(h), Some(a)) = (ledger.ancestor_history.as_mut(), anc) {
        h.push(a);
    }
    Ok(RwStepReport {
        ess,
        resampled,
        transport,
    })
}

/// Runs the reweighted homotopy filter over every observation.
pub fn run_rw_homotopy<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    obs: &[Observation<T>],
    cfg: &RwConfig,
    streams: &mut ParticleStreams,
) -> Result<(TransportRun<T>, TransportWeightLedger<T>)> {
    cfg.filter.validate()?;
    let mut cloud = pf_init(model, streams)?;
    let mut ledger = TransportWeightLedger::new(&cloud, cfg.keep_ancestry);
    let mut means = vec![cloud.filtered_mean()?];
    let mut diagnostics = TransportDiagnostics::default();
    let mut resample_count = 0;
    for (k, o) in obs.iter().enumerate() {
        let rep = rw_step(
            &mut cloud,
            &mut ledger,
            *o,
            model,
            cfg,
            streams,
            k + 1 == obs.len(),
        )?;
        diagnostics.absorb(&rep.transport);
        resample_count += rep.resampled as usize;
        means.push(cloud.filtered_mean()?);
    }
    cloud.check_finite()?;
    Ok((
        TransportRun {
            cloud,
            filtered_means: means,
            diagnostics,
            resample_count,
        },
        ledger,
    ))
}

/// Reweighted homotopy call price `e^{−rT} Σ ŵᵢ max(e^{yᵢ} − K, 0)`.
pub fn rw_price<T: Real>(
    params: &SteinSteinParams<T>,
    cfg: &RwConfig,
    y_path: &[T],
    rng: &RandomStream,
) -> Result<T> {
    let model = SteinSteinModel::new(*params);
    let obs = observations(params, y_path)?;
    let mut streams = ParticleStreams::new(rng, cfg.filter.n_particles);
    let (run, _) = run_rw_homotopy(&model, &obs, cfg, &mut streams)?;
    weighted_call_price(params, &run.cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_homotopy, TransportConfig};
    use crate::model::likelihood_logdensity;
    use crate::reference::{Uninformative, ZeroNoise};

    fn bench() -> SteinSteinParams<f64> {
        SteinSteinParams::benchmark()
    }

    #[test]
    fn constant_likelihood_reduces_to_homotopy() {
        let p = bench();
        let model = Uninformative(SteinSteinModel::new(p));
        let path = crate::experiment::generate_market_path(&p, 8).y[1..].to_vec();
        let obs = observations(&p, &path).unwrap();
        let root = RandomStream::new(21, 4);
        let cfg = RwConfig::new(300);

        let mut s1 = ParticleStreams::new(&root, 300);
        let (rw, ledger) = run_rw_homotopy(&model, &obs, &cfg, &mut s1).unwrap();
        let mut s2 = ParticleStreams::new(&root, 300);
        let ht = run_homotopy(&model, &obs, &cfg.transport, &mut s2).unwrap();
        assert_eq!(rw.resample_count, 0);
        assert!(ledger.logw.iter().all(|l| *l == ledger.logw[0]));
        let a = weighted_call_price(&p, &rw.cloud).unwrap();
        let b = weighted_call_price(&p, &ht.cloud).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn two_particle_ratio_uses_transported_positions() {
        let p = bench();
        let model = ZeroNoise(SteinSteinModel::new(p));
        let mut streams = ParticleStreams::new(&RandomStream::new(0, 0), 2);
        let mut cloud = pf_init(&model, &mut streams).unwrap();
        cloud.x = vec![0.22, 0.27];
        let mut ledger = TransportWeightLedger::new(&cloud, false);
        let mut cfg = RwConfig::new(2);
        cfg.filter.ess_threshold = 0.0;
        let obs = Observation {
            prev: p.s0.ln(),
            current: p.s0.ln() + 0.02,
        };
        rw_step(
            &mut cloud,
            &mut ledger,
            obs,
            &model,
            &cfg,
            &mut streams,
            false,
        )
        .unwrap();
        let l = |x: f64| likelihood_logdensity(&p, x, obs.prev, obs.current);
        let w = cloud.weights().unwrap();
        assert!(((w[0] / w[1]).ln() - (l(cloud.x[0]) - l(cloud.x[1]))).abs() < 1e-9);
        assert_eq!(ledger.logw, cloud.logw);
    }

    #[test]
    fn forced_resampling_records_ancestry_and_resets_weights() {
        let p = bench();
        let model = SteinSteinModel::new(p);
        let path = crate::experiment::generate_market_path(&p, 2).y[1..].to_vec();
        let obs = observations(&p, &path).unwrap();
        let mut cfg = RwConfig::new(128);
        cfg.filter.ess_threshold = 1.0;
        cfg.keep_ancestry = true;
        let mut streams = ParticleStreams::new(&RandomStream::new(9, 9), 128);
        let (run, ledger) = run_rw_homotopy(&model, &obs, &cfg, &mut streams).unwrap();
        let hist = ledger.ancestor_history.unwrap();
        assert_eq!(hist.len(), run.resample_count);
        assert!(run.resample_count > obs.len() / 2);
        assert!(hist
            .iter()
            .all(|a| a.len() == 128 && a.windows(2).all(|w| w[0] <= w[1])));
    }

    #[test]
    fn reweighting_transported_particles_counts_the_likelihood_twice() {
        let lg = crate::reference::LinearGaussian::default();
        // transport already reaches the posterior, so likelihood weights at the
        // transported points target prior × likelihood², i.e. observation variance r²/2
        let doubled = crate::reference::LinearGaussian {
            r: lg.r / 2f64.sqrt(),
            ..lg
        };
        let (obs, _) = lg.simulate(20, 5);
        let (kf, kf2) = (lg.kalman(&obs), doubled.kalman(&obs));
        let n = 10_000;
        let mut streams = ParticleStreams::new(&RandomStream::new(8, 8), n);
        let (rw, _) = run_rw_homotopy(&lg, &obs, &RwConfig::new(n), &mut streams).unwrap();
        let mut streams = ParticleStreams::new(&RandomStream::new(8, 8), n);
        let ht = run_homotopy(&lg, &obs, &TransportConfig::default(), &mut streams).unwrap();

        let (mut gap_exact, mut gap_doubled) = (0.0, 0.0);
        for t in 0..obs.len() {
            let se = (kf[t].1 / n as f64).sqrt();
            let z_ht = (ht.filtered_means[t + 1] - kf[t].0) / se;
            assert!(z_ht.abs() < 3.0, "step {t}: homotopy z = {z_ht}");
            gap_exact += (rw.filtered_means[t + 1] - kf[t].0).abs();
            gap_doubled += (rw.filtered_means[t + 1] - kf2[t].0).abs();
        }
        assert!(
            gap_doubled < 0.5 * gap_exact,
            "{gap_doubled} vs {gap_exact}"
        );
        assert!(gap_exact / obs.len() as f64 > 5.0 * (kf[0].1 / n as f64).sqrt());
    }

    #[test]
    fn maturity_variants_price_finite() {
        let p = bench();
        let path = crate::experiment::generate_market_path(&p, 2).y[1..].to_vec();
        let rng = RandomStream::new(1, 1);
        let mut cfg = RwConfig::new(200);
        let a = rw_price(&p, &cfg, &path, &rng).unwrap();
        cfg.maturity = RwMaturity::PreviousWeights;
        cfg.filter.maturity_weights = MaturityWeights::BeforeFinalResample;
        let b = rw_price(&p, &cfg, &path, &rng).unwrap();
        assert!(a.is_finite() && b.is_finite());
        assert!((a - b).abs() < 10.0);
    }
}
