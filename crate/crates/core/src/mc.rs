//! Plain Monte Carlo: unconditioned paths from the prior dynamics.

use crate::error::Result;
use crate::filter::{mutate, pf_init, FilterRun};
use crate::model::{StateSpaceModel, SteinSteinModel, SteinSteinParams};
use crate::numeric::{mean, ParticleStreams, RandomStream};
use crate::scalar::Real;
use crate::stats::weighted_call_price;

/// Simulates `n_steps` transitions for every path. Weights stay uniform.
pub fn run_plain_mc<T: Real, M: StateSpaceModel<T>>(
    model: &M,
    n_steps: usize,
    streams: &mut ParticleStreams,
) -> Result<FilterRun<T>> {
    let mut cloud = pf_init(model, streams)?;
    let mut means = vec![mean(&cloud.x)];
    for _ in 0..n_steps {
        mutate(&mut cloud, model, streams);
        means.push(mean(&cloud.x));
    }
    cloud.check_finite()?;
    Ok(FilterRun {
        cloud,
        filtered_means: means,
        resample_count: 0,
    })
}

/// Monte Carlo call price over `n_paths` independent Euler paths.
pub fn mc_price<T: Real>(
    params: &SteinSteinParams<T>,
    n_paths: usize,
    rng: &RandomStream,
) -> Result<T> {
    let model = SteinSteinModel::new(*params);
    let mut streams = ParticleStreams::new(rng, n_paths);
    let run = run_plain_mc(&model, params.n_steps, &mut streams)?;
    weighted_call_price(params, &run.cloud)
}
