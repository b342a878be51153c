//! Weighted-sample machinery shared by every estimator: weight normalisation,
//! effective sample size, systematic resampling, sample covariance, a
//! central finite-difference oracle and the seeded random-stream contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Normalises nonnegative linear weights so they sum to one.
pub fn normalize_weights<T: Real>(w: &[T]) -> Result<Vec<T>> {
    if w.is_empty() {
        return Err(Error::DegenerateWeights("empty weight vector"));
    }
    if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::DegenerateWeights(
            "weights must be finite and nonnegative",
        ));
    }
    let total: T = w.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::DegenerateWeights("all weights are zero"));
    }
    Ok(w.iter().map(|v| *v / total).collect())
}

/// Normalises log-weights into linear weights summing to one.
///
/// The maximum is subtracted before exponentiation, so shifting every
/// log-weight by a constant leaves the result unchanged and very negative
/// inputs do not underflow to an all-zero vector.
pub fn normalize_log_weights<T: Real>(logw: &[T]) -> Result<Vec<T>> {
    let max = max_log_weight(logw)?;
    let w: Vec<T> = logw.iter().map(|l| (*l - max).exp()).collect();
    let total: T = w.iter().copied().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Log of the sum of exponentials, `log Σ exp(lᵢ)`.
pub fn log_sum_exp<T: Real>(logw: &[T]) -> Result<T> {
    let max = max_log_weight(logw)?;
    let total: T = logw.iter().map(|l| (*l - max).exp()).sum();
    Ok(max + total.ln())
}

fn max_log_weight<T: Real>(logw: &[T]) -> Result<T> {
    if logw.is_empty() {
        return Err(Error::DegenerateWeights("empty weight vector"));
    }
    let mut max = T::neg_infinity();
    for &l in logw {
        if l.is_nan() || l == T::infinity() {
            return Err(Error::DegenerateWeights("log-weight is NaN or +inf"));
        }
        if l > max {
            max = l;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::DegenerateWeights("all log-weights are -inf"));
    }
    Ok(max)
}

/// `1 / Σ wᵢ²` for normalised weights; lies in `[1, n]`.
pub fn effective_sample_size<T: Real>(w: &[T]) -> T {
    let sq: T = w.iter().map(|v| *v * *v).sum();
    T::one() / sq
}

/// Systematic resampling with a single uniform draw `u ∈ [0, 1)`.
///
/// Point `k` sits at `(u + k) / n_out`; its ancestor is the first index whose
/// cumulative weight exceeds the point. Zero-weight particles are never
/// selected.
pub fn systematic_resample<T: Real>(w: &[T], u: T, n_out: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_out);
    if w.is_empty() || n_out == 0 {
        return out;
    }
    let last_positive = w
        .iter()
        .rposition(|v| *v > T::zero())
        .unwrap_or(w.len() - 1);
    let n = T::from_usize(n_out).expect("count fits in scalar");
    // Work on the n-scaled cumulative sum so uniform weights give exact integers.
    let mut j = 0usize;
    let mut cum = w[0] * n;
    for k in 0..n_out {
        let point = u + T::from_usize(k).expect("count fits in scalar");
        while cum <= point && j < last_positive {
            j += 1;
            cum = cum + w[j] * n;
        }
        out.push(j);
    }
    out
}

/// Sample variance of scalar states.
///
/// Unweighted input uses divisor `n − 1`. With normalised weights the
/// reliability-weight correction `Σ wᵢ(xᵢ − x̄)² / (1 − Σ wᵢ²)` is used, which
/// reduces to the unweighted estimator for uniform weights.
pub fn sample_covariance<T: Real>(points: &[T], weights: Option<&[T]>) -> Result<T> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    match weights {
        None => {
            let nf = T::from_usize(n).expect("count fits in scalar");
            let mean = points.iter().copied().sum::<T>() / nf;
            let ss: T = points.iter().map(|x| (*x - mean) * (*x - mean)).sum();
            Ok(ss / (nf - T::one()))
        }
        Some(w) => {
            if w.len() != n {
                return Err(Error::InvalidParams(format!(
                    "weights length {} does not match {} points",
                    w.len(),
                    n
                )));
            }
            let mean: T = points.iter().zip(w).map(|(x, wi)| *x * *wi).sum();
            let ss: T = points
                .iter()
                .zip(w)
                .map(|(x, wi)| *wi * (*x - mean) * (*x - mean))
                .sum();
            let w2: T = w.iter().map(|v| *v * *v).sum();
            let denom = T::one() - w2;
            if denom <= T::zero() {
                return Err(Error::InsufficientData { needed: 2, got: 1 });
            }
            Ok(ss / denom)
        }
    }
}

/// Arithmetic mean in fixed left-to-right order.
pub fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::from_usize(xs.len()).expect("count fits in scalar")
}

/// Order of a central finite difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdOrder {
    First,
    Second,
}

/// Central finite difference of `f` at `x`.
pub fn finite_difference<T, F>(f: F, x: T, order: FdOrder, step: T) -> Result<T>
where
    T: Real,
    F: Fn(T) -> T,
{
    let fp = f(x + step);
    let fm = f(x - step);
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite("finite difference evaluation"));
    }
    match order {
        FdOrder::First => Ok((fp - fm) / (T::lit(2.0) * step)),
        FdOrder::Second => {
            let f0 = f(x);
            if !f0.is_finite() {
                return Err(Error::NonFinite("finite difference evaluation"));
            }
            Ok((fp - T::lit(2.0) * f0 + fm) / (step * step))
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8: the key comes from `seed` and the 64-bit ChaCha stream
/// counter is set to `stream_id`. This generator is fixed for the crate; the
/// same pair yields the same draws on every platform.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream keyed by this stream's identity and `label`.
    ///
    /// Independent of how many draws were already taken from `self`.
    pub fn fork(&self, label: u64) -> RandomStream {
        let key = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(1)));
        RandomStream::new(key, label)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

const CONTROL_LABEL: u64 = u64::MAX;

/// One stream per particle slot plus a control stream for cloud-level draws
/// (resampling uniforms).
#[derive(Clone, Debug)]
pub struct ParticleStreams {
    particles: Vec<RandomStream>,
    control: RandomStream,
}

impl ParticleStreams {
    pub fn new(root: &RandomStream, n: usize) -> Self {
        Self {
            particles: (0..n as u64).map(|i| root.fork(i)).collect(),
            control: root.fork(CONTROL_LABEL),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles_mut(&mut self) -> &mut [RandomStream] {
        &mut self.particles
    }

    pub fn control_mut(&mut self) -> &mut RandomStream {
        &mut self.control
    }

    /// Reorders the per-particle streams: slot `i` receives stream `perm[i]`.
    pub fn permute(&mut self, perm: &[usize]) {
        self.particles = perm.iter().map(|&i| self.particles[i].clone()).collect();
    }
}
