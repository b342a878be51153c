//! Replicated pricing experiments: synthetic market paths, paired method
//! runs, reports and trace files.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{observations, run_particle_filter, FilterConfig};
use crate::flow::{run_homotopy, LambdaSpacing, TransportConfig};
use crate::mc::run_plain_mc;
use crate::model::{euler_step, ParamsFile, StatePoint, SteinSteinModel, SteinSteinParams};
use crate::numeric::{ParticleStreams, RandomStream};
use crate::reweight::{run_rw_homotopy, RwConfig};
use crate::stats::{
    compute_report, weighted_call_price, write_csv, EstimatorReport, Method, ReportRow,
};

/// Table-1 reference price of the benchmark call.
pub const BENCHMARK_PRICE: f64 = 16.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub params: SteinSteinParams<f64>,
    pub methods: Vec<Method>,
    pub n_particles: usize,
    pub n_replications: usize,
    pub seed: u64,
    pub lambda_steps: usize,
    pub lambda_spacing: LambdaSpacing,
    pub ess_threshold: f64,
    pub reference_price: f64,
    pub output_dir: Option<PathBuf>,
    pub emit_paths: bool,
    /// Reuse one market path for every replication.
    pub fixed_path: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            params: SteinSteinParams::benchmark(),
            methods: Method::ALL.to_vec(),
            n_particles: 20_000,
            n_replications: 20,
            seed: 1,
            lambda_steps: 20,
            lambda_spacing: LambdaSpacing::Uniform,
            ess_threshold: 0.5,
            reference_price: BENCHMARK_PRICE,
            output_dir: None,
            emit_paths: false,
            fixed_path: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SpacingName {
    Uniform,
    Geometric,
}

/// TOML form of [`ExperimentConfig`]. Missing keys take the defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    params: Option<ParamsFile>,
    methods: Option<Vec<Method>>,
    n_particles: Option<usize>,
    n_replications: Option<usize>,
    seed: Option<u64>,
    lambda_steps: Option<usize>,
    lambda_spacing: Option<SpacingName>,
    lambda_ratio: Option<f64>,
    ess_threshold: Option<f64>,
    reference_price: Option<f64>,
    output_dir: Option<PathBuf>,
    emit_paths: Option<bool>,
    fixed_path: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let d = Self::default();
        let lambda_spacing = match (f.lambda_spacing, f.lambda_ratio) {
            (Some(SpacingName::Geometric), r) => LambdaSpacing::Geometric {
                ratio: r.unwrap_or(1.1),
            },
            (_, Some(_)) => {
                return Err(Error::Config(
                    "lambda_ratio needs lambda_spacing = \"geometric\"".into(),
                ))
            }
            _ => LambdaSpacing::Uniform,
        };
        let cfg = Self {
            params: match f.params {
                Some(p) => p.into_params()?,
                None => d.params,
            },
            methods: f.methods.unwrap_or(d.methods),
            n_particles: f.n_particles.unwrap_or(d.n_particles),
            n_replications: f.n_replications.unwrap_or(d.n_replications),
            seed: f.seed.unwrap_or(d.seed),
            lambda_steps: f.lambda_steps.unwrap_or(d.lambda_steps),
            lambda_spacing,
            ess_threshold: f.ess_threshold.unwrap_or(d.ess_threshold),
            reference_price: f.reference_price.unwrap_or(d.reference_price),
            output_dir: f.output_dir,
            emit_paths: f.emit_paths.unwrap_or(false),
            fixed_path: f.fixed_path.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.n_replications < 2 {
            return Err(Error::InsufficientReplications(self.n_replications));
        }
        if !(self.reference_price > 0.0) {
            return Err(Error::Config("reference_price must be positive".into()));
        }
        if self.lambda_steps == 0 {
            return Err(Error::Config("lambda_steps must be at least 1".into()));
        }
        self.filter_config().validate()
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig::new(self.n_particles).with_ess_threshold(self.ess_threshold)
    }

    pub fn transport_config(&self) -> TransportConfig {
        TransportConfig {
            lambda_steps: self.lambda_steps,
            spacing: self.lambda_spacing,
            ..Default::default()
        }
    }

    /// Methods in canonical order, without duplicates.
    fn method_set(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}

/// Hidden volatility and log-price paths `t = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketPath {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl MarketPath {
    /// Observed log-prices `y_1..y_N`.
    pub fn observed(&self) -> &[f64] {
        &self.y[1..]
    }
}

fn simulate_path(params: &SteinSteinParams<f64>, rng: &mut RandomStream) -> MarketPath {
    let mut s = StatePoint {
        x: params.v0,
        y: params.s0.ln(),
    };
    let mut x = vec![s.x];
    let mut y = vec![s.y];
    for _ in 0..params.n_steps {
        let eps = rng.normal();
        let eta = rng.normal();
        s = euler_step(params, s, eps, eta);
        x.push(s.x);
        y.push(s.y);
    }
    MarketPath { x, y }
}

/// One Euler-Maruyama trajectory from `(V₀, log S₀)`, deterministic per seed.
pub fn generate_market_path(params: &SteinSteinParams<f64>, seed: u64) -> MarketPath {
    simulate_path(params, &mut RandomStream::new(seed, 0))
}

pub fn path_digest(y: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in y {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Price plus per-step filtered volatility means from one estimator call.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub price: f64,
    pub filtered_means: Vec<f64>,
}

/// Runs one method on one observed path.
pub fn estimate(
    cfg: &ExperimentConfig,
    method: Method,
    y_obs: &[f64],
    rng: &RandomStream,
) -> Result<Estimate> {
    let p = &cfg.params;
    let model = SteinSteinModel::new(*p);
    let mut streams = ParticleStreams::new(rng, cfg.n_particles);
    let (cloud, filtered_means) = match method {
        Method::Mc => {
            let run = run_plain_mc(&model, p.n_steps, &mut streams)?;
            (run.cloud, run.filtered_means)
        }
        Method::Pf => {
            let run = run_particle_filter(
                &model,
                &observations(p, y_obs)?,
                &cfg.filter_config(),
                &mut streams,
            )?;
            (run.cloud, run.filtered_means)
        }
        Method::Homotopy => {
            let run = run_homotopy(
                &model,
                &observations(p, y_obs)?,
                &cfg.transport_config(),
                &mut streams,
            )?;
            (run.cloud, run.filtered_means)
        }
        Method::RwHomotopy => {
            let rw = RwConfig {
                filter: cfg.filter_config(),
                transport: cfg.transport_config(),
                ..RwConfig::new(cfg.n_particles)
            };
            let (run, _) = run_rw_homotopy(&model, &observations(p, y_obs)?, &rw, &mut streams)?;
            (run.cloud, run.filtered_means)
        }
    };
    Ok(Estimate {
        price: weighted_call_price(p, &cloud)?,
        filtered_means,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationFailure {
    pub method: Method,
    /// `None` when the failure is in the final report rather than one run.
    pub replication: Option<usize>,
    pub kind: String,
    pub message: String,
}

impl ReplicationFailure {
    fn new(method: Method, replication: Option<usize>, e: &Error) -> Self {
        Self {
            method,
            replication,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

/// Per-step true and filtered volatility of replication 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTrace {
    pub method: Method,
    pub true_vol: Vec<f64>,
    pub filtered_vol_mean: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub reports: Vec<EstimatorReport>,
    pub failures: Vec<ReplicationFailure>,
    /// `digests[l][k]`: digest of the path method `k` saw in replication `l`.
    pub digests: Vec<Vec<u64>>,
    pub traces: Vec<PathTrace>,
}

struct RunOutcome {
    result: Result<Estimate>,
    seconds: f64,
    digest: u64,
}

fn method_stream(seed: u64, method: Method, replication: usize) -> RandomStream {
    RandomStream::new(seed, 1 + method as u64).fork(replication as u64)
}

fn replication_path(cfg: &ExperimentConfig, replication: usize) -> MarketPath {
    if cfg.fixed_path {
        generate_market_path(&cfg.params, cfg.seed)
    } else {
        simulate_path(
            &cfg.params,
            &mut RandomStream::new(cfg.seed, 0).fork(replication as u64),
        )
    }
}

/// Runs every method on `n_replications` paired market paths.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let methods = cfg.method_set();
    let runs: Vec<(MarketPath, Vec<RunOutcome>)> = (0..cfg.n_replications)
        .into_par_iter()
        .map(|l| {
            let path = replication_path(cfg, l);
            let outcomes = methods
                .iter()
                .map(|&m| {
                    let y_obs = path.observed();
                    let digest = path_digest(y_obs);
                    let rng = method_stream(cfg.seed, m, l);
                    let start = Instant::now();
                    let result = estimate(cfg, m, y_obs, &rng);
                    RunOutcome {
                        result,
                        seconds: start.elapsed().as_secs_f64(),
                        digest,
                    }
                })
                .collect();
            (path, outcomes)
        })
        .collect();

    let mut failures = Vec::new();
    let mut reports = Vec::new();
    let mut traces = Vec::new();
    for (k, &m) in methods.iter().enumerate() {
        let mut estimates = Vec::new();
        let mut cpu = 0.0;
        for (l, (_, outcomes)) in runs.iter().enumerate() {
            match &outcomes[k].result {
                Ok(e) => {
                    estimates.push(e.price);
                    cpu += outcomes[k].seconds;
                }
                Err(e) => failures.push(ReplicationFailure::new(m, Some(l), e)),
            }
        }
        match compute_report(&estimates, cfg.reference_price, cpu.max(f64::MIN_POSITIVE)) {
            Ok(stats) => reports.push(EstimatorReport {
                method: m,
                n_particles: cfg.n_particles,
                n_steps: cfg.params.n_steps,
                seed: cfg.seed,
                reference: cfg.reference_price,
                estimates,
                stats,
            }),
            Err(e) => failures.push(ReplicationFailure::new(m, None, &e)),
        }
        if cfg.emit_paths {
            if let Some((path, outcomes)) = runs.first() {
                if let Ok(e) = &outcomes[k].result {
                    traces.push(PathTrace {
                        method: m,
                        true_vol: path.x.clone(),
                        filtered_vol_mean: e.filtered_means.clone(),
                    });
                }
            }
        }
    }
    let digests = runs
        .iter()
        .map(|(_, o)| o.iter().map(|r| r.digest).collect())
        .collect();
    Ok(ExperimentOutput {
        reports,
        failures,
        digests,
        traces,
    })
}

impl ExperimentOutput {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.reports.iter().map(EstimatorReport::row).collect()
    }

    /// Writes `reports.csv`, one `report_<method>.json` per method,
    /// `failures.json` if anything failed, and `paths_<method>.csv` traces.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let csv_path = dir.join("reports.csv");
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        write_csv(&self.rows(), file)?;
        written.push(csv_path);

        for r in &self.reports {
            let p = dir.join(format!("report_{}.json", r.method));
            let text = serde_json::to_string_pretty(&r.record()).expect("report serialises");
            fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        if !self.failures.is_empty() {
            let p = dir.join("failures.json");
            let text = serde_json::to_string_pretty(&self.failures).expect("failures serialise");
            fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        for t in &self.traces {
            let p = dir.join(format!("paths_{}.csv", t.method));
            let file = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["t", "true_vol", "filtered_vol_mean"])?;
            for (i, (x, f)) in t.true_vol.iter().zip(&t.filtered_vol_mean).enumerate() {
                w.write_record([i.to_string(), x.to_string(), f.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}
