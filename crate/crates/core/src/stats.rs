//! Payoff evaluation and replication statistics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::ParticleCloud;
use crate::model::SteinSteinParams;
use crate::scalar::Real;

/// `e^{−rT} max(e^{y_T} − K, 0)`.
pub fn discounted_call_payoff<T: Real>(params: &SteinSteinParams<T>, y_terminal: T) -> T {
    params.discount() * (y_terminal.exp() - params.strike).max(T::zero())
}

/// Weighted mean discounted payoff of a terminal cloud.
pub fn weighted_call_price<T: Real>(
    params: &SteinSteinParams<T>,
    cloud: &ParticleCloud<T>,
) -> Result<T> {
    let w = cloud.weights()?;
    let price: T = cloud
        .y
        .iter()
        .zip(&w)
        .map(|(y, w)| *w * discounted_call_payoff(params, *y))
        .sum();
    if !price.is_finite() {
        return Err(Error::NonFinite("price"));
    }
    Ok(price)
}

/// Estimator families compared by the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mc,
    Pf,
    Homotopy,
    RwHomotopy,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mc, Method::Pf, Method::Homotopy, Method::RwHomotopy];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Pf => "pf",
            Method::Homotopy => "homotopy",
            Method::RwHomotopy => "rw-homotopy",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Summary statistics of `M` replicated price estimates against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportStats {
    pub m_s: usize,
    pub mean: f64,
    /// Sample standard deviation, divisor `M − 1`.
    pub st_dev: f64,
    /// Root mean squared error against the reference, divisor `M`.
    pub rmse: f64,
    /// `sqrt(max(0, rmse² − ((M−1)/M)·st_dev²))`, i.e. `|mean − reference|`.
    pub bias: f64,
    /// Set when `rmse < st_dev`, where the bias estimate is dominated by noise.
    pub noisy_bias: bool,
    /// `rmse / mean`.
    pub rrmse: f64,
    /// `rmse / reference`.
    pub rrmse_ref: f64,
    /// `st_dev / mean`.
    pub rel_error: f64,
    pub cpu_seconds: f64,
    /// `1 / (rel_error² · cpu_seconds)`; infinite when `rel_error = 0`.
    pub fom: f64,
}

pub fn compute_report(estimates: &[f64], reference: f64, cpu_seconds: f64) -> Result<ReportStats> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::InsufficientReplications(m));
    }
    if !(cpu_seconds > 0.0) || !cpu_seconds.is_finite() {
        return Err(Error::InvalidParams("cpu_seconds must be positive".into()));
    }
    if estimates.iter().any(|e| !e.is_finite()) || !reference.is_finite() {
        return Err(Error::NonFinite("estimate"));
    }
    let mf = m as f64;
    let mean = estimates.iter().sum::<f64>() / mf;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (mf - 1.0);
    let st_dev = var.sqrt();
    let rmse = (estimates
        .iter()
        .map(|e| (e - reference).powi(2))
        .sum::<f64>()
        / mf)
        .sqrt();
    let bias = (rmse * rmse - (mf - 1.0) / mf * var).max(0.0).sqrt();
    let rel_error = st_dev / mean;
    let fom = if rel_error == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (rel_error * rel_error * cpu_seconds)
    };
    Ok(ReportStats {
        m_s: m,
        mean,
        st_dev,
        rmse,
        bias,
        noisy_bias: rmse < st_dev,
        rrmse: rmse / mean,
        rrmse_ref: rmse / reference,
        rel_error,
        cpu_seconds,
        fom,
    })
}

/// Full report of one estimator in one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    pub method: Method,
    pub n_particles: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub reference: f64,
    pub estimates: Vec<f64>,
    pub stats: ReportStats,
}

impl EstimatorReport {
    pub fn row(&self) -> ReportRow {
        let s = &self.stats;
        ReportRow {
            method: self.method,
            n_particles: self.n_particles,
            n_steps: self.n_steps,
            m_s: s.m_s,
            mean: s.mean,
            st_dev: s.st_dev,
            rmse: s.rmse,
            bias: s.bias,
            rrmse: s.rrmse,
            rel_error: s.rel_error,
            cpu_seconds: s.cpu_seconds,
            fom: s.fom,
            seed: self.seed,
        }
    }

    pub fn record(&self) -> ReportRecord {
        ReportRecord {
            row: self.row(),
            rrmse_ref: Some(self.stats.rrmse_ref),
            noisy_bias: self.stats.noisy_bias,
            estimates: self.estimates.clone(),
        }
    }
}

/// One CSV line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub n_particles: usize,
    pub n_steps: usize,
    pub m_s: usize,
    pub mean: f64,
    pub st_dev: f64,
    pub rmse: f64,
    pub bias: f64,
    pub rrmse: f64,
    pub rel_error: f64,
    pub cpu_seconds: f64,
    pub fom: f64,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "method",
    "n_particles",
    "n_steps",
    "m_s",
    "mean",
    "st_dev",
    "rmse",
    "bias",
    "rrmse",
    "rel_error",
    "cpu_seconds",
    "fom",
    "seed",
];

/// JSON form of a report: the CSV fields plus extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    #[serde(flatten)]
    pub row: ReportRow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rrmse_ref: Option<f64>,
    #[serde(default)]
    pub noisy_bias: bool,
    #[serde(default)]
    pub estimates: Vec<f64>,
}

pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(format!(
            "unexpected CSV header: {:?}",
            headers
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
