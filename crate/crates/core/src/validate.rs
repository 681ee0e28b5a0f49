//! Calibration checks: percentile of the truth under a posterior, PP-plot
//! trials, Beta credible bands and Kolmogorov-Smirnov tests.

use std::path::Path;

use rayon::prelude::*;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, sidecar_path, Metadata};
pub use crate::fit::INTRINSIC_NAMES;
use crate::fit::{fit_intrinsic, fit_observed_gaussian};
use crate::likelihood::LikelihoodMode;
use crate::population::DensityGrid;
use crate::presets::PresetName;
use crate::sampler::{remap_samples, PosteriorSamples, SamplerConfig};
use crate::simulate::{draw_catalog_bernoulli, NoiseModel};
use crate::stats::RngStream;

/// Fraction of marginal draws strictly below the true value, per parameter.
pub fn percentile_of_truth(samples: &PosteriorSamples, names: &[&str], truth: &[f64]) -> Result<Vec<f64>> {
    if names.len() != truth.len() {
        return Err(Error::domain("one true value is needed per parameter name"));
    }
    if samples.len() < 100 {
        return Err(Error::domain(format!("need at least 100 draws, got {}", samples.len())));
    }
    names
        .iter()
        .zip(truth)
        .map(|(name, &t)| {
            let p = samples.index_of(name)?;
            let below = samples.draws.iter().filter(|r| r[p] < t).count();
            Ok(below as f64 / samples.len() as f64)
        })
        .collect()
}

/// Kolmogorov distribution survival function `Q(λ) = P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    if lambda < 1.0 {
        // Jacobi-transformed series, fast for small λ
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20).map(|k| ((2 * k - 1) as f64).powi(2) * c).map(f64::exp).sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Asymptotic p-value with Stephens' finite-size correction.
fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let sn = n_eff.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// One-sample KS test of `values` against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(values: &[f64], cdf: F) -> Result<(f64, f64)> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("KS test needs a non-empty sample without NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok((d, ks_p_value(d, n)))
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() || a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::domain("KS test needs non-empty samples without NaN"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok((d, ks_p_value(d, na * nb / (na + nb))))
}

/// One-sample KS test against the uniform distribution on `[0, 1]`.
pub fn ks_uniformity_test(percentiles: &[f64]) -> Result<(f64, f64)> {
    if percentiles.len() < 10 {
        return Err(Error::domain(format!("need at least 10 values, got {}", percentiles.len())));
    }
    if let Some(v) = percentiles.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("percentile {v} lies outside [0, 1]")));
    }
    ks_one_sample(percentiles, |x| x)
}

/// Central `level` interval of `Beta(k, n − k + 1)` for every rank `k = 1..=n`.
pub fn beta_credible_band(n: usize, level: f64) -> Result<Vec<(f64, f64)>> {
    if n == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("need n >= 1 and 0 < level < 1 (got {n}, {level})")));
    }
    let tail = 0.5 * (1.0 - level);
    (1..=n)
        .map(|k| {
            let b = Beta::new(k as f64, (n - k + 1) as f64).map_err(|e| Error::domain(e.to_string()))?;
            Ok((b.inverse_cdf(tail), b.inverse_cdf(1.0 - tail)))
        })
        .collect()
}

/// Fraction of ranks whose sorted percentile lies inside the Beta band.
pub fn band_coverage(percentiles: &[f64], level: f64) -> Result<f64> {
    let band = beta_credible_band(percentiles.len(), level)?;
    let mut v = percentiles.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let inside = v.iter().zip(&band).filter(|(x, (lo, hi))| lo <= *x && *x <= hi).count();
    Ok(inside as f64 / v.len() as f64)
}

/// Jensen-Shannon divergence (nats) between two densities on one grid.
pub fn js_divergence(p: &DensityGrid, q: &DensityGrid) -> Result<f64> {
    if p.points() != q.points() {
        return Err(Error::domain("densities are on different grids"));
    }
    let x = p.points();
    let (p, q) = (p.normalized()?.densities(), q.normalized()?.densities());
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let f: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            if m > 0.0 {
                0.5 * (term(a, m) + term(b, m))
            } else {
                0.0
            }
        })
        .collect();
    Ok((1..x.len()).map(|i| 0.5 * (x[i] - x[i - 1]) * (f[i] + f[i - 1])).sum())
}

/// Whether the truth lies inside the `level` joint credible region, using the
/// Gaussian approximation `(t − m)ᵀ Σ⁻¹ (t − m) ≤ χ²_{2, level}`.
pub fn in_joint_credible_region(samples: &PosteriorSamples, names: &[&str; 2], truth: [f64; 2], level: f64) -> Result<bool> {
    Ok(mahalanobis_sq(samples, names, truth)? <= -2.0 * (1.0 - level).ln())
}

/// Squared Mahalanobis distance of a point from a two-parameter posterior.
pub fn mahalanobis_sq(samples: &PosteriorSamples, names: &[&str; 2], truth: [f64; 2]) -> Result<f64> {
    let (i, j) = (samples.index_of(names[0])?, samples.index_of(names[1])?);
    let m = samples.mean();
    let c = samples.covariance();
    let (a, b, d) = (c[i][i], c[i][j], c[j][j]);
    let det = a * d - b * b;
    if !(det > 0.0) {
        return Err(Error::domain("posterior covariance is singular"));
    }
    let (u, v) = (truth[0] - m[i], truth[1] - m[j]);
    Ok((d * u * u - 2.0 * b * u * v + a * v * v) / det)
}

/// `(truth − posterior mean) / posterior sd` per parameter.
pub fn z_scores(samples: &PosteriorSamples, names: &[&str], truth: &[f64]) -> Result<Vec<f64>> {
    let m = samples.mean();
    let c = samples.covariance();
    names
        .iter()
        .zip(truth)
        .map(|(n, &t)| {
            let p = samples.index_of(n)?;
            Ok((t - m[p]) / c[p][p].sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pipeline {
    /// Fit the observed Gaussian, then map the draws to the intrinsic space.
    #[default]
    Remap,
    /// Fit the intrinsic parameters with `α(Λ)` in the likelihood.
    InLikelihood,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Remap => "remap",
            Pipeline::InLikelihood => "in-likelihood",
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remap" | "post-processing" => Ok(Pipeline::Remap),
            "in-likelihood" => Ok(Pipeline::InLikelihood),
            _ => Err(Error::Config(format!("unknown pipeline '{s}' (expected remap or in-likelihood)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PPConfig {
    pub model: PresetName,
    pub n_trials: usize,
    pub n_events: usize,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub level: f64,
}

impl PPConfig {
    pub fn new(model: PresetName, pipeline: Pipeline, seed: u64) -> Self {
        PPConfig {
            model,
            n_trials: 100,
            n_events: 1000,
            pipeline,
            seed,
            // under a flat prior on (mu_lambda, sigma_lambda) the posterior has a
            // long tail towards sigma_obs -> sigma_d that the stretch move crosses slowly
            sampler: SamplerConfig {
                n_steps: match pipeline {
                    Pipeline::Remap => 3000,
                    Pipeline::InLikelihood => 60000,
                },
                ..Default::default()
            },
            level: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PPResult {
    pub config: PPConfig,
    pub names: Vec<String>,
    /// Trial index of every completed trial.
    pub trials: Vec<u64>,
    /// `percentiles[p][t]` for parameter `p` and completed trial `t`.
    pub percentiles: Vec<Vec<f64>>,
    pub excluded: usize,
    pub ks: Vec<(f64, f64)>,
    pub band_coverage: Vec<f64>,
}

impl PPResult {
    /// More than 5% excluded trials fails the whole run.
    pub fn harness_ok(&self) -> bool {
        self.excluded as f64 <= 0.05 * self.config.n_trials as f64
    }

    pub fn uniform(&self, p: usize) -> bool {
        self.ks[p].1 > 0.01 && self.band_coverage[p] >= 0.9
    }

    pub fn passed(&self) -> bool {
        self.harness_ok() && (0..self.names.len()).all(|p| self.uniform(p))
    }

    /// Rows `trial,parameter,percentile`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,parameter,percentile\n");
        for (t, trial) in self.trials.iter().enumerate() {
            for (p, name) in self.names.iter().enumerate() {
                out.push_str(&format!("{trial},{name},{}\n", fmt_f64(self.percentiles[p][t])));
            }
        }
        out
    }

    pub fn summary(&self) -> Metadata {
        let c = &self.config;
        let mut m = Metadata::new("pp_result")
            .count("n_trials", c.n_trials as u64)
            .count("n_events", c.n_events as u64)
            .count("excluded_trials", self.excluded as u64)
            .param("band_level", c.level)
            .note("model", c.model.as_str())
            .note("pipeline", c.pipeline.as_str())
            .note("passed", self.passed().to_string());
        m.seed = Some(c.seed);
        for (p, name) in self.names.iter().enumerate() {
            m = m
                .param(&format!("ks_statistic_{name}"), self.ks[p].0)
                .param(&format!("ks_p_value_{name}"), self.ks[p].1)
                .param(&format!("band_coverage_{name}"), self.band_coverage[p]);
        }
        m
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        self.summary().write(&sidecar_path(path))
    }
}

/// Stream offset separating sampler streams from catalogue streams.
const SAMPLER_STREAM: u64 = 1 << 32;

/// Simulates one catalogue and returns the intrinsic-space posterior.
pub fn run_trial(cfg: &PPConfig, trial: u64) -> Result<PosteriorSamples> {
    let preset = cfg.model.preset();
    let mut rng = RngStream::new(cfg.seed, trial);
    let cat = draw_catalog_bernoulli(
        &preset.intrinsic,
        &preset.selection,
        cfg.n_events,
        &NoiseModel::Homoscedastic(preset.sigma0),
        &mut rng,
    )?;
    let scfg = SamplerConfig { seed: cfg.seed, stream: SAMPLER_STREAM + trial, ..cfg.sampler.clone() };
    match cfg.pipeline {
        Pipeline::Remap => remap_samples(&fit_observed_gaussian(&cat.events, &scfg)?, &preset.selection),
        Pipeline::InLikelihood => {
            fit_intrinsic(&cat.events, &preset.selection, LikelihoodMode::ThresholdOnParameters, &scfg)
        }
    }
}

/// Runs the PP-plot trials in parallel, one random stream per trial.
pub fn run_pp_trials(cfg: &PPConfig) -> Result<PPResult> {
    if cfg.n_trials < 10 {
        return Err(Error::domain(format!("need at least 10 trials, got {}", cfg.n_trials)));
    }
    if cfg.model == PresetName::Truncated {
        return Err(Error::domain("PP trials use the Gaussian models (wide, narrow, equal)"));
    }
    let preset = cfg.model.preset();
    let truth = [preset.intrinsic.mu, preset.intrinsic.sigma];
    let outcomes: Vec<Option<Vec<f64>>> = (0..cfg.n_trials as u64)
        .into_par_iter()
        .map(|t| {
            let s = match run_trial(cfg, t) {
                Ok(s) => s,
                Err(e) if e.is_numerical() => return Ok(None),
                Err(e) => return Err(e),
            };
            if !s.diagnostics.converged {
                return Ok(None);
            }
            percentile_of_truth(&s, &INTRINSIC_NAMES, &truth).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut trials = Vec::new();
    let mut percentiles = vec![Vec::new(); 2];
    for (t, o) in outcomes.into_iter().enumerate() {
        if let Some(p) = o {
            trials.push(t as u64);
            percentiles[0].push(p[0]);
            percentiles[1].push(p[1]);
        }
    }
    let excluded = cfg.n_trials - trials.len();
    let mut ks = Vec::new();
    let mut cov = Vec::new();
    for p in &percentiles {
        if p.len() >= 10 {
            ks.push(ks_uniformity_test(p)?);
            cov.push(band_coverage(p, cfg.level)?);
        } else {
            ks.push((f64::NAN, 0.0));
            cov.push(0.0);
        }
    }
    Ok(PPResult {
        config: cfg.clone(),
        names: INTRINSIC_NAMES.iter().map(|s| s.to_string()).collect(),
        trials,
        percentiles,
        excluded,
        ks,
        band_coverage: cov,
    })
}
