//! Affine-invariant ensemble sampler with stretch moves, plus effective
//! sample size estimation and posterior remapping.
//!
//! Proposals are drawn serially from one [`RngStream`] and only the
//! log-likelihood evaluations fan out across threads, so the output for a
//! given seed does not depend on the thread count.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{sidecar_path, Metadata, Table};
use crate::population::{lambda_of_theta, SelectionFunction};
use crate::stats::{GaussianParams, RngStream};

/// Uniform prior over an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBox {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PriorBox {
    pub fn new<S: Into<String>>(params: Vec<(S, f64, f64)>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::domain("prior box needs at least one parameter"));
        }
        let mut b = PriorBox {
            names: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        };
        for (name, lo, hi) in params {
            let name = name.into();
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::domain(format!("prior bounds for '{name}' must satisfy lower < upper")));
            }
            b.names.push(name);
            b.lower.push(lo);
            b.upper.push(hi);
        }
        Ok(b)
    }

    /// Default box for a (location, width) pair: `[-20, 20] × (0.01, 20]`.
    pub fn location_scale(loc: &str, scale: &str) -> Self {
        PriorBox::new(vec![(loc, -20.0, 20.0), (scale, 0.01, 20.0)]).expect("valid bounds")
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v > lo && v <= hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_walkers: usize,
    pub n_steps: usize,
    /// Steps discarded as burn-in; half of `n_steps` when `None`.
    pub n_burn: Option<usize>,
    pub seed: u64,
    pub stream: u64,
    pub stretch_scale: f64,
    /// Per-parameter ESS below which the run is flagged as not converged.
    pub min_ess: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_walkers: 32,
            n_steps: 4000,
            n_burn: None,
            seed: 0,
            stream: 0,
            stretch_scale: 2.0,
            min_ess: 1000.0,
        }
    }
}

impl SamplerConfig {
    pub fn burn(&self) -> usize {
        self.n_burn.unwrap_or(self.n_steps / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub acceptance_rate: f64,
    pub ess: Vec<f64>,
    pub converged: bool,
    pub infeasible_dropped: usize,
    /// Set when more than 5% of draws were dropped by a remap.
    pub drop_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// Row-major draws. Rows are ordered step by step, walker within step.
    pub draws: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    /// Number of interleaved chains; 1 for a plain sequence.
    pub n_chains: usize,
    pub diagnostics: Diagnostics,
    pub config: Option<SamplerConfig>,
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Samples `∝ exp(loglike) · uniform(prior)`.
pub fn sample_posterior<F>(loglike: F, prior: &PriorBox, cfg: &SamplerConfig) -> Result<PosteriorSamples>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = prior.dim();
    let nw = cfg.n_walkers;
    if nw < 2 * dim.max(2) || nw % 2 != 0 {
        return Err(Error::domain(format!(
            "need an even number of at least {} walkers, got {nw}",
            2 * dim.max(2)
        )));
    }
    if cfg.burn() >= cfg.n_steps {
        return Err(Error::domain("burn-in must be shorter than the run"));
    }
    if !(cfg.stretch_scale > 1.0) {
        return Err(Error::domain("stretch scale must exceed 1"));
    }
    let mut rng = RngStream::new(cfg.seed, cfg.stream);
    let eval = |x: &[f64]| {
        if prior.contains(x) {
            finite_or_neg_inf(loglike(x))
        } else {
            f64::NEG_INFINITY
        }
    };

    let (mut pos, mut lp) = initialise(&eval, prior, nw, &mut rng)?;

    let keep = cfg.n_steps - cfg.burn();
    let mut draws = Vec::with_capacity(keep * nw);
    let mut log_post = Vec::with_capacity(keep * nw);
    let mut accepted = 0usize;
    let a = cfg.stretch_scale;
    let half = nw / 2;

    for step in 0..cfg.n_steps {
        for first in [true, false] {
            let (active, other) = if first { (0..half, half..nw) } else { (half..nw, 0..half) };
            let mut proposals = Vec::with_capacity(half);
            for k in active.clone() {
                let j = rng.random_range(other.clone());
                let u: f64 = rng.random();
                let z = ((a - 1.0) * u + 1.0).powi(2) / a;
                let y: Vec<f64> = pos[k].iter().zip(&pos[j]).map(|(&xk, &xj)| xj + z * (xk - xj)).collect();
                proposals.push((k, z, y));
            }
            let new_lp: Vec<f64> = proposals.par_iter().map(|(_, _, y)| eval(y)).collect();
            for ((k, z, y), lpy) in proposals.into_iter().zip(new_lp) {
                let ln_q = (dim as f64 - 1.0) * z.ln() + lpy - lp[k];
                let u: f64 = rng.random();
                if lpy > f64::NEG_INFINITY && u.ln() < ln_q {
                    pos[k] = y;
                    lp[k] = lpy;
                    if step >= cfg.burn() {
                        accepted += 1;
                    }
                }
            }
        }
        if step >= cfg.burn() {
            draws.extend(pos.iter().cloned());
            log_post.extend(lp.iter().copied());
        }
    }

    let mut out = PosteriorSamples {
        names: prior.names().to_vec(),
        draws,
        log_posterior: log_post,
        n_chains: nw,
        diagnostics: Diagnostics {
            acceptance_rate: accepted as f64 / (keep * nw) as f64,
            ..Default::default()
        },
        config: Some(cfg.clone()),
    };
    let ess = effective_sample_size(&out).unwrap_or_else(|_| vec![0.0; dim]);
    out.diagnostics.converged = ess.iter().all(|&e| e >= cfg.min_ess);
    out.diagnostics.ess = ess;
    Ok(out)
}

/// Starts the walkers at the best points of a uniform scatter over the box.
fn initialise<F: Fn(&[f64]) -> f64 + Sync>(
    eval: &F,
    prior: &PriorBox,
    nw: usize,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n_cand = (64 * nw).max(2000);
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
    for _ in 0..8 {
        let cands: Vec<Vec<f64>> = (0..n_cand)
            .map(|_| {
                (0..prior.dim())
                    .map(|i| {
                        let (lo, hi) = prior.bounds(i);
                        // (lo, hi] so that the open lower bound is excluded
                        hi - rng.random::<f64>() * (hi - lo)
                    })
                    .collect()
            })
            .collect();
        let lps: Vec<f64> = cands.par_iter().map(|x| eval(x)).collect();
        scored.extend(lps.into_iter().zip(cands).filter(|(l, _)| l.is_finite()));
        if scored.len() >= nw {
            break;
        }
    }
    if scored.len() < nw {
        return Err(Error::Initialization(format!(
            "only {} of the initial points have a finite likelihood",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    scored.truncate(nw);
    let (lp, pos) = scored.into_iter().unzip();
    Ok((pos, lp))
}

/// Integrated autocorrelation time averaged over interleaved chains, with
/// Sokal's adaptive window (`c = 5`). `None` for a constant chain.
pub fn autocorr_time(values: &[f64], n_chains: usize) -> Option<f64> {
    let n_chains = n_chains.max(1);
    let len = values.len() / n_chains;
    if len < 2 {
        return None;
    }
    let chains: Vec<Vec<f64>> = (0..n_chains)
        .map(|c| (0..len).map(|i| values[i * n_chains + c]).collect())
        .collect();
    let centred: Vec<(Vec<f64>, f64)> = chains
        .iter()
        .map(|ch| {
            let m = ch.iter().sum::<f64>() / len as f64;
            let d: Vec<f64> = ch.iter().map(|x| x - m).collect();
            let v = d.iter().map(|x| x * x).sum::<f64>() / len as f64;
            (d, v)
        })
        .collect();
    let var: f64 = centred.iter().map(|(_, v)| v).sum::<f64>() / n_chains as f64;
    if !(var > 0.0) {
        return None;
    }
    let mut tau = 1.0;
    for lag in 1..len / 2 {
        let acf = centred
            .iter()
            .map(|(d, _)| d[..len - lag].iter().zip(&d[lag..]).map(|(a, b)| a * b).sum::<f64>() / len as f64)
            .sum::<f64>()
            / (n_chains as f64 * var);
        tau += 2.0 * acf;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    Some(tau)
}

/// Effective sample size of a single sequence; 0 for a constant one.
pub fn ess_of_chain(values: &[f64]) -> f64 {
    ess_interleaved(values, 1)
}

fn ess_interleaved(values: &[f64], n_chains: usize) -> f64 {
    match autocorr_time(values, n_chains) {
        Some(tau) => (values.len() as f64 / tau.max(1.0)).min(values.len() as f64),
        None => 0.0,
    }
}

/// Per-parameter effective sample size.
pub fn effective_sample_size(samples: &PosteriorSamples) -> Result<Vec<f64>> {
    if samples.draws.len() < 100 {
        return Err(Error::domain(format!(
            "effective sample size needs at least 100 draws, got {}",
            samples.draws.len()
        )));
    }
    Ok((0..samples.names.len())
        .map(|p| ess_interleaved(&samples.column(p), samples.n_chains))
        .collect())
}

/// Maps `(mu_obs, sigma_obs)` draws onto intrinsic `(mu_lambda, sigma_lambda)`.
/// Draws outside the image of the intrinsic space are dropped and counted.
pub fn remap_samples(samples: &PosteriorSamples, sel: &SelectionFunction) -> Result<PosteriorSamples> {
    let mu = samples.index_of("mu_obs")?;
    let sd = samples.index_of("sigma_obs")?;
    let mut draws = Vec::with_capacity(samples.draws.len());
    let mut log_post = Vec::with_capacity(samples.draws.len());
    let mut dropped = 0;
    for (row, &lp) in samples.draws.iter().zip(&samples.log_posterior) {
        let theta = GaussianParams::new(row[mu], row[sd])?;
        match lambda_of_theta(&theta, sel) {
            Ok(l) => {
                draws.push(vec![l.mu, l.sigma]);
                log_post.push(lp);
            }
            Err(Error::Infeasible(_)) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if draws.is_empty() {
        return Err(Error::RemapFailure(dropped));
    }
    let total = samples.draws.len();
    let mut diagnostics = samples.diagnostics.clone();
    diagnostics.infeasible_dropped = dropped;
    diagnostics.drop_warning = dropped as f64 > 0.05 * total as f64;
    Ok(PosteriorSamples {
        names: vec!["mu_lambda".into(), "sigma_lambda".into()],
        draws,
        log_posterior: log_post,
        n_chains: if dropped == 0 { samples.n_chains } else { 1 },
        diagnostics,
        config: samples.config.clone(),
    })
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::domain(format!("no parameter named '{name}' (have {:?})", self.names)))
    }

    pub fn column(&self, p: usize) -> Vec<f64> {
        self.draws.iter().map(|r| r[p]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.names.len())
            .map(|p| self.draws.iter().map(|r| r[p]).sum::<f64>() / n)
            .collect()
    }

    /// Sample covariance matrix.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let m = self.mean();
        let d = m.len();
        let n = self.len() as f64;
        let mut c = vec![vec![0.0; d]; d];
        for r in &self.draws {
            for i in 0..d {
                for j in 0..d {
                    c[i][j] += (r[i] - m[i]) * (r[j] - m[j]);
                }
            }
        }
        c.iter_mut().flatten().for_each(|v| *v /= n - 1.0);
        c
    }

    /// Linear-interpolated quantile of one parameter.
    pub fn quantile(&self, p: usize, q: f64) -> f64 {
        let mut v = self.column(p);
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    }

    pub fn to_table(&self) -> Table {
        let mut header = self.names.clone();
        header.push("log_posterior".into());
        let mut t = Table::new(header);
        t.rows = self
            .draws
            .iter()
            .zip(&self.log_posterior)
            .map(|(r, &lp)| {
                let mut row = r.clone();
                row.push(lp);
                row
            })
            .collect();
        t
    }

    pub fn to_csv(&self) -> String {
        self.to_table().to_csv()
    }

    /// Parses the samples CSV. A trailing `log_posterior` column is optional.
    pub fn parse_csv(text: &str) -> Result<PosteriorSamples> {
        let t = Table::parse(text)?;
        let lp_col = t.column_index("log_posterior");
        let names: Vec<String> = t.header.iter().filter(|h| *h != "log_posterior").cloned().collect();
        if names.is_empty() {
            return Err(Error::parse(1, "samples file has no parameter columns"));
        }
        let mut draws = Vec::with_capacity(t.rows.len());
        let mut log_post = Vec::with_capacity(t.rows.len());
        for (i, row) in t.rows.iter().enumerate() {
            let vals: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != lp_col)
                .map(|(_, &v)| v)
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(i + 2, "parameter values must be finite"));
            }
            draws.push(vals);
            log_post.push(lp_col.map_or(f64::NAN, |j| row[j]));
        }
        if draws.is_empty() {
            return Err(Error::parse(2, "samples file has no draws"));
        }
        Ok(PosteriorSamples {
            names,
            draws,
            log_posterior: log_post,
            n_chains: 1,
            diagnostics: Diagnostics::default(),
            config: None,
        })
    }

    pub fn metadata(&self) -> Metadata {
        let d = &self.diagnostics;
        let mut m = Metadata::new("posterior_samples")
            .param("acceptance_rate", d.acceptance_rate)
            .count("n_draws", self.len() as u64)
            .count("n_chains", self.n_chains as u64)
            .count("infeasible_dropped", d.infeasible_dropped as u64)
            .note("converged", d.converged.to_string());
        if d.drop_warning {
            m = m.note("warning", "more than 5% of draws were infeasible and dropped");
        }
        for (name, ess) in self.names.iter().zip(&d.ess) {
            m = m.param(&format!("ess_{name}"), *ess);
        }
        if let Some(c) = &self.config {
            m.seed = Some(c.seed);
            m = m
                .count("n_walkers", c.n_walkers as u64)
                .count("n_steps", c.n_steps as u64)
                .count("n_burn", c.burn() as u64)
                .count("stream", c.stream)
                .param("stretch_scale", c.stretch_scale)
                .param("min_ess", c.min_ess);
        }
        m
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        self.metadata().write(&sidecar_path(path))
    }
}
