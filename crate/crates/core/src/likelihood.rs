//! Log-likelihoods for the observed-distribution route and the in-likelihood
//! route, plus a quadrature oracle for all of them.
//!
//! Per-event terms are summed in fixed chunks whose partial sums are combined
//! pairwise, so results are bit-identical whatever the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::population::{ln_alpha_of_lambda, DensityGrid, IntrinsicModel, ObservedModel, SelectionFunction};
use crate::quad::{integrate_with_breaks, QuadConfig};
use crate::simulate::Event;
use crate::stats::{is_log_zero, log_gaussian_sf, GaussianParams, TruncGaussianParams, LN_SQRT_2PI, LOG_ZERO};

const CHUNK: usize = 1024;
const PARALLEL_MIN: usize = 32 * CHUNK;

fn pairwise(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    while v.len() > 1 {
        v = v.chunks(2).map(|c| c.iter().sum()).collect();
    }
    v[0]
}

/// Deterministic sum of `term(i)` over `0..n`.
pub fn stable_sum<F: Fn(usize) -> f64 + Sync>(n: usize, term: F) -> f64 {
    let chunk_sum = |c: usize| {
        let end = ((c + 1) * CHUNK).min(n);
        (c * CHUNK..end).map(&term).sum::<f64>()
    };
    let n_chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = if n >= PARALLEL_MIN {
        (0..n_chunks).into_par_iter().map(chunk_sum).collect()
    } else {
        (0..n_chunks).map(chunk_sum).collect()
    };
    pairwise(partial)
}

#[inline]
pub(crate) fn ln_normal(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// Sufficient statistics of homoscedastic measured values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSummary {
    pub n: usize,
    pub mean_obs: f64,
    /// Sum of squared deviations of the measured values from `mean_obs`.
    pub sumsq_obs: f64,
    pub noise_sd: f64,
}

impl DataSummary {
    /// `None` when the events are empty or do not share one noise width.
    pub fn from_events(events: &[Event]) -> Option<Self> {
        let first = events.first()?.noise_sd;
        if events.iter().any(|e| e.noise_sd != first) {
            return None;
        }
        let n = events.len();
        let mean = stable_sum(n, |i| events[i].observed_value) / n as f64;
        let ss = stable_sum(n, |i| (events[i].observed_value - mean).powi(2));
        Some(DataSummary {
            n,
            mean_obs: mean,
            sumsq_obs: ss,
            noise_sd: first,
        })
    }

    /// `Σ ln N(x̂_i | mean, sd)`.
    pub fn sum_ln_normal(&self, mean: f64, sd: f64) -> f64 {
        let n = self.n as f64;
        let d = self.mean_obs - mean;
        -n * (sd.ln() + LN_SQRT_2PI) - (self.sumsq_obs + n * d * d) / (2.0 * sd * sd)
    }
}

/// Measured data in the form most efficient for Gaussian likelihoods.
#[derive(Debug, Clone, Copy)]
pub enum ObservedData<'a> {
    Events(&'a [Event]),
    Summary(DataSummary),
}

impl<'a> ObservedData<'a> {
    /// Uses sufficient statistics when every event shares one noise width.
    pub fn prepare(events: &'a [Event]) -> Self {
        match DataSummary::from_events(events) {
            Some(s) => ObservedData::Summary(s),
            None => ObservedData::Events(events),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ObservedData::Events(e) => e.len(),
            ObservedData::Summary(s) => s.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which quantity the detection decision depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodMode {
    /// `p_det` acts on the true values (the simulated catalogues).
    #[default]
    ThresholdOnParameters,
    /// Detection is a deterministic function of the data, so `p(det | d) = 1`
    /// and `p_det` leaves the per-event integrand.
    ThresholdOnData,
}

/// `Σ ln N(x̂_i | μ_obs, √(σ_obs² + σ_i²))`.
pub fn loglike_observed_gaussian(data: &ObservedData, theta: &GaussianParams) -> f64 {
    let (m, v) = (theta.mean(), theta.sd() * theta.sd());
    match data {
        ObservedData::Summary(s) => s.sum_ln_normal(m, (v + s.noise_sd * s.noise_sd).sqrt()),
        ObservedData::Events(ev) => stable_sum(ev.len(), |i| {
            let e = &ev[i];
            ln_normal(e.observed_value, m, (v + e.noise_sd * e.noise_sd).sqrt())
        }),
    }
}

/// Per-event `ln ∫ N(x̂ | x, σ) TN(x | mean, sd, lower) dx`, in closed form.
pub fn ln_marginal_truncnorm(observed: f64, noise_sd: f64, p: &TruncGaussianParams) -> f64 {
    let (s2, n2) = (p.sd() * p.sd(), noise_sd * noise_sd);
    let total = s2 + n2;
    let mu_c = (p.mean() * n2 + observed * s2) / total;
    let sd_c = p.sd() * noise_sd / total.sqrt();
    ln_normal(observed, p.mean(), total.sqrt()) + log_gaussian_sf((p.lower() - mu_c) / sd_c) - p.log_mass()
}

pub fn loglike_observed_truncnorm(events: &[Event], p: &TruncGaussianParams) -> f64 {
    stable_sum(events.len(), |i| {
        ln_marginal_truncnorm(events[i].observed_value, events[i].noise_sd, p)
    })
}

/// `ln ∫ N(x | μ_c, σ_c) p_det(x) dx`.
pub(crate) fn ln_detect_gaussian_mass(mu_c: f64, sd_c: f64, sel: &SelectionFunction) -> f64 {
    match *sel {
        SelectionFunction::Gaussian { mu, sigma, .. } => {
            let tot = (sigma * sigma + sd_c * sd_c).sqrt();
            // ∫ N(x|μc,σc) exp(-(x-μD)²/2σD²) dx, then the chosen peak scale
            ln_normal(mu_c, mu, tot) + sigma.ln() + LN_SQRT_2PI + sel.ln_peak()
        }
        SelectionFunction::Step { threshold } => log_gaussian_sf((threshold - mu_c) / sd_c),
    }
}

/// Hierarchical likelihood of the intrinsic parameters with the `α(Λ)`
/// normalisation.
pub fn loglike_inlikelihood_gaussian(
    data: &ObservedData,
    intr: &IntrinsicModel,
    sel: &SelectionFunction,
    mode: LikelihoodMode,
) -> Result<f64> {
    let ln_alpha = ln_alpha_of_lambda(intr, sel);
    if is_log_zero(ln_alpha) || !ln_alpha.is_finite() || ln_alpha < (1e-300f64).ln() {
        return Err(Error::ImpracticalSelection {
            alpha: if is_log_zero(ln_alpha) { 0.0 } else { ln_alpha.exp() },
        });
    }
    let n = data.len() as f64;
    let vl = intr.sigma * intr.sigma;
    let body = match (mode, data) {
        (LikelihoodMode::ThresholdOnData, ObservedData::Summary(s)) => {
            s.sum_ln_normal(intr.mu, (vl + s.noise_sd * s.noise_sd).sqrt())
        }
        (LikelihoodMode::ThresholdOnData, ObservedData::Events(ev)) => stable_sum(ev.len(), |i| {
            ln_normal(ev[i].observed_value, intr.mu, (vl + ev[i].noise_sd.powi(2)).sqrt())
        }),
        (
            LikelihoodMode::ThresholdOnParameters,
            ObservedData::Summary(s),
        ) if matches!(sel, SelectionFunction::Gaussian { .. }) => {
            let SelectionFunction::Gaussian { mu: mu_d, sigma: sigma_d, .. } = *sel else {
                unreachable!()
            };
            let vn = s.noise_sd * s.noise_sd;
            let tot = vl + vn;
            // μ_c = a + b x̂ is affine in the measured value
            let a = intr.mu * vn / tot;
            let b = vl / tot;
            let sd_c = (vl * vn / tot).sqrt();
            let tau = (sigma_d * sigma_d + sd_c * sd_c).sqrt();
            let d = a + b * s.mean_obs - mu_d;
            let ln_mass = -n * (tau.ln() + LN_SQRT_2PI) - (n * d * d + b * b * s.sumsq_obs) / (2.0 * tau * tau)
                + n * (sigma_d.ln() + LN_SQRT_2PI + sel.ln_peak());
            s.sum_ln_normal(intr.mu, tot.sqrt()) + ln_mass
        }
        (LikelihoodMode::ThresholdOnParameters, ObservedData::Summary(s)) => {
            return Err(Error::domain(format!(
                "summary data cannot be used with a step selection ({} events)",
                s.n
            )))
        }
        (LikelihoodMode::ThresholdOnParameters, ObservedData::Events(ev)) => stable_sum(ev.len(), |i| {
            let (x, vn) = (ev[i].observed_value, ev[i].noise_sd.powi(2));
            let tot = vl + vn;
            let mu_c = (intr.mu * vn + x * vl) / tot;
            let sd_c = (vl * vn / tot).sqrt();
            ln_normal(x, intr.mu, tot.sqrt()) + ln_detect_gaussian_mass(mu_c, sd_c, sel)
        }),
    };
    Ok(body - n * ln_alpha)
}

/// A normalised density that the quadrature oracle can integrate.
pub trait Density: Sync {
    fn pdf(&self, x: f64) -> f64;
    /// Interval outside which the density is negligible or zero.
    fn support(&self) -> (f64, f64);
    /// Points where the integrand may be non-smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl Density for ObservedModel {
    fn pdf(&self, x: f64) -> f64 {
        let l = self.ln_pdf(x);
        if is_log_zero(l) {
            0.0
        } else {
            l.exp()
        }
    }

    fn support(&self) -> (f64, f64) {
        match self {
            ObservedModel::Gaussian(g) => (g.mean() - 40.0 * g.sd(), g.mean() + 40.0 * g.sd()),
            ObservedModel::Truncated(t) => (t.lower(), t.lower().max(t.mean()) + 40.0 * t.sd()),
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            ObservedModel::Gaussian(g) => vec![g.mean()],
            ObservedModel::Truncated(t) => vec![t.lower(), t.mean()],
        }
    }
}

impl Density for DensityGrid {
    fn pdf(&self, x: f64) -> f64 {
        self.interpolate(x)
    }

    fn support(&self) -> (f64, f64) {
        (self.points()[0], self.points()[self.len() - 1])
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.points().to_vec()
    }
}

fn oracle_cfg() -> QuadConfig {
    QuadConfig {
        abs_tol: 0.0,
        rel_tol: 1e-12,
        max_intervals: 20_000,
    }
}

/// `Σ ln ∫ N(x̂_i | x, σ_i) p(x) dx` by adaptive quadrature.
pub fn loglike_quadrature_oracle<D: Density + ?Sized>(events: &[Event], density: &D) -> Result<f64> {
    let (lo, hi) = density.support();
    let breaks = density.breakpoints();
    let mass = integrate_with_breaks(|x| density.pdf(x), lo, hi, &breaks, oracle_cfg()).value;
    if !((mass - 1.0).abs() < 1e-6) {
        return Err(Error::domain(format!("density integrates to {mass}, not 1")));
    }
    let terms: Vec<f64> = events
        .iter()
        .map(|e| {
            let a = lo.max(e.observed_value - 37.0 * e.noise_sd);
            let b = hi.min(e.observed_value + 37.0 * e.noise_sd);
            let v = integrate_with_breaks(
                |x| density.pdf(x) * ln_normal(e.observed_value, x, e.noise_sd).exp(),
                a,
                b,
                &breaks,
                oracle_cfg(),
            )
            .value;
            if v > 0.0 {
                v.ln()
            } else {
                LOG_ZERO
            }
        })
        .collect();
    Ok(pairwise(terms))
}
