//! Parametric fits of a catalogue and rendering of their posteriors as
//! density draws.

use rayon::prelude::*;

use crate::dpgmm::DensityDraws;
use crate::error::Result;
use crate::likelihood::{
    loglike_inlikelihood_gaussian, loglike_observed_gaussian, loglike_observed_truncnorm, LikelihoodMode,
    ObservedData,
};
use crate::population::{DensityGrid, IntrinsicModel, SelectionFunction};
use crate::sampler::{sample_posterior, PosteriorSamples, PriorBox, SamplerConfig};
use crate::simulate::Event;
use crate::stats::{GaussianParams, TruncGaussianParams, LOG_ZERO};

pub const OBSERVED_NAMES: [&str; 2] = ["mu_obs", "sigma_obs"];
pub const INTRINSIC_NAMES: [&str; 2] = ["mu_lambda", "sigma_lambda"];
pub const TRUNCATED_NAMES: [&str; 2] = ["mu", "sigma"];

/// Posterior of a Gaussian observed distribution `(mu_obs, sigma_obs)`.
pub fn fit_observed_gaussian(events: &[Event], cfg: &SamplerConfig) -> Result<PosteriorSamples> {
    let data = ObservedData::prepare(events);
    let prior = PriorBox::location_scale(OBSERVED_NAMES[0], OBSERVED_NAMES[1]);
    let ll = |p: &[f64]| match GaussianParams::new(p[0], p[1]) {
        Ok(t) => loglike_observed_gaussian(&data, &t),
        Err(_) => f64::NEG_INFINITY,
    };
    sample_posterior(ll, &prior, cfg)
}

/// Posterior of a truncated Gaussian observed distribution with known lower edge.
pub fn fit_observed_truncated(events: &[Event], threshold: f64, cfg: &SamplerConfig) -> Result<PosteriorSamples> {
    TruncGaussianParams::new(0.0, 1.0, threshold)?;
    let prior = PriorBox::location_scale(TRUNCATED_NAMES[0], TRUNCATED_NAMES[1]);
    let ll = |p: &[f64]| match TruncGaussianParams::new(p[0], p[1], threshold) {
        Ok(t) => loglike_observed_truncnorm(events, &t),
        Err(_) => f64::NEG_INFINITY,
    };
    sample_posterior(ll, &prior, cfg)
}

/// Posterior of the intrinsic parameters with `α(Λ)` in the likelihood.
pub fn fit_intrinsic(
    events: &[Event],
    sel: &SelectionFunction,
    mode: LikelihoodMode,
    cfg: &SamplerConfig,
) -> Result<PosteriorSamples> {
    let data = match (sel, mode) {
        // the summary shortcut has no closed form under a step selection
        (SelectionFunction::Step { .. }, LikelihoodMode::ThresholdOnParameters) => ObservedData::Events(events),
        _ => ObservedData::prepare(events),
    };
    let prior = PriorBox::location_scale(INTRINSIC_NAMES[0], INTRINSIC_NAMES[1]);
    let ll = |p: &[f64]| {
        IntrinsicModel::new(p[0], p[1])
            .and_then(|m| loglike_inlikelihood_gaussian(&data, &m, sel, mode))
            .unwrap_or(f64::NEG_INFINITY)
    };
    sample_posterior(ll, &prior, cfg)
}

/// Evenly spaced subset of at most `max` draws.
fn thinned_rows(samples: &PosteriorSamples, max: usize) -> Vec<&Vec<f64>> {
    let stride = samples.len().div_ceil(max.max(1)).max(1);
    samples.draws.iter().step_by(stride).collect()
}

/// Renders `N(x | μ, σ)` for up to `max_draws` posterior draws.
pub fn gaussian_density_draws(
    samples: &PosteriorSamples,
    names: [&str; 2],
    points: &[f64],
    max_draws: usize,
) -> Result<DensityDraws> {
    let (i, j) = (samples.index_of(names[0])?, samples.index_of(names[1])?);
    let grids = thinned_rows(samples, max_draws)
        .par_iter()
        .map(|r| {
            let g = GaussianParams::new(r[i], r[j])?;
            DensityGrid::new(points.to_vec(), points.iter().map(|&x| g.ln_pdf(x)).collect())?.normalized()
        })
        .collect::<Result<Vec<_>>>()?;
    DensityDraws::from_grids(grids)
}

/// Renders the truncated Gaussian `TN(x | μ, σ, threshold)` per draw.
pub fn truncated_density_draws(
    samples: &PosteriorSamples,
    threshold: f64,
    points: &[f64],
    max_draws: usize,
) -> Result<DensityDraws> {
    let (i, j) = (samples.index_of(TRUNCATED_NAMES[0])?, samples.index_of(TRUNCATED_NAMES[1])?);
    let grids = thinned_rows(samples, max_draws)
        .par_iter()
        .map(|r| {
            let t = TruncGaussianParams::new(r[i], r[j], threshold)?;
            let logs = points
                .iter()
                .map(|&x| if x < threshold { LOG_ZERO } else { t.ln_pdf(x) })
                .collect();
            DensityGrid::new(points.to_vec(), logs)?.normalized()
        })
        .collect::<Result<Vec<_>>>()?;
    DensityDraws::from_grids(grids)
}

/// CDF of a grid density by linear interpolation of its cumulative integral.
pub fn grid_cdf(grid: &DensityGrid, x: f64) -> f64 {
    let p = grid.points();
    let c = grid.cumulative();
    let total = c[c.len() - 1];
    if x <= p[0] {
        return 0.0;
    }
    if x >= p[p.len() - 1] {
        return 1.0;
    }
    let k = p.partition_point(|&v| v <= x);
    let (x0, x1) = (p[k - 1], p[k]);
    let f = (x - x0) / (x1 - x0);
    (c[k - 1] * (1.0 - f) + c[k] * f) / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{linspace, SelectionScale};
    use crate::presets::PresetName;
    use crate::simulate::{draw_catalog_bernoulli, NoiseModel};
    use crate::stats::RngStream;

    #[test]
    fn grid_cdf_matches_gaussian() {
        let g = GaussianParams::new(0.5, 1.2).unwrap();
        let pts = linspace(-10.0, 11.0, 4001);
        let grid = DensityGrid::new(pts.clone(), pts.iter().map(|&x| g.ln_pdf(x)).collect()).unwrap();
        for x in [-3.0, -0.1, 0.5, 2.0, 4.0] {
            assert!((grid_cdf(&grid, x) - g.cdf(x)).abs() < 1e-5, "{x}");
        }
        assert_eq!(grid_cdf(&grid, -20.0), 0.0);
        assert_eq!(grid_cdf(&grid, 20.0), 1.0);
    }

    #[test]
    fn fits_agree_across_routes() {
        let p = PresetName::Narrow.preset();
        let mut rng = RngStream::new(31, 0);
        let cat = draw_catalog_bernoulli(&p.intrinsic, &p.selection, 1000, &NoiseModel::Homoscedastic(p.sigma0), &mut rng)
            .unwrap();
        let cfg = SamplerConfig { n_steps: 2000, seed: 1, ..Default::default() };
        let theta = fit_observed_gaussian(&cat.events, &cfg).unwrap();
        let lam = crate::sampler::remap_samples(&theta, &p.selection).unwrap();
        let direct = fit_intrinsic(&cat.events, &p.selection, LikelihoodMode::ThresholdOnParameters, &cfg).unwrap();
        let (a, b) = (lam.mean(), direct.mean());
        let (sa, sb) = (lam.covariance(), direct.covariance());
        for k in 0..2 {
            let sd = sa[k][k].sqrt().max(sb[k][k].sqrt());
            assert!((a[k] - b[k]).abs() < 0.2 * sd, "param {k}: {} vs {}", a[k], b[k]);
            assert!((sa[k][k].sqrt() / sb[k][k].sqrt() - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn rendered_draws_are_normalised() {
        let sel = SelectionFunction::gaussian(0.0, 1.0, SelectionScale::UnitPeak).unwrap();
        let mut rng = RngStream::new(32, 0);
        let intr = IntrinsicModel::new(0.0, 2.0).unwrap();
        let cat = draw_catalog_bernoulli(&intr, &SelectionFunction::step(-1.0).unwrap(), 300, &NoiseModel::Homoscedastic(0.5), &mut rng).unwrap();
        let cfg = SamplerConfig { n_steps: 400, seed: 2, min_ess: 10.0, ..Default::default() };
        let t = fit_observed_truncated(&cat.events, -1.0, &cfg).unwrap();
        let pts = linspace(-4.0, 8.0, 601);
        let dd = truncated_density_draws(&t, -1.0, &pts, 50).unwrap();
        assert!(dd.len() <= 50 && dd.len() >= 25);
        for d in 0..dd.len() {
            let g = dd.grid(d).unwrap();
            assert!((g.integral() - 1.0).abs() < 1e-9);
            assert!(g.densities().iter().zip(&pts).all(|(v, &x)| x >= -1.0 || *v == 0.0));
        }
        let i = fit_intrinsic(&cat.events, &sel, LikelihoodMode::ThresholdOnData, &cfg).unwrap();
        let gd = gaussian_density_draws(&i, INTRINSIC_NAMES, &pts, 20).unwrap();
        assert!(gd.len() <= 20);
    }
}
