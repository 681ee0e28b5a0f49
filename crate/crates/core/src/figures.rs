//! Data behind each of the six figures, emitted as CSV tables.
//!
//! Column contracts:
//!
//! | figure | file | columns |
//! |---|---|---|
//! | 1 | `catalog.csv` | `true_value, observed_value, noise_sd` |
//! | 1, 4 | `theta_samples.csv` | `mu_obs, sigma_obs, log_posterior` |
//! | 1, 4 | `lambda_samples.csv` | `mu_lambda, sigma_lambda, log_posterior` |
//! | 1, 4 | `truth.csv` | `mu_lambda, sigma_lambda, mu_obs, sigma_obs` |
//! | 2 | `intrinsic_densities.csv` | `point, true, {remap,division,dpgmm}_{median,p05,p95}` |
//! | 3 | `pp_<model>.csv` | `trial, parameter, percentile` |
//! | 3 | `pp_band.csv` | `rank, expected, lower, upper` |
//! | 5 | `observed_densities.csv` | `point, true, {truncated,gaussian}_{median,p05,p95}` |
//! | 6 | `intrinsic_densities.csv` | `point, true, {runtime,postprocessed}_{median,p05,p95}` |
//!
//! Density columns are pointwise posterior summaries; `nan` marks grid points
//! where the selection function was below the division floor.

use std::path::Path;

use crate::dpgmm::{density_draws, postprocess_intrinsic, run_dpgmm, DensityDraws, DpgmmConfig};
use crate::error::{Error, Result};
use crate::fit::{
    fit_observed_gaussian, fit_observed_truncated, gaussian_density_draws, grid_cdf, truncated_density_draws,
    INTRINSIC_NAMES, OBSERVED_NAMES,
};
use crate::io::{sidecar_path, Metadata, Table};
use crate::likelihood::LikelihoodMode;
use crate::population::{
    linspace, theta_of_lambda, DensityGrid, IntrinsicModel, SelectionFunction, DEFAULT_DIVISION_FLOOR,
};
use crate::presets::{Preset, PresetName};
use crate::sampler::{remap_samples, PosteriorSamples, SamplerConfig};
use crate::simulate::{draw_catalog_bernoulli, Catalog, NoiseModel};
use crate::stats::{RngStream, TruncGaussianParams};
use crate::validate::{
    beta_credible_band, in_joint_credible_region, js_divergence, ks_one_sample, run_pp_trials, z_scores, PPConfig,
    PPResult, Pipeline,
};

/// Random streams used within one figure, all derived from the run seed.
mod stream {
    pub const CATALOG: u64 = 0;
    pub const FIT_A: u64 = 1;
    pub const FIT_B: u64 = 2;
    pub const DPGMM_A: u64 = 3;
    pub const DPGMM_B: u64 = 4;
}

/// Posterior draws rendered per density recipe.
const RENDERED_DRAWS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct FigureOptions {
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub dpgmm: DpgmmConfig,
    pub n_trials: usize,
}

impl Default for FigureOptions {
    fn default() -> Self {
        FigureOptions {
            seed: 0,
            sampler: SamplerConfig::default(),
            dpgmm: DpgmmConfig::default(),
            n_trials: 100,
        }
    }
}

impl FigureOptions {
    fn sampler(&self, stream: u64) -> SamplerConfig {
        SamplerConfig { seed: self.seed, stream, ..self.sampler.clone() }
    }

    fn dpgmm(&self, stream: u64, mode: LikelihoodMode) -> DpgmmConfig {
        DpgmmConfig { seed: self.seed, stream, mode, ..self.dpgmm.clone() }
    }
}

/// Tables of one figure plus a run summary.
#[derive(Debug, Clone)]
pub struct FigureOutput {
    pub number: u8,
    pub files: Vec<(String, String)>,
    pub summary: Metadata,
    /// False when any sampler run missed its ESS floor.
    pub converged: bool,
}

impl FigureOutput {
    /// Writes every CSV into `dir` and the summary as `figure<N>.meta.toml`.
    pub fn write(&self, dir: &Path, provenance: &Metadata) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, csv) in &self.files {
            std::fs::write(dir.join(name), csv)?;
        }
        let mut m = self.summary.clone();
        m.notes.extend(provenance.notes.clone());
        m.params.extend(provenance.params.clone());
        m.seed = m.seed.or(provenance.seed);
        m.write(&sidecar_path(&dir.join(format!("figure{}.csv", self.number))))
    }
}

fn simulate(preset: &Preset, n: usize, seed: u64) -> Result<Catalog> {
    let mut rng = RngStream::new(seed, stream::CATALOG);
    draw_catalog_bernoulli(&preset.intrinsic, &preset.selection, n, &NoiseModel::Homoscedastic(preset.sigma0), &mut rng)
}

/// Catalogue, observed-space posterior and its remapping for one preset.
#[derive(Debug, Clone)]
pub struct RemapRun {
    pub preset: Preset,
    pub catalog: Catalog,
    pub theta: PosteriorSamples,
    pub lambda: PosteriorSamples,
}

impl RemapRun {
    pub fn truth(&self) -> Result<[f64; 4]> {
        let t = theta_of_lambda(&self.preset.intrinsic, &self.preset.selection)?;
        Ok([self.preset.intrinsic.mu, self.preset.intrinsic.sigma, t.mean(), t.sd()])
    }

    pub fn truth_in_joint_region(&self, level: f64) -> Result<bool> {
        let t = self.truth()?;
        in_joint_credible_region(&self.lambda, &INTRINSIC_NAMES, [t[0], t[1]], level)
    }

    pub fn z_scores(&self) -> Result<Vec<f64>> {
        let t = self.truth()?;
        z_scores(&self.lambda, &INTRINSIC_NAMES, &t[..2])
    }

    fn truth_table(&self) -> Result<String> {
        let mut t = Table::new(["mu_lambda", "sigma_lambda", "mu_obs", "sigma_obs"].map(String::from).to_vec());
        t.rows.push(self.truth()?.to_vec());
        Ok(t.to_csv())
    }
}

pub fn remap_run(preset: Preset, n_events: usize, opts: &FigureOptions) -> Result<RemapRun> {
    let catalog = simulate(&preset, n_events, opts.seed)?;
    let theta = fit_observed_gaussian(&catalog.events, &opts.sampler(stream::FIT_A))?;
    let lambda = remap_samples(&theta, &preset.selection)?;
    Ok(RemapRun { preset, catalog, theta, lambda })
}

fn remap_summary(run: &RemapRun, number: u8) -> Result<Metadata> {
    let z = run.z_scores()?;
    let mut m = Metadata::new(&format!("figure{number}"))
        .note("model", run.preset.name.as_str())
        .count("n_events", run.catalog.len() as u64)
        .count("n_drawn", run.catalog.n_drawn)
        .count("infeasible_dropped", run.lambda.diagnostics.infeasible_dropped as u64)
        .param("z_mu_lambda", z[0])
        .param("z_sigma_lambda", z[1])
        .note("truth_in_joint_90", run.truth_in_joint_region(0.9)?.to_string());
    for (name, ess) in run.theta.names.iter().zip(&run.theta.diagnostics.ess) {
        m = m.param(&format!("ess_{name}"), *ess);
    }
    Ok(m)
}

/// Narrow model, 1000 events: observed-space fit and its remapping.
pub fn figure1(opts: &FigureOptions) -> Result<FigureOutput> {
    let run = remap_run(PresetName::Narrow.preset(), 1000, opts)?;
    Ok(FigureOutput {
        number: 1,
        files: vec![
            ("catalog.csv".into(), run.catalog.to_csv()),
            ("theta_samples.csv".into(), run.theta.to_csv()),
            ("lambda_samples.csv".into(), run.lambda.to_csv()),
            ("truth.csv".into(), run.truth_table()?),
        ],
        summary: remap_summary(&run, 1)?,
        converged: run.theta.diagnostics.converged,
    })
}

/// Equal model, 10⁶ events through the sufficient-statistic likelihood.
pub fn figure4(opts: &FigureOptions) -> Result<FigureOutput> {
    let run = remap_run(PresetName::Equal.preset(), 1_000_000, opts)?;
    Ok(FigureOutput {
        number: 4,
        files: vec![
            ("theta_samples.csv".into(), run.theta.to_csv()),
            ("lambda_samples.csv".into(), run.lambda.to_csv()),
            ("truth.csv".into(), run.truth_table()?),
        ],
        summary: remap_summary(&run, 4)?,
        converged: run.theta.diagnostics.converged,
    })
}

fn true_column(points: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    points.iter().map(|&x| f(x)).collect()
}

/// `point, true` followed by `<label>_median, _p05, _p95` per recipe.
fn density_table(points: &[f64], truth: &[f64], recipes: &[(&str, &DensityDraws)]) -> String {
    let mut header = vec!["point".to_string(), "true".to_string()];
    for (label, _) in recipes {
        header.extend(["median", "p05", "p95"].map(|s| format!("{label}_{s}")));
    }
    let mut t = Table::new(header);
    for i in 0..points.len() {
        let mut row = vec![points[i], truth[i]];
        for (_, d) in recipes {
            if d.unconstrained[i] {
                row.extend([f64::NAN; 3]);
            } else {
                row.extend([d.median[i], d.p05[i], d.p95[i]]);
            }
        }
        t.rows.push(row);
    }
    t.to_csv()
}

/// Three routes to the intrinsic density of the narrow model.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub points: Vec<f64>,
    pub truth: Vec<f64>,
    pub remap: DensityDraws,
    pub division: DensityDraws,
    pub dpgmm: DensityDraws,
    pub converged: bool,
}

pub fn comparison_run(opts: &FigureOptions) -> Result<ComparisonRun> {
    let preset = PresetName::Narrow.preset();
    let intr = preset.intrinsic;
    let points = linspace(intr.mu - 6.0 * intr.sigma, intr.mu + 6.0 * intr.sigma, 601);
    let catalog = simulate(&preset, 1000, opts.seed)?;
    let theta = fit_observed_gaussian(&catalog.events, &opts.sampler(stream::FIT_A))?;
    let lambda = remap_samples(&theta, &preset.selection)?;
    let remap = gaussian_density_draws(&lambda, INTRINSIC_NAMES, &points, RENDERED_DRAWS)?;
    let observed = gaussian_density_draws(&theta, OBSERVED_NAMES, &points, RENDERED_DRAWS)?;
    let division = postprocess_intrinsic(&observed, &preset.selection, DEFAULT_DIVISION_FLOOR)?;
    let chain = run_dpgmm(&catalog.events, None, &opts.dpgmm(stream::DPGMM_A, LikelihoodMode::ThresholdOnParameters))?;
    let dpgmm = postprocess_intrinsic(&density_draws(&chain.mixtures, &points, 1)?, &preset.selection, DEFAULT_DIVISION_FLOOR)?;
    Ok(ComparisonRun {
        truth: true_column(&points, |x| intr.ln_pdf(x).exp()),
        points,
        remap,
        division,
        dpgmm,
        converged: theta.diagnostics.converged,
    })
}

/// Fraction of grid points in `[lo, hi]` where `truth` lies within `[p05, p95]`.
pub fn band_fraction(d: &DensityDraws, truth: &[f64], lo: f64, hi: f64) -> f64 {
    let idx: Vec<usize> = (0..d.points.len()).filter(|&i| d.points[i] >= lo && d.points[i] <= hi).collect();
    let inside = idx
        .iter()
        .filter(|&&i| !d.unconstrained[i] && d.p05[i] <= truth[i] && truth[i] <= d.p95[i])
        .count();
    inside as f64 / idx.len().max(1) as f64
}

/// Narrow model: remapping, division of the observed fit, and division of a DPGMM.
pub fn figure2(opts: &FigureOptions) -> Result<FigureOutput> {
    let r = comparison_run(opts)?;
    let (lo, hi) = (-2.0 - 3.0 * 0.6, -2.0 + 3.0 * 0.6);
    let mut m = Metadata::new("figure2").note("model", "narrow").count("n_events", 1000);
    for (label, d) in [("remap", &r.remap), ("division", &r.division), ("dpgmm", &r.dpgmm)] {
        m = m.param(&format!("band_fraction_{label}"), band_fraction(d, &r.truth, lo, hi));
    }
    Ok(FigureOutput {
        number: 2,
        files: vec![(
            "intrinsic_densities.csv".into(),
            density_table(&r.points, &r.truth, &[("remap", &r.remap), ("division", &r.division), ("dpgmm", &r.dpgmm)]),
        )],
        summary: m,
        converged: r.converged,
    })
}

/// Remapping PP trials for the three Gaussian models.
pub fn pp_runs(opts: &FigureOptions) -> Result<Vec<PPResult>> {
    PresetName::GAUSSIAN
        .iter()
        .map(|&model| {
            let mut cfg = PPConfig::new(model, Pipeline::Remap, opts.seed);
            cfg.n_trials = opts.n_trials;
            cfg.sampler = opts.sampler.clone();
            run_pp_trials(&cfg)
        })
        .collect()
}

pub fn figure3(opts: &FigureOptions) -> Result<FigureOutput> {
    let runs = pp_runs(opts)?;
    let mut files = Vec::new();
    let mut m = Metadata::new("figure3").count("n_trials", opts.n_trials as u64).count("n_events", 1000);
    for r in &runs {
        let model = r.config.model.as_str();
        files.push((format!("pp_{model}.csv"), r.to_csv()));
        m = m.count(&format!("excluded_{model}"), r.excluded as u64);
        for (p, name) in r.names.iter().enumerate() {
            m = m
                .param(&format!("ks_p_value_{model}_{name}"), r.ks[p].1)
                .param(&format!("band_coverage_{model}_{name}"), r.band_coverage[p]);
        }
    }
    let n = opts.n_trials;
    let mut band = Table::new(["rank", "expected", "lower", "upper"].map(String::from).to_vec());
    for (k, (lo, hi)) in beta_credible_band(n, 0.9)?.into_iter().enumerate() {
        band.rows.push(vec![(k + 1) as f64, (k + 1) as f64 / (n + 1) as f64, lo, hi]);
    }
    files.push(("pp_band.csv".into(), band.to_csv()));
    Ok(FigureOutput { number: 3, files, summary: m, converged: runs.iter().all(|r| r.harness_ok()) })
}

/// Step selection: the truncated Gaussian against the plain Gaussian.
#[derive(Debug, Clone)]
pub struct TruncationRun {
    pub catalog: Catalog,
    pub points: Vec<f64>,
    pub truth: Vec<f64>,
    pub truncated: DensityDraws,
    pub gaussian: DensityDraws,
    pub converged: bool,
}

impl TruncationRun {
    /// KS test of the detected true values against a fitted median density.
    pub fn ks(&self, d: &DensityDraws) -> Result<(f64, f64)> {
        let grid: DensityGrid = d.median_grid()?;
        ks_one_sample(&self.catalog.true_values(), |x| grid_cdf(&grid, x))
    }
}

pub fn truncation_run(opts: &FigureOptions) -> Result<TruncationRun> {
    let preset = PresetName::Truncated.preset();
    let SelectionFunction::Step { threshold } = preset.selection else {
        return Err(Error::domain("truncated preset must use a step selection"));
    };
    let catalog = simulate(&preset, 1000, opts.seed)?;
    let IntrinsicModel { mu, sigma } = preset.intrinsic;
    let points = linspace(mu - 4.0 * sigma, mu + 4.0 * sigma, 961);
    let tn = TruncGaussianParams::new(mu, sigma, threshold)?;
    let truth = true_column(&points, |x| if x < threshold { 0.0 } else { tn.ln_pdf(x).exp() });
    let t = fit_observed_truncated(&catalog.events, threshold, &opts.sampler(stream::FIT_A))?;
    let g = fit_observed_gaussian(&catalog.events, &opts.sampler(stream::FIT_B))?;
    Ok(TruncationRun {
        truncated: truncated_density_draws(&t, threshold, &points, RENDERED_DRAWS)?,
        gaussian: gaussian_density_draws(&g, OBSERVED_NAMES, &points, RENDERED_DRAWS)?,
        converged: t.diagnostics.converged && g.diagnostics.converged,
        catalog,
        points,
        truth,
    })
}

pub fn figure5(opts: &FigureOptions) -> Result<FigureOutput> {
    let r = truncation_run(opts)?;
    let (kt, kg) = (r.ks(&r.truncated)?, r.ks(&r.gaussian)?);
    let m = Metadata::new("figure5")
        .note("model", "truncated")
        .count("n_events", r.catalog.len() as u64)
        .param("ks_p_value_truncated", kt.1)
        .param("ks_p_value_gaussian", kg.1);
    Ok(FigureOutput {
        number: 5,
        files: vec![
            ("catalog.csv".into(), r.catalog.to_csv()),
            (
                "observed_densities.csv".into(),
                density_table(&r.points, &r.truth, &[("truncated", &r.truncated), ("gaussian", &r.gaussian)]),
            ),
        ],
        summary: m,
        converged: r.converged,
    })
}

/// DPGMM with the selection inside the sampler and applied afterwards.
#[derive(Debug, Clone)]
pub struct NonparametricRun {
    pub points: Vec<f64>,
    pub truth: Vec<f64>,
    pub runtime: DensityDraws,
    pub postprocessed: DensityDraws,
}

impl NonparametricRun {
    pub fn js_medians(&self) -> Result<f64> {
        js_divergence(&self.runtime.median_grid()?, &self.postprocessed.median_grid()?)
    }
}

pub fn nonparametric_run(opts: &FigureOptions) -> Result<NonparametricRun> {
    let preset = Preset { sigma0: 0.3, ..PresetName::Narrow.preset() };
    let catalog = simulate(&preset, 1000, opts.seed)?;
    let obs = catalog.observed_values();
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let sd = (obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64).sqrt();
    let points = linspace(mean - 8.0 * sd, mean + 8.0 * sd, 801);
    let mode = LikelihoodMode::ThresholdOnParameters;
    let rt = run_dpgmm(&catalog.events, Some(&preset.selection), &opts.dpgmm(stream::DPGMM_A, mode))?;
    let plain = run_dpgmm(&catalog.events, None, &opts.dpgmm(stream::DPGMM_B, mode))?;
    let intr = preset.intrinsic;
    Ok(NonparametricRun {
        truth: true_column(&points, |x| intr.ln_pdf(x).exp()),
        runtime: density_draws(&rt.mixtures, &points, 1)?,
        postprocessed: postprocess_intrinsic(&density_draws(&plain.mixtures, &points, 1)?, &preset.selection, DEFAULT_DIVISION_FLOOR)?,
        points,
    })
}

pub fn figure6(opts: &FigureOptions) -> Result<FigureOutput> {
    let r = nonparametric_run(opts)?;
    let (lo, hi) = (-2.0 - 3.0 * 0.6, -2.0 + 3.0 * 0.6);
    let m = Metadata::new("figure6")
        .note("model", "narrow")
        .param("sigma_0", 0.3)
        .count("n_events", 1000)
        .param("js_medians", r.js_medians()?)
        .param("band_fraction_runtime", band_fraction(&r.runtime, &r.truth, lo, hi))
        .param("band_fraction_postprocessed", band_fraction(&r.postprocessed, &r.truth, lo, hi));
    Ok(FigureOutput {
        number: 6,
        files: vec![(
            "intrinsic_densities.csv".into(),
            density_table(&r.points, &r.truth, &[("runtime", &r.runtime), ("postprocessed", &r.postprocessed)]),
        )],
        summary: m,
        converged: true,
    })
}

pub fn figure(number: u8, opts: &FigureOptions) -> Result<FigureOutput> {
    match number {
        1 => figure1(opts),
        2 => figure2(opts),
        3 => figure3(opts),
        4 => figure4(opts),
        5 => figure5(opts),
        6 => figure6(opts),
        n => Err(Error::Config(format!("no figure {n}; expected 1 to 6"))),
    }
}
