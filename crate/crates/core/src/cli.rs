//! The `popsel` command line.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 on numerical or
//! convergence failures. Every output file gets a `.meta.toml` sidecar with
//! the tool version, the command line, the fully resolved configuration, the
//! seed and the wall time.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{
    format_selection, mode_name, parse_mode, parse_selection, DpgmmBlock, ModelBlock, ObservedFamily, RunConfig,
    SamplerBlock,
};
use crate::dpgmm::{density_draws, postprocess_intrinsic, run_dpgmm, DpgmmConfig};
use crate::error::{Error, Result};
use crate::figures::{figure, FigureOptions};
use crate::fit::{fit_intrinsic, fit_observed_gaussian, fit_observed_truncated};
use crate::io::{sidecar_path, Metadata};
use crate::population::{linspace, SelectionFunction, DEFAULT_DIVISION_FLOOR};
use crate::presets::PresetName;
use crate::sampler::{remap_samples, PosteriorSamples, SamplerConfig};
use crate::simulate::{draw_catalog_bernoulli, draw_catalog_select_on_observed, Catalog, NoiseModel};
use crate::stats::RngStream;
use crate::validate::{run_pp_trials, PPConfig, Pipeline};

pub const SEED_ENV: &str = "POPSEL_SEED";

#[derive(Debug, Parser)]
#[command(name = "popsel", version, about = "Population inference with selection effects on synthetic data")]
struct Cli {
    /// Random seed (overrides POPSEL_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file, or directory for `ppplot` and `reproduce-figure`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a catalogue of detections.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        /// Apply the selection to the measured value instead of the true one.
        #[arg(long)]
        select_on_observed: bool,
    },
    /// Fit the observed distribution to a catalogue.
    FitObserved {
        #[arg(long)]
        catalog: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Fit the intrinsic distribution with the selection in the likelihood.
    FitIntrinsic {
        #[arg(long)]
        catalog: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// `parameters` (detection depends on the true value) or `data`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Map observed-space posterior draws to intrinsic parameters.
    Remap {
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Non-parametric reconstruction with a Gaussian mixture.
    Dpgmm {
        #[arg(long)]
        catalog: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        dpgmm: DpgmmArgs,
        /// `runtime`, `post` or `none`; `runtime` when a selection is given.
        #[arg(long)]
        correction: Option<String>,
        #[arg(long, default_value_t = 801)]
        grid_points: usize,
        /// Also write every rendered draw.
        #[arg(long)]
        draws: bool,
    },
    /// PP-plot harness over repeated simulations.
    Ppplot {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// `remap` or `in-likelihood`.
        #[arg(long, default_value = "remap")]
        pipeline: String,
    },
    /// Emit the data behind one of the six figures.
    ReproduceFigure {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=6))]
        number: u8,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        dpgmm: DpgmmArgs,
        #[arg(long)]
        trials: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::FitObserved { .. } => "fit-observed",
            Command::FitIntrinsic { .. } => "fit-intrinsic",
            Command::Remap { .. } => "remap",
            Command::Dpgmm { .. } => "dpgmm",
            Command::Ppplot { .. } => "ppplot",
            Command::ReproduceFigure { .. } => "reproduce-figure",
        }
    }
}

#[derive(Debug, Args, Default)]
struct ModelArgs {
    /// Built-in population: wide, narrow, equal or truncated.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    mu_lambda: Option<f64>,
    #[arg(long)]
    sigma_lambda: Option<f64>,
    /// `mu_d=0,sigma_d=2[,scale=unit|density]`, `threshold=-1` or `none`.
    #[arg(long, allow_hyphen_values = true)]
    selection: Option<String>,
    #[arg(long)]
    sigma0: Option<f64>,
    /// Observed-distribution family: gaussian or truncated.
    #[arg(long)]
    observed: Option<String>,
    /// Number of detections.
    #[arg(long)]
    n: Option<usize>,
}

impl ModelArgs {
    fn merge(&self, base: &ModelBlock) -> ModelBlock {
        ModelBlock {
            preset: self.model.clone().or(base.preset.clone()),
            mu_lambda: self.mu_lambda.or(base.mu_lambda),
            sigma_lambda: self.sigma_lambda.or(base.sigma_lambda),
            selection: self.selection.clone().or(base.selection.clone()),
            sigma0: self.sigma0.or(base.sigma0),
            observed: self.observed.clone().or(base.observed.clone()),
            n_events: self.n.or(base.n_events),
        }
    }
}

#[derive(Debug, Args, Default)]
struct SamplerArgs {
    #[arg(long)]
    walkers: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    min_ess: Option<f64>,
}

impl SamplerArgs {
    fn merge(&self, base: &SamplerBlock) -> SamplerBlock {
        SamplerBlock {
            n_walkers: self.walkers.or(base.n_walkers),
            n_steps: self.steps.or(base.n_steps),
            n_burn: self.burn.or(base.n_burn),
            min_ess: self.min_ess.or(base.min_ess),
            stretch_scale: base.stretch_scale,
        }
    }
}

#[derive(Debug, Args, Default)]
struct DpgmmArgs {
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    dpgmm_burn: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    /// Likelihood mode for the runtime correction: parameters or data.
    #[arg(long)]
    dpgmm_mode: Option<String>,
}

impl DpgmmArgs {
    fn merge(&self, base: &DpgmmBlock) -> DpgmmBlock {
        DpgmmBlock {
            k_max: self.k_max.or(base.k_max),
            concentration: self.concentration.or(base.concentration),
            n_sweeps: self.sweeps.or(base.n_sweeps),
            burn: self.dpgmm_burn.or(base.burn),
            thin: self.thin.or(base.thin),
            mode: self.dpgmm_mode.clone().or(base.mode.clone()),
        }
    }
}

/// Everything a run needs once flags, environment and config are merged.
struct Context {
    argv: Vec<String>,
    config: RunConfig,
    seed: u64,
    started: Instant,
}

impl Context {
    fn out(&self) -> Result<PathBuf> {
        self.config
            .out
            .clone()
            .ok_or_else(|| Error::Config("no output given (use --out or `out` in the config)".into()))
    }

    fn sampler(&self) -> Result<SamplerConfig> {
        let c = self.config.sampler.apply(SamplerConfig::default())?;
        Ok(SamplerConfig { seed: self.seed, stream: 1, ..c })
    }

    fn dpgmm(&self) -> Result<DpgmmConfig> {
        let c = self.config.dpgmm.apply(DpgmmConfig::default())?;
        Ok(DpgmmConfig { seed: self.seed, stream: 3, ..c })
    }

    /// Provenance merged into every sidecar.
    fn provenance(&self, mut m: Metadata) -> Metadata {
        m.seed = Some(self.seed);
        m.notes.insert("command".into(), self.argv.join(" "));
        m.notes.insert("config".into(), self.config.to_toml());
        m.params.insert("wall_time_s".into(), self.started.elapsed().as_secs_f64());
        m
    }

    fn write_sidecar(&self, path: &Path, m: Metadata) -> Result<()> {
        self.provenance(m).write(&sidecar_path(path))
    }
}

/// Outcome of a subcommand whose outputs were all written.
enum Status {
    Ok,
    NotConverged(String),
}

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("popsel: {line}");
            return 1;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, argv) {
        Ok(Status::Ok) => 0,
        Ok(Status::NotConverged(msg)) => {
            eprintln!("popsel: convergence failure: {msg}");
            2
        }
        Err(e) => {
            eprintln!("popsel: {}", e.to_string().lines().next().unwrap_or(""));
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not a non-negative integer"))),
        Err(_) => Ok(config.unwrap_or(0)),
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<Status> {
    let started = Instant::now();
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let name = cli.command.name();
    if let Some(c) = &config.command {
        if c != name {
            return Err(Error::Config(format!("config is for '{c}' but '{name}' was run")));
        }
    }
    config.command = Some(name.to_string());
    let seed = resolve_seed(cli.seed, config.seed)?;
    config.seed = Some(seed);
    if cli.out.is_some() {
        config.out = cli.out.clone();
    }
    let (model, sampler, dpgmm) = match &cli.command {
        Command::Simulate { model, .. } | Command::Remap { model, .. } => (Some(model), None, None),
        Command::FitObserved { model, sampler, .. }
        | Command::FitIntrinsic { model, sampler, .. }
        | Command::Ppplot { model, sampler, .. } => (Some(model), Some(sampler), None),
        Command::Dpgmm { model, dpgmm, .. } => (Some(model), None, Some(dpgmm)),
        Command::ReproduceFigure { sampler, dpgmm, .. } => (None, Some(sampler), Some(dpgmm)),
    };
    if let Some(m) = model {
        config.model = m.merge(&config.model);
    }
    if let Some(s) = sampler {
        config.sampler = s.merge(&config.sampler);
    }
    if let Some(d) = dpgmm {
        config.dpgmm = d.merge(&config.dpgmm);
    }
    config.validate()?;

    let ctx = Context { argv, config, seed, started };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &ctx))
}

fn selection(ctx: &Context) -> Result<SelectionFunction> {
    let m = &ctx.config.model;
    match (&m.selection, &m.preset) {
        (Some(s), _) => parse_selection(s),
        (None, Some(p)) => Ok(p.parse::<PresetName>()?.preset().selection),
        (None, None) => Err(Error::Config("no selection given (use --selection or --model)".into())),
    }
}

fn read_catalog(path: &Path) -> Result<Catalog> {
    Catalog::read(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read catalogue {}: {io}", path.display())),
        other => other,
    })
}

fn samples_status(s: &PosteriorSamples) -> Status {
    if s.diagnostics.converged {
        Status::Ok
    } else {
        Status::NotConverged(format!(
            "effective sample sizes {:?} below the floor",
            s.diagnostics.ess.iter().map(|e| e.round()).collect::<Vec<_>>()
        ))
    }
}

fn write_samples(ctx: &Context, s: &PosteriorSamples) -> Result<Status> {
    let out = ctx.out()?;
    std::fs::write(&out, s.to_csv())?;
    ctx.write_sidecar(&out, s.metadata())?;
    Ok(samples_status(s))
}

fn dispatch(cmd: &Command, ctx: &Context) -> Result<Status> {
    match cmd {
        Command::Simulate { select_on_observed, .. } => {
            let m = ctx.config.model.resolve()?;
            let mut rng = RngStream::new(ctx.seed, 0);
            let noise = NoiseModel::Homoscedastic(m.sigma0);
            let cat = if *select_on_observed {
                draw_catalog_select_on_observed(&m.intrinsic, &m.selection, m.n_events, &noise, &mut rng)?
            } else {
                draw_catalog_bernoulli(&m.intrinsic, &m.selection, m.n_events, &noise, &mut rng)?
            };
            let out = ctx.out()?;
            std::fs::write(&out, cat.to_csv())?;
            ctx.write_sidecar(&out, cat.metadata())?;
            Ok(Status::Ok)
        }
        Command::FitObserved { catalog, .. } => {
            let cat = read_catalog(catalog)?;
            let family = match &ctx.config.model.observed {
                Some(f) => f.parse()?,
                None => match selection(ctx) {
                    Ok(s @ SelectionFunction::Step { .. }) if !s.is_trivial() => ObservedFamily::Truncated,
                    _ => ObservedFamily::Gaussian,
                },
            };
            let s = match family {
                ObservedFamily::Gaussian => fit_observed_gaussian(&cat.events, &ctx.sampler()?)?,
                ObservedFamily::Truncated => {
                    let SelectionFunction::Step { threshold } = selection(ctx)? else {
                        return Err(Error::Config("the truncated fit needs a threshold selection".into()));
                    };
                    fit_observed_truncated(&cat.events, threshold, &ctx.sampler()?)?
                }
            };
            write_samples(ctx, &s)
        }
        Command::FitIntrinsic { catalog, mode, .. } => {
            let cat = read_catalog(catalog)?;
            let sel = selection(ctx)?;
            let mode = mode.as_deref().map(parse_mode).transpose()?.unwrap_or_default();
            let s = fit_intrinsic(&cat.events, &sel, mode, &ctx.sampler()?)?;
            write_samples(ctx, &s)
        }
        Command::Remap { samples, .. } => {
            let text = std::fs::read_to_string(samples)
                .map_err(|e| Error::Config(format!("cannot read samples {}: {e}", samples.display())))?;
            let s = PosteriorSamples::parse_csv(&text)?;
            let sel = selection(ctx)?;
            let r = remap_samples(&s, &sel)?;
            let out = ctx.out()?;
            std::fs::write(&out, r.to_csv())?;
            let m = r.metadata().note("selection", format_selection(&sel)).note("input", samples.display().to_string());
            ctx.write_sidecar(&out, m)?;
            Ok(Status::Ok)
        }
        Command::Dpgmm { catalog, correction, grid_points, draws, .. } => {
            let cat = read_catalog(catalog)?;
            let sel = match (&ctx.config.model.selection, &ctx.config.model.preset) {
                (None, None) => None,
                _ => Some(selection(ctx)?),
            };
            let correction = correction.as_deref().unwrap_or(if sel.is_some() { "runtime" } else { "none" });
            let cfg = ctx.dpgmm()?;
            let obs = cat.observed_values();
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            let sd = (obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (obs.len().max(2) - 1) as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            if *grid_points < 2 {
                return Err(Error::Config("--grid-points must be at least 2".into()));
            }
            let points = linspace(mean - 8.0 * sd, mean + 8.0 * sd, *grid_points);
            let need_sel = || sel.ok_or_else(|| Error::Config(format!("correction '{correction}' needs a selection")));
            let d = match correction {
                "runtime" => density_draws(&run_dpgmm(&cat.events, Some(&need_sel()?), &cfg)?.mixtures, &points, 1)?,
                "post" => postprocess_intrinsic(
                    &density_draws(&run_dpgmm(&cat.events, None, &cfg)?.mixtures, &points, 1)?,
                    &need_sel()?,
                    DEFAULT_DIVISION_FLOOR,
                )?,
                "none" => density_draws(&run_dpgmm(&cat.events, None, &cfg)?.mixtures, &points, 1)?,
                other => return Err(Error::Config(format!("unknown correction '{other}' (runtime, post or none)"))),
            };
            let out = ctx.out()?;
            std::fs::write(&out, d.to_csv(*draws))?;
            let m = Metadata::new("density_draws")
                .note("correction", correction)
                .note("mode", mode_name(cfg.mode))
                .count("n_draws", d.len() as u64)
                .count("n_events", cat.len() as u64);
            ctx.write_sidecar(&out, m)?;
            Ok(Status::Ok)
        }
        Command::Ppplot { trials, pipeline, .. } => {
            let m = ctx.config.model.resolve()?;
            let model = m
                .preset
                .ok_or_else(|| Error::Config("ppplot needs --model wide, narrow or equal".into()))?;
            let mut cfg = PPConfig::new(model, pipeline.parse::<Pipeline>()?, ctx.seed);
            cfg.n_trials = *trials;
            cfg.n_events = m.n_events;
            cfg.sampler = ctx.config.sampler.apply(cfg.sampler.clone())?;
            let r = run_pp_trials(&cfg).map_err(|e| match e {
                Error::Domain(msg) => Error::Config(msg),
                other => other,
            })?;
            let out = ctx.out()?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("pp_{}.csv", model.as_str()));
            std::fs::write(&path, r.to_csv())?;
            ctx.write_sidecar(&path, r.summary())?;
            if r.harness_ok() {
                Ok(Status::Ok)
            } else {
                Ok(Status::NotConverged(format!("{} of {} trials failed", r.excluded, cfg.n_trials)))
            }
        }
        Command::ReproduceFigure { number, trials, .. } => {
            let opts = FigureOptions {
                seed: ctx.seed,
                sampler: ctx.config.sampler.apply(SamplerConfig::default())?,
                dpgmm: ctx.config.dpgmm.apply(DpgmmConfig::default())?,
                n_trials: trials.unwrap_or(100),
            };
            let f = figure(*number, &opts)?;
            let out = ctx.out()?;
            f.write(&out, &ctx.provenance(Metadata::new("run")))?;
            if f.converged {
                Ok(Status::Ok)
            } else {
                Ok(Status::NotConverged(format!("a sampler in figure {number} missed its ESS floor")))
            }
        }
    }
}
