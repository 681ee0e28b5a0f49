//! Run configuration: a TOML file with `model`, `sampler` and `dpgmm`
//! sections, and the compact selection-spec syntax used on the command line.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dpgmm::DpgmmConfig;
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodMode;
use crate::population::{IntrinsicModel, SelectionFunction, SelectionScale};
use crate::presets::PresetName;
use crate::sampler::SamplerConfig;

/// Which observed-distribution family a fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservedFamily {
    Gaussian,
    Truncated,
}

impl FromStr for ObservedFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(ObservedFamily::Gaussian),
            "truncated" => Ok(ObservedFamily::Truncated),
            other => Err(Error::Config(format!("unknown observed model '{other}'"))),
        }
    }
}

impl ObservedFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObservedFamily::Gaussian => "gaussian",
            ObservedFamily::Truncated => "truncated",
        }
    }
}

/// Parses `mu_d=0,sigma_d=2[,scale=unit|density]`, `threshold=-1` or `none`.
pub fn parse_selection(spec: &str) -> Result<SelectionFunction> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("none") {
        return Ok(SelectionFunction::none());
    }
    let (mut mu, mut sigma, mut thr, mut scale) = (None, None, None, SelectionScale::UnitPeak);
    for item in spec.split(',') {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("selection item '{item}' is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("selection value '{v}' for '{k}' is not a number")))
        };
        let slot = match k {
            "mu_d" => &mut mu,
            "sigma_d" => &mut sigma,
            "threshold" => &mut thr,
            "scale" => {
                scale = match v {
                    "unit" => SelectionScale::UnitPeak,
                    "density" => SelectionScale::Density,
                    _ => return Err(Error::Config(format!("unknown selection scale '{v}'"))),
                };
                continue;
            }
            _ => return Err(Error::Config(format!("unknown selection key '{k}'"))),
        };
        if slot.replace(num()?).is_some() {
            return Err(Error::Config(format!("selection key '{k}' given twice")));
        }
    }
    let bad = |e: Error| Error::Config(format!("selection '{spec}': {e}"));
    match (mu, sigma, thr) {
        (Some(m), Some(s), None) => SelectionFunction::gaussian(m, s, scale).map_err(bad),
        (None, None, Some(t)) => SelectionFunction::step(t).map_err(bad),
        _ => Err(Error::Config(format!(
            "selection '{spec}' needs either mu_d and sigma_d, or threshold"
        ))),
    }
}

/// Renders a selection back into the spec syntax.
pub fn format_selection(sel: &SelectionFunction) -> String {
    match sel {
        SelectionFunction::Gaussian { mu, sigma, scale } => {
            let s = match scale {
                SelectionScale::UnitPeak => "unit",
                SelectionScale::Density => "density",
            };
            format!("mu_d={mu},sigma_d={sigma},scale={s}")
        }
        s if s.is_trivial() => "none".into(),
        SelectionFunction::Step { threshold } => format!("threshold={threshold}"),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    /// One of the built-in presets; the other fields override it.
    pub preset: Option<String>,
    pub mu_lambda: Option<f64>,
    pub sigma_lambda: Option<f64>,
    pub selection: Option<String>,
    pub sigma0: Option<f64>,
    pub observed: Option<String>,
    pub n_events: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub n_walkers: Option<usize>,
    pub n_steps: Option<usize>,
    pub n_burn: Option<usize>,
    pub min_ess: Option<f64>,
    pub stretch_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpgmmBlock {
    pub k_max: Option<usize>,
    pub concentration: Option<f64>,
    pub n_sweeps: Option<usize>,
    pub burn: Option<usize>,
    pub thin: Option<usize>,
    /// `parameters` or `data`.
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When present, must name the subcommand being run.
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub dpgmm: DpgmmBlock,
}

/// A model block with the preset applied and every field validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModel {
    pub preset: Option<PresetName>,
    pub intrinsic: IntrinsicModel,
    pub selection: SelectionFunction,
    pub sigma0: f64,
    pub observed: ObservedFamily,
    pub n_events: usize,
}

pub fn parse_mode(s: &str) -> Result<LikelihoodMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "parameters" | "threshold-on-parameters" => Ok(LikelihoodMode::ThresholdOnParameters),
        "data" | "threshold-on-data" => Ok(LikelihoodMode::ThresholdOnData),
        other => Err(Error::Config(format!("unknown likelihood mode '{other}'"))),
    }
}

pub fn mode_name(mode: LikelihoodMode) -> &'static str {
    match mode {
        LikelihoodMode::ThresholdOnParameters => "parameters",
        LikelihoodMode::ThresholdOnData => "data",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::Config(format!("malformed config: {}", msg.lines().next().unwrap_or("")))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// Checks every block against the invariants of the module it feeds.
    pub fn validate(&self) -> Result<()> {
        // remap and the fits read the model from their inputs, so an empty block is fine
        if self.model.selection.is_some() {
            parse_selection(self.model.selection.as_deref().unwrap_or_default())?;
        }
        if self.model.preset.is_some() || self.model.mu_lambda.is_some() || self.model.sigma_lambda.is_some() {
            self.model.resolve()?;
        }
        self.sampler.apply(SamplerConfig::default())?;
        self.dpgmm.apply(DpgmmConfig::default())?;
        Ok(())
    }
}

impl ModelBlock {
    pub fn resolve(&self) -> Result<ResolvedModel> {
        let preset = self.preset.as_deref().map(PresetName::from_str).transpose()?;
        let base = preset.map(|p| p.preset());
        let mu = self.mu_lambda.or(base.map(|b| b.intrinsic.mu));
        let sigma = self.sigma_lambda.or(base.map(|b| b.intrinsic.sigma));
        let (Some(mu), Some(sigma)) = (mu, sigma) else {
            return Err(Error::Config("model needs a preset or both mu_lambda and sigma_lambda".into()));
        };
        let intrinsic = IntrinsicModel::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let selection = match &self.selection {
            Some(s) => parse_selection(s)?,
            None => base.map(|b| b.selection).unwrap_or_else(SelectionFunction::none),
        };
        let sigma0 = self.sigma0.or(base.map(|b| b.sigma0)).unwrap_or(1.0);
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be positive, got {sigma0}")));
        }
        let observed = match &self.observed {
            Some(s) => s.parse()?,
            None if matches!(selection, SelectionFunction::Step { .. }) => ObservedFamily::Truncated,
            None => ObservedFamily::Gaussian,
        };
        if observed == ObservedFamily::Truncated && !matches!(selection, SelectionFunction::Step { .. }) {
            return Err(Error::Config("the truncated observed model needs a threshold selection".into()));
        }
        let n_events = self.n_events.unwrap_or(1000);
        if n_events == 0 {
            return Err(Error::Config("n_events must be positive".into()));
        }
        Ok(ResolvedModel { preset, intrinsic, selection, sigma0, observed, n_events })
    }
}

impl SamplerBlock {
    pub fn apply(&self, mut c: SamplerConfig) -> Result<SamplerConfig> {
        c.n_walkers = self.n_walkers.unwrap_or(c.n_walkers);
        c.n_steps = self.n_steps.unwrap_or(c.n_steps);
        c.n_burn = self.n_burn.or(c.n_burn);
        c.min_ess = self.min_ess.unwrap_or(c.min_ess);
        c.stretch_scale = self.stretch_scale.unwrap_or(c.stretch_scale);
        if c.n_walkers < 4 || c.n_walkers % 2 == 1 {
            return Err(Error::Config(format!("n_walkers must be even and at least 4, got {}", c.n_walkers)));
        }
        if c.n_steps < 2 || c.burn() >= c.n_steps {
            return Err(Error::Config("sampler needs n_steps >= 2 and n_burn < n_steps".into()));
        }
        if !(c.stretch_scale > 1.0) || !(c.min_ess >= 0.0) {
            return Err(Error::Config("stretch_scale must exceed 1 and min_ess be non-negative".into()));
        }
        Ok(c)
    }
}

impl DpgmmBlock {
    pub fn apply(&self, mut c: DpgmmConfig) -> Result<DpgmmConfig> {
        c.k_max = self.k_max.unwrap_or(c.k_max);
        c.concentration = self.concentration.unwrap_or(c.concentration);
        c.n_sweeps = self.n_sweeps.unwrap_or(c.n_sweeps);
        c.burn = self.burn.unwrap_or(c.burn);
        c.thin = self.thin.unwrap_or(c.thin);
        if let Some(m) = &self.mode {
            c.mode = parse_mode(m)?;
        }
        if c.k_max == 0 || !(c.concentration > 0.0 && c.concentration.is_finite()) {
            return Err(Error::Config("dpgmm needs k_max >= 1 and a positive concentration".into()));
        }
        if c.thin == 0 || c.burn >= c.n_sweeps {
            return Err(Error::Config("dpgmm needs thin >= 1 and burn < n_sweeps".into()));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn selection_specs() {
        let g = parse_selection("mu_d=0,sigma_d=2").unwrap();
        assert_eq!(g, SelectionFunction::gaussian(0.0, 2.0, SelectionScale::UnitPeak).unwrap());
        let d = parse_selection(" mu_d = 1 , sigma_d=0.5,scale=density").unwrap();
        assert_eq!(d, SelectionFunction::gaussian(1.0, 0.5, SelectionScale::Density).unwrap());
        assert_eq!(parse_selection("threshold=-1").unwrap(), SelectionFunction::step(-1.0).unwrap());
        assert!(parse_selection("none").unwrap().is_trivial());
        for bad in ["", "mu_d=0", "mu_d=0,sigma_d=-1", "threshold=x", "mu_d=0,mu_d=1,sigma_d=1", "foo=1",
            "mu_d=0,sigma_d=1,threshold=0", "scale=unit", "threshold=inf", "mu_d=nan,sigma_d=1"] {
            assert!(parse_selection(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn presets_resolve_and_override() {
        let m = ModelBlock { preset: Some("narrow".into()), ..Default::default() }.resolve().unwrap();
        assert_eq!(m.intrinsic, IntrinsicModel::new(-2.0, 0.6).unwrap());
        assert_eq!(m.observed, ObservedFamily::Gaussian);
        let t = ModelBlock { preset: Some("truncated".into()), ..Default::default() }.resolve().unwrap();
        assert_eq!(t.observed, ObservedFamily::Truncated);
        let o = ModelBlock { preset: Some("equal".into()), sigma0: Some(0.3), mu_lambda: Some(1.0), ..Default::default() }
            .resolve()
            .unwrap();
        assert_eq!((o.intrinsic.mu, o.intrinsic.sigma, o.sigma0), (1.0, 1.0, 0.3));
        assert!(ModelBlock::default().resolve().is_err());
        let bad = ModelBlock { preset: Some("narrow".into()), observed: Some("truncated".into()), ..Default::default() };
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn config_file_parsing() {
        let text = "seed = 7\ncommand = \"simulate\"\n[model]\npreset = \"wide\"\nn_events = 50\n[sampler]\nn_steps = 200\n[dpgmm]\nmode = \"data\"\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.model.n_events, Some(50));
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::parse("[model]\nprest = \"wide\"\n").is_err());
        assert!(RunConfig::parse("[sampler]\nn_walkers = 3\n").is_err());
        assert!(RunConfig::parse("[model]\npreset = \"huge\"\n").is_err());
        assert!(RunConfig::parse("seed = -1\n").is_err());
        assert!(RunConfig::parse("[model]\nselection = \"threshold=-1\"\n").is_ok());
        assert!(RunConfig::parse("[model]\nselection = \"mu_d=0\"\n").is_err());
        assert!(RunConfig::parse("[dpgmm]\nburn = 10\nn_sweeps = 5\n").is_err());
    }

    proptest! {
        #[test]
        fn selection_spec_roundtrip(mu in -10.0f64..10.0, s in 0.01f64..10.0, t in -10.0f64..10.0, dens in any::<bool>()) {
            let scale = if dens { SelectionScale::Density } else { SelectionScale::UnitPeak };
            for sel in [SelectionFunction::gaussian(mu, s, scale).unwrap(), SelectionFunction::step(t).unwrap()] {
                prop_assert_eq!(parse_selection(&format_selection(&sel)).unwrap(), sel);
            }
        }

        #[test]
        fn selection_parser_never_panics(s in ".{0,40}") {
            let _ = parse_selection(&s);
        }
    }
}
