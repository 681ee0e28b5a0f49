//! Synthetic catalogue generation.
//!
//! Detection is decided on the true value of each event, either as a
//! Bernoulli trial with probability `p_det(θ)` or by thresholding a noisy
//! detection statistic. Measurement noise on the reported value is drawn only
//! after the keep decision.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{sidecar_path, Metadata, Table};
use crate::population::{alpha_of_lambda, IntrinsicModel, SelectionFunction, SelectionScale};
use crate::stats::{gaussian_cdf, log_gaussian_sf, GaussianParams, RngStream};

/// Smallest detection fraction for which rejection sampling is attempted.
pub const MIN_ALPHA: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub true_value: f64,
    pub observed_value: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub generator: String,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub events: Vec<Event>,
    pub n_drawn: u64,
    pub provenance: Provenance,
}

/// Per-event measurement uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Homoscedastic(f64),
    PerEvent(Vec<f64>),
}

impl NoiseModel {
    fn validate(&self, n: usize) -> Result<()> {
        let ok = |s: f64| s > 0.0 && s.is_finite();
        match self {
            NoiseModel::Homoscedastic(s) if ok(*s) => Ok(()),
            NoiseModel::PerEvent(v) if v.len() == n && v.iter().all(|&s| ok(s)) => Ok(()),
            NoiseModel::PerEvent(v) if v.len() != n => Err(Error::domain(format!(
                "{} noise widths supplied for {n} detections",
                v.len()
            ))),
            _ => Err(Error::domain("noise widths must be positive and finite")),
        }
    }

    fn sd(&self, i: usize) -> f64 {
        match self {
            NoiseModel::Homoscedastic(s) => *s,
            NoiseModel::PerEvent(v) => v[i],
        }
    }

    fn record(&self, params: &mut BTreeMap<String, f64>) {
        if let NoiseModel::Homoscedastic(s) = self {
            params.insert("sigma_0".into(), *s);
        }
    }
}

/// Detection by thresholding `ρ_obs ~ N(slope·θ + offset, stat_noise_sd)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdDetector {
    pub rho_opt_slope: f64,
    pub rho_opt_offset: f64,
    pub stat_noise_sd: f64,
    pub threshold: f64,
}

impl ThresholdDetector {
    pub fn new(slope: f64, offset: f64, stat_noise_sd: f64, threshold: f64) -> Result<Self> {
        if !(stat_noise_sd > 0.0) || ![slope, offset, threshold].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("threshold detector needs finite parameters and positive noise"));
        }
        Ok(ThresholdDetector {
            rho_opt_slope: slope,
            rho_opt_offset: offset,
            stat_noise_sd,
            threshold,
        })
    }

    pub fn rho_opt(&self, theta: f64) -> f64 {
        self.rho_opt_slope * theta + self.rho_opt_offset
    }

    /// Noise-marginalised detection probability of a source at `theta`.
    pub fn p_det(&self, theta: f64) -> f64 {
        gaussian_cdf((self.rho_opt(theta) - self.threshold) / self.stat_noise_sd)
    }

    /// Population-averaged detection probability; `ρ_obs` is Gaussian under a
    /// Gaussian population because `ρ_opt` is affine.
    pub fn alpha(&self, intr: &IntrinsicModel) -> f64 {
        let mean = self.rho_opt(intr.mu);
        let sd = (self.rho_opt_slope.powi(2) * intr.sigma.powi(2) + self.stat_noise_sd.powi(2)).sqrt();
        log_gaussian_sf((self.threshold - mean) / sd).exp()
    }

    /// Whether a source with this true value and statistic-noise draw is kept.
    /// The decision is a pure function of its inputs.
    pub fn detects(&self, theta: f64, stat_noise: f64) -> bool {
        self.rho_opt(theta) + self.stat_noise_sd * stat_noise >= self.threshold
    }
}

fn check_request(n_detections: usize, alpha: f64) -> Result<()> {
    if n_detections == 0 {
        return Err(Error::domain("at least one detection must be requested"));
    }
    if !(alpha >= MIN_ALPHA) {
        return Err(Error::ImpracticalSelection { alpha });
    }
    Ok(())
}

fn intrinsic_params(intr: &IntrinsicModel) -> BTreeMap<String, f64> {
    BTreeMap::from([("mu_lambda".to_string(), intr.mu), ("sigma_lambda".to_string(), intr.sigma)])
}

pub fn selection_params(sel: &SelectionFunction, params: &mut BTreeMap<String, f64>) {
    match *sel {
        SelectionFunction::Gaussian { mu, sigma, scale } => {
            params.insert("mu_d".into(), mu);
            params.insert("sigma_d".into(), sigma);
            params.insert(
                "unit_peak".into(),
                if scale == SelectionScale::UnitPeak { 1.0 } else { 0.0 },
            );
        }
        SelectionFunction::Step { threshold } => {
            params.insert("threshold".into(), threshold);
        }
    }
}

/// When a simulation stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    /// Draw until this many events are detected.
    Detections(usize),
    /// Draw exactly this many intrinsic events.
    Draws(u64),
}

impl Budget {
    fn check(&self, noise: &NoiseModel, alpha: f64) -> Result<()> {
        match *self {
            Budget::Detections(n) => {
                noise.validate(n)?;
                check_request(n, alpha)
            }
            Budget::Draws(0) => Err(Error::domain("at least one draw must be requested")),
            Budget::Draws(_) => match noise {
                NoiseModel::Homoscedastic(_) => noise.validate(0),
                NoiseModel::PerEvent(v) => noise.validate(v.len()),
            },
        }
    }
}

/// Shared draw loop. `detect` draws one intrinsic event and returns its true
/// value if it is kept; the reported value is drawn afterwards.
fn collect_events<F>(budget: Budget, noise: &NoiseModel, rng: &mut RngStream, mut detect: F) -> Result<(Vec<Event>, u64)>
where
    F: FnMut(&mut RngStream) -> Option<f64>,
{
    let mut events = Vec::new();
    let mut n_drawn = 0u64;
    loop {
        match budget {
            Budget::Detections(n) if events.len() >= n => break,
            Budget::Draws(n) if n_drawn >= n => break,
            _ => {}
        }
        n_drawn += 1;
        if let Some(theta) = detect(rng) {
            if let NoiseModel::PerEvent(v) = noise {
                if events.len() >= v.len() {
                    return Err(Error::domain(format!("more detections than the {} noise widths supplied", v.len())));
                }
            }
            let sd = noise.sd(events.len());
            let observed = GaussianParams::new(theta, sd)?.sample(rng);
            events.push(Event {
                true_value: theta,
                observed_value: observed,
                noise_sd: sd,
            });
        }
    }
    Ok((events, n_drawn))
}

/// Keeps each intrinsic draw with probability `p_det(θ)` until
/// `n_detections` events are collected.
pub fn draw_catalog_bernoulli(
    intr: &IntrinsicModel,
    sel: &SelectionFunction,
    n_detections: usize,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Catalog> {
    simulate_bernoulli(intr, sel, Budget::Detections(n_detections), noise, rng)
}

pub fn simulate_bernoulli(
    intr: &IntrinsicModel,
    sel: &SelectionFunction,
    budget: Budget,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Catalog> {
    if sel.ln_peak() > 1e-12 {
        return Err(Error::domain(
            "selection peak exceeds 1; use the unit-peak convention for simulation",
        ));
    }
    budget.check(noise, alpha_of_lambda(intr, sel))?;
    let g = intr.gaussian();
    let (events, n_drawn) = collect_events(budget, noise, rng, |rng| {
        let theta = g.sample(rng);
        let u: f64 = rng.random();
        (u < sel.p_det(theta)).then_some(theta)
    })?;

    let mut params = intrinsic_params(intr);
    selection_params(sel, &mut params);
    noise.record(&mut params);
    Ok(Catalog {
        events,
        n_drawn,
        provenance: Provenance {
            generator: "bernoulli".into(),
            params,
            seed: rng.seed(),
            stream: rng.stream(),
        },
    })
}

/// Draws `ρ_obs` for every intrinsic draw and keeps it iff `ρ_obs ≥ threshold`.
pub fn draw_catalog_threshold(
    intr: &IntrinsicModel,
    det: &ThresholdDetector,
    n_detections: usize,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Catalog> {
    simulate_threshold(intr, det, Budget::Detections(n_detections), noise, rng)
}

pub fn simulate_threshold(
    intr: &IntrinsicModel,
    det: &ThresholdDetector,
    budget: Budget,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Catalog> {
    budget.check(noise, det.alpha(intr))?;
    let g = intr.gaussian();
    let std_normal = GaussianParams::new(0.0, 1.0)?;
    let (events, n_drawn) = collect_events(budget, noise, rng, |rng| {
        let theta = g.sample(rng);
        det.detects(theta, std_normal.sample(rng)).then_some(theta)
    })?;

    let mut params = intrinsic_params(intr);
    params.insert("rho_opt_slope".into(), det.rho_opt_slope);
    params.insert("rho_opt_offset".into(), det.rho_opt_offset);
    params.insert("stat_noise_sd".into(), det.stat_noise_sd);
    params.insert("stat_threshold".into(), det.threshold);
    noise.record(&mut params);
    Ok(Catalog {
        events,
        n_drawn,
        provenance: Provenance {
            generator: "threshold".into(),
            params,
            seed: rng.seed(),
            stream: rng.stream(),
        },
    })
}

/// Negative control: the keep decision uses the *measured* value. Catalogues
/// built this way violate the assumptions of the post-processing route and
/// exist only to demonstrate the resulting bias.
pub fn draw_catalog_select_on_observed(
    intr: &IntrinsicModel,
    sel: &SelectionFunction,
    n_detections: usize,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Catalog> {
    if sel.ln_peak() > 1e-12 {
        return Err(Error::domain("selection peak exceeds 1"));
    }
    noise.validate(n_detections)?;
    check_request(n_detections, alpha_of_lambda(intr, sel))?;

    let g = intr.gaussian();
    let mut events = Vec::with_capacity(n_detections);
    let mut n_drawn = 0u64;
    while events.len() < n_detections {
        let theta = g.sample(rng);
        n_drawn += 1;
        let sd = noise.sd(events.len());
        let observed = GaussianParams::new(theta, sd)?.sample(rng);
        let u: f64 = rng.random();
        if u < sel.p_det(observed) {
            events.push(Event {
                true_value: theta,
                observed_value: observed,
                noise_sd: sd,
            });
        }
    }

    let mut params = intrinsic_params(intr);
    selection_params(sel, &mut params);
    noise.record(&mut params);
    Ok(Catalog {
        events,
        n_drawn,
        provenance: Provenance {
            generator: "select-on-observed".into(),
            params,
            seed: rng.seed(),
            stream: rng.stream(),
        },
    })
}

pub fn empirical_detection_fraction(cat: &Catalog) -> Result<f64> {
    if cat.n_drawn == 0 || cat.events.is_empty() {
        return Err(Error::domain("detection fraction of an empty catalogue"));
    }
    Ok(cat.events.len() as f64 / cat.n_drawn as f64)
}

pub const CATALOG_COLUMNS: [&str; 3] = ["true_value", "observed_value", "noise_sd"];

impl Catalog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn observed_values(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.observed_value).collect()
    }

    pub fn true_values(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.true_value).collect()
    }

    /// The shared noise width if every event has the same one.
    pub fn common_noise_sd(&self) -> Option<f64> {
        let first = self.events.first()?.noise_sd;
        self.events.iter().all(|e| e.noise_sd == first).then_some(first)
    }

    pub fn to_csv(&self) -> String {
        let mut t = Table::new(CATALOG_COLUMNS.iter().map(|s| s.to_string()).collect());
        t.rows = self
            .events
            .iter()
            .map(|e| vec![e.true_value, e.observed_value, e.noise_sd])
            .collect();
        t.to_csv()
    }

    /// Parses the catalogue CSV. Columns are located by name; `true_value`
    /// may be absent for real-style inputs and is then set to NaN.
    pub fn parse_events(text: &str) -> Result<Vec<Event>> {
        let t = Table::parse(text)?;
        let obs = t
            .column_index("observed_value")
            .ok_or_else(|| Error::parse(1, "missing column 'observed_value'"))?;
        let sd = t
            .column_index("noise_sd")
            .ok_or_else(|| Error::parse(1, "missing column 'noise_sd'"))?;
        let truth = t.column_index("true_value");
        t.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let e = Event {
                    true_value: truth.map_or(f64::NAN, |j| r[j]),
                    observed_value: r[obs],
                    noise_sd: r[sd],
                };
                if !e.observed_value.is_finite() {
                    return Err(Error::parse(i + 2, "observed_value must be finite"));
                }
                if !(e.noise_sd > 0.0) || !e.noise_sd.is_finite() {
                    return Err(Error::parse(i + 2, "noise_sd must be positive"));
                }
                Ok(e)
            })
            .collect()
    }

    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new("catalog")
            .count("n_drawn", self.n_drawn)
            .count("n_detected", self.events.len() as u64)
            .count("stream", self.provenance.stream)
            .note("generator", self.provenance.generator.clone());
        m.seed = Some(self.provenance.seed);
        m.params = self.provenance.params.clone();
        m
    }

    /// Writes the CSV and its metadata sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        self.metadata().write(&sidecar_path(path))
    }

    /// Reads a catalogue; provenance comes from the sidecar when present.
    pub fn read(path: &Path) -> Result<Catalog> {
        let events = Catalog::parse_events(&std::fs::read_to_string(path)?)?;
        if events.is_empty() {
            return Err(Error::parse(2, "catalogue has no events"));
        }
        let side = sidecar_path(path);
        let (n_drawn, provenance) = if side.exists() {
            let m = Metadata::parse(&std::fs::read_to_string(&side)?)?;
            let prov = Provenance {
                generator: m.notes.get("generator").cloned().unwrap_or_default(),
                params: m.params.clone(),
                seed: m.seed.unwrap_or(0),
                stream: m.counts.get("stream").copied().unwrap_or(0),
            };
            (m.counts.get("n_drawn").copied().unwrap_or(events.len() as u64), prov)
        } else {
            (events.len() as u64, Provenance::default())
        };
        Ok(Catalog {
            events,
            n_drawn,
            provenance,
        })
    }
}
