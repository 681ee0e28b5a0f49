//! Dirichlet-process Gaussian mixture over the true values, truncated to a
//! finite symmetric Dirichlet with `K_max` components and explored by Gibbs
//! sampling.
//!
//! Each event carries a latent true value `θ_i`. Assignments are drawn with
//! the weights integrated out and `θ_i` marginalised, after which `θ_i` is
//! drawn given its component. Component parameters then have a
//! Normal-Inverse-Gamma conditional. With a selection function the
//! conditional gains a factor `α(μ_j, σ_j)^{-N_j}`, handled by a Metropolis
//! step that proposes from the NIG conditional, followed by a few
//! random-walk Metropolis steps on `(μ_j, ln σ_j)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::Table;
use crate::likelihood::{ln_detect_gaussian_mass, ln_normal, LikelihoodMode};
use crate::population::{intrinsic_from_observed_grid, ln_alpha_of_lambda, DensityGrid, IntrinsicModel, SelectionFunction};
use crate::simulate::Event;
use crate::stats::{dirichlet_sample, log_sum_exp, sample_truncated_normal, RngStream, LOG_ZERO};

pub const DEFAULT_K_MAX: usize = 50;
/// Smallest `α` used when inflating counts for the weight update.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Normal-Inverse-Gamma prior on `(μ, σ²)`:
/// `σ² ~ InvGamma(a0, b0)`, `μ | σ² ~ N(m0, σ²/k0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NIGHyper {
    pub m0: f64,
    pub k0: f64,
    pub a0: f64,
    pub b0: f64,
}

impl NIGHyper {
    pub fn new(m0: f64, k0: f64, a0: f64, b0: f64) -> Result<Self> {
        if !m0.is_finite() || !(k0 > 0.0) || !(a0 > 1.0) || !(b0 > 0.0) || !k0.is_finite() || !b0.is_finite() {
            return Err(Error::domain(format!(
                "NIG hyperparameters need finite m0, k0 > 0, a0 > 1, b0 > 0 (got {m0}, {k0}, {a0}, {b0})"
            )));
        }
        Ok(NIGHyper { m0, k0, a0, b0 })
    }

    /// `m0` = sample mean, `b0` = sample variance of the measured values.
    pub fn empirical(events: &[Event]) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::domain("empty catalog"));
        }
        let n = events.len() as f64;
        let mean = events.iter().map(|e| e.observed_value).sum::<f64>() / n;
        let var = if events.len() > 1 {
            events.iter().map(|e| (e.observed_value - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        NIGHyper::new(mean, 0.01, 2.0, if var > 0.0 { var } else { 1.0 })
    }

    /// Conjugate update on exactly observed values.
    pub fn posterior(&self, xs: &[f64]) -> NIGHyper {
        if xs.is_empty() {
            return *self;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let kn = self.k0 + n;
        NIGHyper {
            m0: (self.k0 * self.m0 + n * mean) / kn,
            k0: kn,
            a0: self.a0 + 0.5 * n,
            b0: self.b0 + 0.5 * ss + self.k0 * n * (mean - self.m0).powi(2) / (2.0 * kn),
        }
    }

    /// Draws `(μ, σ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let g = Gamma::new(self.a0, 1.0).expect("validated shape").sample(rng);
        let var = self.b0 / g;
        let z: f64 = StandardNormal.sample(rng);
        (self.m0 + z * (var / self.k0).sqrt(), var.sqrt())
    }
}

/// A rendered mixture: weights, means and widths of every component.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Mixture {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .filter(|&j| self.weights[j] > 0.0)
            .map(|j| self.weights[j].ln() + ln_normal(x, self.means[j], self.sds[j]))
            .collect();
        log_sum_exp(&terms)
    }

    /// Density on the grid, renormalised by the trapezoid rule.
    pub fn render(&self, points: &[f64]) -> Result<DensityGrid> {
        let logs = points.iter().map(|&x| self.ln_pdf(x)).collect();
        DensityGrid::new(points.to_vec(), logs)?.normalized()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub assignments: Vec<usize>,
    /// Latent true value of every event.
    pub latent: Vec<f64>,
    pub counts: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub weights: Vec<f64>,
    pub concentration: f64,
    pub hyper: NIGHyper,
    /// Weight updates in which an occupied component had `α < ALPHA_FLOOR`.
    pub alpha_floor_hits: u64,
}

fn check_events(events: &[Event]) -> Result<()> {
    if events.is_empty() {
        return Err(Error::domain("empty catalog"));
    }
    for (i, e) in events.iter().enumerate() {
        if !e.observed_value.is_finite() || !(e.noise_sd > 0.0) || !e.noise_sd.is_finite() {
            return Err(Error::domain(format!("event {i} needs a finite value and a positive noise width")));
        }
    }
    Ok(())
}

impl MixtureState {
    /// Every event starts in component 0 at its measured value.
    pub fn new(
        events: &[Event],
        k_max: usize,
        concentration: f64,
        hyper: NIGHyper,
        rng: &mut RngStream,
    ) -> Result<Self> {
        check_events(events)?;
        if k_max == 0 {
            return Err(Error::domain("need at least one mixture component"));
        }
        if !(concentration > 0.0) || !concentration.is_finite() {
            return Err(Error::domain(format!("concentration must be positive, got {concentration}")));
        }
        let latent: Vec<f64> = events.iter().map(|e| e.observed_value).collect();
        let mut means = Vec::with_capacity(k_max);
        let mut sds = Vec::with_capacity(k_max);
        for j in 0..k_max {
            let (m, s) = if j == 0 { hyper.posterior(&latent) } else { hyper }.sample(rng);
            means.push(m);
            sds.push(s);
        }
        let mut counts = vec![0; k_max];
        counts[0] = events.len();
        let conc: Vec<f64> = counts.iter().map(|&c| c as f64 + concentration / k_max as f64).collect();
        Ok(MixtureState {
            assignments: vec![0; events.len()],
            latent,
            counts,
            means,
            sds,
            weights: dirichlet_sample(&conc, rng)?,
            concentration,
            hyper,
            alpha_floor_hits: 0,
        })
    }

    pub fn k_max(&self) -> usize {
        self.counts.len()
    }

    /// Number of occupied components.
    pub fn active_components(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn mixture(&self) -> Mixture {
        Mixture {
            weights: self.weights.clone(),
            means: self.means.clone(),
            sds: self.sds.clone(),
        }
    }

    /// Counts agree with the labels and every width is positive.
    pub fn is_consistent(&self) -> bool {
        let mut c = vec![0; self.k_max()];
        for &z in &self.assignments {
            if z >= c.len() {
                return false;
            }
            c[z] += 1;
        }
        c == self.counts && self.sds.iter().all(|&s| s > 0.0) && self.latent.len() == self.assignments.len()
    }
}

/// `N′ = N / max(α, ALPHA_FLOOR)`; the flag reports that the floor was hit.
pub fn corrected_count(n: usize, alpha: f64) -> (f64, bool) {
    if n == 0 {
        return (0.0, false);
    }
    (n as f64 / alpha.max(ALPHA_FLOOR), alpha < ALPHA_FLOOR)
}

fn categorical<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|&l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, &wj) in w.iter().enumerate() {
        acc += wj;
        if u < acc {
            return j;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Draws a true value given its measurement and component.
fn draw_latent<R: Rng + ?Sized>(
    mu_c: f64,
    sd_c: f64,
    sel: Option<&SelectionFunction>,
    mode: LikelihoodMode,
    rng: &mut R,
) -> f64 {
    match (sel, mode) {
        (Some(&SelectionFunction::Gaussian { mu, sigma, .. }), LikelihoodMode::ThresholdOnParameters) => {
            let (v, vd) = (sd_c * sd_c, sigma * sigma);
            let m = (mu_c * vd + mu * v) / (v + vd);
            let s = sd_c * sigma / (v + vd).sqrt();
            sample_truncated_normal(m, s, f64::NEG_INFINITY, rng)
        }
        (Some(&SelectionFunction::Step { threshold }), LikelihoodMode::ThresholdOnParameters) => {
            sample_truncated_normal(mu_c, sd_c, threshold, rng)
        }
        _ => sample_truncated_normal(mu_c, sd_c, f64::NEG_INFINITY, rng),
    }
}

fn ln_alpha(mu: f64, sd: f64, sel: Option<&SelectionFunction>) -> f64 {
    sel.map_or(0.0, |s| ln_alpha_of_lambda(&IntrinsicModel { mu, sigma: sd }, s))
}

/// Random-walk steps per occupied component and sweep.
const RW_STEPS: usize = 8;

/// `ln p(μ, ln σ)` under an NIG density, up to a constant.
fn ln_nig_logscale(h: &NIGHyper, mu: f64, sd: f64) -> f64 {
    let v = sd * sd;
    -(h.a0 + 0.5) * v.ln() - h.b0 / v - h.k0 * (mu - h.m0).powi(2) / (2.0 * v)
}

/// Metropolis steps on `(μ, ln σ)` targeting the NIG conditional times
/// `α^{-n}`. Far from the NIG mode the independence proposal alone is
/// practically never accepted, so these steps carry the chain there.
fn random_walk<R: Rng + ?Sized>(
    post: &NIGHyper,
    n: f64,
    (mut mu, mut sd, mut la): (f64, f64, f64),
    sel: Option<&SelectionFunction>,
    rng: &mut R,
) -> (f64, f64, f64) {
    let step_mu = 1.7 * (post.b0 / (post.a0 - 1.0) / post.k0).sqrt();
    let step_ls = 1.7 / (2.0 * post.a0).sqrt();
    let mut cur = ln_nig_logscale(post, mu, sd) - n * la;
    for _ in 0..RW_STEPS {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let (m2, s2) = (mu + step_mu * z1, sd * (step_ls * z2).exp());
        let la2 = ln_alpha(m2, s2, sel);
        let new = ln_nig_logscale(post, m2, s2) - n * la2;
        let u: f64 = rng.random();
        if new.is_finite() && u.ln() < new - cur {
            (mu, sd, la, cur) = (m2, s2, la2, new);
        }
    }
    (mu, sd, la)
}

/// One full pass: assignments and latent values, component parameters, weights.
/// `sel = None` is the plain observed-distribution sweep.
pub fn gibbs_sweep(
    state: &mut MixtureState,
    events: &[Event],
    sel: Option<&SelectionFunction>,
    mode: LikelihoodMode,
    rng: &mut RngStream,
) -> Result<()> {
    check_events(events)?;
    if events.len() != state.assignments.len() {
        return Err(Error::domain(format!(
            "state holds {} events but the catalog has {}",
            state.assignments.len(),
            events.len()
        )));
    }
    let k = state.k_max();
    let prior_mass = state.concentration / k as f64;
    let mut ln_a: Vec<f64> = (0..k).map(|j| ln_alpha(state.means[j], state.sds[j], sel)).collect();

    let mut log_w = vec![0.0; k];
    for (i, e) in events.iter().enumerate() {
        let (x, vn) = (e.observed_value, e.noise_sd * e.noise_sd);
        state.counts[state.assignments[i]] -= 1;
        for j in 0..k {
            let v = state.sds[j] * state.sds[j];
            let tot = v + vn;
            let mut l = (state.counts[j] as f64 + prior_mass).ln() + ln_normal(x, state.means[j], tot.sqrt());
            if let Some(s) = sel {
                l -= ln_a[j];
                if mode == LikelihoodMode::ThresholdOnParameters {
                    let mu_c = (state.means[j] * vn + x * v) / tot;
                    let sd_c = (v * vn / tot).sqrt();
                    l += ln_detect_gaussian_mass(mu_c, sd_c, s);
                }
            }
            log_w[j] = if l.is_nan() { f64::NEG_INFINITY } else { l };
        }
        let j = categorical(&log_w, rng);
        state.counts[j] += 1;
        state.assignments[i] = j;
        let v = state.sds[j] * state.sds[j];
        let tot = v + vn;
        let mu_c = (state.means[j] * vn + x * v) / tot;
        let sd_c = (v * vn / tot).sqrt();
        state.latent[i] = draw_latent(mu_c, sd_c, sel, mode, rng);
    }

    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&z, &t) in state.assignments.iter().zip(&state.latent) {
        members[z].push(t);
    }
    for j in 0..k {
        let post = state.hyper.posterior(&members[j]);
        let (m, s) = post.sample(rng);
        let n = members[j].len() as f64;
        let accept = match sel {
            Some(_) if n > 0.0 => {
                let ln_new = ln_alpha(m, s, sel);
                let ln_r = n * (ln_a[j] - ln_new);
                ln_r >= 0.0 || rng.random::<f64>().ln() < ln_r
            }
            _ => true,
        };
        if accept {
            state.means[j] = m;
            state.sds[j] = s;
            ln_a[j] = ln_alpha(m, s, sel);
        }
        if n > 0.0 {
            let (mu, sd, la) = random_walk(&post, n, (state.means[j], state.sds[j], ln_a[j]), sel, rng);
            state.means[j] = mu;
            state.sds[j] = sd;
            ln_a[j] = la;
        }
    }

    let conc: Vec<f64> = (0..k)
        .map(|j| {
            let n = state.counts[j];
            let n_eff = if sel.is_some() {
                let (c, hit) = corrected_count(n, ln_a[j].exp());
                if hit {
                    state.alpha_floor_hits += 1;
                }
                c
            } else {
                n as f64
            };
            n_eff + prior_mass
        })
        .collect();
    state.weights = dirichlet_sample(&conc, rng)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpgmmConfig {
    pub k_max: usize,
    pub concentration: f64,
    pub n_sweeps: usize,
    pub burn: usize,
    pub thin: usize,
    pub seed: u64,
    pub stream: u64,
    pub mode: LikelihoodMode,
}

impl Default for DpgmmConfig {
    fn default() -> Self {
        DpgmmConfig {
            k_max: DEFAULT_K_MAX,
            concentration: 1.0,
            n_sweeps: 1500,
            burn: 500,
            thin: 5,
            seed: 0,
            stream: 0,
            mode: LikelihoodMode::ThresholdOnParameters,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpgmmRun {
    /// Retained draws after burn-in and thinning.
    pub mixtures: Vec<Mixture>,
    pub final_state: MixtureState,
}

/// Runs one chain; `sel = Some` applies the selection correction at runtime.
pub fn run_dpgmm(events: &[Event], sel: Option<&SelectionFunction>, cfg: &DpgmmConfig) -> Result<DpgmmRun> {
    if cfg.thin == 0 || cfg.burn >= cfg.n_sweeps {
        return Err(Error::domain("need thin >= 1 and burn-in shorter than the run"));
    }
    let mut rng = RngStream::new(cfg.seed, cfg.stream);
    let hyper = NIGHyper::empirical(events)?;
    let mut state = MixtureState::new(events, cfg.k_max, cfg.concentration, hyper, &mut rng)?;
    let mut mixtures = Vec::new();
    for sweep in 0..cfg.n_sweeps {
        gibbs_sweep(&mut state, events, sel, cfg.mode, &mut rng)?;
        if sweep >= cfg.burn && (sweep - cfg.burn) % cfg.thin == 0 {
            mixtures.push(state.mixture());
        }
    }
    Ok(DpgmmRun { mixtures, final_state: state })
}

/// Rendered density draws on a shared grid and their pointwise summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityDraws {
    pub points: Vec<f64>,
    pub log_draws: Vec<Vec<f64>>,
    /// Grid points left unconstrained by a division in any draw.
    pub unconstrained: Vec<bool>,
    pub median: Vec<f64>,
    pub p05: Vec<f64>,
    pub p95: Vec<f64>,
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

impl DensityDraws {
    pub fn from_grids(grids: Vec<DensityGrid>) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::domain("no density draws"))?;
        let points = first.points().to_vec();
        let mut unconstrained = vec![false; points.len()];
        for g in &grids {
            if g.points() != points.as_slice() {
                return Err(Error::domain("density draws are on different grids"));
            }
            for (u, &m) in unconstrained.iter_mut().zip(g.unconstrained()) {
                *u |= m;
            }
        }
        let dens: Vec<Vec<f64>> = grids.iter().map(|g| g.densities()).collect();
        let n = points.len();
        let (mut median, mut p05, mut p95) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut col = vec![0.0; dens.len()];
        for i in 0..n {
            for (c, d) in col.iter_mut().zip(&dens) {
                *c = d[i];
            }
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            median[i] = quantile_sorted(&col, 0.5);
            p05[i] = quantile_sorted(&col, 0.05);
            p95[i] = quantile_sorted(&col, 0.95);
        }
        Ok(DensityDraws {
            points,
            log_draws: grids.into_iter().map(|g| g.log_values().to_vec()).collect(),
            unconstrained,
            median,
            p05,
            p95,
        })
    }

    pub fn len(&self) -> usize {
        self.log_draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_draws.is_empty()
    }

    pub fn grid(&self, d: usize) -> Result<DensityGrid> {
        DensityGrid::new(self.points.clone(), self.log_draws[d].clone())
    }

    /// The pointwise median as a grid, renormalised.
    pub fn median_grid(&self) -> Result<DensityGrid> {
        let logs = self.median.iter().map(|&m| if m > 0.0 { m.ln() } else { LOG_ZERO }).collect();
        DensityGrid::with_mask(self.points.clone(), logs, self.unconstrained.clone())?.normalized()
    }

    /// Columns `point, median, p05, p95`, then one column per draw if asked.
    /// Unconstrained points are written as `nan`.
    pub fn to_table(&self, include_draws: bool) -> Table {
        let mut header: Vec<String> = ["point", "median", "p05", "p95"].iter().map(|s| s.to_string()).collect();
        if include_draws {
            header.extend((0..self.len()).map(|d| format!("draw_{d}")));
        }
        let mut t = Table::new(header);
        for i in 0..self.points.len() {
            let cut = self.unconstrained[i];
            let mut row = if cut {
                vec![self.points[i], f64::NAN, f64::NAN, f64::NAN]
            } else {
                vec![self.points[i], self.median[i], self.p05[i], self.p95[i]]
            };
            if include_draws {
                row.extend(self.log_draws.iter().map(|d| {
                    if cut {
                        f64::NAN
                    } else if d[i] <= LOG_ZERO {
                        0.0
                    } else {
                        d[i].exp()
                    }
                }));
            }
            t.rows.push(row);
        }
        t
    }

    pub fn to_csv(&self, include_draws: bool) -> String {
        self.to_table(include_draws).to_csv()
    }
}

/// Renders every `thin`-th mixture on the grid.
pub fn density_draws(chain: &[Mixture], points: &[f64], thin: usize) -> Result<DensityDraws> {
    if thin == 0 || chain.len() < thin {
        return Err(Error::domain(format!(
            "chain of {} states is shorter than the thinning {thin}",
            chain.len()
        )));
    }
    let kept: Vec<&Mixture> = chain.iter().skip(thin - 1).step_by(thin).collect();
    let grids = kept.par_iter().map(|m| m.render(points)).collect::<Result<Vec<_>>>()?;
    DensityDraws::from_grids(grids)
}

/// Divides every draw by `p_det` and renormalises.
pub fn postprocess_intrinsic(draws: &DensityDraws, sel: &SelectionFunction, floor: f64) -> Result<DensityDraws> {
    let grids = (0..draws.len())
        .into_par_iter()
        .map(|d| intrinsic_from_observed_grid(&draws.grid(d)?, sel, floor))
        .collect::<Result<Vec<_>>>()?;
    DensityDraws::from_grids(grids)
}
