//! Intrinsic and observed population models, selection functions, the
//! conjugate parameter maps and grid-based removal of selection effects.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::io::Table;
use crate::stats::{
    is_log_zero, log_gaussian_sf, GaussianParams, TruncGaussianParams, LN_SQRT_2PI, LOG_ZERO,
};

/// Gaussian population `N(mu, sigma)` before selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicModel {
    pub mu: f64,
    pub sigma: f64,
}

impl IntrinsicModel {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        GaussianParams::new(mu, sigma)?;
        Ok(IntrinsicModel { mu, sigma })
    }

    pub fn gaussian(&self) -> GaussianParams {
        GaussianParams::new(self.mu, self.sigma).expect("validated at construction")
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.gaussian().ln_pdf(x)
    }
}

/// How a Gaussian-shaped selection function is scaled.
///
/// `Density` takes `p_det` literally as the density `N(x | mu_d, sigma_d)`;
/// `UnitPeak` rescales it so that `max p_det = 1`. Posteriors do not depend
/// on the choice, only the value of alpha does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionScale {
    Density,
    #[default]
    UnitPeak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionFunction {
    Gaussian {
        mu: f64,
        sigma: f64,
        scale: SelectionScale,
    },
    /// `p_det = 1` for `x >= threshold`, zero below. A threshold of `-inf`
    /// detects everything.
    Step { threshold: f64 },
}

impl SelectionFunction {
    pub fn gaussian(mu: f64, sigma: f64, scale: SelectionScale) -> Result<Self> {
        GaussianParams::new(mu, sigma)?;
        Ok(SelectionFunction::Gaussian { mu, sigma, scale })
    }

    pub fn step(threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold == f64::INFINITY {
            return Err(Error::domain(format!("invalid step threshold {threshold}")));
        }
        Ok(SelectionFunction::Step { threshold })
    }

    /// `p_det ≡ 1`.
    pub fn none() -> Self {
        SelectionFunction::Step {
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn is_trivial(&self) -> bool {
        matches!(self, SelectionFunction::Step { threshold } if *threshold == f64::NEG_INFINITY)
    }

    pub fn with_scale(self, new_scale: SelectionScale) -> Self {
        match self {
            SelectionFunction::Gaussian { mu, sigma, .. } => SelectionFunction::Gaussian {
                mu,
                sigma,
                scale: new_scale,
            },
            other => other,
        }
    }

    /// `ln max_x p_det(x)`.
    pub fn ln_peak(&self) -> f64 {
        match *self {
            SelectionFunction::Gaussian {
                sigma,
                scale: SelectionScale::Density,
                ..
            } => -sigma.ln() - LN_SQRT_2PI,
            _ => 0.0,
        }
    }

    pub fn ln_p_det(&self, x: f64) -> f64 {
        match *self {
            SelectionFunction::Gaussian { mu, sigma, .. } => {
                let z = (x - mu) / sigma;
                self.ln_peak() - 0.5 * z * z
            }
            SelectionFunction::Step { threshold } => {
                if x >= threshold {
                    0.0
                } else {
                    LOG_ZERO
                }
            }
        }
    }

    pub fn p_det(&self, x: f64) -> f64 {
        let l = self.ln_p_det(x);
        if is_log_zero(l) {
            0.0
        } else {
            l.exp()
        }
    }
}

/// Parametric model of the distribution of detected true values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservedModel {
    Gaussian(GaussianParams),
    Truncated(TruncGaussianParams),
}

impl ObservedModel {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match self {
            ObservedModel::Gaussian(g) => g.ln_pdf(x),
            ObservedModel::Truncated(t) => t.ln_pdf(x),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            ObservedModel::Gaussian(g) => g.cdf(x),
            ObservedModel::Truncated(t) => t.cdf(x),
        }
    }
}

fn gaussian_selection(sel: &SelectionFunction) -> Result<(f64, f64)> {
    match *sel {
        SelectionFunction::Gaussian { mu, sigma, .. } => Ok((mu, sigma)),
        SelectionFunction::Step { .. } => Err(Error::domain(
            "closed-form parameter map requires a gaussian selection function",
        )),
    }
}

/// Observed-distribution parameters `Θ(Λ)` for a Gaussian population under a
/// Gaussian selection function.
pub fn theta_of_lambda(intr: &IntrinsicModel, sel: &SelectionFunction) -> Result<GaussianParams> {
    let (mu_d, sigma_d) = gaussian_selection(sel)?;
    let vd = sigma_d * sigma_d;
    let vl = intr.sigma * intr.sigma;
    let mu_obs = (vd * intr.mu + vl * mu_d) / (vd + vl);
    let sigma_obs = (1.0 / vd + 1.0 / vl).powf(-0.5);
    GaussianParams::new(mu_obs, sigma_obs)
}

/// Inverse of [`theta_of_lambda`]; fails with [`Error::Infeasible`] when
/// `sigma_obs >= sigma_d`, which no intrinsic model can produce.
pub fn lambda_of_theta(obs: &GaussianParams, sel: &SelectionFunction) -> Result<IntrinsicModel> {
    let (mu_d, sigma_d) = gaussian_selection(sel)?;
    if obs.sd() >= sigma_d {
        return Err(Error::Infeasible(format!(
            "sigma_obs = {} is not below sigma_d = {}",
            obs.sd(),
            sigma_d
        )));
    }
    let vd = sigma_d * sigma_d;
    let prec = 1.0 / (obs.sd() * obs.sd()) - 1.0 / vd;
    let vl = 1.0 / prec;
    let mu = (obs.mean() * (vd + vl) - vl * mu_d) / vd;
    IntrinsicModel::new(mu, vl.sqrt())
}

/// `ln α(Λ) = ln ∫ p_det(x) p_int(x | Λ) dx`.
pub fn ln_alpha_of_lambda(intr: &IntrinsicModel, sel: &SelectionFunction) -> f64 {
    match *sel {
        SelectionFunction::Gaussian { mu, sigma, .. } => {
            let total = (sigma * sigma + intr.sigma * intr.sigma).sqrt();
            let z = (intr.mu - mu) / total;
            let density = -0.5 * z * z - total.ln() - LN_SQRT_2PI;
            // undo the density normalisation, then apply the chosen peak
            density + sigma.ln() + LN_SQRT_2PI + sel.ln_peak()
        }
        SelectionFunction::Step { threshold } => log_gaussian_sf((threshold - intr.mu) / intr.sigma),
    }
}

pub fn alpha_of_lambda(intr: &IntrinsicModel, sel: &SelectionFunction) -> f64 {
    let l = ln_alpha_of_lambda(intr, sel);
    if is_log_zero(l) {
        0.0
    } else {
        l.exp()
    }
}

/// Log-density sampled on a strictly increasing grid. Points flagged
/// `unconstrained` carry no information (e.g. after dividing by a vanishing
/// selection function) and hold the [`LOG_ZERO`] sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    points: Vec<f64>,
    log_values: Vec<f64>,
    unconstrained: Vec<bool>,
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

/// 2001 points spanning `center ± 8 width`.
pub fn default_grid(center: f64, width: f64) -> Vec<f64> {
    linspace(center - 8.0 * width, center + 8.0 * width, 2001)
}

impl DensityGrid {
    pub fn new(points: Vec<f64>, log_values: Vec<f64>) -> Result<Self> {
        let n = points.len();
        DensityGrid::with_mask(points, log_values, vec![false; n])
    }

    pub fn with_mask(points: Vec<f64>, log_values: Vec<f64>, unconstrained: Vec<bool>) -> Result<Self> {
        check_points(&points)?;
        if log_values.len() != points.len() || unconstrained.len() != points.len() {
            return Err(Error::domain("grid points and values differ in length"));
        }
        if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::domain("grid log-values must be finite or the zero sentinel"));
        }
        let log_values = log_values
            .into_iter()
            .zip(&unconstrained)
            .map(|(v, &u)| if u || is_log_zero(v) { LOG_ZERO } else { v })
            .collect();
        Ok(DensityGrid {
            points,
            log_values,
            unconstrained,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn unconstrained(&self) -> &[bool] {
        &self.unconstrained
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn densities(&self) -> Vec<f64> {
        self.log_values
            .iter()
            .map(|&l| if is_log_zero(l) { 0.0 } else { l.exp() })
            .collect()
    }

    /// Log of the trapezoid integral. Segments touching a zero-density point
    /// are step edges and are skipped.
    pub fn log_integral(&self) -> f64 {
        let top = self.log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if is_log_zero(top) {
            return LOG_ZERO;
        }
        let mut acc = 0.0;
        for i in 1..self.points.len() {
            let (a, b) = (self.log_values[i - 1], self.log_values[i]);
            if is_log_zero(a) || is_log_zero(b) {
                continue;
            }
            let h = self.points[i] - self.points[i - 1];
            acc += 0.5 * h * ((a - top).exp() + (b - top).exp());
        }
        if acc > 0.0 {
            top + acc.ln()
        } else {
            LOG_ZERO
        }
    }

    pub fn integral(&self) -> f64 {
        let l = self.log_integral();
        if is_log_zero(l) {
            0.0
        } else {
            l.exp()
        }
    }

    pub fn normalized(&self) -> Result<DensityGrid> {
        let l = self.log_integral();
        if is_log_zero(l) || !l.is_finite() {
            return Err(Error::EmptySupport("density vanishes on the whole grid".into()));
        }
        let log_values = self
            .log_values
            .iter()
            .map(|&v| if is_log_zero(v) { LOG_ZERO } else { v - l })
            .collect();
        Ok(DensityGrid {
            points: self.points.clone(),
            log_values,
            unconstrained: self.unconstrained.clone(),
        })
    }

    /// Cumulative trapezoid integral at each grid point (same skipping rule).
    pub fn cumulative(&self) -> Vec<f64> {
        let d = self.densities();
        let mut out = Vec::with_capacity(d.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..d.len() {
            if d[i - 1] > 0.0 && d[i] > 0.0 {
                acc += 0.5 * (self.points[i] - self.points[i - 1]) * (d[i - 1] + d[i]);
            }
            out.push(acc);
        }
        out
    }

    /// Linear interpolation of the density; zero outside the grid.
    pub fn interpolate(&self, x: f64) -> f64 {
        let p = &self.points;
        if x < p[0] || x > p[p.len() - 1] {
            return 0.0;
        }
        let i = p.partition_point(|&g| g <= x).min(p.len() - 1).max(1);
        let d0 = self.density_at(i - 1);
        let d1 = self.density_at(i);
        let t = (x - p[i - 1]) / (p[i] - p[i - 1]);
        d0 + t * (d1 - d0)
    }

    fn density_at(&self, i: usize) -> f64 {
        let l = self.log_values[i];
        if is_log_zero(l) {
            0.0
        } else {
            l.exp()
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(vec!["point".into(), "density".into()]);
        for i in 0..self.len() {
            let d = if self.unconstrained[i] {
                f64::NAN
            } else {
                self.density_at(i)
            };
            t.rows.push(vec![self.points[i], d]);
        }
        t
    }

    pub fn to_csv(&self) -> String {
        self.to_table().to_csv()
    }

    /// Parses the two-column `point,density` format; `nan` marks an
    /// unconstrained point.
    pub fn parse_csv(text: &str) -> Result<DensityGrid> {
        let t = Table::parse(text)?;
        if t.header.len() != 2 {
            return Err(Error::parse(1, "density grid needs exactly two columns"));
        }
        let mut points = Vec::with_capacity(t.rows.len());
        let mut logs = Vec::with_capacity(t.rows.len());
        let mut mask = Vec::with_capacity(t.rows.len());
        for (i, row) in t.rows.iter().enumerate() {
            let d = row[1];
            if d < 0.0 || d == f64::INFINITY {
                return Err(Error::parse(i + 2, format!("invalid density {d}")));
            }
            points.push(row[0]);
            mask.push(d.is_nan());
            logs.push(if d.is_nan() || d == 0.0 { LOG_ZERO } else { d.ln() });
        }
        DensityGrid::with_mask(points, logs, mask)
    }
}

fn check_points(points: &[f64]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::domain("grid needs at least two points"));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("grid points must be finite"));
    }
    if points.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("grid points must be strictly increasing"));
    }
    Ok(())
}

/// `p_obs ∝ p_int · p_det` on a grid, normalised by the trapezoid rule.
pub fn observed_density_grid(
    intr: &IntrinsicModel,
    sel: &SelectionFunction,
    points: &[f64],
) -> Result<DensityGrid> {
    check_points(points)?;
    let g = intr.gaussian();
    let logs: Vec<f64> = points
        .iter()
        .map(|&x| {
            let d = sel.ln_p_det(x);
            if is_log_zero(d) {
                LOG_ZERO
            } else {
                g.ln_pdf(x) + d
            }
        })
        .collect();
    if logs.iter().all(|&l| is_log_zero(l)) {
        return Err(Error::EmptySupport("grid lies entirely in the vetoed region".into()));
    }
    DensityGrid::new(points.to_vec(), logs)?.normalized()
}

pub const DEFAULT_DIVISION_FLOOR: f64 = 1e-12;

/// Removes selection effects from an observed density by pointwise division.
/// Points where `p_det < floor · max p_det` become unconstrained.
pub fn intrinsic_from_observed_grid(
    obs: &DensityGrid,
    sel: &SelectionFunction,
    floor: f64,
) -> Result<DensityGrid> {
    if !(floor > 0.0) {
        return Err(Error::domain(format!("division floor must be positive, got {floor}")));
    }
    let ln_floor = floor.ln() + sel.ln_peak();
    let mut logs = Vec::with_capacity(obs.len());
    let mut mask = Vec::with_capacity(obs.len());
    for i in 0..obs.len() {
        let ln_det = sel.ln_p_det(obs.points[i]);
        let cut = obs.unconstrained[i] || is_log_zero(ln_det) || ln_det < ln_floor;
        mask.push(cut);
        let v = obs.log_values[i];
        logs.push(if cut || is_log_zero(v) { LOG_ZERO } else { v - ln_det });
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::EmptySupport(
            "selection function is below the floor on the whole grid".into(),
        ));
    }
    DensityGrid::with_mask(obs.points.clone(), logs, mask)?.normalized()
}

/// Normalisation of a Gaussian selection in the density convention, `1/(σ√(2π))`.
pub fn gaussian_selection_density_peak(sigma_d: f64) -> f64 {
    1.0 / (sigma_d * (2.0 * PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::QuadConfig;
    use crate::stats::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(mu: f64, sigma: f64) -> SelectionFunction {
        SelectionFunction::gaussian(mu, sigma, SelectionScale::UnitPeak).unwrap()
    }

    fn dens(mu: f64, sigma: f64) -> SelectionFunction {
        SelectionFunction::gaussian(mu, sigma, SelectionScale::Density).unwrap()
    }

    /// ∫ p_det · p_int by adaptive quadrature.
    fn alpha_oracle(intr: &IntrinsicModel, sel: &SelectionFunction) -> f64 {
        let cfg = QuadConfig {
            abs_tol: 1e-15,
            rel_tol: 1e-13,
            max_intervals: 20_000,
        };
        let lo = intr.mu - 14.0 * intr.sigma;
        let hi = intr.mu + 14.0 * intr.sigma;
        let breaks: Vec<f64> = match *sel {
            SelectionFunction::Step { threshold } => vec![threshold],
            SelectionFunction::Gaussian { mu, .. } => vec![mu],
        };
        integrate_breaks(|x| sel.p_det(x) * intr.gaussian().pdf(x), lo, hi, &breaks, cfg)
    }

    fn integrate_breaks<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, br: &[f64], cfg: QuadConfig) -> f64 {
        crate::quad::integrate_with_breaks(f, a, b, br, cfg).value
    }

    #[test]
    fn theta_examples() {
        let equal = IntrinsicModel::new(-2.0, 1.0).unwrap();
        let t = theta_of_lambda(&equal, &unit(0.0, 1.0)).unwrap();
        assert!((t.mean() + 1.0).abs() < 1e-15);
        assert!((t.sd() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        let narrow = IntrinsicModel::new(-2.0, 0.6).unwrap();
        let t = theta_of_lambda(&narrow, &unit(0.0, 2.0)).unwrap();
        assert!((t.mean() + 1.834_862_385_321_100_9).abs() < 1e-14);
        assert!((t.sd() - 0.574_695_771_132_690_8).abs() < 1e-14);

        let t = theta_of_lambda(&equal, &unit(0.0, 1e8)).unwrap();
        assert!((t.mean() + 2.0).abs() < 1e-8 && (t.sd() - 1.0).abs() < 1e-8);

        assert!(theta_of_lambda(&equal, &SelectionFunction::step(0.0).unwrap()).is_err());
    }

    #[test]
    fn lambda_examples() {
        let obs = GaussianParams::new(-1.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        let l = lambda_of_theta(&obs, &unit(0.0, 1.0)).unwrap();
        assert!((l.mu + 2.0).abs() < 1e-12 && (l.sigma - 1.0).abs() < 1e-12);

        let obs = GaussianParams::new(-1.834_862_385_321_100_9, 0.574_695_771_132_690_8).unwrap();
        let l = lambda_of_theta(&obs, &unit(0.0, 2.0)).unwrap();
        assert!((l.mu + 2.0).abs() < 1e-12 && (l.sigma - 0.6).abs() < 1e-12);

        let at_boundary = GaussianParams::new(0.0, 2.0).unwrap();
        assert!(matches!(
            lambda_of_theta(&at_boundary, &unit(0.0, 2.0)),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn alpha_examples() {
        // values from high-precision quadrature
        let equal = IntrinsicModel::new(-2.0, 1.0).unwrap();
        assert!((alpha_of_lambda(&equal, &dens(0.0, 1.0)) - 0.103_776_874_355_148_68).abs() < 1e-15);
        assert!((alpha_of_lambda(&equal, &unit(0.0, 1.0)) - 0.260_130_047_511_444_45).abs() < 1e-15);

        let wide = IntrinsicModel::new(-2.0, 3.0).unwrap();
        assert!((alpha_of_lambda(&wide, &dens(0.0, 2.0)) - 0.094_868_897_597_628_51).abs() < 1e-15);
        assert!((alpha_of_lambda(&wide, &unit(0.0, 2.0)) - 0.475_602_122_202_577_26).abs() < 1e-15);

        let m = IntrinsicModel::new(0.0, 3.0).unwrap();
        let a = alpha_of_lambda(&m, &SelectionFunction::step(-1.0).unwrap());
        assert!((a - 0.630_558_659_818_236_4).abs() < 1e-15);

        assert_eq!(alpha_of_lambda(&m, &SelectionFunction::none()), 1.0);
    }

    #[test]
    fn alpha_matches_quadrature_for_random_models() {
        let mut rng = RngStream::new(21, 0);
        for i in 0..1000 {
            let intr = IntrinsicModel::new(rng.random_range(-5.0..5.0), rng.random_range(0.1..5.0)).unwrap();
            let sel = if i % 2 == 0 {
                let s = if i % 4 == 0 { SelectionScale::Density } else { SelectionScale::UnitPeak };
                SelectionFunction::gaussian(rng.random_range(-3.0..3.0), rng.random_range(0.2..5.0), s).unwrap()
            } else {
                SelectionFunction::step(rng.random_range(-6.0..6.0)).unwrap()
            };
            let a = alpha_of_lambda(&intr, &sel);
            let q = alpha_oracle(&intr, &sel);
            assert!((a - q).abs() < 1e-10, "{intr:?} {sel:?}: {a} vs {q}");
        }
    }

    #[test]
    fn product_of_gaussians_identity() {
        let mut rng = RngStream::new(22, 0);
        for _ in 0..500 {
            let intr = IntrinsicModel::new(rng.random_range(-5.0..5.0), rng.random_range(0.1..5.0)).unwrap();
            let sel = unit(rng.random_range(-3.0..3.0), rng.random_range(0.2..5.0));
            let theta = theta_of_lambda(&intr, &sel).unwrap();
            let la = ln_alpha_of_lambda(&intr, &sel);
            for _ in 0..5 {
                let x = theta.mean() + theta.sd() * rng.random_range(-4.0..4.0);
                let lhs = intr.ln_pdf(x) + sel.ln_p_det(x);
                let rhs = la + theta.ln_pdf(x);
                assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn observed_grid_examples() {
        let equal = IntrinsicModel::new(-2.0, 1.0).unwrap();
        let sel = unit(0.0, 1.0);
        let grid = observed_density_grid(&equal, &sel, &linspace(-6.0, 4.0, 2001)).unwrap();
        let theta = theta_of_lambda(&equal, &sel).unwrap();
        for (x, d) in grid.points().iter().zip(grid.densities()) {
            assert!((d - theta.pdf(*x)).abs() < 1e-9);
        }

        let m = IntrinsicModel::new(0.0, 3.0).unwrap();
        let step = SelectionFunction::step(-1.0).unwrap();
        let grid = observed_density_grid(&m, &step, &linspace(-5.0, 35.0, 4001)).unwrap();
        let tn = TruncGaussianParams::new(0.0, 3.0, -1.0).unwrap();
        for (x, d) in grid.points().iter().zip(grid.densities()) {
            let expect = tn.ln_pdf(*x);
            let expect = if is_log_zero(expect) { 0.0 } else { expect.exp() };
            assert!((d - expect).abs() < 1e-6, "x={x}");
        }

        let none = observed_density_grid(&equal, &SelectionFunction::none(), &linspace(-14.0, 10.0, 2001)).unwrap();
        for (x, d) in none.points().iter().zip(none.densities()) {
            assert!((d - equal.gaussian().pdf(*x)).abs() < 1e-12);
        }

        let vetoed = observed_density_grid(&m, &SelectionFunction::step(100.0).unwrap(), &linspace(-5.0, 5.0, 11));
        assert!(matches!(vetoed, Err(Error::EmptySupport(_))));
    }

    #[test]
    fn division_recovers_intrinsic() {
        let equal = IntrinsicModel::new(-2.0, 1.0).unwrap();
        let sel = unit(0.0, 1.0);
        let pts = linspace(-14.0, 10.0, 2001);
        let obs = observed_density_grid(&equal, &sel, &pts).unwrap();
        let back = intrinsic_from_observed_grid(&obs, &sel, 1e-300).unwrap();
        assert!(back.unconstrained().iter().all(|&u| !u));
        for (x, d) in back.points().iter().zip(back.densities()) {
            assert!((d - equal.gaussian().pdf(*x)).abs() < 1e-8);
        }
        // default floor: the far tails become unconstrained and the rest is
        // p_int renormalised over the constrained points
        let back = intrinsic_from_observed_grid(&obs, &sel, DEFAULT_DIVISION_FLOOR).unwrap();
        assert!(back.unconstrained()[0] && back.unconstrained()[back.len() - 1]);
        let kept: Vec<usize> = (0..back.len()).filter(|&i| !back.unconstrained()[i]).collect();
        let (lo, hi) = (back.points()[kept[0]], back.points()[*kept.last().unwrap()]);
        let mass = equal.gaussian().cdf(hi) - equal.gaussian().cdf(lo);
        for &i in &kept {
            let x = back.points()[i];
            assert!((back.densities()[i] - equal.gaussian().pdf(x) / mass).abs() < 1e-8);
        }
        // scale convention does not matter
        let back_d = intrinsic_from_observed_grid(&obs, &sel.with_scale(SelectionScale::Density), 1e-12).unwrap();
        for (a, b) in back.densities().iter().zip(back_d.densities()) {
            assert!((a - b).abs() < 1e-12);
        }

        let identity = intrinsic_from_observed_grid(&obs, &SelectionFunction::none(), 1e-12).unwrap();
        for (a, b) in identity.densities().iter().zip(obs.densities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn division_by_step_flags_vetoed_points() {
        let m = IntrinsicModel::new(0.0, 3.0).unwrap();
        let step = SelectionFunction::step(-1.0).unwrap();
        let pts = linspace(-5.0, 35.0, 4001);
        let obs = observed_density_grid(&m, &step, &pts).unwrap();
        let back = intrinsic_from_observed_grid(&obs, &step, 1e-12).unwrap();
        for i in 0..back.len() {
            assert_eq!(back.unconstrained()[i], back.points()[i] < -1.0);
        }
        assert!((back.integral() - 1.0).abs() < 1e-12);
        assert!(intrinsic_from_observed_grid(&obs, &SelectionFunction::step(50.0).unwrap(), 1e-12).is_err());
    }

    #[test]
    fn grid_csv_roundtrip_keeps_mask() {
        let g = DensityGrid::with_mask(vec![0.0, 1.0, 2.0], vec![LOG_ZERO, -1.0, -2.0], vec![true, false, false]).unwrap();
        let back = DensityGrid::parse_csv(&g.to_csv()).unwrap();
        assert_eq!(back.unconstrained(), g.unconstrained());
        assert_eq!(back.points(), g.points());
        assert!(DensityGrid::parse_csv("point,density\n1,0.5\n0,0.5\n").is_err());
        assert!(DensityGrid::parse_csv("point,density\n0,-1\n1,0.5\n").is_err());
    }

    #[test]
    fn round_trip_on_random_feasible_draws() {
        let mut rng = RngStream::new(23, 0);
        for _ in 0..10_000 {
            let intr = IntrinsicModel::new(rng.random_range(-5.0..5.0), rng.random_range(0.1..4.0)).unwrap();
            let sel = unit(rng.random_range(-3.0..3.0), rng.random_range(0.5..4.0));
            let back = lambda_of_theta(&theta_of_lambda(&intr, &sel).unwrap(), &sel).unwrap();
            assert!((back.mu - intr.mu).abs() < 1e-12 * intr.mu.abs().max(1.0), "{intr:?} {sel:?}");
            assert!((back.sigma - intr.sigma).abs() < 1e-12 * intr.sigma.max(1.0), "{intr:?} {sel:?}");
        }
    }

    // wider ranges: precision degrades like (sigma / sigma_d)^2 as sigma_obs
    // approaches sigma_d
    proptest! {
        #[test]
        fn round_trip_lambda_theta_lambda(
            mu in -10.0f64..10.0, sigma in 0.05f64..8.0,
            mu_d in -5.0f64..5.0, sigma_d in 0.1f64..8.0,
        ) {
            let intr = IntrinsicModel::new(mu, sigma).unwrap();
            let sel = unit(mu_d, sigma_d);
            let theta = theta_of_lambda(&intr, &sel).unwrap();
            prop_assert!(theta.sd() < sigma.min(sigma_d));
            let back = lambda_of_theta(&theta, &sel).unwrap();
            prop_assert!((back.mu - mu).abs() < 1e-12 * mu.abs().max(1.0) * (sigma / sigma_d).powi(2).max(1.0));
            prop_assert!((back.sigma - sigma).abs() < 1e-12 * sigma.max(1.0) * (sigma / sigma_d).powi(2).max(1.0));
        }

        #[test]
        fn round_trip_theta_lambda_theta(
            mu_obs in -10.0f64..10.0, frac in 0.01f64..0.99,
            mu_d in -5.0f64..5.0, sigma_d in 0.1f64..8.0,
        ) {
            let sel = unit(mu_d, sigma_d);
            let obs = GaussianParams::new(mu_obs, frac * sigma_d).unwrap();
            let intr = lambda_of_theta(&obs, &sel).unwrap();
            let back = theta_of_lambda(&intr, &sel).unwrap();
            prop_assert!((back.mean() - mu_obs).abs() < 1e-12 * mu_obs.abs().max(1.0) / (1.0 - frac * frac));
            prop_assert!((back.sd() - obs.sd()).abs() < 1e-12 * sigma_d.max(1.0));
        }
    }
}
