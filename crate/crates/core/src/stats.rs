//! Scalar probability primitives and seeded random streams.
//!
//! Every density is handled in log space. A log-density of zero probability
//! is stored as [`LOG_ZERO`], the most negative finite `f64`; test for it with
//! [`is_log_zero`], which also accepts `-inf` produced by summing sentinels.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

pub const LOG_ZERO: f64 = f64::MIN;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn is_log_zero(v: f64) -> bool {
    v <= LOG_ZERO
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    mean: f64,
    sd: f64,
}

impl GaussianParams {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::domain(format!("gaussian mean must be finite, got {mean}")));
        }
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::domain(format!("gaussian sd must be positive, got {sd}")));
        }
        Ok(GaussianParams { mean, sd })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    #[inline]
    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - LN_SQRT_2PI
    }

    #[inline]
    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        gaussian_cdf((x - self.mean) / self.sd)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }
}

/// Log-density of `N(x | p.mean, p.sd)`; rejects non-finite `x`.
pub fn gaussian_logpdf(x: f64, p: &GaussianParams) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("gaussian_logpdf at non-finite x = {x}")));
    }
    Ok(p.ln_pdf(x))
}

/// Standard normal CDF through the complementary error function.
#[inline]
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `ln(1 - Φ(z))`, accurate deep into the upper tail.
pub fn log_gaussian_sf(z: f64) -> f64 {
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    if z == f64::INFINITY {
        return LOG_ZERO;
    }
    if z < 37.0 {
        (0.5 * libm::erfc(z * std::f64::consts::FRAC_1_SQRT_2)).ln()
    } else {
        // Mills-ratio asymptotic series
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - LN_SQRT_2PI - z.ln() + series.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncGaussianParams {
    mean: f64,
    sd: f64,
    lower: f64,
    log_mass: f64,
}

impl TruncGaussianParams {
    /// `lower` may be `-inf`, in which case the density is the plain Gaussian.
    pub fn new(mean: f64, sd: f64, lower: f64) -> Result<Self> {
        let base = GaussianParams::new(mean, sd)?;
        if lower.is_nan() || lower == f64::INFINITY {
            return Err(Error::domain(format!("truncation point must be < +inf, got {lower}")));
        }
        let log_mass = log_gaussian_sf((lower - base.mean) / base.sd);
        if is_log_zero(log_mass) {
            return Err(Error::domain("truncated gaussian has no mass above its lower bound"));
        }
        Ok(TruncGaussianParams {
            mean,
            sd,
            lower,
            log_mass,
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    /// `ln(1 - Φ((lower - mean)/sd))`, the log of the retained mass.
    pub fn log_mass(&self) -> f64 {
        self.log_mass
    }

    pub fn untruncated(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean,
            sd: self.sd,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < self.lower {
            return LOG_ZERO;
        }
        self.untruncated().ln_pdf(x) - self.log_mass
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        let lo = gaussian_cdf((self.lower - self.mean) / self.sd);
        let hi = gaussian_cdf((x - self.mean) / self.sd);
        ((hi - lo) / self.log_mass.exp()).clamp(0.0, 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_truncated_normal(self.mean, self.sd, self.lower, rng)
    }
}

pub fn truncnorm_logpdf(x: f64, p: &TruncGaussianParams) -> f64 {
    p.ln_pdf(x)
}

/// Draws from `N(mean, sd)` restricted to `[lower, inf)`. With `lower = -inf`
/// this consumes exactly one standard-normal draw, like an untruncated draw.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lower: f64, rng: &mut R) -> f64 {
    if lower == f64::NEG_INFINITY {
        let z: f64 = StandardNormal.sample(rng);
        return mean + sd * z;
    }
    let a = (lower - mean) / sd;
    let z = if a < 0.5 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= a {
                break z;
            }
        }
    } else {
        // exponential proposal with the optimal rate for the tail
        let rate = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let u: f64 = rng.random();
            let z = a - (1.0 - u).ln() / rate;
            let v: f64 = rng.random();
            if v <= (-0.5 * (z - rate) * (z - rate)).exp() {
                break z;
            }
        }
    };
    mean + sd * z
}

/// Seeded, replayable random stream. Equal `(seed, stream)` pairs yield
/// bit-identical sequences; distinct stream ids give independent sequences
/// under one seed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream under the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        RngStream::new(self.seed, stream)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("validated shape");
        g.sample(rng).ln()
    } else {
        // G(a) = G(a + 1) * U^(1/a), kept in logs so tiny shapes cannot underflow
        let g = Gamma::new(shape + 1.0, 1.0).expect("validated shape");
        let u: f64 = rng.random();
        g.sample(rng).ln() + (1.0 - u).ln() / shape
    }
}

/// One draw from a Dirichlet distribution with the given concentrations.
pub fn dirichlet_sample<R: Rng + ?Sized>(concentrations: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if concentrations.is_empty() {
        return Err(Error::domain("dirichlet needs at least one concentration"));
    }
    if let Some(c) = concentrations.iter().find(|&&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::domain(format!("dirichlet concentration must be positive, got {c}")));
    }
    if concentrations.len() == 1 {
        return Ok(vec![1.0]);
    }
    let logs: Vec<f64> = concentrations.iter().map(|&c| ln_gamma_variate(c, rng)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// `ln Σ exp(v)` over a slice; sentinel-aware.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if is_log_zero(top) {
        return LOG_ZERO;
    }
    top + values.iter().map(|&v| (v - top).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate, QuadConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn n01() -> GaussianParams {
        GaussianParams::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn logpdf_examples() {
        assert!((gaussian_logpdf(0.0, &n01()).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
        let p = GaussianParams::new(3.5, 0.25).unwrap();
        let peak = -(0.25 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((gaussian_logpdf(3.5, &p).unwrap() - peak).abs() < 1e-14);
        // ln(1/sqrt(3 pi)) from mpmath
        let p = GaussianParams::new(-1.0, 1.5f64.sqrt()).unwrap();
        assert!((gaussian_logpdf(-1.0, &p).unwrap() + 1.121_671_087_258_754_9).abs() < 1e-14);
    }

    #[test]
    fn logpdf_domain_errors() {
        assert!(gaussian_logpdf(f64::NAN, &n01()).is_err());
        assert!(gaussian_logpdf(f64::INFINITY, &n01()).is_err());
        assert!(GaussianParams::new(0.0, 0.0).is_err());
        assert!(GaussianParams::new(0.0, -1.0).is_err());
        assert!(TruncGaussianParams::new(0.0, 0.0, 1.0).is_err());
    }

    /// Maclaurin series of erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(gaussian_cdf(0.0), 0.5);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / 3.0 / std::f64::consts::SQRT_2));
        assert!((oracle - 0.630_558_659_818_236_4).abs() < 1e-15);
        assert!((gaussian_cdf(1.0 / 3.0) - oracle).abs() < 1e-15);
        assert!((1.0 - gaussian_cdf(8.0)) < 1e-15);
    }

    #[test]
    fn cdf_matches_quadrature_of_pdf() {
        let mut rng = RngStream::new(11, 0);
        let cfg = QuadConfig { abs_tol: 1e-14, rel_tol: 1e-14, ..Default::default() };
        for _ in 0..100 {
            let x: f64 = rng.random_range(-6.0..6.0);
            let q = integrate(|t| n01().pdf(t), -40.0, x, cfg).value;
            assert!((q - gaussian_cdf(x)).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn log_sf_tail_is_continuous() {
        let below = log_gaussian_sf(36.999_999);
        let above = log_gaussian_sf(37.000_001);
        assert!((below - above).abs() < 1e-4);
        assert!(log_gaussian_sf(200.0).is_finite());
        assert_eq!(log_gaussian_sf(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn pdf_integrates_to_one() {
        let p = GaussianParams::new(-1.3, 0.7).unwrap();
        let cfg = QuadConfig { abs_tol: 1e-13, rel_tol: 1e-13, ..Default::default() };
        let q = integrate(|x| p.pdf(x), -1.3 - 7.0, -1.3 + 7.0, cfg).value;
        assert!((q - 1.0).abs() < 1e-10);
    }

    #[test]
    fn truncnorm_examples() {
        let p = TruncGaussianParams::new(0.0, 1.0, 0.0).unwrap();
        assert!(is_log_zero(truncnorm_logpdf(-1.0, &p)));
        assert!((truncnorm_logpdf(0.0, &p) + 0.225_791_352_644_727_43).abs() < 1e-14);
        let open = TruncGaussianParams::new(0.4, 2.0, f64::NEG_INFINITY).unwrap();
        let plain = GaussianParams::new(0.4, 2.0).unwrap();
        for x in [-5.0, 0.0, 0.4, 3.0] {
            assert_eq!(truncnorm_logpdf(x, &open), plain.ln_pdf(x));
        }
    }

    #[test]
    fn truncnorm_integrates_to_one() {
        let p = TruncGaussianParams::new(0.0, 3.0, -1.0).unwrap();
        let cfg = QuadConfig { abs_tol: 1e-13, rel_tol: 1e-13, ..Default::default() };
        let q = integrate(|x| p.ln_pdf(x).exp(), -1.0, 36.0, cfg).value;
        assert!((q - 1.0).abs() < 1e-8);
    }

    #[test]
    fn truncated_sampler_respects_bound_and_mean() {
        let mut rng = RngStream::new(3, 0);
        for &(m, s, l) in &[(0.0, 1.0, 2.5), (0.0, 1.0, -0.5), (1.0, 0.2, 1.05)] {
            let p = TruncGaussianParams::new(m, s, l).unwrap();
            let n = 20_000;
            let draws: Vec<f64> = (0..n).map(|_| p.sample(&mut rng)).collect();
            assert!(draws.iter().all(|&x| x >= l));
            let a = (l - m) / s;
            let mills = n01().pdf(a) / (1.0 - gaussian_cdf(a));
            let mean = m + s * mills;
            let emp = draws.iter().sum::<f64>() / n as f64;
            assert!((emp - mean).abs() < 4.0 * s / (n as f64).sqrt(), "{emp} vs {mean}");
        }
    }

    #[test]
    fn rng_stream_replays() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let mut c = RngStream::new(42, 8);
        let xa: Vec<f64> = (0..10_000).map(|_| a.random()).collect();
        let xb: Vec<f64> = (0..10_000).map(|_| b.random()).collect();
        let xc: Vec<f64> = (0..10).map(|_| c.random()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa[..10], xc[..]);
    }

    #[test]
    fn dirichlet_examples() {
        let mut rng = RngStream::new(5, 0);
        assert_eq!(dirichlet_sample(&[3.0], &mut rng).unwrap(), vec![1.0]);
        assert!(dirichlet_sample(&[1.0, 0.0], &mut rng).is_err());
        assert!(dirichlet_sample(&[], &mut rng).is_err());

        // N + a/K with N = {50, 50}, a = 1, K = 2
        let conc = [50.5, 50.5];
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let w = dirichlet_sample(&conc, &mut rng).unwrap();
            mean[0] += w[0];
            mean[1] += w[1];
        }
        // var of a Dirichlet marginal: a_i (A - a_i) / (A^2 (A + 1))
        let sd = (0.25 / 102.0f64).sqrt();
        for m in mean {
            assert!((m / n as f64 - 0.5).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn dirichlet_tiny_concentrations_stay_finite() {
        let mut rng = RngStream::new(9, 0);
        let conc = vec![0.02; 50];
        for _ in 0..1000 {
            let w = dirichlet_sample(&conc, &mut rng).unwrap();
            assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cdf_symmetry(x in -30.0f64..30.0) {
            prop_assert!((gaussian_cdf(x) + gaussian_cdf(-x) - 1.0).abs() < 1e-14);
        }

        #[test]
        fn cdf_monotone(x in -10.0f64..10.0, dx in 0.0f64..1.0) {
            prop_assert!(gaussian_cdf(x + dx) >= gaussian_cdf(x));
        }

        #[test]
        fn dirichlet_on_simplex(
            conc in proptest::collection::vec(0.01f64..100.0, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = RngStream::new(seed, 0);
            let w = dirichlet_sample(&conc, &mut rng).unwrap();
            prop_assert_eq!(w.len(), conc.len());
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
