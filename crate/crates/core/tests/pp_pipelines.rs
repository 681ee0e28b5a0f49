use popsel::presets::PresetName;
use popsel::sampler::PosteriorSamples;
use popsel::validate::{run_pp_trials, run_trial, PPConfig, PPResult, Pipeline};

fn report(model: PresetName, r: &PPResult) {
    for (p, name) in r.names.iter().enumerate() {
        println!(
            "{model} {} {name}: band {:.2}, KS p {:.3}, excluded {}",
            r.config.pipeline.as_str(),
            r.band_coverage[p],
            r.ks[p].1,
            r.excluded
        );
    }
}

/// The post-processing route is calibrated for every model.
#[test]
fn pp_bands_hold_for_remap() {
    for model in PresetName::GAUSSIAN {
        let r = run_pp_trials(&PPConfig::new(model, Pipeline::Remap, 11)).unwrap();
        report(model, &r);
        assert!(r.harness_ok(), "{model}: {} excluded", r.excluded);
        assert!(r.band_coverage.iter().all(|b| *b >= 0.9), "{model}: {:?}", r.band_coverage);
    }
}

/// The in-likelihood route samples the same likelihood under a flat prior on
/// the intrinsic parameters, so it is the remap posterior reweighted by the
/// Jacobian of the map, |d(mu_l, sigma_l)/d(mu_obs, sigma_obs)| ∝ (sigma_l² + sigma_d²)^(5/2).
#[test]
fn in_likelihood_posterior_is_remap_times_jacobian() {
    fn weighted_median(s: &PosteriorSamples, j: usize, w: impl Fn(&[f64]) -> f64) -> f64 {
        let mut v: Vec<(f64, f64)> = s.draws.iter().map(|d| (d[j], w(d))).collect();
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let total: f64 = v.iter().map(|x| x.1).sum();
        let mut acc = 0.0;
        v.iter().find(|(_, w)| {
            acc += w;
            acc >= 0.5 * total
        }).unwrap().0
    }
    fn sd(s: &PosteriorSamples, j: usize) -> f64 {
        let n = s.draws.len() as f64;
        let m = s.draws.iter().map(|d| d[j]).sum::<f64>() / n;
        (s.draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / n).sqrt()
    }
    let sigma_d = 1.0;
    let mut remap = PPConfig::new(PresetName::Equal, Pipeline::Remap, 11);
    remap.sampler.n_steps = 20000;
    let r = run_trial(&remap, 0).unwrap();
    let l = run_trial(&PPConfig::new(PresetName::Equal, Pipeline::InLikelihood, 11), 0).unwrap();
    assert!(r.diagnostics.converged && l.diagnostics.converged);
    for j in 0..2 {
        let plain = weighted_median(&r, j, |_| 1.0);
        let reweighted = weighted_median(&r, j, |d| (d[1] * d[1] + sigma_d * sigma_d).powf(2.5));
        let direct = weighted_median(&l, j, |_| 1.0);
        let tol = 0.1 * sd(&l, j);
        assert!((reweighted - direct).abs() < tol, "param {j}: {reweighted} vs {direct}");
        // the prior shift itself is resolvable
        assert!((plain - direct).abs() > 2.0 * tol, "param {j}: {plain} vs {direct}");
    }
}

/// Fails for the wide and equal models: the flat prior on (mu_lambda,
/// sigma_lambda) shifts the posterior off the truth by a sizeable fraction of
/// its width, see `in_likelihood_posterior_is_remap_times_jacobian`. Narrow
/// passes. Run with `--ignored` to see the numbers.
#[test]
#[ignore = "calibration fails under the flat intrinsic prior for wide and equal"]
fn pp_bands_hold_for_in_likelihood() {
    let mut failed = Vec::new();
    for model in PresetName::GAUSSIAN {
        let r = run_pp_trials(&PPConfig::new(model, Pipeline::InLikelihood, 11)).unwrap();
        report(model, &r);
        if !r.harness_ok() || r.band_coverage.iter().any(|b| *b < 0.9) {
            failed.push(model);
        }
    }
    assert!(failed.is_empty(), "in-likelihood bands fail for {failed:?}");
}
