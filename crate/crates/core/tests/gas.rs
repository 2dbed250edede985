use recollide::estimators::fit_loglog_slope;
use recollide::lorentz::{
    increment_gaussianity, msd_curve, msd_flight_exact, run_process_z, GasConfig, Process,
};
use recollide::stats::ks_critical_1pct;

#[test]
fn exploration_msd_tracks_flight_process() {
    let cfg = GasConfig::new(0.05, 100.0, 5, 4000).unwrap();
    let t = [0.0, 50.0, 100.0];
    let x = msd_curve(Process::X, &t, &cfg).unwrap();
    let y = msd_curve(Process::Y, &t, &cfg).unwrap();
    assert_eq!(x[0].msd, 0.0);
    assert_eq!(y[0].msd, 0.0);
    assert!((x[2].msd / y[2].msd - 1.0).abs() < 0.1, "X {} Y {}", x[2].msd, y[2].msd);
    assert!((y[2].msd - msd_flight_exact(100.0)).abs() < 4.0 * y[2].stderr);
}

#[test]
fn msd_rejects_bad_grids() {
    let cfg = GasConfig::new(0.05, 10.0, 5, 10).unwrap();
    assert!(msd_curve(Process::Y, &[2.0, 1.0], &cfg).is_err());
    assert!(msd_curve(Process::Y, &[20.0], &cfg).is_err());
}

#[test]
fn flight_process_is_gaussian_at_long_times() {
    let cfg = GasConfig::new(0.05, 200.0, 8, 10_000).unwrap();
    let g = increment_gaussianity(Process::Y, &cfg).unwrap();
    for d in g.ks {
        assert!(d < ks_critical_1pct(g.n), "{:?}", g.ks);
    }
    for c in g.correlations {
        assert!(c.abs() < 4.0 / (g.n as f64).sqrt(), "{:?}", g.correlations);
    }
}

#[test]
fn exploration_process_is_gaussian_at_long_times() {
    let cfg = GasConfig::new(0.05, 200.0, 9, 10_000).unwrap();
    let g = increment_gaussianity(Process::X, &cfg).unwrap();
    for d in g.ks {
        assert!(d < ks_critical_1pct(g.n), "{:?}", g.ks);
    }
}

#[test]
fn gaussianity_needs_long_horizon() {
    let cfg = GasConfig::new(0.05, 50.0, 9, 10).unwrap();
    assert!(increment_gaussianity(Process::Y, &cfg).is_err());
}

/// Three-collision trapping times of replayed bounces, in units of `ε` and
/// reweighted by `e^ξ` to undo the exponential flight law, decay like `1/s`.
#[test]
fn replayed_trapping_times_have_unit_exponent() {
    let eps = 0.02;
    let cfg = GasConfig::new(eps, 100.0, 3, 40_000).unwrap();
    let runs: Vec<_> = (0..cfg.n_paths).map(|i| run_process_z(&cfg, i).unwrap()).collect();
    let legs: u64 = runs.iter().map(|z| z.legs).sum();
    let bounces: Vec<(f64, f64)> = runs
        .iter()
        .flat_map(|z| z.bounces.iter().filter(|b| b.2 == 3).map(|b| (b.1, (b.0 * eps).exp())))
        .collect();
    let s = [8.0, 16.0, 32.0, 64.0];
    let tail = |s: f64, sq: bool| {
        bounces.iter().filter(|b| b.0 > s).map(|b| if sq { b.1 * b.1 } else { b.1 }).sum::<f64>()
    };
    let p: Vec<f64> = s.iter().map(|&s| tail(s, false) / legs as f64).collect();
    let se: Vec<f64> = s.iter().map(|&s| tail(s, true).sqrt() / legs as f64).collect();
    let (slope, _) = fit_loglog_slope(&s, &p, &se).unwrap();
    assert!((slope + 1.0).abs() < 0.25, "slope {slope}");
}
