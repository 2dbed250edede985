//! End-to-end acceptance checks. Runs with a custom harness so that every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion fails.

use std::process::Command;
use std::time::Instant;

use recollide::estimators::{
    classifier_sweep, dispersive_sweep, estimate_angle_tail, estimate_exit_tv, estimate_mu_tails, estimate_trap_tail,
    fit_loglog_slope, indirect_prob_mc, indirect_prob_quadrature, ratio_with_stderr, NFilter, Regime,
};
use recollide::geom3::UnitVec3;
use recollide::lorentz::{
    increment_gaussianity, mismatch_rate, msd_curve, msd_flight_exact, run_coupled, GasConfig, Mechanisms, Process,
};
use recollide::sampling::{cross_decomposition, cross_norm_cdf, sample_exp_unit_conditioned, sample_unit_sphere, RngStream};
use recollide::stats::{chi_square_uniform_pvalue, ks_critical_1pct, ks_statistic, mean_stderr, EqualAreaBins};

const SEED: u64 = 20240607;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn dispersive() -> Outcome {
    let s = dispersive_sweep(100_000, SEED);
    let proof = s.proof_interior + s.proof_terminal;
    let pass = s.events >= 100_000 && s.height == 0 && proof == 0 && s.monotone == 0 && s.vertical == 0;
    outcome(
        pass,
        format!(
            "events={} height={} proof={} (interior {}, terminal {}, min margin {:.3e}) monotone={} vertical={}",
            s.events, s.height, proof, s.proof_interior, s.proof_terminal, s.min_proof, s.monotone, s.vertical
        ),
    )
}

fn classifier() -> Outcome {
    let s = classifier_sweep(200_000, SEED);
    outcome(
        s.disagreements == 0,
        format!(
            "events={} recollisions={} disagreements={} cone_inclusion_violations={}",
            s.events, s.recollisions, s.disagreements, s.prime_violations
        ),
    )
}

const S_WIDE: [f64; 7] = [20.0, 30.0, 45.0, 67.0, 100.0, 150.0, 200.0];
const S_NARROW: [f64; 5] = [20.0, 30.0, 45.0, 67.0, 100.0];

fn trapping() -> Outcome {
    let n3 = estimate_trap_tail(NFilter::Three, &S_WIDE, 10_000_000, SEED);
    let n4 = estimate_trap_tail(NFilter::FourPlus, &S_NARROW, 10_000_000, SEED + 1);
    match (n3, n4) {
        (Ok(a), Ok(b)) => outcome(
            (a.slope + 1.0).abs() <= 0.25 && a.dropped.is_empty() && b.slope <= -1.7 && b.dropped.is_empty(),
            format!(
                "N=3 slope {:.3} ci [{:.3}, {:.3}]; N>=4 slope {:.3} ci [{:.3}, {:.3}]",
                a.slope, a.slope_ci.0, a.slope_ci.1, b.slope, b.slope_ci.0, b.slope_ci.1
            ),
        ),
        (a, b) => outcome(false, format!("estimator error: {:?} / {:?}", a.err(), b.err())),
    }
}

fn angle_tails() -> Outcome {
    let n3 = estimate_angle_tail(Regime::LongN3, &S_WIDE, 10_000_000, SEED);
    let n4 = estimate_angle_tail(Regime::LongN4Plus, &S_NARROW, 30_000_000, SEED + 1);
    let s = [1.0];
    let mu_a = estimate_mu_tails(0.05, Regime::Short, &s, 1_000_000, SEED);
    let mu_b = estimate_mu_tails(0.025, Regime::Short, &s, 1_000_000, SEED + 1);
    match (n3, n4, mu_a, mu_b) {
        (Ok(a), Ok(b), Ok(ma), Ok(mb)) => {
            let (q, se) = ratio_with_stderr(ma.p_hat[0], ma.stderr[0], mb.p_hat[0], mb.stderr[0]);
            outcome(
                (a.slope + 1.0).abs() <= 0.25 && b.slope <= -1.7 && (q - 2.0).abs() <= 3.0 * se,
                format!(
                    "long-n3 slope {:.3} ci [{:.3}, {:.3}]; long-n4plus slope {:.3}; mu ratio r=0.05/0.025 at s=1: {:.3} +- {:.3}",
                    a.slope, a.slope_ci.0, a.slope_ci.1, b.slope, q, se
                ),
            )
        }
        (a, b, c, d) => outcome(false, format!("estimator error: {:?} {:?} {:?} {:?}", a.err(), b.err(), c.err(), d.err())),
    }
}

fn exit_uniformization() -> Outcome {
    let nu = UnitVec3::e3();
    let grid = [10.0, 20.0, 40.0, 80.0];
    let ests: Result<Vec<_>, _> = grid.iter().map(|&r| estimate_exit_tv(r, &nu, 50_000_000, 192, SEED)).collect();
    let ests = match ests {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("estimator error: {e}")),
    };
    let decreasing =
        ests.windows(2).all(|w| w[0].tv_hat - w[1].tv_hat > 2.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt());
    let tv: Vec<f64> = ests.iter().map(|e| e.tv_hat).collect();
    let se: Vec<f64> = ests.iter().map(|e| e.stderr).collect();
    let slope = fit_loglog_slope(&grid, &tv, &se).map(|f| f.0).unwrap_or(f64::NAN);
    let ks_p = ests[3].ks_pvalue;
    outcome(
        decreasing && (slope + 1.0).abs() <= 0.3 && ks_p > 0.01,
        format!(
            "tv {:?} decreasing={decreasing} slope {slope:.3}; KS at R=80: d={:.4} p={:.2e} (n={})",
            tv.iter().map(|t| format!("{t:.5}")).collect::<Vec<_>>(),
            ests[3].ks_costheta,
            ks_p,
            ests[3].n_conditioned
        ),
    )
}

fn indirect() -> Outcome {
    let mut agree = true;
    let mut parts = Vec::new();
    let mut quad = Vec::new();
    for (i, eps) in [0.1, 0.03, 0.01].into_iter().enumerate() {
        let q = indirect_prob_quadrature(eps);
        let (p, se, _) = indirect_prob_mc(eps, 20_000_000, SEED + i as u64);
        agree &= (p - q).abs() <= 3.0 * se;
        parts.push(format!("eps={eps}: z={:.2}", (p - q) / se));
        quad.push(q);
    }
    let ratio = (quad[2] / 1e-4) / (quad[0] / 1e-2);
    outcome(agree && ratio >= 1.5, format!("{}; log ratio {ratio:.3}", parts.join(", ")))
}

fn markov_flight() -> Outcome {
    let cfg = GasConfig::new(0.05, 100.0, SEED, 100_000).expect("valid");
    let msd = msd_curve(Process::Y, &[100.0], &cfg).expect("flight process");
    let exact = msd_flight_exact(100.0);
    let msd_ok = (msd[0].msd - exact).abs() <= 3.0 * msd[0].stderr;
    let cfg = GasConfig::new(0.05, 200.0, SEED + 1, 100_000).expect("valid");
    let g = increment_gaussianity(Process::Y, &cfg).expect("flight process");
    let ks_ok = g.ks.iter().all(|d| *d < ks_critical_1pct(g.n));
    outcome(
        msd_ok && ks_ok,
        format!(
            "msd(100) {:.3} +- {:.3} vs {exact:.3}; KS {:?} critical {:.4}",
            msd[0].msd,
            msd[0].stderr,
            g.ks.map(|d| format!("{d:.4}")),
            ks_critical_1pct(g.n)
        ),
    )
}

fn coupling() -> Outcome {
    let mut off = GasConfig::new(0.1, 50.0, SEED, 1).expect("valid");
    off.mechanisms = Mechanisms::NONE;
    let identical = (0..500).all(|i| {
        let c = run_coupled(&off, i).expect("no mechanisms");
        c.x.path == c.y && c.z.path == c.y
    });
    let mut rates = Vec::new();
    let mut inconsistencies = 0;
    let mut legs_ok = true;
    for eps in [0.1, 0.05, 0.02] {
        let cfg = GasConfig::new(eps, 50.0, SEED, 20_000).expect("valid");
        let s = mismatch_rate(&cfg).expect("coupled run");
        inconsistencies += s.capsule_inconsistencies;
        legs_ok &= s.legs >= 10_000;
        rates.push(s);
    }
    let mut bands = true;
    let mut ratios = Vec::new();
    for w in rates.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (q, se) = ratio_with_stderr(b.per_leg, b.stderr, a.per_leg, a.stderr);
        let k = b.eps / a.eps;
        let lo = k * k;
        let hi = lo * (b.eps.ln() / a.eps.ln()).powi(2);
        bands &= q >= lo - 3.0 * se && q <= hi + 3.0 * se && b.per_leg < a.per_leg;
        ratios.push(format!("{q:.3}+-{se:.3} in [{lo:.3}, {hi:.3}]"));
    }
    outcome(
        identical && bands && inconsistencies == 0 && legs_ok,
        format!(
            "bit-identical={identical}; per-leg {:?}; ratios {}; capsule inconsistencies {inconsistencies}",
            rates.iter().map(|r| format!("{:.2e}", r.per_leg)).collect::<Vec<_>>(),
            ratios.join(", ")
        ),
    )
}

fn sampler_laws() -> Outcome {
    let n = 1_000_000;
    let mut rng = RngStream::new(SEED, 0);
    let xs: Vec<f64> = (0..n).map(|_| sample_exp_unit_conditioned(&mut rng)).collect();
    let (m, se) = mean_stderr(&xs);
    let exact = (std::f64::consts::E - 2.0) / (std::f64::consts::E - 1.0);
    let mean_ok = (m - exact).abs() <= 4.0 * se;
    let bins = EqualAreaBins::new(48).expect("valid");
    let mut counts = vec![0u64; 48];
    let mut thetas = Vec::with_capacity(n);
    while thetas.len() < n {
        let u = sample_unit_sphere(&mut rng);
        let v = sample_unit_sphere(&mut rng);
        if let Ok((w, th)) = cross_decomposition(&u, &v) {
            counts[bins.index(&w)] += 1;
            thetas.push(th);
        }
    }
    let d = ks_statistic(thetas, cross_norm_cdf);
    let p = chi_square_uniform_pvalue(&counts);
    outcome(
        mean_ok && d < ks_critical_1pct(n) && p > 0.01,
        format!("mean {m:.5} vs {exact:.5} (se {se:.1e}); theta KS {d:.4} (crit {:.4}); w chi2 p {p:.3}", ks_critical_1pct(n)),
    )
}

fn strip_wall_time(s: &str) -> String {
    s.lines().filter(|l| !l.contains("wall_time_s")).collect::<Vec<_>>().join("\n")
}

fn reproducibility() -> Outcome {
    let runs: [&[&str]; 3] = [
        &["tails", "--regime", "trap-n3", "--s", "20,40,80,160", "--budget", "3e5", "--seed", "7"],
        &["gas", "--eps", "0.1", "--horizon", "20", "--n-paths", "300", "--seed", "7"],
        &["exit-dist", "--budget", "4e5", "--seed", "7"],
    ];
    let mut same = true;
    let mut notes = Vec::new();
    for args in runs {
        let outs: Vec<String> = ["1", "1", "3"]
            .iter()
            .map(|t| {
                let o = Command::new(env!("CARGO_BIN_EXE_recollide"))
                    .args(args)
                    .args(["--threads", t])
                    .env_remove("RECOLLIDE_SEED")
                    .output()
                    .expect("binary runs");
                assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
                strip_wall_time(&String::from_utf8(o.stdout).expect("utf-8"))
            })
            .collect();
        let ok = outs[0] == outs[1] && outs[1] == outs[2];
        same &= ok;
        notes.push(format!("{}={ok}", args[0]));
    }
    outcome(same, notes.join(" "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("dispersive inequalities", dispersive),
        ("classifier equivalence", classifier),
        ("trapping tails", trapping),
        ("angle tails", angle_tails),
        ("exit uniformization", exit_uniformization),
        ("indirect recollisions", indirect),
        ("markov flight diagnostics", markov_flight),
        ("coupling", coupling),
        ("sampler laws", sampler_laws),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        failed += !o.pass as usize;
        println!(
            "criterion {:>2} {:<26} {}  {} [{:.1}s]",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
