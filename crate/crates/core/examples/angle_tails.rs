//! Exit-angle tails for long flights, and the linear-in-radius scaling of
//! the same event under the physical flight law.
//!
//!     cargo run --release --example angle_tails

use recollide::estimators::{estimate_angle_tail, estimate_mu_tails, ratio_with_stderr, Regime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = [20.0, 30.0, 45.0, 67.0, 100.0];
    for (regime, budget) in [(Regime::LongN3, 4_000_000), (Regime::LongN4Plus, 30_000_000)] {
        let est = estimate_angle_tail(regime, &grid, budget, 2)?;
        println!("{regime}: slope {:.3} ci [{:.3}, {:.3}]", est.slope, est.slope_ci.0, est.slope_ci.1);
    }

    let s = [1.0];
    let a = estimate_mu_tails(0.05, Regime::Short, &s, 1_000_000, 3)?;
    let b = estimate_mu_tails(0.025, Regime::Short, &s, 1_000_000, 4)?;
    let (q, se) = ratio_with_stderr(a.p_hat[0], a.stderr[0], b.p_hat[0], b.stderr[0]);
    println!("short-flight mass at r = 0.05: {:.4e} +- {:.1e}", a.p_hat[0], a.stderr[0]);
    println!("short-flight mass at r = 0.025: {:.4e} +- {:.1e}", b.p_hat[0], b.stderr[0]);
    println!("ratio {q:.3} +- {se:.3}");
    Ok(())
}
