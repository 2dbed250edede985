//! Trapping-time tails of three-collision and longer bounces, with fitted
//! power-law exponents.
//!
//!     cargo run --release --example trapping_tails -- 2000000

use recollide::estimators::{estimate_trap_tail, NFilter};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let budget: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2_000_000);
    for (filter, grid) in [
        (NFilter::Three, vec![20.0, 30.0, 45.0, 67.0, 100.0, 150.0, 200.0]),
        (NFilter::FourPlus, vec![20.0, 30.0, 45.0, 67.0, 100.0]),
    ] {
        let est = estimate_trap_tail(filter, &grid, budget, 1)?;
        println!("{}", est.regime);
        for i in 0..grid.len() {
            println!("  s = {:>5}  mass {:.4e} +- {:.1e}  ({} hits)", grid[i], est.p_hat[i], est.stderr[i], est.n_effective[i]);
        }
        println!("  slope {:.3}  95% ci [{:.3}, {:.3}]", est.slope, est.slope_ci.0, est.slope_ci.1);
    }
    Ok(())
}
