//! Total-variation distance between the exit direction of three-collision
//! bounces and the uniform law, as the conditioning flight time grows.
//!
//!     cargo run --release --example exit_uniformization -- 5000000

use recollide::estimators::{estimate_exit_tv, fit_loglog_slope};
use recollide::geom3::UnitVec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let budget: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5_000_000);
    let nu = UnitVec3::from_xyz(0.0, 0.6, 0.8)?;
    let grid = [10.0, 20.0, 40.0, 80.0];
    let mut tv = Vec::new();
    let mut se = Vec::new();
    println!("{:>5} {:>10} {:>9} {:>9} {:>10} {:>9}", "R", "tv", "stderr", "bias", "n", "KS p");
    for r in grid {
        let e = estimate_exit_tv(r, &nu, budget, 192, 7)?;
        println!(
            "{:>5} {:>10.5} {:>9.1e} {:>9.1e} {:>10} {:>9.1e}",
            r, e.tv_hat, e.stderr, e.bias, e.n_conditioned, e.ks_pvalue
        );
        tv.push(e.tv_hat);
        se.push(e.stderr);
    }
    let (slope, ci) = fit_loglog_slope(&grid, &tv, &se)?;
    println!("log-log slope {slope:.3} [{:.3}, {:.3}]", ci.0, ci.1);
    Ok(())
}
