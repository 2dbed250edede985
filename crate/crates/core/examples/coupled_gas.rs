//! Runs the exploration process, the flight process and the
//! last-scatterer process on shared randomness and reports how often the
//! exploration and last-scatterer paths part ways.
//!
//!     cargo run --release --example coupled_gas

use recollide::lorentz::{mismatch_rate, run_coupled, GasConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GasConfig::new(0.1, 30.0, 4, 1)?;
    let one = run_coupled(&cfg, 0)?;
    println!("one path at eps = 0.1 up to t = 30");
    println!("  legs: X {} Y {} Z {}", one.x.path.legs(), one.y.legs(), one.z.path.legs());
    println!("  shadowing / recollision legs in Z: {} / {}",
        one.z.flags.iter().filter(|f| f.shadowing).count(),
        one.z.flags.iter().filter(|f| f.recollision).count());
    println!("  capsule rejections in X: {}", one.x.counters.rejections);
    println!("  first mismatch: {:?}", one.mismatch_time);

    println!("{:>6} {:>10} {:>10} {:>10}", "eps", "legs", "per leg", "stderr");
    for eps in [0.1, 0.05, 0.02] {
        let s = mismatch_rate(&GasConfig::new(eps, 50.0, 4, 5000)?)?;
        println!("{eps:>6} {:>10} {:>10.3e} {:>10.1e}", s.legs, s.per_leg, s.stderr);
    }
    Ok(())
}
