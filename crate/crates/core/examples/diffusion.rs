//! Mean squared displacement of the three gas processes and a Gaussianity
//! check of the rescaled endpoint.
//!
//!     cargo run --release --example diffusion

use recollide::lorentz::{increment_gaussianity, msd_curve, msd_flight_exact, GasConfig, Process};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GasConfig::new(0.05, 100.0, 6, 5000)?;
    let t = [10.0, 25.0, 50.0, 100.0];
    let curves = [Process::X, Process::Y, Process::Z].map(|p| msd_curve(p, &t, &cfg));
    println!("{:>6} {:>10} {:>16} {:>16} {:>16}", "t", "exact", "X", "Y", "Z");
    for (j, &tj) in t.iter().enumerate() {
        print!("{tj:>6} {:>10.3}", msd_flight_exact(tj));
        for c in &curves {
            let p = c.as_ref().map_err(|e| e.to_string())?[j];
            print!(" {:>9.2} +- {:<4.2}", p.msd, p.stderr);
        }
        println!();
    }

    let cfg = GasConfig::new(0.05, 200.0, 6, 5000)?;
    let g = increment_gaussianity(Process::X, &cfg)?;
    println!("KS per component at T = 200: {:?}", g.ks);
    println!("p-values: {:?}", g.pvalues);
    Ok(())
}
