//! Sweeps of random events: the dispersive height and velocity growth for
//! long flights, and the agreement between the recollision classifier and
//! simulation.
//!
//!     cargo run --release --example event_sweeps

use recollide::estimators::{classifier_sweep, dispersive_sweep};

fn main() {
    let d = dispersive_sweep(100_000, 1);
    println!("long-flight events with three or more collisions: {}", d.events);
    println!("  height growth violations:      {}", d.height);
    println!("  velocity growth violations:    {} interior, {} at the last collision", d.proof_interior, d.proof_terminal);
    println!("  monotonicity violations:       {}", d.monotone);
    println!("  first-height bound violations: {}", d.vertical);
    println!("  smallest velocity-growth margin: {:.3e}", d.min_proof);

    let c = classifier_sweep(200_000, 1);
    println!("random events: {} ({} recollisions)", c.events, c.recollisions);
    println!("  classifier disagreements with simulation: {}", c.disagreements);
    println!("  recollisions outside the backscatter cone: {}", c.prime_violations);
    println!("  shadowing (full line): {}", c.shadow_full);
}
