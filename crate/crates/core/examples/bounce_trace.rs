//! Collision trace of a near head-on return to the first obstacle, with the
//! out-of-plane heights and velocities of each collision.
//!
//!     cargo run --release --example bounce_trace

use recollide::geom3::UnitVec3;
use recollide::two_scatterer::{
    classify_recollision, classify_shadowing, normal_frame, simulate_bounce, LineMode, RecollisionEvent, DEFAULT_N_MAX,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let u = UnitVec3::from_xyz(0.0, 1.0, 0.0)?;
    let tilt: f64 = 0.02;
    let v = UnitVec3::from_xyz(0.0, -tilt.cos(), tilt.sin())?;
    let event = RecollisionEvent::new(u, 30.0, v, 1.0)?;

    println!("shadowing: {}", classify_shadowing(&event, LineMode::Full));
    println!("recollision: {}", classify_recollision(&event, LineMode::Full)?);

    let trace = simulate_bounce(&event, DEFAULT_N_MAX)?;
    let frame = normal_frame(&trace)?;
    println!("N = {}, trapping time = {:.4}", trace.n, trace.beta);
    println!("{:>3} {:>10} {:>9} {:>12} {:>12}", "k", "tau", "sphere", "h_k", "n_k");
    for k in 1..=trace.n {
        println!(
            "{:>3} {:>10.4} {:>9?} {:>12.6} {:>12.6}",
            k,
            trace.tau[k - 1],
            trace.sphere[k - 1],
            frame.h_seq[k],
            frame.n_seq[k]
        );
    }
    let w = trace.w_exit;
    println!("exit velocity ({:.6}, {:.6}, {:.6})", w.x(), w.y(), w.z());
    Ok(())
}
