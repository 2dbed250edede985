//! Probability that two independent exponential flights in uniform
//! directions end within `ε` of their start, by quadrature and sampling.
//!
//!     cargo run --release --example indirect_recollisions

use recollide::estimators::{indirect_prob_mc, indirect_prob_quadrature};

fn main() {
    println!("{:>6} {:>12} {:>12} {:>10} {:>8}", "eps", "quadrature", "sampled", "stderr", "p/eps^2");
    for eps in [0.3, 0.1, 0.03, 0.01] {
        let q = indirect_prob_quadrature(eps);
        let (p, se, _) = indirect_prob_mc(eps, 5_000_000, 11);
        println!("{eps:>6} {q:>12.4e} {p:>12.4e} {se:>10.1e} {:>8.4}", q / (eps * eps));
    }
}
