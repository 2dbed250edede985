//! Empirical checks of the basic samplers: the truncated exponential, the
//! cross-product decomposition of two uniform directions, and the
//! hard-sphere scattering kernel.
//!
//!     cargo run --release --example sampler_laws

use recollide::lorentz::scattering_kernel_check;
use recollide::sampling::{cross_decomposition, cross_norm_cdf, sample_exp_unit_conditioned, sample_unit_sphere, RngStream};
use recollide::stats::{chi_square_uniform_pvalue, ks_pvalue, ks_statistic, mean_stderr, EqualAreaBins};

fn main() {
    let n = 500_000;
    let mut rng = RngStream::new(12, 0);

    let xs: Vec<f64> = (0..n).map(|_| sample_exp_unit_conditioned(&mut rng)).collect();
    let (m, se) = mean_stderr(&xs);
    let e = std::f64::consts::E;
    println!("Exp(1) given < 1: mean {m:.5} +- {se:.1e}, exact {:.5}", (e - 2.0) / (e - 1.0));

    let bins = EqualAreaBins::new(48).expect("valid bin count");
    let mut counts = vec![0u64; bins.len()];
    let mut norms = Vec::with_capacity(n);
    for _ in 0..n {
        let (u, v) = (sample_unit_sphere(&mut rng), sample_unit_sphere(&mut rng));
        if let Ok((w, t)) = cross_decomposition(&u, &v) {
            counts[bins.index(&w)] += 1;
            norms.push(t);
        }
    }
    let k = norms.len();
    let d = ks_statistic(norms, cross_norm_cdf);
    println!("|u x v|: KS {d:.5}, p = {:.3}", ks_pvalue(d, k));
    println!("direction of u x v: chi-square p = {:.3}", chi_square_uniform_pvalue(&counts));
    println!("scattering kernel: chi-square p = {:.3}", scattering_kernel_check(1_000_000, 12));
}
