//! Monte-Carlo pilot phase precision against 1/sqrt(N_s) under
//! shot-noise-limited heterodyne detection.
//!
//!     cargo run --release --example quantum_limit

use isaqn::sensing::precision_check;

fn main() -> isaqn::Result<()> {
    println!(
        "{:>8} {:>12} {:>12} {:>7}",
        "N_s", "sigma_phi", "1/sqrt(N_s)", "ratio"
    );
    for k in 0..=8 {
        let n_s = 10f64.powf(1.0 + 0.25 * k as f64);
        let r = precision_check(n_s.sqrt(), 20_000, k)?;
        println!(
            "{:>8.1} {:>12.5} {:>12.5} {:>7.3}",
            r.photon_number, r.measured_phase_std, r.quantum_limit, r.ratio
        );
    }
    let r = precision_check(10.0, 100_000, 99)?;
    println!(
        "vacuum quadrature variances: ({:.4}, {:.4}) SNU",
        r.quadrature_variance.0, r.quadrature_variance.1
    );
    Ok(())
}
