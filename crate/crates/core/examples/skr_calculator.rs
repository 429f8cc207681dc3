//! Asymptotic key rate at the three-node operating point, then a short
//! distance sweep.
//!
//!     cargo run --example skr_calculator

use isaqn::qkd::secret_key_rate;
use isaqn::receiver::DetectorParams;

fn main() -> isaqn::Result<()> {
    let det = DetectorParams::default();
    let t = |km: f64| 10f64.powf(-0.2 * km / 10.0) / 8.0;
    for eps in [0.0024, 0.0036, 0.0047] {
        let r = secret_key_rate(12.0, t(10.0), eps, &det, 0.98, 50e6)?;
        println!(
            "eps = {:.1} mSNU: I_AB = {:.4}, chi_BE = {:.4}, K = {:.4} Mbit/s",
            eps * 1e3,
            r.i_ab,
            r.chi_be,
            r.k_bits_per_s / 1e6
        );
    }
    println!("\nkm   K (Mbit/s) at eps = 4.7 mSNU");
    for km in (0..=50).step_by(5) {
        let r = secret_key_rate(12.0, t(km as f64), 0.0047, &det, 0.98, 50e6)?;
        println!(
            "{km:>2}   {:.4}{}",
            r.k_bits_per_s / 1e6,
            if r.aborted { "  (aborted)" } else { "" }
        );
    }
    Ok(())
}
