//! Multilateration on the equilateral 10 km network: arrival times at the
//! center node in, source position out. Then the full chain from a
//! simulated seismic burst.
//!
//!     cargo run --release --example localization

use isaqn::localize::{locate, TdoaMatrix};
use isaqn::scenario::bundled;
use isaqn::session::{estimate_event, run_spm};

fn main() -> isaqn::Result<()> {
    let cfg = bundled("eq_triangle")?;
    let geometry = cfg.geometry();
    for dt in [0.0, 0.001, 0.01] {
        let m = TdoaMatrix::from_arrivals(&[1, 2, 3], &[2.0 * dt, dt, 0.0])?;
        let e = locate(&m, &geometry)?;
        println!(
            "dt = {dt} s -> ({:.2}, {:.2}) m, residual {:.1e} m",
            e.position[0], e.position[1], e.residual
        );
    }

    let reports = run_spm(&cfg, 1)?;
    match estimate_event(&cfg, &reports) {
        Some(Ok(e)) => {
            println!(
                "burst: ({:.1}, {:.1}) m, consecutive arrival differences {:?} s",
                e.position[0], e.position[1], e.tdoa
            );
            if let Some(m) = e.magnitude {
                println!("  source amplitude {m:.2} rad at the reference distance");
            }
        }
        Some(Err(err)) => println!("burst not located: {err}"),
        None => println!("fewer than three nodes saw the burst"),
    }
    Ok(())
}
