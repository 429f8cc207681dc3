//! Load a scenario file (or a bundled name), run sensing, QKD and the key
//! rate sweep, and write report.json plus CSV tables.
//!
//!     cargo run --release --example scenario_run -- eq_triangle out/

use std::path::{Path, PathBuf};

use isaqn::report::{run, RunOptions};
use isaqn::scenario::{bundled, load_scenario};

fn main() -> isaqn::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "eq_triangle".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out".into()));
    let cfg = if Path::new(&name).exists() {
        load_scenario(Path::new(&name))?
    } else {
        bundled(&name)?
    };
    let a = run(&cfg, &out, &RunOptions::default())?;
    println!(
        "{}: {} QKD reports, {} sensing reports, {} events, {} tables in {}",
        a.run_metadata.scenario,
        a.skr_reports.len(),
        a.sensing_reports.len(),
        a.event_estimates.len(),
        a.waveform_dumps.len(),
        out.display()
    );
    let failed = a.failed_nodes();
    if !failed.is_empty() {
        println!("failed nodes: {failed:?}");
    }
    Ok(())
}
