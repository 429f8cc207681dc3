use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use isaqn::localize::{locate, TdoaMatrix};
use isaqn::receiver::calibrate_detector;
use isaqn::report::{self, RunArtifacts, RunOptions};
use isaqn::scenario::{bundled, load_scenario, Profile, ScenarioConfig};
use isaqn::{dsp, Error};

#[derive(Parser)]
#[command(
    name = "isaqn",
    version,
    about = "Quantum access network with integrated vibration sensing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(default_value = "paper_3node")]
    scenario: String,
    /// Override the scenario's seed list with one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// paper-scale or desk-scale.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Also write per-node phase, length and spectrum tables.
    #[arg(long)]
    dump_waveforms: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: sensing, QKD session, localization.
    Run(Common),
    /// Key rate against fiber length per node.
    SkrSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50.0)]
        max_km: f64,
    },
    /// Sensing pipeline only.
    Sense(Common),
    /// Locate a source from arrival times at the center node.
    Locate {
        #[arg(default_value = "eq_triangle")]
        scenario: String,
        /// Arrival time per node in node-id order, comma separated.
        #[arg(long, value_delimiter = ',')]
        arrivals: Vec<f64>,
    },
    /// Shot-noise calibration of the detector.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1 << 20)]
        samples: usize,
    },
}

fn load(name: &str, c: Option<&Common>) -> isaqn::Result<ScenarioConfig> {
    let mut cfg = if Path::new(name).exists() {
        load_scenario(Path::new(name))?
    } else {
        bundled(name)?
    };
    if let Some(c) = c {
        if let Some(s) = c.seed {
            cfg.seeds = vec![s];
        }
        if let Some(p) = &c.profile {
            cfg.profile = Profile::parse(p)?;
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn finish(mut a: RunArtifacts, c: &Common) -> isaqn::Result<ExitCode> {
    if !c.dump_waveforms {
        for r in a.sensing_reports.iter_mut() {
            r.trace = None;
            r.spectrum = None;
        }
    }
    let files = report::emit_report(&a, &c.out)?;
    println!(
        "wrote {} and {} tables",
        c.out.join("report.json").display(),
        files.len()
    );
    for r in &a.skr_reports {
        match (&r.skr, &r.error) {
            (Some(s), _) => println!(
                "node {} seed {}: K = {:.4} Mbit/s, T = {:.5}, eps = {:.4} SNU",
                r.node_id,
                r.seed,
                s.k_bits_per_s / 1e6,
                s.inputs.transmittance,
                s.inputs.excess_noise
            ),
            (None, Some(e)) => println!("node {} seed {}: {e}", r.node_id, r.seed),
            (None, None) => println!("node {} seed {}: suspended", r.node_id, r.seed),
        }
    }
    for r in &a.sensing_reports {
        let flags = r
            .band
            .as_ref()
            .map(|b| format!("castdown={} splitting={}", b.castdown, b.splitting))
            .unwrap_or_default();
        println!(
            "node {} seed {}: vibrating={} suspended={} max phase {:.3} rad {flags}",
            r.node_id, r.seed, r.vibrating, r.qkd_suspended, r.max_phase_rad
        );
    }
    for e in &a.event_estimates {
        match (&e.estimate, &e.error) {
            (Some(est), _) => println!(
                "event seed {}: ({:.2}, {:.2}) m, residual {:.3} m",
                e.seed, est.position[0], est.position[1], est.residual
            ),
            (None, Some(err)) => println!("event seed {}: {err}", e.seed),
            _ => {}
        }
    }
    let failed = a.failed_nodes();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed nodes: {failed:?}");
        Ok(ExitCode::from(1))
    }
}

fn execute(cli: Cli) -> isaqn::Result<ExitCode> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c.scenario, Some(&c))?;
            finish(report::simulate(&cfg, &RunOptions::default())?, &c)
        }
        Command::Sense(c) => {
            let cfg = load(&c.scenario, Some(&c))?;
            let opts = RunOptions {
                qkd: false,
                sensing: true,
                sweep: false,
            };
            finish(report::simulate(&cfg, &opts)?, &c)
        }
        Command::SkrSweep { common, max_km } => {
            let cfg = load(&common.scenario, Some(&common))?;
            let mut a = RunArtifacts::empty(&cfg);
            a.skr_sweeps = report::skr_sweep(&cfg, max_km)?;
            for s in &a.skr_sweeps {
                let last = s.skr_bits_per_s.last().copied().unwrap_or(0.0);
                println!(
                    "node {}: {:.4} Mbit/s at 0 km, {:.4} Mbit/s at {max_km} km",
                    s.node_id,
                    s.skr_bits_per_s[0] / 1e6,
                    last / 1e6
                );
            }
            finish(a, &common)
        }
        Command::Locate { scenario, arrivals } => {
            let cfg = load(&scenario, None)?;
            let ids: Vec<u32> = cfg.node_configs().iter().map(|n| n.node_id).collect();
            let m = TdoaMatrix::from_arrivals(&ids, &arrivals)?;
            let e = locate(&m, &cfg.geometry())?;
            println!(
                "source at ({:.2}, {:.2}) m, residual {:.2e} m{}",
                e.position[0],
                e.position[1],
                e.residual,
                if e.ambiguous { ", ambiguous" } else { "" }
            );
            println!(
                "{}",
                serde_json::to_string_pretty(&e).map_err(|e| Error::Io(e.to_string()))?
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { common, samples } => {
            let cfg = load(&common.scenario, Some(&common))?;
            let det = cfg.detector_params();
            let node = &cfg.node_configs()[0];
            let fs = cfg.sample_rate();
            let sps = dsp::samples_per_symbol(fs, node.baseband_hz)
                .ok_or_else(|| Error::InvalidSampleRate(format!("{fs} Hz")))?;
            for &seed in &cfg.seeds {
                let scale = calibrate_detector(samples, fs, sps as f64, &det, sps, seed)?;
                println!(
                    "seed {seed}: vacuum variance {scale:.4} raw units per quadrature ({:.4} of nominal, LO power {})",
                    scale / sps as f64,
                    det.lo_power
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() || matches!(e, Error::InvalidArgument(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
