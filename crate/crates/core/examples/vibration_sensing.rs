//! A 500 Hz PZT drive on node 1, recovered from the pilot phase and
//! compared against the imposed phase.
//!
//!     cargo run --release --example vibration_sensing

use isaqn::channel::pzt_phase;
use isaqn::scenario::{bundled, Profile, VibrationEvent, WaveformKind, WaveformSpec};
use isaqn::session::{received_phase, sense_node};

fn main() -> isaqn::Result<()> {
    let mut cfg = bundled("paper_3node")?.with_profile(Profile::PaperScale);
    let entry = cfg.node(1).expect("node 1");
    let rad_per_volt = pzt_phase(&[1.0], &entry.pzt, &cfg.fiber)?[0];
    cfg.spm.duration_s = 0.05;
    cfg.vibration_events = vec![VibrationEvent {
        nodes: vec![1],
        delays_s: vec![],
        source_xy: None,
        start_s: 0.0,
        waveform: WaveformSpec {
            kind: WaveformKind::Sine,
            frequency_hz: 500.0,
            amplitude_v: 3.0 / rad_per_volt,
            cycles: 3.0,
            duration_s: None,
        },
        wave_speed_mps: None,
        attenuation: None,
        castdown_db: 6.0,
    }];
    let node = cfg.node_configs()[0].clone();
    let r = sense_node(&cfg, &node, 1)?;
    let trace = r.trace.expect("trace");
    let truth = received_phase(&cfg, 1, &trace.times())?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let rms = (trace
        .unwrapped_phase_rad
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - (b - mean)).powi(2))
        .sum::<f64>()
        / truth.len() as f64)
        .sqrt();
    println!(
        "{} pilots per sample, trace at {:.0} Hz, {} samples",
        r.pilots_averaged,
        r.trace_rate_hz,
        trace.unwrapped_phase_rad.len()
    );
    println!(
        "peak phase {:.3} rad, peak elongation {:.3e} m, rms error {rms:.4} rad",
        r.max_phase_rad, r.max_length_change_m
    );
    println!(
        "vibrating = {}, QKD suspended = {}",
        r.vibrating, r.qkd_suspended
    );
    if let Some(s) = r.strain {
        println!(
            "phase noise floor {:.3e} rad^2/Hz, strain resolution {:.3e} /sqrt(Hz)",
            s.floor_rad2_per_hz, s.strain_resolution_per_rthz
        );
    }
    Ok(())
}
