//! Band monitoring: a baseline capture, then a capture with node 2 shaken
//! at ~200 Hz. The shaken band loses power and grows sidebands.
//!
//!     cargo run --release --example spectrum_monitor

use isaqn::channel::pzt_phase;
use isaqn::scenario::{bundled, VibrationEvent, WaveformKind, WaveformSpec};
use isaqn::session::monitor_spectrum;

fn main() -> isaqn::Result<()> {
    let mut cfg = bundled("paper_3node")?;
    let rad_per_volt = pzt_phase(&[1.0], &cfg.node(2).expect("node 2").pzt, &cfg.fiber)?[0];
    cfg.vibration_events = vec![VibrationEvent {
        nodes: vec![2],
        delays_s: vec![],
        source_xy: None,
        start_s: 0.0,
        waveform: WaveformSpec {
            kind: WaveformKind::Sine,
            frequency_hz: 198.4,
            amplitude_v: 1.8 / rad_per_volt,
            cycles: 3.0,
            duration_s: None,
        },
        wave_speed_mps: None,
        attenuation: None,
        castdown_db: 6.0,
    }];
    let out = monitor_spectrum(&cfg, 1)?;
    for s in &out.statuses {
        println!(
            "node {}: power change {:+.2} dB, castdown = {}, splitting = {}, sidebands at {:?} Hz",
            s.node_id, s.in_band_power_db, s.castdown, s.splitting, s.splitting_sidebands_hz
        );
    }
    Ok(())
}
