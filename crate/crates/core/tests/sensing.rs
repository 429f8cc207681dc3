mod common;

use isaqn::channel::{pzt_phase, FiberConstants, PztParams};
use isaqn::scenario::{bundled, ScenarioConfig};
use isaqn::sensing::{phase_to_length, precision_check, strain_psd};
use isaqn::session::{received_phase, run_qkd_session_with, run_spm, sense_node, PilotLink};

use common::{correlation, sine_event, slope};

fn volts_for_phase(cfg: &ScenarioConfig, id: u32, phase_rad: f64) -> f64 {
    let n = cfg.node(id).unwrap();
    phase_rad / pzt_phase(&[1.0], &n.pzt, &cfg.fiber).unwrap()[0]
}

#[test]
fn precision_follows_inverse_square_root() {
    let n_s: Vec<f64> = [10.0, 30.0, 100.0, 300.0, 1000.0].to_vec();
    let std: Vec<f64> = n_s
        .iter()
        .map(|&n| {
            precision_check(n.sqrt(), 50_000, 11)
                .unwrap()
                .measured_phase_std
        })
        .collect();
    let s = slope(
        &n_s.iter().map(|v| v.ln()).collect::<Vec<_>>(),
        &std.iter().map(|v| v.ln()).collect::<Vec<_>>(),
    );
    assert!((s + 0.5).abs() < 0.05, "slope {s}");
}

#[test]
fn precision_needs_enough_trials() {
    assert!(precision_check(3.0, 999, 1).is_err());
    assert!(precision_check(0.0, 5000, 1).is_err());
}

#[test]
fn pzt_phase_converts_back_to_length() {
    let fiber = FiberConstants::default();
    let pzt = PztParams::default();
    let v: Vec<f64> = (0..200).map(|i| 3.0 * (i as f64 * 0.05).sin()).collect();
    let back = phase_to_length(&pzt_phase(&v, &pzt, &fiber).unwrap(), &fiber);
    for (a, b) in back.iter().zip(pzt.length_change(&v)) {
        assert!((a - b).abs() < 1e-15 + 1e-9 * b.abs());
    }
}

#[test]
fn strain_floor_matches_shot_noise_prediction() {
    let cfg = bundled("eq_triangle").unwrap();
    let mut quiet = cfg.clone();
    quiet.vibration_events.clear();
    quiet.spm.duration_s = 0.2;
    let node = quiet.node_configs()[0].clone();
    let link = PilotLink::for_node(&quiet, &node, 3).unwrap();
    let report = sense_node(&quiet, &node, 3).unwrap();
    let trace = report.trace.unwrap();
    let psd = strain_psd(
        &trace.unwrapped_phase_rad,
        trace.sample_rate,
        2.5,
        &quiet.fiber,
    )
    .unwrap();
    // phase variance of an averaged pilot, 1/N_s with N_s = M·A²/σ², spread
    // over the one-sided band
    let var = link.noise_var / (link.average as f64 * link.amplitude * link.amplitude);
    let predicted = 2.0 * var / trace.sample_rate;
    let ratio_db = 10.0 * (psd.floor / predicted).log10();
    assert!(ratio_db.abs() < 3.0, "floor off by {ratio_db} dB");
}

fn two_khz(amplitude_rad: f64) -> ScenarioConfig {
    let mut cfg = bundled("eq_triangle").unwrap();
    let v = volts_for_phase(&cfg, 1, amplitude_rad);
    cfg.vibration_events = vec![sine_event(&[1], 2000.0, v, 6.0)];
    cfg
}

#[test]
fn run_spm_recovers_a_two_kilohertz_tone() {
    let cfg = two_khz(4.0);
    let reports = run_spm(&cfg, 2).unwrap();
    let r1 = reports.iter().find(|r| r.node_id == 1).unwrap();
    assert!(r1.vibrating && !r1.qkd_suspended);
    let trace = r1.trace.as_ref().unwrap();
    let mut truth = received_phase(&cfg, 1, &trace.times()).unwrap();
    let m = truth.iter().sum::<f64>() / truth.len() as f64;
    truth.iter_mut().for_each(|v| *v -= m);
    let c = correlation(&trace.unwrapped_phase_rad, &truth);
    assert!(c > 0.99, "correlation {c}");
    for r in reports.iter().filter(|r| r.node_id != 1) {
        assert!(!r.vibrating, "node {} flagged", r.node_id);
    }
}

#[test]
fn violent_vibration_suspends_qkd() {
    // ~1 rad between consecutive pilots at 2 kHz
    let cfg = two_khz(300.0);
    let reports = run_spm(&cfg, 4).unwrap();
    let suspended: std::collections::BTreeSet<u32> = reports
        .iter()
        .filter(|r| r.qkd_suspended)
        .map(|r| r.node_id)
        .collect();
    assert_eq!(suspended.into_iter().collect::<Vec<_>>(), vec![1]);
    let r1 = reports.iter().find(|r| r.node_id == 1).unwrap();
    assert!(r1.vibrating && r1.error.is_none());
    let mut set = std::collections::BTreeSet::new();
    set.insert(1);
    let qkd = run_qkd_session_with(&cfg, 4, &set).unwrap();
    let node1 = qkd.iter().find(|r| r.node_id == 1).unwrap();
    assert!(node1.suspended && node1.skr.is_none());
    for r in qkd.iter().filter(|r| r.node_id != 1) {
        assert!(!r.suspended && r.estimate.is_some());
    }
}

#[test]
fn quiet_run_flags_nothing() {
    let mut cfg = bundled("eq_triangle").unwrap();
    cfg.vibration_events.clear();
    for r in run_spm(&cfg, 5).unwrap() {
        assert!(!r.vibrating && !r.qkd_suspended && r.error.is_none());
        let band = r.band.unwrap();
        assert!(!band.castdown && !band.splitting);
    }
}
