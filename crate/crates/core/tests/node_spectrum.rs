use num_complex::Complex64;

use isaqn::dsp;
use isaqn::node::{modulate_node, NodeConfig};
use isaqn::session::aligned_quantum_count;
use isaqn::signal::{build_frame, gaussian_symbols, FrameLayout, QuadratureFrame, Slot};

const FS: f64 = 1e9;

fn node(carrier_hz: f64) -> NodeConfig {
    NodeConfig {
        node_id: 1,
        carrier_hz,
        baseband_hz: 50e6,
        fiber_length_m: 0.0,
        modulation_variance: 12.0,
        position_xy: [0.0, 0.0],
        pzt: Default::default(),
    }
}

fn spectrum(x: &[Complex64]) -> Vec<f64> {
    let mut s = x.to_vec();
    dsp::fft(&mut s);
    s.iter().map(|v| v.norm_sqr()).collect()
}

#[test]
fn constant_symbols_give_one_line_at_the_carrier() {
    let nd = node(200e6);
    let len = 650;
    let frame = QuadratureFrame {
        symbols: vec![Complex64::new(3.0, 0.0); len],
        slots: (0..len).map(Slot::Quantum).collect(),
        layout: FrameLayout::default(),
        variance: 0.0,
    };
    let w = modulate_node(&frame, &nd, FS).unwrap();
    // amplitude convention: a DC symbol stream is a constant envelope
    for s in &w.samples {
        assert!((s.norm() - 3.0).abs() < 1e-9);
    }
    let p = spectrum(&w.samples);
    let n = p.len();
    let line = dsp::frequency_bin(nd.carrier_hz, n, FS);
    let total: f64 = p.iter().sum();
    assert!(p[line] / total > 1.0 - 1e-12);
}

fn out_of_band_db(nd: &NodeConfig, n_quantum: usize) -> f64 {
    let layout = FrameLayout::default();
    let frame = build_frame(&gaussian_symbols(n_quantum, 12.0, 4).unwrap(), &layout).unwrap();
    let w = modulate_node(&frame, nd, FS).unwrap();
    let p = spectrum(&w.samples);
    let n = p.len();
    let (mut inside, mut outside) = (0.0, 0.0);
    for (k, v) in p.iter().enumerate() {
        if (dsp::bin_frequency(k, n, FS) - nd.carrier_hz).abs() <= nd.baseband_hz / 2.0 {
            inside += v;
        } else {
            outside += v;
        }
    }
    10.0 * (outside / inside).log10()
}

#[test]
fn out_of_band_power_is_suppressed_on_grid() {
    let nd = node(300e6);
    let n =
        aligned_quantum_count(5000, &FrameLayout::default(), std::slice::from_ref(&nd)).unwrap();
    assert!(out_of_band_db(&nd, n) < -30.0);
}

#[test]
fn out_of_band_power_is_suppressed_off_grid() {
    // a carrier that does not complete whole cycles over the frame
    let nd = node(300.0137e6);
    assert!(out_of_band_db(&nd, 5001) < -30.0);
}
