//! Three nodes share one detector on separate carriers. Each band is
//! selected and demodulated back to its symbols without noise.
//!
//!     cargo run --release --example fdm_loopback

use isaqn::channel::combine;
use isaqn::node::{modulate_node, BandRegistry, NodeConfig};
use isaqn::receiver::{band_select, demodulate};
use isaqn::session::aligned_quantum_count;
use isaqn::signal::{build_frame, gaussian_symbols, FrameLayout};

fn main() -> isaqn::Result<()> {
    let fs = 1e9;
    let layout = FrameLayout::default();
    let nodes: Vec<NodeConfig> = [100e6, 200e6, 300e6]
        .iter()
        .enumerate()
        .map(|(i, &c)| NodeConfig {
            node_id: i as u32 + 1,
            carrier_hz: c,
            baseband_hz: 50e6,
            fiber_length_m: 10_000.0,
            modulation_variance: 12.0,
            position_xy: [0.0, 0.0],
            pzt: Default::default(),
        })
        .collect();
    let mut registry = BandRegistry::new();
    for n in &nodes {
        registry.register(n)?;
    }
    let quantum = aligned_quantum_count(4000, &layout, &nodes)?;
    let frames = nodes
        .iter()
        .map(|n| build_frame(&gaussian_symbols(quantum, 12.0, n.node_id as u64)?, &layout))
        .collect::<isaqn::Result<Vec<_>>>()?;
    let waves = frames
        .iter()
        .zip(&nodes)
        .map(|(f, n)| modulate_node(f, n, fs))
        .collect::<isaqn::Result<Vec<_>>>()?;
    let line = combine(&waves)?;
    println!(
        "{} samples at {} GS/s, {} symbols per frame",
        line.len(),
        fs / 1e9,
        frames[0].len()
    );
    for (n, f) in nodes.iter().zip(&frames) {
        let band = band_select(&line, &registry, n.node_id)?;
        let got = demodulate(&band, n.carrier_hz, n.baseband_hz)?.as_complex();
        let worst = got
            .iter()
            .zip(&f.symbols)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        println!(
            "node {} at {} MHz: worst symbol error {worst:.2e}",
            n.node_id,
            n.carrier_hz / 1e6
        );
    }
    Ok(())
}
