//! Child-node transmitter: band registration with the center node and
//! up-conversion of a quadrature frame onto the node's FDM carrier.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::PztParams;
use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::{ComplexWaveform, QuadratureFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: u32,
    /// Carrier frequency of the node's band.
    pub carrier_hz: f64,
    /// Occupied bandwidth of the node's band, RRC excess bandwidth included.
    pub baseband_hz: f64,
    pub fiber_length_m: f64,
    /// Modulation variance V_A in SNU.
    pub modulation_variance: f64,
    pub position_xy: [f64; 2],
    #[serde(default)]
    pub pzt: PztParams,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.baseband_hz > 0.0) {
            return Err(Error::invalid(format!(
                "node {}: baseband_hz must be positive",
                self.node_id
            )));
        }
        if !(self.carrier_hz > self.baseband_hz / 2.0) {
            return Err(Error::invalid(format!(
                "node {}: carrier {} Hz must exceed half the baseband {} Hz",
                self.node_id, self.carrier_hz, self.baseband_hz
            )));
        }
        if !(self.fiber_length_m >= 0.0) {
            return Err(Error::invalid(format!(
                "node {}: fiber length must be non-negative",
                self.node_id
            )));
        }
        if !(self.modulation_variance > 0.0) {
            return Err(Error::invalid(format!(
                "node {}: modulation variance must be positive",
                self.node_id
            )));
        }
        self.pzt.validate()
    }

    /// Symbol rate carried inside the node's band.
    pub fn symbol_rate(&self) -> f64 {
        dsp::symbol_rate_for_band(self.baseband_hz)
    }

    pub fn band(&self) -> (f64, f64) {
        (
            self.carrier_hz - self.baseband_hz / 2.0,
            self.carrier_hz + self.baseband_hz / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEntry {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub registered: bool,
}

impl BandEntry {
    fn overlaps(&self, other: &BandEntry) -> bool {
        (self.carrier_hz - other.carrier_hz).abs() < (self.bandwidth_hz + other.bandwidth_hz) / 2.0
    }
}

/// Bands the center node accepts traffic on, keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandRegistry {
    pub entries: BTreeMap<u32, BandEntry>,
}

impl BandRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, node: &NodeConfig) -> Result<()> {
        if self.entries.contains_key(&node.node_id) {
            return Err(Error::DuplicateNode(node.node_id));
        }
        let entry = BandEntry {
            carrier_hz: node.carrier_hz,
            bandwidth_hz: node.baseband_hz,
            registered: true,
        };
        if let Some((&existing, _)) = self
            .entries
            .iter()
            .find(|(_, e)| e.registered && e.overlaps(&entry))
        {
            return Err(Error::BandConflict {
                existing,
                incoming: node.node_id,
            });
        }
        self.entries.insert(node.node_id, entry);
        Ok(())
    }

    /// Withdraw a band; traffic on it is rejected from then on.
    pub fn revoke(&mut self, node_id: u32) {
        if let Some(e) = self.entries.get_mut(&node_id) {
            e.registered = false;
        }
    }

    /// The node's band if it is currently registered.
    pub fn band(&self, node_id: u32) -> Result<BandEntry> {
        match self.entries.get(&node_id) {
            Some(e) if e.registered => Ok(*e),
            _ => Err(Error::IllegalBand(node_id)),
        }
    }

    pub fn registered(&self) -> impl Iterator<Item = (u32, &BandEntry)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.registered)
            .map(|(id, e)| (*id, e))
    }
}

pub fn register_band(registry: &BandRegistry, node: &NodeConfig) -> Result<BandRegistry> {
    let mut out = registry.clone();
    out.register(node)?;
    Ok(out)
}

/// Shape a frame with the RRC pulse and mix it onto the node's carrier.
///
/// Samples follow the amplitude convention: at each symbol instant the
/// shaped baseband passes through the symbol value, so a single DC symbol
/// yields a constant waveform. The output's `snu_scale` is the per-sample
/// variance of one vacuum quadrature in the same units (the samples-per-symbol
/// count), which is what the detector and the matched filter key off.
///
/// Shaping is circular over the frame, so the waveform is one period of a
/// frame that repeats end to end.
pub fn modulate_node(
    frame: &QuadratureFrame,
    node: &NodeConfig,
    sample_rate: f64,
) -> Result<ComplexWaveform> {
    if frame.is_empty() {
        return Err(Error::invalid("frame must not be empty"));
    }
    let nyquist_need = 2.0 * (node.carrier_hz + node.baseband_hz / 2.0);
    if sample_rate < nyquist_need {
        return Err(Error::InvalidSampleRate(format!(
            "{sample_rate} Hz is below the {nyquist_need} Hz needed for node {}",
            node.node_id
        )));
    }
    let sps = dsp::samples_per_symbol(sample_rate, node.baseband_hz).ok_or_else(|| {
        Error::InvalidSampleRate(format!(
            "{sample_rate} Hz is not an integer multiple of the {} Hz symbol rate",
            node.symbol_rate()
        ))
    })?;
    let n = frame.len() * sps;
    let cycles = node.carrier_hz * n as f64 / sample_rate;
    let samples = if (cycles - cycles.round()).abs() < 1e-9 * cycles.max(1.0) {
        shape_at(&frame.symbols, sps, cycles.round() as usize)
    } else {
        mix(&shape(&frame.symbols, sps), node.carrier_hz, sample_rate)
    };
    ComplexWaveform::new(samples, sample_rate, sps as f64)
}

/// Circular RRC pulse shaping of a symbol sequence at `sps` samples/symbol.
pub(crate) fn shape(symbols: &[Complex64], sps: usize) -> Vec<Complex64> {
    let k = symbols.len();
    let n = k * sps;
    let mut spectrum = symbols.to_vec();
    dsp::fft(&mut spectrum);
    let h = dsp::rrc_response(n, sps);
    let gain = sps as f64;
    let mut up: Vec<Complex64> = (0..n).map(|m| spectrum[m % k] * (gain * h[m])).collect();
    // rrc_response carries a sqrt(sps) factor for unit energy; the amplitude
    // convention wants sps * sqrt(RC), so divide it back out.
    let norm = 1.0 / (sps as f64).sqrt();
    for v in up.iter_mut() {
        *v *= norm;
    }
    dsp::ifft(&mut up);
    up
}

/// `shape` followed by `mix` for a carrier sitting exactly on DFT bin
/// `carrier_bin`: the shifted spectrum is filled directly, touching only the
/// bins inside the RRC support.
fn shape_at(symbols: &[Complex64], sps: usize, carrier_bin: usize) -> Vec<Complex64> {
    let k = symbols.len();
    let n = k * sps;
    let mut spectrum = symbols.to_vec();
    dsp::fft(&mut spectrum);
    let symbol_rate = 1.0 / sps as f64;
    let edge = ((1.0 + dsp::RRC_ROLL_OFF) * symbol_rate / 2.0 * n as f64).ceil() as i64;
    // gain sps times the sqrt(sps)-normalized response, over sqrt(sps)
    let gain = (sps as f64).sqrt();
    let mut up = vec![Complex64::new(0.0, 0.0); n];
    for m in -edge..=edge.min(n as i64 / 2) {
        let f = m as f64 / n as f64;
        let h = (sps as f64 * dsp::raised_cosine(f, symbol_rate, dsp::RRC_ROLL_OFF)).sqrt();
        if h == 0.0 {
            continue;
        }
        let src = m.rem_euclid(n as i64) as usize;
        let dst = (m + carrier_bin as i64).rem_euclid(n as i64) as usize;
        up[dst] += spectrum[src % k] * (gain * h);
    }
    dsp::ifft(&mut up);
    up
}

pub(crate) fn mix(baseband: &[Complex64], carrier_hz: f64, sample_rate: f64) -> Vec<Complex64> {
    let w = 2.0 * PI * carrier_hz / sample_rate;
    baseband
        .iter()
        .enumerate()
        .map(|(i, s)| s * Complex64::from_polar(1.0, w * i as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{build_frame, gaussian_symbols, FrameLayout};

    pub(crate) fn node(id: u32, carrier: f64, band: f64) -> NodeConfig {
        NodeConfig {
            node_id: id,
            carrier_hz: carrier,
            baseband_hz: band,
            fiber_length_m: 10_000.0,
            modulation_variance: 12.0,
            position_xy: [0.0, 0.0],
            pzt: PztParams::default(),
        }
    }

    #[test]
    fn registers_three_bands() {
        let mut r = BandRegistry::new();
        for (i, c) in [100e6, 200e6, 300e6].iter().enumerate() {
            r.register(&node(i as u32 + 1, *c, 50e6)).unwrap();
        }
        assert_eq!(r.registered().count(), 3);
    }

    #[test]
    fn overlapping_band_conflicts() {
        let r = register_band(&BandRegistry::new(), &node(1, 100e6, 50e6)).unwrap();
        let err = register_band(&r, &node(2, 120e6, 50e6)).unwrap_err();
        assert_eq!(
            err,
            Error::BandConflict {
                existing: 1,
                incoming: 2
            }
        );
    }

    #[test]
    fn duplicate_node_rejected() {
        let r = register_band(&BandRegistry::new(), &node(1, 100e6, 50e6)).unwrap();
        assert_eq!(
            register_band(&r, &node(1, 300e6, 50e6)).unwrap_err(),
            Error::DuplicateNode(1)
        );
    }

    #[test]
    fn eight_bands_pairwise_spaced() {
        let nodes: Vec<_> = (1..=8).map(|k| node(k, 100e6 * k as f64, 50e6)).collect();
        let mut r = BandRegistry::new();
        for n in &nodes {
            r.register(n).unwrap();
        }
        for a in &nodes {
            for b in &nodes {
                if a.node_id != b.node_id {
                    assert!((a.carrier_hz - b.carrier_hz).abs() >= a.baseband_hz);
                }
            }
        }
    }

    #[test]
    fn revoked_band_is_illegal() {
        let mut r = BandRegistry::new();
        r.register(&node(3, 300e6, 50e6)).unwrap();
        r.revoke(3);
        assert_eq!(r.band(3).unwrap_err(), Error::IllegalBand(3));
        assert_eq!(r.band(9).unwrap_err(), Error::IllegalBand(9));
    }

    #[test]
    fn single_dc_symbol_is_constant() {
        let layout = FrameLayout {
            pilot_period: 2,
            pilot_amplitude: 1.0,
            sync_word: vec![],
        };
        let frame = QuadratureFrame {
            symbols: vec![Complex64::new(1.0, 0.0)],
            slots: vec![crate::signal::Slot::Quantum(0)],
            layout,
            variance: 1.0,
        };
        // DC carrier: pick a band whose carrier is (just) above half the band.
        let mut n = node(1, 0.0, 1.3e3);
        n.carrier_hz = 0.0;
        let shaped = shape(&frame.symbols, 26);
        for s in &shaped {
            assert!((s - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let mixed = mix(&shaped, n.carrier_hz, 26e3);
        assert!(mixed
            .iter()
            .all(|s| (s - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn nyquist_violation_rejected() {
        let layout = FrameLayout::new(4, 1.0, 4).unwrap();
        let f = build_frame(&gaussian_symbols(8, 1.0, 1).unwrap(), &layout).unwrap();
        let err = modulate_node(&f, &node(1, 300e3, 50e3), 600e3).unwrap_err();
        assert!(matches!(err, Error::InvalidSampleRate(_)));
        let err = modulate_node(&f, &node(1, 100e3, 48e3), 1e6).unwrap_err();
        assert!(matches!(err, Error::InvalidSampleRate(_)));
    }
}
