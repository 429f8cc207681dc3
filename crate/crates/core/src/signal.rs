//! Shared numeric types: sampled waveforms, Gaussian symbol sources, the TDM
//! frame that interleaves pilots with quantum symbols, and shot-noise-unit
//! calibration.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};

/// Uniformly sampled complex baseband (or IF) signal.
///
/// `snu_scale` is the variance of one vacuum quadrature expressed in raw
/// sample units; dividing samples by its square root yields shot noise units.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexWaveform {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub snu_scale: f64,
}

impl ComplexWaveform {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64, snu_scale: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must not be empty"));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if !(snu_scale > 0.0) {
            return Err(Error::invalid("snu_scale must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
            snu_scale,
        })
    }

    /// All-zero waveform, e.g. the input of a shot-noise calibration capture.
    pub fn zeros(len: usize, sample_rate: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate, 1.0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Mean power per sample (both quadratures).
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn with_snu_scale(mut self, snu_scale: f64) -> Result<Self> {
        if !(snu_scale > 0.0) {
            return Err(Error::invalid("snu_scale must be positive"));
        }
        self.snu_scale = snu_scale;
        Ok(self)
    }

    /// Circularly rotate so that sample `shift` becomes sample 0.
    pub fn rotate_left(&mut self, shift: usize) {
        let n = self.samples.len();
        self.samples.rotate_left(shift % n);
    }
}

/// Paired Gaussian quadrature sequences drawn by a transmitting node.
///
/// Each quadrature carries variance `variance / 2`, so `x² + p²` averages to
/// the modulation variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub variance: f64,
}

impl SymbolSequence {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn as_complex(&self) -> Vec<Complex64> {
        self.x
            .iter()
            .zip(&self.p)
            .map(|(&x, &p)| Complex64::new(x, p))
            .collect()
    }

    pub fn from_complex(values: &[Complex64], variance: f64) -> Self {
        Self {
            x: values.iter().map(|v| v.re).collect(),
            p: values.iter().map(|v| v.im).collect(),
            variance,
        }
    }

    /// Scale every symbol by `a` (the declared variance scales by `a²`).
    pub fn scaled(&self, a: f64) -> Self {
        Self {
            x: self.x.iter().map(|v| v * a).collect(),
            p: self.p.iter().map(|v| v * a).collect(),
            variance: self.variance * a * a,
        }
    }
}

/// Draw `n` i.i.d. zero-mean Gaussian symbol pairs with total modulation
/// variance `variance` (half per quadrature).
pub fn gaussian_symbols(n: usize, variance: f64, seed: u64) -> Result<SymbolSequence> {
    if n == 0 {
        return Err(Error::invalid("symbol count must be at least 1"));
    }
    if !(variance > 0.0) {
        return Err(Error::invalid("modulation variance must be positive"));
    }
    let sd = (variance / 2.0).sqrt();
    let mut rng = dsp::rng(seed, 0);
    let mut x = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x.push(sd * a);
        p.push(sd * b);
    }
    Ok(SymbolSequence { x, p, variance })
}

/// TDM layout of a frame: a sync word followed by a payload in which every
/// pilot is followed by `pilot_period` quantum symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub pilot_period: usize,
    pub pilot_amplitude: f64,
    pub sync_word: Vec<Complex64>,
}

pub const DEFAULT_PILOT_AMPLITUDE: f64 = 10.0;
pub const DEFAULT_PILOT_PERIOD: usize = 10;
pub const DEFAULT_SYNC_LEN: usize = 64;
const SYNC_SEED: u64 = 0x15A9_2024;

impl Default for FrameLayout {
    fn default() -> Self {
        Self::new(
            DEFAULT_PILOT_PERIOD,
            DEFAULT_PILOT_AMPLITUDE,
            DEFAULT_SYNC_LEN,
        )
        .expect("default layout is valid")
    }
}

impl FrameLayout {
    /// Layout with the standard pseudo-random QPSK sync word of `sync_len`
    /// symbols at pilot amplitude.
    pub fn new(pilot_period: usize, pilot_amplitude: f64, sync_len: usize) -> Result<Self> {
        let layout = Self {
            pilot_period,
            pilot_amplitude,
            sync_word: default_sync_word(sync_len, pilot_amplitude),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pilot_period < 2 {
            return Err(Error::invalid("pilot_period must be at least 2"));
        }
        if !(self.pilot_amplitude > 0.0) {
            return Err(Error::invalid("pilot_amplitude must be positive"));
        }
        Ok(())
    }

    /// Payload length (pilots + quantum symbols) for `n_quantum` symbols.
    pub fn payload_len(&self, n_quantum: usize) -> usize {
        n_quantum + n_quantum.div_ceil(self.pilot_period)
    }

    /// Total frame length, sync word included.
    pub fn symbols_per_frame(&self, n_quantum: usize) -> usize {
        self.sync_word.len() + self.payload_len(n_quantum)
    }

    /// Symbols between consecutive pilots, the pilot itself included.
    pub fn pilot_spacing(&self) -> usize {
        self.pilot_period + 1
    }

    pub fn pilot_symbol(&self) -> Complex64 {
        Complex64::new(self.pilot_amplitude, 0.0)
    }
}

/// Fixed pseudo-random QPSK pattern with a sharp autocorrelation peak.
pub fn default_sync_word(len: usize, amplitude: f64) -> Vec<Complex64> {
    let mut rng = dsp::rng(SYNC_SEED, 1);
    let a = amplitude / std::f64::consts::SQRT_2;
    (0..len)
        .map(|_| {
            let re = if rng.random::<bool>() { a } else { -a };
            let im = if rng.random::<bool>() { a } else { -a };
            Complex64::new(re, im)
        })
        .collect()
}

/// Role of one position in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Sync(usize),
    Pilot(usize),
    Quantum(usize),
}

/// A framed symbol sequence with its position map.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureFrame {
    pub symbols: Vec<Complex64>,
    pub slots: Vec<Slot>,
    pub layout: FrameLayout,
    pub variance: f64,
}

impl QuadratureFrame {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pilot_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Pilot(_)))
            .count()
    }

    pub fn quantum_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Quantum(_)))
            .count()
    }

    /// Copy with every quantum symbol zeroed: the node keeps sending sync and
    /// pilots only.
    pub fn pilots_only(&self) -> Self {
        let mut out = self.clone();
        for (s, slot) in out.symbols.iter_mut().zip(&self.slots) {
            if matches!(slot, Slot::Quantum(_)) {
                *s = Complex64::new(0.0, 0.0);
            }
        }
        out
    }
}

/// Prepend the sync word and interleave pilots (x = amplitude, p = 0).
pub fn build_frame(symbols: &SymbolSequence, layout: &FrameLayout) -> Result<QuadratureFrame> {
    layout.validate()?;
    if symbols.is_empty() {
        return Err(Error::invalid("cannot frame an empty symbol sequence"));
    }
    if symbols.x.len() != symbols.p.len() {
        return Err(Error::invalid("x and p must have equal length"));
    }
    let n = symbols.len();
    let total = layout.symbols_per_frame(n);
    let mut out = Vec::with_capacity(total);
    let mut slots = Vec::with_capacity(total);
    for (i, s) in layout.sync_word.iter().enumerate() {
        out.push(*s);
        slots.push(Slot::Sync(i));
    }
    let pilot = layout.pilot_symbol();
    let mut pilot_idx = 0;
    for i in 0..n {
        if i % layout.pilot_period == 0 {
            out.push(pilot);
            slots.push(Slot::Pilot(pilot_idx));
            pilot_idx += 1;
        }
        out.push(Complex64::new(symbols.x[i], symbols.p[i]));
        slots.push(Slot::Quantum(i));
    }
    Ok(QuadratureFrame {
        symbols: out,
        slots,
        layout: layout.clone(),
        variance: symbols.variance,
    })
}

/// Recover the quantum symbols from a frame, dropping sync and pilots.
pub fn deframe(frame: &QuadratureFrame) -> SymbolSequence {
    let mut x = Vec::with_capacity(frame.quantum_count());
    let mut p = Vec::with_capacity(frame.quantum_count());
    for (s, slot) in frame.symbols.iter().zip(&frame.slots) {
        if matches!(slot, Slot::Quantum(_)) {
            x.push(s.re);
            p.push(s.im);
        }
    }
    SymbolSequence {
        x,
        p,
        variance: frame.variance,
    }
}

/// Estimate the raw variance of one vacuum quadrature from a capture taken
/// with zero signal power.
///
/// The capture is passed through a unit-energy boxcar of `matched_filter_len`
/// samples and decimated, which leaves white noise variance unchanged while
/// producing independent matched-filter outputs.
pub fn snu_calibrate(noise_only: &ComplexWaveform, matched_filter_len: usize) -> Result<f64> {
    let mf = matched_filter_len.max(1);
    let needed = 100 * mf;
    if noise_only.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: noise_only.len(),
        });
    }
    let norm = 1.0 / (mf as f64).sqrt();
    let outputs: Vec<Complex64> = noise_only
        .samples
        .chunks_exact(mf)
        .map(|c| c.iter().sum::<Complex64>() * norm)
        .collect();
    let n = outputs.len() as f64;
    let mean = outputs.iter().sum::<Complex64>() / n;
    let var = outputs.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
    Ok(var / 2.0)
}
