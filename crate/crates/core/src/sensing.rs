//! Spectrum phase monitoring: band spectrum checks for castdown and pilot
//! splitting, pilot-phase vibration demodulation, unwrapping, conversion to
//! fiber elongation and strain, and shot-noise-limit precision checks.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::FiberConstants;
use crate::dsp;
use crate::error::{Error, Result};
use crate::node::BandRegistry;
use crate::qkd::{frame_slots, PILOT_SNR_THRESHOLD};
use crate::receiver::QuadratureStream;
use crate::signal::{ComplexWaveform, FrameLayout, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStatus {
    pub node_id: u32,
    /// Band signal power relative to the baseline.
    pub in_band_power_db: f64,
    pub castdown: bool,
    pub splitting: bool,
    pub splitting_sidebands_hz: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub castdown_threshold_db: f64,
    pub splitting_margin_db: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            castdown_threshold_db: 3.0,
            splitting_margin_db: 6.0,
        }
    }
}

/// Reference spectrum features of one band taken while nothing vibrates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandBaseline {
    /// Band power above the white noise floor.
    pub signal_power: f64,
    /// Offsets from the carrier (Hz) of the spectral lines already present.
    pub lines_hz: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBaseline {
    pub segment: usize,
    pub bands: BTreeMap<u32, BandBaseline>,
}

/// Welch segment for a capture: the longest power of two that still leaves
/// several averaged segments, between 2¹⁰ and 2¹⁸.
pub fn monitor_segment(len: usize) -> usize {
    let mut seg = 1usize << 10;
    while seg * 2 <= len / 4 && seg < (1 << 18) {
        seg *= 2;
    }
    seg
}

struct Spectrum {
    psd: Vec<f64>,
    df: f64,
    fs: f64,
    /// Median PSD outside every registered band (the vacuum floor).
    floor: f64,
}

fn spectrum(
    detected: &ComplexWaveform,
    registry: &BandRegistry,
    segment: usize,
) -> Result<Spectrum> {
    if detected.len() < 2 * segment {
        return Err(Error::InsufficientData {
            needed: 2 * segment,
            got: detected.len(),
        });
    }
    let fs = detected.sample_rate;
    let (freqs, psd) = dsp::welch_complex(&detected.samples, fs, segment);
    let mut outside: Vec<f64> = freqs
        .iter()
        .zip(&psd)
        .filter(|(f, _)| {
            registry
                .registered()
                .all(|(_, b)| (**f - b.carrier_hz).abs() > b.bandwidth_hz / 2.0)
        })
        .map(|(_, p)| *p)
        .collect();
    if outside.is_empty() {
        return Err(Error::invalid(
            "no spectrum left outside the registered bands",
        ));
    }
    let floor = dsp::median(&mut outside);
    Ok(Spectrum {
        psd,
        df: fs / segment as f64,
        fs,
        floor,
    })
}

struct BandView {
    center: isize,
    /// Nearest-bin rounding of the carrier, in bins (within ±0.5).
    delta: f64,
    half: isize,
    n: usize,
}

impl BandView {
    fn new(s: &Spectrum, carrier: f64, width: f64) -> Self {
        let n = s.psd.len();
        let exact = carrier / s.df;
        Self {
            center: exact.round() as isize,
            delta: exact.round() - exact,
            half: (width / 2.0 / s.df).floor() as isize,
            n,
        }
    }

    /// Largest value within a bin of the mirror image of offset `k` about
    /// the true carrier frequency.
    fn mirror_peak(&self, s: &Spectrum, k: isize) -> f64 {
        let m = (-(k as f64) - 2.0 * self.delta).round() as isize;
        (m - 1..=m + 1).map(|j| self.at(s, j)).fold(0.0, f64::max)
    }

    fn at(&self, s: &Spectrum, offset: isize) -> f64 {
        s.psd[(self.center + offset).rem_euclid(self.n as isize) as usize]
    }

    fn signal_power(&self, s: &Spectrum) -> f64 {
        (-self.half..=self.half)
            .map(|k| self.at(s, k) - s.floor)
            .sum::<f64>()
            * s.df
    }

    fn median(&self, s: &Spectrum) -> f64 {
        let mut v: Vec<f64> = (-self.half..=self.half).map(|k| self.at(s, k)).collect();
        dsp::median(&mut v)
    }

    /// Local maxima standing `ratio` above the in-band median.
    fn lines(&self, s: &Spectrum, ratio: f64) -> Vec<isize> {
        let thr = self.median(s) * ratio;
        (-self.half + 1..self.half)
            .filter(|&k| {
                let v = self.at(s, k);
                v > thr && v >= self.at(s, k - 1) && v >= self.at(s, k + 1)
            })
            .collect()
    }
}

fn db_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Record per-band signal power and spectral lines from a vibration-free
/// capture.
pub fn capture_baseline(
    detected: &ComplexWaveform,
    registry: &BandRegistry,
    config: &MonitorConfig,
) -> Result<SpectrumBaseline> {
    let segment = monitor_segment(detected.len());
    let s = spectrum(detected, registry, segment)?;
    let mut bands = BTreeMap::new();
    for (id, band) in registry.registered() {
        let view = BandView::new(&s, band.carrier_hz, band.bandwidth_hz);
        let lines = view
            .lines(&s, db_ratio(config.splitting_margin_db))
            .into_iter()
            .map(|k| k as f64 * s.df)
            .collect();
        bands.insert(
            id,
            BandBaseline {
                signal_power: view.signal_power(&s),
                lines_hz: lines,
            },
        );
    }
    Ok(SpectrumBaseline { segment, bands })
}

/// Compare each registered band against its baseline.
///
/// Castdown: band power above the vacuum floor drops by more than the
/// threshold. Splitting: new lines appear symmetrically about the carrier,
/// closer to it than half the distance to the nearest baseline line.
pub fn spectrum_monitor(
    detected: &ComplexWaveform,
    registry: &BandRegistry,
    baseline: &SpectrumBaseline,
    config: &MonitorConfig,
) -> Result<Vec<BandStatus>> {
    for (id, _) in registry.registered() {
        if !baseline.bands.contains_key(&id) {
            return Err(Error::BaselineRequired(id));
        }
    }
    let s = spectrum(detected, registry, baseline.segment)?;
    let margin = db_ratio(config.splitting_margin_db);
    let mut out = Vec::new();
    for (id, band) in registry.registered() {
        let base = &baseline.bands[&id];
        let view = BandView::new(&s, band.carrier_hz, band.bandwidth_hz);
        let power = view.signal_power(&s);
        let rel_db = 10.0 * (power.max(1e-300) / base.signal_power.max(1e-300)).log10();
        let base_bins: Vec<isize> = base
            .lines_hz
            .iter()
            .map(|f| (f / s.df).round() as isize)
            .collect();
        let reach = base_bins
            .iter()
            .map(|b| b.abs())
            .filter(|&b| b > 4)
            .min()
            .map(|b| b / 2)
            .unwrap_or(view.half);
        let thr = view.median(&s) * margin;
        let near_base = |k: isize| base_bins.iter().any(|b| (k - b).abs() <= 4);
        let mut sidebands = Vec::new();
        for k in 5..=reach.min(view.half - 1) {
            let (hi, lo) = (view.at(&s, k), view.mirror_peak(&s, k));
            let peak = hi >= view.at(&s, k - 1) && hi >= view.at(&s, k + 1);
            if peak && hi > thr && lo > thr && !near_base(k) && !near_base(-k) {
                sidebands.push((k as f64 + view.delta) * s.df);
            }
        }
        out.push(BandStatus {
            node_id: id,
            in_band_power_db: rel_db,
            castdown: rel_db < -config.castdown_threshold_db,
            splitting: !sidebands.is_empty(),
            splitting_sidebands_hz: sidebands,
        });
    }
    let _ = s.fs;
    Ok(out)
}

/// Wrapped phase at every pilot of a synchronized frame, atan2(P, X).
pub fn demodulate_phase(stream: &QuadratureStream, layout: &FrameLayout) -> Result<Vec<f64>> {
    if stream.frame_offset.is_none() {
        return Err(Error::invalid("stream is not frame-synchronized"));
    }
    let slots = frame_slots(layout, stream.len())?;
    let pilots: Vec<Complex64> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Slot::Pilot(_)))
        .map(|(i, _)| stream.at_frame(i))
        .collect();
    pilot_phases(&pilots, 1)
}

/// Wrapped phase of consecutive groups of `average` pilot phasors, each
/// group averaged coherently before the angle is taken.
pub fn pilot_phases(pilots: &[Complex64], average: usize) -> Result<Vec<f64>> {
    let m = average.max(1);
    let groups: Vec<Complex64> = pilots
        .chunks_exact(m)
        .map(|c| c.iter().sum::<Complex64>() / m as f64)
        .collect();
    if groups.is_empty() {
        return Err(Error::InsufficientData {
            needed: m,
            got: pilots.len(),
        });
    }
    let snr = phasor_snr(&groups);
    if !(snr >= PILOT_SNR_THRESHOLD) {
        return Err(Error::PhaseEstimateUnreliable {
            snr,
            threshold: PILOT_SNR_THRESHOLD,
        });
    }
    Ok(groups.iter().map(|z| z.im.atan2(z.re)).collect())
}

/// Mean phasor power over noise power, the noise taken from first
/// differences of the magnitudes so that phase motion does not count.
fn phasor_snr(z: &[Complex64]) -> f64 {
    if z.len() < 2 {
        return f64::INFINITY;
    }
    let power = z.iter().map(|v| v.norm_sqr()).sum::<f64>() / z.len() as f64;
    let mags: Vec<f64> = z.iter().map(|v| v.norm()).collect();
    // Magnitude differences carry half the complex noise power, each
    // difference twice the per-sample variance.
    let d = mags.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (mags.len() - 1) as f64;
    let noise = d;
    if noise <= 0.0 {
        return f64::INFINITY;
    }
    ((power - noise) / noise).max(0.0)
}

/// Nearest-multiple phase unwrapping: consecutive outputs never differ by
/// more than π and the first sample is kept.
pub fn unwrap_phase(wrapped: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(wrapped.len());
    let mut offset = 0.0f64;
    for (i, &w) in wrapped.iter().enumerate() {
        if i > 0 {
            let step = w + offset - out[i - 1];
            offset -= 2.0 * PI * (step / (2.0 * PI)).round();
        }
        out.push(w + offset);
    }
    out
}

/// Fiber elongation producing `phase`: L = φ·(λ/2π)/K_fiber.
pub fn phase_to_length(phase: &[f64], fiber: &FiberConstants) -> Vec<f64> {
    let k = 1.0 / fiber.phase_per_meter();
    phase.iter().map(|p| p * k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibrationTrace {
    pub node_id: u32,
    pub unwrapped_phase_rad: Vec<f64>,
    pub length_change_m: Vec<f64>,
    pub sample_rate: f64,
    /// Time of the first sample relative to the start of the capture.
    pub start_s: f64,
    pub max_phase_rad: f64,
}

impl VibrationTrace {
    pub fn from_phase(
        node_id: u32,
        unwrapped: Vec<f64>,
        sample_rate: f64,
        start_s: f64,
        fiber: &FiberConstants,
    ) -> Self {
        let length = phase_to_length(&unwrapped, fiber);
        let max = unwrapped.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            node_id,
            unwrapped_phase_rad: unwrapped,
            length_change_m: length,
            sample_rate,
            start_s,
            max_phase_rad: max,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.unwrapped_phase_rad.len())
            .map(|i| self.start_s + i as f64 / self.sample_rate)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainPsd {
    pub freqs: Vec<f64>,
    /// One-sided phase PSD (rad²/Hz).
    pub psd: Vec<f64>,
    pub floor: f64,
    /// Strain noise density (1/√Hz).
    pub strain_resolution: f64,
    /// Frequencies of lines excluded from the floor estimate.
    pub tones_hz: Vec<f64>,
}

pub const STRAIN_PSD_SEGMENT: usize = 1 << 12;

/// Welch PSD of a phase series, its median noise floor (tone bins and
/// their ±3 neighbours excluded) and the matching strain resolution over
/// `gauge_length_m` of fiber.
pub fn strain_psd(
    phase: &[f64],
    sample_rate: f64,
    gauge_length_m: f64,
    fiber: &FiberConstants,
) -> Result<StrainPsd> {
    if phase.len() < STRAIN_PSD_SEGMENT {
        return Err(Error::InsufficientData {
            needed: STRAIN_PSD_SEGMENT,
            got: phase.len(),
        });
    }
    if !(gauge_length_m > 0.0) {
        return Err(Error::invalid("gauge length must be positive"));
    }
    let (freqs, psd) = dsp::welch_real(phase, sample_rate, STRAIN_PSD_SEGMENT);
    let mut all = psd[1..].to_vec();
    let rough = dsp::median(&mut all);
    let tone_bins: Vec<usize> = (1..psd.len()).filter(|&k| psd[k] > 20.0 * rough).collect();
    let mut kept: Vec<f64> = (1..psd.len())
        .filter(|&k| tone_bins.iter().all(|&t| k.abs_diff(t) > 3))
        .map(|k| psd[k])
        .collect();
    if kept.is_empty() {
        kept = psd[1..].to_vec();
    }
    let floor = dsp::median(&mut kept);
    let strain_resolution = floor.sqrt() / (fiber.phase_per_meter() * gauge_length_m);
    Ok(StrainPsd {
        tones_hz: tone_bins.iter().map(|&k| freqs[k]).collect(),
        freqs,
        psd,
        floor,
        strain_resolution,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    /// Mean photon number of the pilot, the squared amplitude.
    pub photon_number: f64,
    pub measured_phase_std: f64,
    /// 1/√N_s.
    pub quantum_limit: f64,
    pub ratio: f64,
    /// Measured variance of the two noise quadratures (SNU).
    pub quadrature_variance: (f64, f64),
}

pub const MIN_PRECISION_TRIALS: usize = 1000;

/// Monte-Carlo phase precision of a pilot of amplitude `pilot_amplitude_snu`
/// under shot-noise-limited heterodyne detection.
pub fn precision_check(
    pilot_amplitude_snu: f64,
    trials: usize,
    seed: u64,
) -> Result<PrecisionReport> {
    if trials < MIN_PRECISION_TRIALS {
        return Err(Error::invalid(format!(
            "need at least {MIN_PRECISION_TRIALS} trials, got {trials}"
        )));
    }
    if !(pilot_amplitude_snu > 0.0) {
        return Err(Error::invalid("pilot amplitude must be positive"));
    }
    let mut rng = dsp::rng(seed, 3);
    let noise = dsp::complex_noise(&mut rng, trials, 1.0);
    let phases: Vec<f64> = noise
        .iter()
        .map(|n| (Complex64::new(pilot_amplitude_snu, 0.0) + n).arg())
        .collect();
    let std = dsp::variance(&phases).sqrt();
    let re: Vec<f64> = noise.iter().map(|n| n.re).collect();
    let im: Vec<f64> = noise.iter().map(|n| n.im).collect();
    let n_s = pilot_amplitude_snu * pilot_amplitude_snu;
    let limit = 1.0 / n_s.sqrt();
    Ok(PrecisionReport {
        photon_number: n_s,
        measured_phase_std: std,
        quantum_limit: limit,
        ratio: std / limit,
        quadrature_variance: (dsp::variance(&re), dsp::variance(&im)),
    })
}
