//! Center-node heterodyne receiver: shot-noise-limited detection, band
//! selection against the registry, coherent demodulation to symbol-rate
//! quadratures and frame synchronization.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::node::BandRegistry;
use crate::signal::{snu_calibrate, ComplexWaveform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub quantum_efficiency: f64,
    pub electronic_noise_snu: f64,
    pub bandwidth_hz: f64,
    /// Local-oscillator power relative to nominal. Raw output noise scales
    /// with it; calibration is what maps raw units back to SNU.
    pub lo_power: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            quantum_efficiency: 0.42,
            electronic_noise_snu: 0.18,
            bandwidth_hz: 1e9,
            lo_power: 1.0,
        }
    }
}

impl DetectorParams {
    pub fn ideal() -> Self {
        Self {
            quantum_efficiency: 1.0,
            electronic_noise_snu: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.quantum_efficiency;
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::config(
                "detector.quantum_efficiency",
                "must lie in (0, 1]",
            ));
        }
        if !(self.electronic_noise_snu >= 0.0) {
            return Err(Error::config(
                "detector.electronic_noise_snu",
                "must be non-negative",
            ));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::config("detector.bandwidth_hz", "must be positive"));
        }
        if !(self.lo_power > 0.0) {
            return Err(Error::config("detector.lo_power", "must be positive"));
        }
        Ok(())
    }
}

/// Symbol-rate quadratures of one node, in SNU.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureStream {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub symbol_rate: f64,
    /// Index of the first sync symbol once the frame has been found.
    pub frame_offset: Option<usize>,
}

impl QuadratureStream {
    pub fn from_complex(values: &[Complex64], symbol_rate: f64) -> Self {
        Self {
            x: values.iter().map(|v| v.re).collect(),
            p: values.iter().map(|v| v.im).collect(),
            symbol_rate,
            frame_offset: None,
        }
    }

    pub fn as_complex(&self) -> Vec<Complex64> {
        self.x
            .iter()
            .zip(&self.p)
            .map(|(&x, &p)| Complex64::new(x, p))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Symbol at frame position `i` (wrapping around the end of the capture).
    pub(crate) fn at_frame(&self, i: usize) -> Complex64 {
        let k = (self.frame_offset.unwrap_or(0) + i) % self.len();
        Complex64::new(self.x[k], self.p[k])
    }
}

/// Heterodyne detection: attenuate by √η, add one vacuum unit and the
/// electronic noise per quadrature, then apply the LO gain.
///
/// Noise variances are taken in the units declared by the input's
/// `snu_scale`. The output keeps that nominal scale; with `lo_power != 1`
/// the true scale differs and must be recovered by calibration.
pub fn detect(
    waveform: &ComplexWaveform,
    det: &DetectorParams,
    seed: u64,
) -> Result<ComplexWaveform> {
    det.validate()?;
    let mut rng = dsp::rng(seed, 0);
    let var = waveform.snu_scale * (1.0 + det.electronic_noise_snu);
    let noise = dsp::complex_noise(&mut rng, waveform.len(), var);
    let a = det.quantum_efficiency.sqrt();
    let g = det.lo_power.sqrt();
    let samples = waveform
        .samples
        .iter()
        .zip(&noise)
        .map(|(s, n)| g * (a * s + n))
        .collect();
    ComplexWaveform::new(samples, waveform.sample_rate, waveform.snu_scale)
}

/// Capture with the LO blocked: electronic noise only.
pub fn dark_capture(
    len: usize,
    sample_rate: f64,
    snu_scale: f64,
    det: &DetectorParams,
    seed: u64,
) -> Result<ComplexWaveform> {
    det.validate()?;
    let mut rng = dsp::rng(seed, 1);
    let var = det.lo_power * snu_scale * det.electronic_noise_snu;
    let samples = if var > 0.0 {
        dsp::complex_noise(&mut rng, len, var)
    } else {
        vec![Complex64::new(0.0, 0.0); len]
    };
    ComplexWaveform::new(samples, sample_rate, snu_scale)
}

/// Shot-noise calibration: a signal-free capture minus a dark capture gives
/// the raw variance of one vacuum quadrature.
pub fn calibrate_detector(
    len: usize,
    sample_rate: f64,
    nominal_snu_scale: f64,
    det: &DetectorParams,
    matched_filter_len: usize,
    seed: u64,
) -> Result<f64> {
    let mut blank = ComplexWaveform::zeros(len.max(1), sample_rate)?;
    blank.snu_scale = nominal_snu_scale;
    let shot = detect(&blank, det, seed)?;
    let dark = dark_capture(len, sample_rate, nominal_snu_scale, det, seed)?;
    let total = snu_calibrate(&shot, matched_filter_len)?;
    let electronic = if det.electronic_noise_snu > 0.0 {
        snu_calibrate(&dark, matched_filter_len)?
    } else {
        0.0
    };
    let scale = total - electronic;
    if !(scale > 0.0) {
        return Err(Error::invalid(
            "calibration produced a non-positive shot-noise variance",
        ));
    }
    Ok(scale)
}

/// Isolate one registered node's band with an ideal band-pass filter.
pub fn band_select(
    waveform: &ComplexWaveform,
    registry: &BandRegistry,
    node_id: u32,
) -> Result<ComplexWaveform> {
    let band = registry.band(node_id)?;
    let mut s = waveform.samples.clone();
    crate::channel::band_limit(
        &mut s,
        waveform.sample_rate,
        band.carrier_hz,
        band.bandwidth_hz,
    );
    ComplexWaveform::new(s, waveform.sample_rate, waveform.snu_scale)
}

/// Coherent demodulation of a band-selected node signal.
///
/// Real and imaginary parts are each multiplied by 2cos(ω t); the RRC
/// matched filter then removes the 2ω terms and the result is sampled at
/// symbol centers and scaled to SNU. Filtering is circular, matching the
/// transmitter. The input must already be band-selected: the cosine mixer
/// also folds the mirror band at −ω onto baseband. The 2ω product is only
/// removed exactly when the carrier sits on the capture's DFT grid.
pub fn demodulate(
    waveform: &ComplexWaveform,
    carrier_hz: f64,
    baseband_hz: f64,
) -> Result<QuadratureStream> {
    let fs = waveform.sample_rate;
    if !(baseband_hz > 0.0) || baseband_hz > fs / 2.0 {
        return Err(Error::invalid(format!(
            "baseband {baseband_hz} Hz does not fit the {fs} Hz sample rate"
        )));
    }
    if !(carrier_hz >= 0.0) || carrier_hz + baseband_hz / 2.0 > fs / 2.0 {
        return Err(Error::invalid(format!(
            "carrier {carrier_hz} Hz lies outside the Nyquist range of {fs} Hz"
        )));
    }
    let sps = dsp::samples_per_symbol(fs, baseband_hz).ok_or_else(|| {
        Error::InvalidSampleRate(format!(
            "{fs} Hz is not an integer multiple of the symbol rate for a {baseband_hz} Hz band"
        ))
    })?;
    let n = waveform.len();
    if !n.is_multiple_of(sps) {
        return Err(Error::invalid(format!(
            "capture of {n} samples is not a whole number of {sps}-sample symbols"
        )));
    }
    let w = 2.0 * PI * carrier_hz / fs;
    let mut mixed: Vec<Complex64> = waveform
        .samples
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let c = 2.0 * (w * i as f64).cos();
            Complex64::new(z.re * c, z.im * c)
        })
        .collect();
    let symbols = matched_filter(&mut mixed, sps);
    let scale = (sps as f64 / waveform.snu_scale).sqrt();
    let values: Vec<Complex64> = symbols.into_iter().map(|v| v * scale).collect();
    Ok(QuadratureStream::from_complex(
        &values,
        dsp::symbol_rate_for_band(baseband_hz),
    ))
}

/// RRC matched filter with unit DC gain, sampled at every `sps`-th sample.
/// `buf` is consumed as FFT scratch space.
pub(crate) fn matched_filter(buf: &mut [Complex64], sps: usize) -> Vec<Complex64> {
    let n = buf.len();
    let k = n / sps;
    dsp::fft(buf);
    let h = dsp::rrc_response(n, sps);
    let norm = 1.0 / (sps as f64).sqrt();
    let mut folded = vec![Complex64::new(0.0, 0.0); k];
    for (m, v) in buf.iter().enumerate() {
        folded[m % k] += v * (h[m] * norm);
    }
    dsp::ifft(&mut folded);
    let decim = 1.0 / sps as f64;
    folded.into_iter().map(|v| v * decim).collect()
}

/// Outcome of frame synchronization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub offset: usize,
    /// Normalized correlation magnitude at the peak, in [0, 1].
    pub peak: f64,
    /// Peak-to-sidelobe power ratio.
    pub psr: f64,
}

pub const SYNC_PSR_THRESHOLD: f64 = 3.0;

/// Locate the sync word by circular normalized cross-correlation. The
/// magnitude of the complex correlation is used, so a global phase
/// rotation of the stream does not matter.
pub fn frame_sync(stream: &QuadratureStream, sync_word: &[Complex64]) -> Result<SyncResult> {
    let m = sync_word.len();
    let n = stream.len();
    if m == 0 {
        return Err(Error::invalid("sync word is empty"));
    }
    if n < 2 * m {
        return Err(Error::InsufficientData {
            needed: 2 * m,
            got: n,
        });
    }
    let s = stream.as_complex();
    let mut a = s.clone();
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    b[..m].copy_from_slice(sync_word);
    dsp::fft(&mut a);
    dsp::fft(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y.conj();
    }
    dsp::ifft(&mut a);
    // corr[k] = Σ_i s[k+i] conj(w[i]), the 1/n of the inverse transform
    // undone below.
    let word_energy: f64 = sync_word.iter().map(|w| w.norm_sqr()).sum();
    let mut prefix = Vec::with_capacity(2 * n + 1);
    prefix.push(0.0);
    for i in 0..2 * n {
        let e = s[i % n].norm_sqr();
        prefix.push(prefix[i] + e);
    }
    let scores: Vec<f64> = (0..n)
        .map(|k| {
            let win = prefix[k + m] - prefix[k];
            if win <= 0.0 {
                0.0
            } else {
                (a[k] * n as f64).norm() / (word_energy * win).sqrt()
            }
        })
        .collect();
    let (offset, peak) = scores
        .iter()
        .copied()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty");
    let side = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let d = (*k as isize - offset as isize).rem_euclid(n as isize) as usize;
            d > 1 && d < n - 1
        })
        .map(|(_, v)| *v)
        .fold(0.0f64, f64::max);
    let psr = if side > 0.0 {
        (peak / side).powi(2)
    } else {
        f64::INFINITY
    };
    if !(psr >= SYNC_PSR_THRESHOLD) {
        return Err(Error::SyncFailure {
            psr,
            threshold: SYNC_PSR_THRESHOLD,
        });
    }
    Ok(SyncResult { offset, peak, psr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{propagate, ChannelState};
    use crate::node::{modulate_node, NodeConfig};
    use crate::signal::{build_frame, gaussian_symbols, FrameLayout, QuadratureFrame};

    fn node(id: u32, carrier: f64) -> NodeConfig {
        NodeConfig {
            node_id: id,
            carrier_hz: carrier,
            baseband_hz: 50e3,
            fiber_length_m: 10e3,
            modulation_variance: 12.0,
            position_xy: [0.0, 0.0],
            pzt: Default::default(),
        }
    }

    fn frame(n: usize, seed: u64) -> QuadratureFrame {
        let layout = FrameLayout::new(10, 10.0, 16).unwrap();
        build_frame(&gaussian_symbols(n, 12.0, seed).unwrap(), &layout).unwrap()
    }

    fn registry(ids: &[(u32, f64)]) -> BandRegistry {
        let mut r = BandRegistry::new();
        for &(id, c) in ids {
            r.register(&node(id, c)).unwrap();
        }
        r
    }

    fn quad_var(w: &ComplexWaveform) -> (f64, f64) {
        let re: Vec<f64> = w.samples.iter().map(|s| s.re).collect();
        let im: Vec<f64> = w.samples.iter().map(|s| s.im).collect();
        (
            dsp::variance(&re) / w.snu_scale,
            dsp::variance(&im) / w.snu_scale,
        )
    }

    #[test]
    fn vacuum_only_detection() {
        let mut z = ComplexWaveform::zeros(100_000, 1e6).unwrap();
        z.snu_scale = 26.0;
        let out = detect(&z, &DetectorParams::ideal(), 5).unwrap();
        let (a, b) = quad_var(&out);
        assert!((a - 1.0).abs() < 0.02 && (b - 1.0).abs() < 0.02, "{a} {b}");
        let out = detect(&z, &DetectorParams::default(), 5).unwrap();
        let (a, b) = quad_var(&out);
        assert!(
            (a - 1.18).abs() < 0.02 && (b - 1.18).abs() < 0.02,
            "{a} {b}"
        );
    }

    #[test]
    fn strong_tone_snr_scales_with_eta() {
        let n = 200_000;
        let tone: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(100.0, 0.01 * i as f64))
            .collect();
        let w = ComplexWaveform::new(tone, 1e6, 1.0).unwrap();
        let det = DetectorParams {
            quantum_efficiency: 0.42,
            electronic_noise_snu: 0.0,
            ..DetectorParams::default()
        };
        let out = detect(&w, &det, 9).unwrap();
        // Signal power scales by η, noise stays at one vacuum unit per
        // quadrature: SNR ratio versus an ideal detector is η.
        let noise: Vec<f64> = out
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(o, s)| (o - s * 0.42f64.sqrt()).re)
            .collect();
        let snr = 0.42 * w.power() / (2.0 * dsp::variance(&noise));
        let ideal = w.power() / 2.0;
        assert!((snr / ideal - 0.42).abs() < 0.01, "{}", snr / ideal);
    }

    #[test]
    fn calibration_tracks_lo_power() {
        let det = DetectorParams::default();
        let s1 = calibrate_detector(200_000, 1e6, 26.0, &det, 26, 1).unwrap();
        let det2 = DetectorParams {
            lo_power: 2.0,
            ..det
        };
        let s2 = calibrate_detector(200_000, 1e6, 26.0, &det2, 26, 1).unwrap();
        assert!((s1 / 26.0 - 1.0).abs() < 0.03, "{s1}");
        assert!((s2 / s1 - 2.0).abs() < 0.06, "{}", s2 / s1);
    }

    #[test]
    fn calibrate_then_remeasure() {
        let det = DetectorParams::ideal();
        let n = 260_000;
        let scale = calibrate_detector(n, 1e6, 26.0, &det, 26, 3).unwrap();
        let mut z = ComplexWaveform::zeros(n, 1e6).unwrap();
        z.snu_scale = 26.0;
        let out = detect(&z, &det, 77).unwrap().with_snu_scale(scale).unwrap();
        let (a, b) = quad_var(&out);
        assert!((a - 1.0).abs() < 0.02 && (b - 1.0).abs() < 0.02);
    }

    #[test]
    fn loopback_recovers_symbols() {
        // 16 + 1990 + 199 symbols: a multiple of 5 keeps the carrier on the grid.
        let f = frame(1990, 1);
        let n = node(1, 100e3);
        let w = modulate_node(&f, &n, 1e6).unwrap();
        let q = demodulate(&w, n.carrier_hz, n.baseband_hz).unwrap();
        assert_eq!(q.len(), f.len());
        for (got, want) in q.as_complex().iter().zip(&f.symbols) {
            assert!((got - want).norm() < 1e-6 * want.norm().max(1.0));
        }
    }

    #[test]
    fn loopback_rotations() {
        let f = frame(490, 2);
        let n = node(1, 200e3);
        let w = modulate_node(&f, &n, 1e6).unwrap();
        for theta in [PI / 2.0, 0.3] {
            let state = ChannelState {
                static_phase_rad: theta,
                ..ChannelState::identity()
            };
            let q =
                demodulate(&propagate(&w, &state).unwrap(), n.carrier_hz, n.baseband_hz).unwrap();
            let (c, s) = (theta.cos(), theta.sin());
            for (i, a) in f.symbols.iter().enumerate() {
                let want = (a.re * c - a.im * s, a.re * s + a.im * c);
                assert!((q.x[i] - want.0).abs() < 1e-6 * (1.0 + a.norm()));
                assert!((q.p[i] - want.1).abs() < 1e-6 * (1.0 + a.norm()));
            }
        }
    }

    #[test]
    fn band_isolation() {
        let reg = registry(&[(1, 100e3), (2, 200e3), (3, 300e3)]);
        let waves: Vec<ComplexWaveform> = [(1, 100e3), (2, 200e3), (3, 300e3)]
            .iter()
            .map(|&(id, c)| modulate_node(&frame(1000, id as u64), &node(id, c), 1e6).unwrap())
            .collect();
        let mix = crate::channel::combine(&waves).unwrap();
        let sel = band_select(&mix, &reg, 2).unwrap();
        let leak: Vec<Complex64> = sel
            .samples
            .iter()
            .zip(&waves[1].samples)
            .map(|(a, b)| a - b)
            .collect();
        let leak_power = leak.iter().map(|v| v.norm_sqr()).sum::<f64>() / leak.len() as f64;
        assert!(10.0 * (leak_power / waves[1].power()).log10() < -30.0);
        assert_eq!(
            band_select(&mix, &reg, 9).unwrap_err(),
            Error::IllegalBand(9)
        );
    }

    #[test]
    fn band_select_unit_gain() {
        let reg = registry(&[(1, 100e3)]);
        let n = 10_000;
        let tone: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * 110e3 * i as f64 / 1e6))
            .collect();
        let w = ComplexWaveform::new(tone, 1e6, 1.0).unwrap();
        let out = band_select(&w, &reg, 1).unwrap();
        let gain_db = 10.0 * (out.power() / w.power()).log10();
        assert!(gain_db.abs() < 0.1);
    }

    #[test]
    fn demodulated_vacuum_floor() {
        let reg = registry(&[(1, 100e3)]);
        let det = DetectorParams::default();
        let mut z = ComplexWaveform::zeros(26 * 100_000, 1e6).unwrap();
        z.snu_scale = 26.0;
        let d = detect(&z, &det, 4).unwrap();
        let q = demodulate(&band_select(&d, &reg, 1).unwrap(), 100e3, 50e3).unwrap();
        let vx = dsp::variance(&q.x);
        let vp = dsp::variance(&q.p);
        assert!((vx - 1.18).abs() < 0.03 * 1.18, "{vx}");
        assert!((vp - 1.18).abs() < 0.03 * 1.18, "{vp}");
    }

    #[test]
    fn demodulate_rejects_bad_band() {
        let w = ComplexWaveform::zeros(2600, 1e6).unwrap();
        assert!(matches!(
            demodulate(&w, 100e3, 600e3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            demodulate(&w, 490e3, 50e3),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn sync_stream(offset: usize, noise_var: f64, seed: u64) -> (QuadratureStream, Vec<Complex64>) {
        let word = crate::signal::default_sync_word(64, 1.0);
        let n = 4096;
        let mut rng = dsp::rng(seed, 0);
        let mut s = dsp::complex_noise(&mut rng, n, noise_var / 2.0);
        for (i, w) in word.iter().enumerate() {
            s[offset + i] += w;
        }
        (QuadratureStream::from_complex(&s, 1.0), word)
    }

    #[test]
    fn sync_finds_offset() {
        let (q, w) = sync_stream(1234, 0.0, 1);
        assert_eq!(frame_sync(&q, &w).unwrap().offset, 1234);
        let (q, w) = sync_stream(1234, 1.0, 2);
        let r = frame_sync(&q, &w).unwrap();
        assert_eq!(r.offset, 1234);
        // Global rotation leaves the result unchanged.
        let rot: Vec<Complex64> = q
            .as_complex()
            .iter()
            .map(|v| v * Complex64::from_polar(1.0, 2.1))
            .collect();
        let r2 = frame_sync(&QuadratureStream::from_complex(&rot, 1.0), &w).unwrap();
        assert_eq!(r2.offset, r.offset);
        assert!((r2.psr - r.psr).abs() < 1e-9 * r.psr);
    }

    #[test]
    fn sync_fails_on_noise() {
        let word = crate::signal::default_sync_word(64, 1.0);
        let mut rng = dsp::rng(8, 0);
        let s = dsp::complex_noise(&mut rng, 4096, 0.5);
        let err = frame_sync(&QuadratureStream::from_complex(&s, 1.0), &word).unwrap_err();
        assert!(matches!(err, Error::SyncFailure { .. }));
    }
}
