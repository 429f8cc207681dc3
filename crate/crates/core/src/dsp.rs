//! Shared DSP plumbing: FFT helpers, the root-raised-cosine pulse defined on
//! the DFT grid, Welch PSD estimation and deterministic random streams.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

/// Roll-off of the root-raised-cosine pulse used by every transmitter and
/// matched filter in the network.
pub const RRC_ROLL_OFF: f64 = 0.3;

type PlanCache = Mutex<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)>;

fn planner() -> &'static PlanCache {
    static PLANNER: OnceLock<PlanCache> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())))
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut guard = planner().lock().expect("fft planner poisoned");
    let (planner, cache) = &mut *guard;
    cache
        .entry((len, inverse))
        .or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// In-place forward DFT (unnormalized).
pub fn fft(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), false).process(buf);
    }
}

/// In-place inverse DFT, normalized by `1/N` so that `ifft(fft(x)) == x`.
pub fn ifft(buf: &mut [Complex64]) {
    let n = buf.len();
    if n > 1 {
        plan(n, true).process(buf);
    }
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Signed frequency of DFT bin `k` for an `n`-point transform at rate `fs`.
pub fn bin_frequency(k: usize, n: usize, fs: f64) -> f64 {
    let k = if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    k * fs / n as f64
}

/// Bin index nearest to a (signed) frequency.
pub fn frequency_bin(f: f64, n: usize, fs: f64) -> usize {
    let k = (f / fs * n as f64).round() as i64;
    k.rem_euclid(n as i64) as usize
}

/// Raised-cosine spectrum normalized to unit height. Its copies shifted by
/// multiples of `symbol_rate` sum to exactly one.
pub fn raised_cosine(f: f64, symbol_rate: f64, roll_off: f64) -> f64 {
    let f = f.abs();
    let lo = (1.0 - roll_off) * symbol_rate / 2.0;
    let hi = (1.0 + roll_off) * symbol_rate / 2.0;
    if f <= lo {
        1.0
    } else if f >= hi {
        0.0
    } else {
        0.5 * (1.0 + (PI / (roll_off * symbol_rate) * (f - lo)).cos())
    }
}

/// DFT of the unit-energy, zero-phase RRC pulse sampled on an `n`-point grid
/// with `sps` samples per symbol.
///
/// The squared response folds to exactly `sps` at every symbol-rate alias, so
/// transmit shaping followed by matched filtering is free of ISI up to
/// floating point.
pub fn rrc_response(n: usize, sps: usize) -> Vec<f64> {
    let symbol_rate = 1.0 / sps as f64;
    (0..n)
        .map(|k| {
            let f = bin_frequency(k, n, 1.0);
            (sps as f64 * raised_cosine(f, symbol_rate, RRC_ROLL_OFF)).sqrt()
        })
        .collect()
}

/// Symbol rate carried by a band of total width `bandwidth_hz` once the RRC
/// excess bandwidth is accounted for.
pub fn symbol_rate_for_band(bandwidth_hz: f64) -> f64 {
    bandwidth_hz / (1.0 + RRC_ROLL_OFF)
}

/// Integer samples-per-symbol for a band at `sample_rate`, if one exists.
pub fn samples_per_symbol(sample_rate: f64, bandwidth_hz: f64) -> Option<usize> {
    let sps = sample_rate / symbol_rate_for_band(bandwidth_hz);
    let rounded = sps.round();
    if rounded >= 2.0 && (sps - rounded).abs() < 1e-6 * sps {
        Some(rounded as usize)
    } else {
        None
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Two-sided Welch PSD of a complex series: Hann window, 50 % overlap.
///
/// Returns `(frequencies, psd)` with frequencies in DFT order (0, +, -),
/// PSD in power per Hz. A series shorter than one segment is analysed as a
/// single zero-padded segment.
pub fn welch_complex(x: &[Complex64], fs: f64, segment: usize) -> (Vec<f64>, Vec<f64>) {
    let seg = segment.max(2);
    let win = hann(seg);
    let win_energy: f64 = win.iter().map(|w| w * w).sum();
    let step = (seg / 2).max(1);
    let mut acc = vec![0.0; seg];
    let mut count = 0usize;
    let mut start = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); seg];
    loop {
        for (i, b) in buf.iter_mut().enumerate() {
            let v = x.get(start + i).copied().unwrap_or_default();
            *b = v * win[i];
        }
        fft(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += step;
        if start + seg > x.len() {
            break;
        }
    }
    let scale = 1.0 / (fs * win_energy * count as f64);
    let psd = acc.into_iter().map(|a| a * scale).collect();
    let freqs = (0..seg).map(|k| bin_frequency(k, seg, fs)).collect();
    (freqs, psd)
}

/// One-sided Welch PSD of a real series (Hann, 50 % overlap).
pub fn welch_real(x: &[f64], fs: f64, segment: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    let z: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    let (_, two_sided) = welch_complex(&z, fs, segment);
    let seg = two_sided.len();
    let half = seg / 2;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut psd = Vec::with_capacity(half + 1);
    for (k, &p) in two_sided.iter().enumerate().take(half + 1) {
        freqs.push(k as f64 * fs / seg as f64);
        let edge = k == 0 || (seg % 2 == 0 && k == half);
        psd.push(if edge { p } else { 2.0 * p });
    }
    (freqs, psd)
}

/// Deterministic generator for one logical stream of a seeded run.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Circularly-symmetric complex Gaussian noise with the given variance per
/// quadrature.
pub fn complex_noise<R: Rng>(rng: &mut R, n: usize, var_per_quadrature: f64) -> Vec<Complex64> {
    let sd = var_per_quadrature.max(0.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// Wrap an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
pub fn next_smooth(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}
