//! Return-path fiber model: loss and splitter, static rotation, vibration
//! phase from the PZT/photoelastic model, castdown dips and excess noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::ComplexWaveform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiberConstants {
    pub wavelength_m: f64,
    pub refractive_index: f64,
    pub poisson_ratio: f64,
    pub p11: f64,
    pub p12: f64,
    pub attenuation_db_per_km: f64,
    pub light_speed_fiber_mps: f64,
}

impl Default for FiberConstants {
    fn default() -> Self {
        Self {
            wavelength_m: 1550e-9,
            refractive_index: 1.468,
            poisson_ratio: 0.17,
            p11: 0.121,
            p12: 0.270,
            attenuation_db_per_km: 0.2,
            light_speed_fiber_mps: 2.0e8,
        }
    }
}

impl FiberConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wavelength_m", self.wavelength_m),
            ("poisson_ratio", self.poisson_ratio),
            ("p11", self.p11),
            ("p12", self.p12),
            ("attenuation_db_per_km", self.attenuation_db_per_km),
            ("light_speed_fiber_mps", self.light_speed_fiber_mps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(format!("fiber.{name}"), "must be positive"));
            }
        }
        if !(self.refractive_index > 1.0 && self.refractive_index < 2.0) {
            return Err(Error::config(
                "fiber.refractive_index",
                "must lie in (1, 2)",
            ));
        }
        if !(self.poisson_ratio < 0.5) {
            return Err(Error::config("fiber.poisson_ratio", "must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Effective strain-optic factor n − ½n³[(1−μ)p₁₂ − μp₁₁].
    pub fn k_fiber(&self) -> f64 {
        let n = self.refractive_index;
        let mu = self.poisson_ratio;
        n - 0.5 * n.powi(3) * ((1.0 - mu) * self.p12 - mu * self.p11)
    }

    /// Optical phase per meter of fiber elongation (rad/m).
    pub fn phase_per_meter(&self) -> f64 {
        2.0 * PI / self.wavelength_m * self.k_fiber()
    }

    /// Return-path transmittance of `length_m` of fiber followed by a 1/N
    /// splitter.
    pub fn transmittance(&self, length_m: f64, capacity: usize) -> f64 {
        10f64.powf(-self.attenuation_db_per_km * length_m / 1000.0 / 10.0) / capacity.max(1) as f64
    }
}

/// Voltage-to-elongation lookup measured on an open-loop PZT. The optional
/// falling branch is used while the voltage decreases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisCurve {
    pub rising: Vec<(f64, f64)>,
    #[serde(default)]
    pub falling: Option<Vec<(f64, f64)>>,
}

impl HysteresisCurve {
    pub fn new(rising: Vec<(f64, f64)>, falling: Option<Vec<(f64, f64)>>) -> Result<Self> {
        let curve = Self { rising, falling };
        curve.validate()?;
        Ok(curve)
    }

    /// Parse a two-column `voltage,length` table. Blank lines, `#` comments
    /// and a non-numeric header line are skipped.
    pub fn parse_table(text: &str) -> Result<Vec<(f64, f64)>> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split([',', ' ', '\t']).filter(|c| !c.is_empty());
            let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
                return Err(Error::Parse(format!(
                    "line {}: expected two columns",
                    i + 1
                )));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(v), Ok(l)) => rows.push((v, l)),
                _ if rows.is_empty() => continue,
                _ => return Err(Error::Parse(format!("line {}: not numeric", i + 1))),
            }
        }
        Ok(rows)
    }

    fn validate(&self) -> Result<()> {
        check_branch(&self.rising)?;
        if let Some(f) = &self.falling {
            check_branch(f)?;
        }
        Ok(())
    }

    fn branch(&self, rising: bool) -> &[(f64, f64)] {
        match (&self.falling, rising) {
            (Some(f), false) => f,
            _ => &self.rising,
        }
    }
}

fn check_branch(b: &[(f64, f64)]) -> Result<()> {
    if b.len() < 2 {
        return Err(Error::invalid(
            "hysteresis branch needs at least two points",
        ));
    }
    if b.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::invalid(
            "hysteresis branch voltages must be strictly increasing",
        ));
    }
    Ok(())
}

/// Piecewise-linear interpolation, extrapolating from the end segments.
fn interp(table: &[(f64, f64)], x: f64) -> f64 {
    let i = table.partition_point(|p| p.0 < x).clamp(1, table.len() - 1);
    let (x0, y0) = table[i - 1];
    let (x1, y1) = table[i];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PztParams {
    /// Piezoelectric coefficient d (m/V).
    pub d_coeff: f64,
    pub outer_radius_m: f64,
    pub thickness_m: f64,
    pub wound_fiber_m: f64,
    pub hysteresis: Option<HysteresisCurve>,
}

impl Default for PztParams {
    fn default() -> Self {
        // d picked so that a 10 V swing stretches the fiber by ~0.19 mm,
        // i.e. roughly 890 rad with the default fiber constants.
        Self {
            d_coeff: 8.77e-7,
            outer_radius_m: 0.0275,
            thickness_m: 3.95e-3,
            wound_fiber_m: 2.5,
            hysteresis: None,
        }
    }
}

impl PztParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_coeff", self.d_coeff),
            ("outer_radius_m", self.outer_radius_m),
            ("thickness_m", self.thickness_m),
            ("wound_fiber_m", self.wound_fiber_m),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("pzt.{name}"), "must be positive"));
            }
        }
        if let Some(h) = &self.hysteresis {
            h.validate()?;
        }
        Ok(())
    }

    /// Linear elongation per volt, dπr/t.
    pub fn meters_per_volt(&self) -> f64 {
        self.d_coeff * PI * self.outer_radius_m / self.thickness_m
    }

    /// Fiber elongation for a voltage series.
    pub fn length_change(&self, voltage: &[f64]) -> Vec<f64> {
        match &self.hysteresis {
            None => {
                let k = self.meters_per_volt();
                voltage.iter().map(|v| v * k).collect()
            }
            Some(curve) => {
                let mut rising = true;
                voltage
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if i > 0 && v != voltage[i - 1] {
                            rising = v > voltage[i - 1];
                        }
                        interp(curve.branch(rising), v)
                    })
                    .collect()
            }
        }
    }
}

/// Optical phase change produced by driving the PZT with `voltage`.
pub fn pzt_phase(voltage: &[f64], pzt: &PztParams, fiber: &FiberConstants) -> Result<Vec<f64>> {
    pzt.validate()?;
    fiber.validate()?;
    if voltage.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("voltage series must be finite"));
    }
    let k = fiber.phase_per_meter();
    Ok(pzt
        .length_change(voltage)
        .into_iter()
        .map(|l| l * k)
        .collect())
}

/// Default activity threshold for the castdown gate: one cycle per second.
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 2.0 * PI;

/// Everything a node's return path does to its waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub transmittance: f64,
    pub static_phase_rad: f64,
    /// Vibration phase φ(t); empty means none.
    pub vibration_phase: Vec<f64>,
    /// Rate of `vibration_phase`; `None` means the waveform's own rate.
    pub vibration_rate_hz: Option<f64>,
    pub excess_noise_snu: f64,
    pub castdown_db: f64,
    /// |dφ/dt| (rad/s) above which the castdown dip applies.
    pub activity_threshold: f64,
    /// Restrict excess noise to `(center, width)` Hz so it stays inside the
    /// node's band. `None` injects white noise over the full sample band.
    pub noise_band: Option<(f64, f64)>,
    pub noise_seed: u64,
}

impl ChannelState {
    pub fn identity() -> Self {
        Self {
            transmittance: 1.0,
            static_phase_rad: 0.0,
            vibration_phase: Vec::new(),
            vibration_rate_hz: None,
            excess_noise_snu: 0.0,
            castdown_db: 0.0,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            noise_band: None,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.transmittance > 0.0 && self.transmittance <= 1.0) {
            return Err(Error::invalid("transmittance must lie in (0, 1]"));
        }
        if !(self.excess_noise_snu >= 0.0) {
            return Err(Error::invalid("excess noise must be non-negative"));
        }
        if !(self.castdown_db >= 0.0) {
            return Err(Error::invalid("castdown depth must be non-negative"));
        }
        if self.vibration_phase.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vibration phase must be finite"));
        }
        Ok(())
    }

    /// Vibration phase resampled onto `n` samples at `rate` (linear
    /// interpolation), or `None` if there is no vibration.
    fn phase_at(&self, n: usize, rate: f64) -> Result<Option<Vec<f64>>> {
        if self.vibration_phase.is_empty() {
            return Ok(None);
        }
        let src_rate = self.vibration_rate_hz.unwrap_or(rate);
        if src_rate == rate {
            if self.vibration_phase.len() < n {
                return Err(Error::invalid(format!(
                    "vibration phase has {} samples, waveform needs {n}",
                    self.vibration_phase.len()
                )));
            }
            return Ok(Some(self.vibration_phase[..n].to_vec()));
        }
        let last = (self.vibration_phase.len() - 1) as f64 / src_rate;
        let needed = (n - 1) as f64 / rate;
        if needed > last + 1e-12 {
            return Err(Error::invalid(format!(
                "vibration phase covers {last} s, waveform needs {needed} s"
            )));
        }
        let v = &self.vibration_phase;
        Ok(Some(
            (0..n)
                .map(|i| {
                    let pos = i as f64 / rate * src_rate;
                    let k = (pos.floor() as usize).min(v.len() - 2);
                    let f = pos - k as f64;
                    v[k] + (v[k + 1] - v[k]) * f
                })
                .collect(),
        ))
    }
}

/// Amplitude factor for each sample: the castdown dip where the phase moves
/// faster than the activity threshold, unity elsewhere.
fn castdown_gain(phase: &[f64], rate: f64, state: &ChannelState) -> Vec<f64> {
    let dip = 10f64.powf(-state.castdown_db / 20.0);
    let n = phase.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n {
                (i, i + 1)
            } else {
                (i.saturating_sub(1), i)
            };
            let slope = if a == b {
                0.0
            } else {
                (phase[b] - phase[a]) * rate
            };
            if slope.abs() > state.activity_threshold {
                dip
            } else {
                1.0
            }
        })
        .collect()
}

/// Send a waveform through one node's return path.
pub fn propagate(waveform: &ComplexWaveform, state: &ChannelState) -> Result<ComplexWaveform> {
    state.validate()?;
    let n = waveform.len();
    let fs = waveform.sample_rate;
    let mut field = waveform.samples.clone();
    if state.excess_noise_snu > 0.0 {
        let mut rng = dsp::rng(state.noise_seed, 0);
        let var = state.excess_noise_snu / 2.0 * waveform.snu_scale;
        let noise = match state.noise_band {
            Some((center, width)) => band_noise(&mut rng, n, fs, center, width, var),
            None => dsp::complex_noise(&mut rng, n, var),
        };
        for (f, e) in field.iter_mut().zip(&noise) {
            *f += e;
        }
    }
    let amp = state.transmittance.sqrt();
    let phase = state.phase_at(n, fs)?;
    match phase {
        None => {
            let rot = Complex64::from_polar(amp, state.static_phase_rad);
            for f in field.iter_mut() {
                *f *= rot;
            }
        }
        Some(phi) => {
            let gain = if state.castdown_db > 0.0 {
                castdown_gain(&phi, fs, state)
            } else {
                vec![1.0; n]
            };
            for ((f, p), g) in field.iter_mut().zip(&phi).zip(&gain) {
                *f *= Complex64::from_polar(amp * g, state.static_phase_rad + p);
            }
        }
    }
    ComplexWaveform::new(field, fs, waveform.snu_scale)
}

/// White noise of per-quadrature variance `var` passed through an ideal
/// band-pass, drawn directly in the frequency domain.
fn band_noise<R: rand::Rng>(
    rng: &mut R,
    n: usize,
    fs: f64,
    center: f64,
    width: f64,
    var: f64,
) -> Vec<Complex64> {
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let lo = ((center - width / 2.0) / fs * n as f64).floor() as i64 - 1;
    let hi = (((center + width / 2.0) / fs * n as f64).ceil() as i64 + 1).min(lo + n as i64 - 1);
    let bins: Vec<usize> = (lo..=hi)
        .map(|m| m.rem_euclid(n as i64) as usize)
        .filter(|&k| (dsp::bin_frequency(k, n, fs) - center).abs() <= width / 2.0)
        .collect();
    let draws = dsp::complex_noise(rng, bins.len(), var * n as f64);
    for (k, v) in bins.into_iter().zip(draws) {
        x[k] = v;
    }
    dsp::ifft(&mut x);
    x
}

/// Zero every DFT bin outside `[center - width/2, center + width/2]`.
pub(crate) fn band_limit(x: &mut [Complex64], fs: f64, center: f64, width: f64) {
    let n = x.len();
    dsp::fft(x);
    for (k, v) in x.iter_mut().enumerate() {
        let f = dsp::bin_frequency(k, n, fs);
        if (f - center).abs() > width / 2.0 {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    dsp::ifft(x);
}

/// Splitter: sample-wise sum of every node's channel output.
pub fn combine(waveforms: &[ComplexWaveform]) -> Result<ComplexWaveform> {
    let first = waveforms
        .first()
        .ok_or_else(|| Error::invalid("nothing to combine"))?;
    for w in &waveforms[1..] {
        if w.sample_rate != first.sample_rate {
            return Err(Error::invalid("sample rates differ"));
        }
        if w.len() != first.len() {
            return Err(Error::invalid("waveform lengths differ"));
        }
        if w.snu_scale != first.snu_scale {
            return Err(Error::invalid("waveforms use different SNU scales"));
        }
    }
    let mut out = first.samples.clone();
    for w in &waveforms[1..] {
        for (o, s) in out.iter_mut().zip(&w.samples) {
            *o += s;
        }
    }
    ComplexWaveform::new(out, first.sample_rate, first.snu_scale)
}
