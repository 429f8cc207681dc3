//! Pilot-aided phase recovery, channel parameter estimation and the
//! asymptotic heterodyne/reverse-reconciliation secret key rate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::receiver::{DetectorParams, QuadratureStream};
use crate::signal::{FrameLayout, Slot, SymbolSequence};

/// Pilot SNR below which phase estimates are refused.
pub const PILOT_SNR_THRESHOLD: f64 = 3.0;

/// Minimum aligned symbol count for parameter estimation.
pub const MIN_ESTIMATION_SYMBOLS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub t_hat: f64,
    pub eps_hat: f64,
    pub v_a_hat: f64,
    pub n_used: usize,
    /// Set when finite sampling pushed ε̂ below zero. The value is kept.
    pub eps_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkrInputs {
    pub v_a: f64,
    pub transmittance: f64,
    pub excess_noise: f64,
    pub eta: f64,
    pub v_el: f64,
    pub beta: f64,
    pub rep_rate_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkrReport {
    pub inputs: SkrInputs,
    pub chi_line: f64,
    pub chi_het: f64,
    pub chi_tot: f64,
    pub i_ab: f64,
    pub chi_be: f64,
    pub k_r: f64,
    pub k_bits_per_s: f64,
    pub lambdas: [f64; 5],
    pub abcd: [f64; 4],
    /// Key distribution is abandoned when the rate is not positive.
    pub aborted: bool,
}

/// Von Neumann entropy of a thermal state with mean photon number `x`:
/// (x+1)log₂(x+1) − x log₂x, with the x → 0 limit taken explicitly.
pub fn g_entropy(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    (x + 1.0) * (x + 1.0).log2() - x * x.log2()
}

/// Asymptotic key rate for Gaussian-modulated coherent states with
/// heterodyne detection and reverse reconciliation, trusted detector noise.
pub fn secret_key_rate(
    v_a: f64,
    t: f64,
    eps: f64,
    det: &DetectorParams,
    beta: f64,
    rep_rate_hz: f64,
) -> Result<SkrReport> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("transmittance {t} outside (0, 1]")));
    }
    if !(v_a > 0.0) {
        return Err(Error::invalid("modulation variance must be positive"));
    }
    if !eps.is_finite() {
        return Err(Error::invalid("excess noise must be finite"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(
            "reconciliation efficiency must lie in (0, 1]",
        ));
    }
    if !(rep_rate_hz > 0.0) {
        return Err(Error::invalid("repetition rate must be positive"));
    }
    let eta = det.quantum_efficiency;
    let v_el = det.electronic_noise_snu;
    if !(eta > 0.0 && eta <= 1.0) || !(v_el >= 0.0) {
        return Err(Error::invalid("detector parameters out of range"));
    }

    let v = v_a + 1.0;
    let chi_line = 1.0 / t - 1.0 + eps;
    let chi_het = (1.0 + (1.0 - eta) + 2.0 * v_el) / eta;
    let chi_tot = chi_line + chi_het / t;
    let i_ab = ((v + chi_tot) / (1.0 + chi_tot)).log2();

    let a = v * v * (1.0 - 2.0 * t) + 2.0 * t + t * t * (v + chi_line).powi(2);
    let b = t * t * (v * chi_line + 1.0).powi(2);
    let denom = (t * (v + chi_tot)).powi(2);
    let c = (a * chi_het * chi_het
        + b
        + 1.0
        + 2.0 * chi_het * (v * b.sqrt() + t * (v + chi_line))
        + 2.0 * t * (v * v - 1.0))
        / denom;
    let d = ((v + b.sqrt() * chi_het) / (t * (v + chi_tot))).powi(2);

    let (l1, l2) = symplectic_pair(a, b);
    let (l3, l4) = symplectic_pair(c, d);
    let lambdas = [l1, l2, l3, l4, 1.0];
    let chi_be = g_entropy((l1 - 1.0) / 2.0) + g_entropy((l2 - 1.0) / 2.0)
        - g_entropy((l3 - 1.0) / 2.0)
        - g_entropy((l4 - 1.0) / 2.0)
        - g_entropy(0.0);
    let k_r = beta * i_ab - chi_be;
    Ok(SkrReport {
        inputs: SkrInputs {
            v_a,
            transmittance: t,
            excess_noise: eps,
            eta,
            v_el,
            beta,
            rep_rate_hz,
        },
        chi_line,
        chi_het,
        chi_tot,
        i_ab,
        chi_be,
        k_r,
        k_bits_per_s: rep_rate_hz * k_r,
        lambdas,
        abcd: [a, b, c, d],
        aborted: !(k_r > 0.0),
    })
}

/// λ± = sqrt((p ± sqrt(p² − 4q)) / 2). A slightly negative discriminant
/// from rounding is treated as zero.
fn symplectic_pair(p: f64, q: f64) -> (f64, f64) {
    let disc = (p * p - 4.0 * q).max(0.0).sqrt();
    (
        ((p + disc) / 2.0).sqrt(),
        ((p - disc) / 2.0).max(0.0).sqrt(),
    )
}

/// Slot map of a frame of `frame_len` symbols built with `layout`.
pub fn frame_slots(layout: &FrameLayout, frame_len: usize) -> Result<Vec<Slot>> {
    layout.validate()?;
    let sync = layout.sync_word.len();
    if frame_len <= sync {
        return Err(Error::invalid("frame shorter than its sync word"));
    }
    let payload = frame_len - sync;
    let spacing = layout.pilot_spacing();
    let mut slots = Vec::with_capacity(frame_len);
    slots.extend((0..sync).map(Slot::Sync));
    let (mut pilot, mut quantum) = (0, 0);
    for i in 0..payload {
        if i % spacing == 0 {
            slots.push(Slot::Pilot(pilot));
            pilot += 1;
        } else {
            slots.push(Slot::Quantum(quantum));
            quantum += 1;
        }
    }
    Ok(slots)
}

/// Pilot-derived phase reference for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub slots: Vec<Slot>,
    /// Frame positions of the pilots.
    pub pilot_positions: Vec<usize>,
    /// Wrapped phase at each pilot after smoothing.
    pub pilot_phase: Vec<f64>,
    /// Continuous phase at every frame position.
    pub per_symbol: Vec<f64>,
    /// SNR of the (smoothed) pilot phasor.
    pub snr: f64,
}

/// Phase reference from the pilots, θ̂ = atan2(P, X).
///
/// Pilot phasors are averaged over a centered window of `smoothing` pilots
/// (1 disables averaging) before taking the angle; the resulting pilot
/// phases are unwrapped and linearly interpolated across the quantum slots.
pub fn pilot_phase_estimate(
    stream: &QuadratureStream,
    layout: &FrameLayout,
    smoothing: usize,
) -> Result<PhaseTrace> {
    if stream.frame_offset.is_none() {
        return Err(Error::invalid("stream is not frame-synchronized"));
    }
    let slots = frame_slots(layout, stream.len())?;
    let amp = layout.pilot_amplitude;
    let mut positions = Vec::new();
    let mut raw = Vec::new();
    for (i, s) in slots.iter().enumerate() {
        if matches!(s, Slot::Pilot(_)) {
            positions.push(i);
            raw.push(stream.at_frame(i) / amp);
        }
    }
    if raw.is_empty() {
        return Err(Error::invalid("frame carries no pilots"));
    }
    let w = smoothing.max(1);
    let smoothed = moving_average(&raw, w);
    let snr = pilot_snr(&raw, &smoothed, w);
    if !(snr >= PILOT_SNR_THRESHOLD) {
        return Err(Error::PhaseEstimateUnreliable {
            snr,
            threshold: PILOT_SNR_THRESHOLD,
        });
    }
    let pilot_phase: Vec<f64> = smoothed.iter().map(|z| z.im.atan2(z.re)).collect();
    let continuous = crate::sensing::unwrap_phase(&pilot_phase);
    let per_symbol = interpolate(&positions, &continuous, slots.len());
    Ok(PhaseTrace {
        slots,
        pilot_positions: positions,
        pilot_phase,
        per_symbol,
        snr,
    })
}

fn moving_average(z: &[Complex64], w: usize) -> Vec<Complex64> {
    if w <= 1 {
        return z.to_vec();
    }
    let n = z.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(Complex64::new(0.0, 0.0));
    for (i, v) in z.iter().enumerate() {
        prefix.push(prefix[i] + v);
    }
    let half = w / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Power of the smoothed pilot phasor over the noise power left in it.
/// Noise is estimated from first differences of the raw pilots, which
/// cancels any slowly varying phase.
fn pilot_snr(raw: &[Complex64], smoothed: &[Complex64], w: usize) -> f64 {
    let signal = smoothed.iter().map(|z| z.norm_sqr()).sum::<f64>() / smoothed.len() as f64;
    if raw.len() < 2 {
        return f64::INFINITY;
    }
    let diff = raw
        .windows(2)
        .map(|p| (p[1] - p[0]).norm_sqr())
        .sum::<f64>()
        / (2.0 * (raw.len() - 1) as f64);
    let eff = w.min(raw.len()) as f64;
    let noise = diff / eff;
    if noise <= 0.0 {
        return f64::INFINITY;
    }
    // The smoothed power still contains the residual noise; remove it.
    ((signal - noise) / noise).max(0.0)
}

fn interpolate(positions: &[usize], values: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let first = positions[0];
    let last = *positions.last().unwrap();
    for (i, o) in out.iter_mut().enumerate() {
        *o = if i <= first {
            values[0]
        } else if i >= last {
            values[values.len() - 1]
        } else {
            let j = positions.partition_point(|&p| p <= i) - 1;
            let (p0, p1) = (positions[j], positions[j + 1]);
            let f = (i - p0) as f64 / (p1 - p0) as f64;
            values[j] + (values[j + 1] - values[j]) * f
        };
    }
    out
}

/// Rotate every quantum symbol by −θ̂ and drop sync and pilot slots.
pub fn phase_correct(stream: &QuadratureStream, trace: &PhaseTrace) -> Result<QuadratureStream> {
    if trace.slots.len() != stream.len() || trace.per_symbol.len() != stream.len() {
        return Err(Error::invalid("phase trace does not cover the stream"));
    }
    let mut out = Vec::with_capacity(stream.len());
    for (i, slot) in trace.slots.iter().enumerate() {
        if matches!(slot, Slot::Quantum(_)) {
            out.push(stream.at_frame(i) * Complex64::from_polar(1.0, -trace.per_symbol[i]));
        }
    }
    Ok(QuadratureStream::from_complex(&out, stream.symbol_rate))
}

/// Regress Bob's quadratures on Alice's to estimate T, ε and V_A.
///
/// Alice's symbols are rescaled by √2 (so each quadrature has variance
/// V_A), which puts the transmittance estimate at T̂ = 2t̂²/η for the
/// heterodyne model b = √(ηT/2)·a + noise.
pub fn estimate_params(
    alice: &SymbolSequence,
    bob: &QuadratureStream,
    det: &DetectorParams,
) -> Result<ChannelEstimate> {
    let n = alice.len();
    if n != bob.len() || alice.x.len() != alice.p.len() {
        return Err(Error::invalid(format!(
            "alice has {n} symbols, bob has {}",
            bob.len()
        )));
    }
    if n < MIN_ESTIMATION_SYMBOLS {
        return Err(Error::InsufficientData {
            needed: MIN_ESTIMATION_SYMBOLS,
            got: n,
        });
    }
    let s2 = std::f64::consts::SQRT_2;
    let quads = [(&alice.x, &bob.x), (&alice.p, &bob.p)];
    let mut t_q = [0.0; 2];
    let mut saa = 0.0;
    let mut sab = 0.0;
    let mut sbb = 0.0;
    for (q, (a, b)) in quads.iter().enumerate() {
        let (mut aa, mut ab, mut bb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b.iter()) {
            let x = s2 * x;
            aa += x * x;
            ab += x * y;
            bb += y * y;
        }
        t_q[q] = ab / aa;
        saa += aa;
        sab += ab;
        sbb += bb;
    }
    let corr = sab / (saa * sbb).sqrt();
    if !(corr >= 0.1) {
        return Err(Error::AlignmentError(corr));
    }
    let t_hat = 0.5 * (t_q[0] + t_q[1]);
    let v_el = det.electronic_noise_snu;
    let mut eps = 0.0;
    for (a, b) in quads {
        let resid: Vec<f64> = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| y - t_hat * s2 * x)
            .collect();
        eps += (dsp::variance(&resid) - 1.0 - v_el) / (t_hat * t_hat);
    }
    let eps_hat = eps / 2.0;
    let v_a_hat = dsp::variance(&alice.x) + dsp::variance(&alice.p);
    Ok(ChannelEstimate {
        t_hat: 2.0 * t_hat * t_hat / det.quantum_efficiency,
        eps_hat,
        v_a_hat,
        n_used: n,
        eps_negative: eps_hat < 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{build_frame, deframe, gaussian_symbols};
    use std::f64::consts::PI;

    fn nominal_det() -> DetectorParams {
        DetectorParams::default()
    }

    fn nominal_t() -> f64 {
        10f64.powf(-0.2) / 8.0
    }

    #[test]
    fn nominal_rates() {
        for (eps, want) in [(0.0024, 0.7238), (0.0036, 0.7127), (0.0047, 0.7030)] {
            let r = secret_key_rate(12.0, nominal_t(), eps, &nominal_det(), 0.98, 50e6).unwrap();
            assert!(
                (r.k_bits_per_s / 1e6 - want).abs() < 5e-4,
                "{}",
                r.k_bits_per_s
            );
            assert!(!r.aborted);
            assert_eq!(r.lambdas[4], 1.0);
        }
    }

    #[test]
    fn eigenvalues_at_nominal_point() {
        let r = secret_key_rate(12.0, nominal_t(), 0.0047, &nominal_det(), 0.98, 50e6).unwrap();
        let want = [12.05359, 1.000398, 10.46035, 1.000250];
        for (l, w) in r.lambdas.iter().zip(want) {
            assert!((l - w).abs() < 1e-5 * w, "{l} vs {w}");
        }
    }

    #[test]
    fn noisy_channel_aborts() {
        let r = secret_key_rate(12.0, nominal_t(), 1.0, &nominal_det(), 0.98, 50e6).unwrap();
        assert!(r.k_r < 0.0 && r.aborted);
    }

    #[test]
    fn rejects_bad_transmittance() {
        for t in [0.0, -0.1, 1.5] {
            assert!(matches!(
                secret_key_rate(12.0, t, 0.0, &nominal_det(), 0.98, 50e6),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn g_limits() {
        assert_eq!(g_entropy(0.0), 0.0);
        assert!(g_entropy(1e-300) >= 0.0 && g_entropy(1e-300) < 1e-290);
        assert!((g_entropy(1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slots_match_builder() {
        let layout = FrameLayout::new(4, 1.0, 5).unwrap();
        for n in [1, 4, 8, 9, 37] {
            let f = build_frame(&gaussian_symbols(n, 1.0, 1).unwrap(), &layout).unwrap();
            assert_eq!(frame_slots(&layout, f.len()).unwrap(), f.slots);
        }
    }

    fn rotated_stream(
        frame: &crate::signal::QuadratureFrame,
        phase: impl Fn(usize) -> f64,
    ) -> QuadratureStream {
        let z: Vec<Complex64> = frame
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| s * Complex64::from_polar(1.0, phase(i)))
            .collect();
        let mut q = QuadratureStream::from_complex(&z, 1.0);
        q.frame_offset = Some(0);
        q
    }

    #[test]
    fn noiseless_pilot_phase() {
        let layout = FrameLayout::new(10, 10.0, 16).unwrap();
        let f = build_frame(&gaussian_symbols(1000, 12.0, 1).unwrap(), &layout).unwrap();
        for theta in [0.7, -2.9] {
            let q = rotated_stream(&f, |_| theta);
            let tr = pilot_phase_estimate(&q, &layout, 1).unwrap();
            for p in &tr.pilot_phase {
                assert!((p - theta).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn correct_identity_and_half_turn() {
        let layout = FrameLayout::new(10, 10.0, 16).unwrap();
        let s = gaussian_symbols(500, 12.0, 2).unwrap();
        let f = build_frame(&s, &layout).unwrap();
        let q = rotated_stream(&f, |_| 0.0);
        let tr = pilot_phase_estimate(&q, &layout, 1).unwrap();
        let out = phase_correct(&q, &tr).unwrap();
        assert_eq!(out.x, s.x);
        assert_eq!(out.p, s.p);
        let mut half = tr.clone();
        half.per_symbol.iter_mut().for_each(|v| *v = PI);
        let out = phase_correct(&q, &half).unwrap();
        for i in 0..s.len() {
            assert!((out.x[i] + s.x[i]).abs() < 1e-12);
            assert!((out.p[i] + s.p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_phase_drift_recovered() {
        let layout = FrameLayout::new(10, 10.0, 16).unwrap();
        let s = gaussian_symbols(20_000, 12.0, 3).unwrap();
        let f = build_frame(&s, &layout).unwrap();
        // Slow enough that linear interpolation between pilots is exact to
        // well below the tolerance.
        let q = rotated_stream(&f, |i| 1.5 * (i as f64 * 5e-5).sin() + 2e-6 * i as f64);
        let tr = pilot_phase_estimate(&q, &layout, 1).unwrap();
        let out = phase_correct(&q, &tr).unwrap();
        // Symbols after the last pilot see a held phase.
        let tail = s.len() - layout.pilot_period;
        for i in 0..s.len() {
            let tol = if i < tail { 1e-6 } else { 1e-2 };
            assert!((out.x[i] - s.x[i]).abs() < tol * (1.0 + s.x[i].abs()));
            assert!((out.p[i] - s.p[i]).abs() < tol * (1.0 + s.p[i].abs()));
        }
    }

    #[test]
    fn noise_only_pilots_are_unreliable() {
        let layout = FrameLayout::new(10, 10.0, 16).unwrap();
        let f = build_frame(&gaussian_symbols(5000, 12.0, 1).unwrap(), &layout).unwrap();
        let mut rng = dsp::rng(4, 0);
        let z = dsp::complex_noise(&mut rng, f.len(), 1.0);
        let mut q = QuadratureStream::from_complex(&z, 1.0);
        q.frame_offset = Some(0);
        assert!(matches!(
            pilot_phase_estimate(&q, &layout, 64),
            Err(Error::PhaseEstimateUnreliable { .. })
        ));
        q.frame_offset = None;
        assert!(pilot_phase_estimate(&q, &layout, 1).is_err());
    }

    /// Symbol-level heterodyne model used to exercise the estimator.
    fn bob(
        alice: &SymbolSequence,
        t: f64,
        eps: f64,
        det: &DetectorParams,
        seed: u64,
    ) -> QuadratureStream {
        let mut rng = dsp::rng(seed, 9);
        let n = alice.len();
        let ex = dsp::complex_noise(&mut rng, n, eps / 2.0);
        let vac = dsp::complex_noise(&mut rng, n, 1.0 + det.electronic_noise_snu);
        let g = (det.quantum_efficiency * t).sqrt();
        let z: Vec<Complex64> = (0..n)
            .map(|i| g * (Complex64::new(alice.x[i], alice.p[i]) + ex[i]) + vac[i])
            .collect();
        QuadratureStream::from_complex(&z, 1.0)
    }

    #[test]
    fn estimate_nominal_channel() {
        let det = nominal_det();
        let a = gaussian_symbols(100_000, 12.0, 11).unwrap();
        let e = estimate_params(&a, &bob(&a, 0.0789, 0.005, &det, 1), &det).unwrap();
        assert!((e.t_hat / 0.0789 - 1.0).abs() < 0.05, "{}", e.t_hat);
        // Finite-size spread of ε̂ at this transmittance is ≈ 0.22 SNU; a
        // 5σ band is the honest check at n = 10⁵.
        assert!((e.eps_hat - 0.005).abs() < 1.1, "{}", e.eps_hat);
        assert!((e.v_a_hat - 12.0).abs() < 0.2);
    }

    #[test]
    fn estimate_identity_channel() {
        let det = DetectorParams::ideal();
        let a = gaussian_symbols(100_000, 12.0, 12).unwrap();
        let e = estimate_params(&a, &bob(&a, 1.0, 0.0, &det, 2), &det).unwrap();
        assert!((e.t_hat - 1.0).abs() < 0.01, "{}", e.t_hat);
        // σ(ε̂) ≈ 2/(√n t²) ≈ 0.0045 for the unit channel.
        assert!(e.eps_hat.abs() < 0.025, "{}", e.eps_hat);
    }

    #[test]
    fn estimate_rejects_misalignment() {
        let det = nominal_det();
        let a = gaussian_symbols(20_000, 12.0, 13).unwrap();
        let mut b = bob(&a, 0.5, 0.0, &det, 3);
        b.x.rotate_left(1);
        b.p.rotate_left(1);
        assert!(matches!(
            estimate_params(&a, &b, &det),
            Err(Error::AlignmentError(_))
        ));
        let short = gaussian_symbols(100, 12.0, 1).unwrap();
        assert!(matches!(
            estimate_params(&short, &bob(&short, 0.5, 0.0, &det, 1), &det),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn frame_roundtrip_via_slots() {
        let layout = FrameLayout::default();
        let s = gaussian_symbols(1234, 12.0, 5).unwrap();
        let f = build_frame(&s, &layout).unwrap();
        assert_eq!(deframe(&f), s);
    }
}
