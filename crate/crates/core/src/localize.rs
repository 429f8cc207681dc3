//! Vibration source localization from per-node arrival-time differences and
//! magnitude estimation from the per-node phase amplitudes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::sensing::VibrationTrace;

pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE_M: f64 = 1e-6;
pub const MAX_RESIDUAL_M: f64 = 10.0;
pub const MIN_CORRELATION_PEAK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGeometry {
    pub node_positions: Vec<[f64; 2]>,
    #[serde(default)]
    pub center_position: [f64; 2],
    pub fiber_lengths_m: Vec<f64>,
    pub wave_speed_mps: f64,
    #[serde(default = "default_fiber_light_speed")]
    pub fiber_light_speed_mps: f64,
}

fn default_fiber_light_speed() -> f64 {
    2.0e8
}

impl NetworkGeometry {
    pub fn validate(&self) -> Result<()> {
        let n = self.node_positions.len();
        if n < 3 {
            return Err(Error::GeometryError(format!(
                "localization needs at least 3 nodes, got {n}"
            )));
        }
        if self.fiber_lengths_m.len() != n {
            return Err(Error::GeometryError(format!(
                "{} fiber lengths for {n} nodes",
                self.fiber_lengths_m.len()
            )));
        }
        if !(self.wave_speed_mps > 0.0) || !(self.fiber_light_speed_mps > 0.0) {
            return Err(Error::GeometryError(
                "propagation speeds must be positive".into(),
            ));
        }
        if self.scale() == 0.0 || self.max_triangle_area() <= 1e-9 * self.scale().powi(2) {
            return Err(Error::GeometryError("node positions are collinear".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.node_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_positions.is_empty()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.len() as f64;
        let (sx, sy) = self
            .node_positions
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }

    /// Largest node distance from the centroid.
    fn scale(&self) -> f64 {
        let c = self.centroid();
        self.node_positions
            .iter()
            .map(|p| distance(*p, c))
            .fold(0.0, f64::max)
    }

    fn max_triangle_area(&self) -> f64 {
        let p = &self.node_positions;
        let mut best = 0.0f64;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                for k in j + 1..p.len() {
                    let a = (p[j][0] - p[i][0]) * (p[k][1] - p[i][1])
                        - (p[k][0] - p[i][0]) * (p[j][1] - p[i][1]);
                    best = best.max(a.abs() / 2.0);
                }
            }
        }
        best
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Pairwise arrival-time differences at the center node:
/// `dt[j][k] = τ_j − τ_k`, positive when node j receives later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaMatrix {
    pub node_ids: Vec<u32>,
    pub dt: Vec<Vec<f64>>,
}

impl TdoaMatrix {
    pub fn from_arrivals(node_ids: &[u32], arrivals_s: &[f64]) -> Result<Self> {
        if node_ids.len() != arrivals_s.len() {
            return Err(Error::invalid("one arrival time per node is required"));
        }
        let n = arrivals_s.len();
        let mut dt = vec![vec![0.0; n]; n];
        for j in 0..n {
            for k in j + 1..n {
                dt[j][k] = arrivals_s[j] - arrivals_s[k];
                dt[k][j] = -dt[j][k];
            }
        }
        Ok(Self {
            node_ids: node_ids.to_vec(),
            dt,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Differences between consecutive nodes, Δt₁₂, Δt₂₃, ...
    pub fn consecutive(&self) -> Vec<f64> {
        (1..self.len()).map(|k| self.dt[k - 1][k]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub position: [f64; 2],
    /// Seismic travel time from the source to each node.
    pub arrival_times: Vec<f64>,
    pub tdoa: Vec<f64>,
    /// Source phase amplitude at the reference distance, once estimated.
    pub magnitude: Option<f64>,
    /// RMS circle mismatch (m).
    pub residual: f64,
    pub ambiguous: bool,
    pub alternative: Option<[f64; 2]>,
    pub degraded: bool,
}

/// Time difference between every pair of traces from the peak of their
/// normalized cross-correlation, refined by a parabola through the peak.
pub fn tdoa(traces: &[VibrationTrace]) -> Result<TdoaMatrix> {
    if traces.len() < 2 {
        return Err(Error::invalid("tdoa needs at least two traces"));
    }
    let fs = traces[0].sample_rate;
    if traces.iter().any(|t| t.sample_rate != fs) {
        return Err(Error::invalid("traces have different sample rates"));
    }
    let n = traces.len();
    let mut dt = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in j + 1..n {
            let (lag, peak) = xcorr_lag(
                &traces[j].unwrapped_phase_rad,
                &traces[k].unwrapped_phase_rad,
            )?;
            if peak < MIN_CORRELATION_PEAK {
                return Err(Error::NoCommonEvent(peak));
            }
            dt[j][k] = lag / fs + traces[j].start_s - traces[k].start_s;
            dt[k][j] = -dt[j][k];
        }
    }
    Ok(TdoaMatrix {
        node_ids: traces.iter().map(|t| t.node_id).collect(),
        dt,
    })
}

/// Lag (samples, fractional) by which `a` trails `b`, and the normalized
/// correlation at the integer peak.
fn xcorr_lag(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: a.len().min(b.len()),
        });
    }
    let demean = |x: &[f64]| {
        let m = dsp::mean(x);
        x.iter().map(|v| v - m).collect::<Vec<f64>>()
    };
    let (a, b) = (demean(a), demean(b));
    let ea = a.iter().map(|v| v * v).sum::<f64>();
    let eb = b.iter().map(|v| v * v).sum::<f64>();
    if ea == 0.0 || eb == 0.0 {
        return Err(Error::NoCommonEvent(0.0));
    }
    let len = dsp::next_smooth(a.len() + b.len());
    let mut fa: Vec<_> = a
        .iter()
        .map(|&v| num_complex::Complex64::new(v, 0.0))
        .collect();
    let mut fb: Vec<_> = b
        .iter()
        .map(|&v| num_complex::Complex64::new(v, 0.0))
        .collect();
    fa.resize(len, Default::default());
    fb.resize(len, Default::default());
    dsp::fft(&mut fa);
    dsp::fft(&mut fb);
    let mut c: Vec<_> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    dsp::ifft(&mut c);
    // c[m] = Σ a[i+m] b[i]; negative lags wrap to the end.
    let at = |lag: isize| c[lag.rem_euclid(len as isize) as usize].re;
    let max_pos = a.len() as isize - 1;
    let max_neg = -(b.len() as isize - 1);
    let (mut best, mut val) = (0isize, f64::NEG_INFINITY);
    for lag in max_neg..=max_pos {
        let v = at(lag);
        if v > val {
            val = v;
            best = lag;
        }
    }
    let peak = val / (ea * eb).sqrt();
    let mut frac = 0.0;
    if best > max_neg && best < max_pos {
        let (y0, y1, y2) = (at(best - 1), val, at(best + 1));
        let denom = y0 - 2.0 * y1 + y2;
        if denom < 0.0 {
            frac = 0.5 * (y0 - y2) / denom;
        }
    }
    Ok((best as f64 + frac, peak))
}

struct Solution {
    x: Vector3<f64>,
    residual: f64,
}

/// Solve the circle system for the source position and first travel time.
///
/// Unknowns are (x₀, y₀, t₁). Each node's travel time is
/// t_k = t₁ + (τ_k − τ₁) − (L_k − L₁)/c, where τ are arrival times at the
/// center and the last term removes the return-fiber delay, and each circle
/// requires |p_k − p₀| = v·t_k. Damped Gauss-Newton from the centroid and a
/// ring of further starts; distinct minima tying within 1 m of residual are
/// flagged ambiguous.
pub fn locate(tdoa: &TdoaMatrix, geometry: &NetworkGeometry) -> Result<EventEstimate> {
    geometry.validate()?;
    let n = geometry.len();
    if tdoa.len() != n {
        return Err(Error::invalid(format!(
            "tdoa covers {} nodes, geometry has {n}",
            tdoa.len()
        )));
    }
    let v = geometry.wave_speed_mps;
    let c = geometry.fiber_light_speed_mps;
    let l = &geometry.fiber_lengths_m;
    // Travel distance of node k minus that of node 1.
    let offsets: Vec<f64> = (0..n)
        .map(|k| v * (tdoa.dt[k][0] - (l[k] - l[0]) / c))
        .collect();
    let pos = &geometry.node_positions;

    let centroid = geometry.centroid();
    let scale = geometry.scale();
    let mut starts = vec![centroid];
    for i in 0..8 {
        let a = i as f64 * std::f64::consts::FRAC_PI_4;
        for r in [0.5, 2.0] {
            starts.push([
                centroid[0] + r * scale * a.cos(),
                centroid[1] + r * scale * a.sin(),
            ]);
        }
    }

    let mut found: Vec<Solution> = Vec::new();
    for s in starts {
        let s1 = distance(s, pos[0]);
        if let Some(sol) = solve(Vector3::new(s[0], s[1], s1), pos, &offsets) {
            // Physical solutions have non-negative travel times.
            let ok = offsets.iter().all(|o| sol.x[2] + o >= -1e-6);
            if ok && !found.iter().any(|f| (f.x.xy() - sol.x.xy()).norm() < 1.0) {
                found.push(sol);
            }
        }
    }
    if found.is_empty() {
        return Err(Error::LocalizationFailure(format!(
            "no convergence within {MAX_ITERATIONS} iterations"
        )));
    }
    // Prefer the smaller residual; among ties the solution nearer the centroid.
    let cv = nalgebra::Vector2::new(centroid[0], centroid[1]);
    found.sort_by(|a, b| {
        let ra = (a.residual, (a.x.xy() - cv).norm());
        let rb = (b.residual, (b.x.xy() - cv).norm());
        ra.partial_cmp(&rb).unwrap()
    });
    let best_res = found[0].residual;
    let tied: Vec<&Solution> = found
        .iter()
        .filter(|s| s.residual - best_res <= 1.0)
        .collect();
    let mut tied_sorted = tied.clone();
    tied_sorted.sort_by(|a, b| {
        (a.x.xy() - cv)
            .norm()
            .partial_cmp(&(b.x.xy() - cv).norm())
            .unwrap()
    });
    let best = tied_sorted[0];
    if best.residual > MAX_RESIDUAL_M {
        return Err(Error::LocalizationFailure(format!(
            "residual {:.2} m exceeds {MAX_RESIDUAL_M} m",
            best.residual
        )));
    }
    let alternative = tied_sorted.get(1).map(|s| [s.x[0], s.x[1]]);
    Ok(EventEstimate {
        position: [best.x[0], best.x[1]],
        arrival_times: offsets.iter().map(|o| (best.x[2] + o) / v).collect(),
        tdoa: tdoa.consecutive(),
        magnitude: None,
        residual: best.residual,
        ambiguous: alternative.is_some(),
        alternative,
        degraded: false,
    })
}

fn residuals(x: &Vector3<f64>, pos: &[[f64; 2]], offsets: &[f64]) -> Vec<f64> {
    pos.iter()
        .zip(offsets)
        .map(|(p, o)| distance([x[0], x[1]], *p) - (x[2] + o))
        .collect()
}

fn rms(r: &[f64]) -> f64 {
    (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
}

/// Levenberg-Marquardt over (x, y, s₁) with s₁ = v·t₁ in meters.
fn solve(mut x: Vector3<f64>, pos: &[[f64; 2]], offsets: &[f64]) -> Option<Solution> {
    let mut lambda = 1e-3;
    let mut r = residuals(&x, pos, offsets);
    let mut cost = r.iter().map(|v| v * v).sum::<f64>();
    for _ in 0..MAX_ITERATIONS {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (p, ri) in pos.iter().zip(&r) {
            let d = distance([x[0], x[1]], *p).max(1e-9);
            let row = Vector3::new((x[0] - p[0]) / d, (x[1] - p[1]) / d, -1.0);
            jtj += row * row.transpose();
            jtr += row * *ri;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let step = damped.lu().solve(&(-jtr))?;
            let trial = x + step;
            let rt = residuals(&trial, pos, offsets);
            let ct = rt.iter().map(|v| v * v).sum::<f64>();
            if ct <= cost {
                x = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if step.norm() < STEP_TOLERANCE_M {
                    return Some(Solution {
                        x,
                        residual: rms(&r),
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left: a stationary point.
            return Some(Solution {
                x,
                residual: rms(&r),
            });
        }
    }
    None
}

/// Amplitude attenuation a seismic wave undergoes over a distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttenuationModel {
    /// γ(d) = d_ref/d.
    InverseDistance { reference_m: f64 },
    /// γ(d) = (d_ref/d)^p.
    PowerLaw { reference_m: f64, exponent: f64 },
}

impl Default for AttenuationModel {
    fn default() -> Self {
        AttenuationModel::InverseDistance {
            reference_m: 1000.0,
        }
    }
}

impl AttenuationModel {
    pub fn gamma(&self, distance_m: f64) -> f64 {
        match *self {
            AttenuationModel::InverseDistance { reference_m } => reference_m / distance_m,
            AttenuationModel::PowerLaw {
                reference_m,
                exponent,
            } => (reference_m / distance_m).powf(exponent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeEstimate {
    pub magnitude: f64,
    /// Half peak-to-peak phase swing seen by each node.
    pub node_amplitudes: Vec<f64>,
    /// Nodes whose trace carried the event.
    pub used: Vec<u32>,
    pub degraded: bool,
}

/// Nodes whose peak is below this many noise standard deviations are
/// treated as silent.
pub const SILENT_NODE_SIGMAS: f64 = 6.0;

/// Source magnitude: each node's phase amplitude divided by γ at its
/// distance from the estimated source, averaged over the nodes that saw
/// the event. Traces must be in the geometry's node order.
pub fn magnitude(
    traces: &[VibrationTrace],
    estimate: &EventEstimate,
    geometry: &NetworkGeometry,
    model: &AttenuationModel,
) -> Result<MagnitudeEstimate> {
    if traces.len() != geometry.len() {
        return Err(Error::invalid("one trace per geometry node is required"));
    }
    let mut amps = Vec::new();
    let mut used = Vec::new();
    let mut sum = 0.0;
    for (t, p) in traces.iter().zip(&geometry.node_positions) {
        let (amp, noise) = amplitude_and_noise(&t.unwrapped_phase_rad);
        amps.push(amp);
        if amp < SILENT_NODE_SIGMAS * noise || amp == 0.0 {
            continue;
        }
        let d = distance(estimate.position, *p);
        let g = model.gamma(d);
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::InvalidModel(format!(
                "attenuation {g} at distance {d} m"
            )));
        }
        sum += amp / g;
        used.push(t.node_id);
    }
    if used.is_empty() {
        return Err(Error::NoCommonEvent(0.0));
    }
    Ok(MagnitudeEstimate {
        magnitude: sum / used.len() as f64,
        node_amplitudes: amps,
        degraded: used.len() < traces.len(),
        used,
    })
}

/// Half the peak-to-peak swing and a robust white-noise level taken from
/// first differences, which a slow vibration barely touches.
pub(crate) fn amplitude_and_noise(x: &[f64]) -> (f64, f64) {
    if x.len() < 2 {
        return (0.0, 0.0);
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let mut d: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let med = dsp::median(&mut d.clone());
    for v in d.iter_mut() {
        *v = (*v - med).abs();
    }
    let mad = dsp::median(&mut d);
    let sigma = 1.4826 * mad / 2f64.sqrt();
    ((hi - lo) / 2.0, sigma)
}
