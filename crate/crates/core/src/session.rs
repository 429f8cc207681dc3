//! End-to-end runs over a scenario: the multi-node QKD session and the
//! sensing pipeline (spectrum monitoring, pilot-phase demodulation,
//! suspension decisions and event localization).

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{self, ChannelState, DEFAULT_ACTIVITY_THRESHOLD};
use crate::dsp;
use crate::error::{Error, Result};
use crate::localize::{self, EventEstimate, NetworkGeometry};
use crate::node::{modulate_node, NodeConfig};
use crate::qkd::{self, ChannelEstimate, SkrReport};
use crate::receiver::{self, DetectorParams, QuadratureStream, SyncResult};
use crate::scenario::{Fidelity, ScenarioConfig};
use crate::sensing::{self, BandStatus, SpectrumBaseline, StrainPsd, VibrationTrace};
use crate::signal::{
    build_frame, gaussian_symbols, ComplexWaveform, FrameLayout, QuadratureFrame, SymbolSequence,
};

// Random stream purposes, mixed into per-node seeds.
const SYMBOLS: u64 = 1;
const CHANNEL: u64 = 2;
const DETECT: u64 = 3;
const PHASE: u64 = 4;
const OFFSET: u64 = 5;
const BASELINE: u64 = 6;
const PILOTS: u64 = 7;
const MONITOR: u64 = 8;

/// Independent seed for one (run seed, node, purpose) triple.
pub fn derive_seed(seed: u64, node: u32, purpose: u64) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((node as u64) << 32) | purpose);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smallest quantum-symbol count `>= requested` for which every carrier
/// falls on the capture's DFT grid and the frame length is 5-smooth.
pub fn aligned_quantum_count(
    requested: usize,
    layout: &FrameLayout,
    nodes: &[NodeConfig],
) -> Result<usize> {
    let limit = requested.max(1) * 2 + 10_000;
    for k in requested.max(1)..=limit {
        let f = layout.symbols_per_frame(k);
        if dsp::next_smooth(f) != f {
            continue;
        }
        let aligned = nodes.iter().all(|n| {
            let cycles = n.carrier_hz * f as f64 / n.symbol_rate();
            (cycles - cycles.round()).abs() < 1e-6
        });
        if aligned {
            return Ok(k);
        }
    }
    Err(Error::invalid(format!(
        "no carrier-aligned frame length between {requested} and {limit} quantum symbols"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSkrReport {
    pub node_id: u32,
    pub seed: u64,
    pub transmittance: f64,
    pub excess_noise_snu: f64,
    pub quantum_symbols: usize,
    pub suspended: bool,
    pub sync: Option<SyncResult>,
    pub pilot_snr: Option<f64>,
    pub estimate: Option<ChannelEstimate>,
    /// Key rate from the estimated channel.
    pub skr: Option<SkrReport>,
    /// Key rate the configured channel would give.
    pub expected: SkrReport,
    pub error: Option<String>,
}

impl NodeSkrReport {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

struct NodePlan {
    node: NodeConfig,
    alice: SymbolSequence,
    frame: QuadratureFrame,
    channel: ChannelState,
    offset: usize,
}

fn static_phase(config: &ScenarioConfig, id: u32, seed: u64) -> f64 {
    match config.node(id).and_then(|n| n.static_phase_rad) {
        Some(p) => p,
        None => {
            let mut rng = dsp::rng(derive_seed(seed, id, PHASE), 0);
            rng.random_range(-PI..PI)
        }
    }
}

fn plan_nodes(
    config: &ScenarioConfig,
    seed: u64,
    quantum: usize,
    suspended: &BTreeSet<u32>,
    salt: u64,
) -> Result<Vec<NodePlan>> {
    let layout = config.layout()?;
    config
        .node_configs()
        .into_iter()
        .map(|node| {
            let id = node.node_id;
            let entry = config.node(id).expect("node exists");
            let alice = gaussian_symbols(
                quantum,
                node.modulation_variance,
                derive_seed(seed ^ salt, id, SYMBOLS),
            )?;
            let mut frame = build_frame(&alice, &layout)?;
            if suspended.contains(&id) {
                frame = frame.pilots_only();
            }
            let offset = match entry.capture_offset_symbols {
                Some(o) => o % frame.len(),
                None => {
                    dsp::rng(derive_seed(seed ^ salt, id, OFFSET), 0).random_range(0..frame.len())
                }
            };
            let channel = ChannelState {
                transmittance: config.transmittance(&node),
                static_phase_rad: static_phase(config, id, seed),
                excess_noise_snu: entry.excess_noise_snu,
                noise_band: Some((node.carrier_hz, node.baseband_hz)),
                noise_seed: derive_seed(seed ^ salt, id, CHANNEL),
                ..ChannelState::identity()
            };
            Ok(NodePlan {
                node,
                alice,
                frame,
                channel,
                offset,
            })
        })
        .collect::<Result<Vec<_>>>()
}

/// Transmit, propagate, combine and detect every planned node. `phases`
/// gives the received vibration phase per node (empty for none) and the
/// castdown depth applied while it moves.
fn fdm_capture(
    config: &ScenarioConfig,
    plans: &[NodePlan],
    phases: &[(Vec<f64>, f64)],
    detect_seed: u64,
) -> Result<ComplexWaveform> {
    let fs = config.sample_rate();
    let outputs = plans
        .par_iter()
        .zip(phases.par_iter())
        .map(|(p, (phase, castdown))| {
            let mut w =
                modulate_node(&p.frame, &p.node, fs).map_err(|e| e.for_node(p.node.node_id))?;
            let sps = (w.snu_scale.round()) as usize;
            w.rotate_left(p.offset * sps);
            let mut state = p.channel.clone();
            if !phase.is_empty() {
                state.vibration_phase = phase.clone();
                state.castdown_db = *castdown;
            }
            channel::propagate(&w, &state).map_err(|e| e.for_node(p.node.node_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = channel::combine(&outputs)?;
    receiver::detect(&combined, &config.detector_params(), detect_seed)
}

/// Receiver chain from demodulated quadratures to the channel estimate.
fn receive(
    mut stream: QuadratureStream,
    layout: &FrameLayout,
    alice: &SymbolSequence,
    det: &DetectorParams,
    smoothing: usize,
    report: &mut NodeSkrReport,
) -> Result<ChannelEstimate> {
    let sync = receiver::frame_sync(&stream, &layout.sync_word)?;
    report.sync = Some(sync);
    stream.frame_offset = Some(sync.offset);
    let trace = qkd::pilot_phase_estimate(&stream, layout, smoothing)?;
    report.pilot_snr = Some(trace.snr);
    let corrected = qkd::phase_correct(&stream, &trace)?;
    qkd::estimate_params(alice, &corrected, det)
}

/// Demodulated quadratures of a framed node drawn directly from the
/// equivalent channel: b = √(ηT)·(s + e)·e^{jθ} + n.
fn symbol_domain_stream(config: &ScenarioConfig, plan: &NodePlan, seed: u64) -> QuadratureStream {
    let det = config.detector_params();
    let t = plan.channel.transmittance;
    let gain = Complex64::from_polar(
        (det.quantum_efficiency * t).sqrt(),
        plan.channel.static_phase_rad,
    );
    let n = plan.frame.len();
    let mut rng = dsp::rng(plan.channel.noise_seed, 0);
    let excess = dsp::complex_noise(&mut rng, n, plan.channel.excess_noise_snu / 2.0);
    let mut rng = dsp::rng(derive_seed(seed, plan.node.node_id, DETECT), 0);
    let vacuum = dsp::complex_noise(&mut rng, n, 1.0 + det.electronic_noise_snu);
    let mut b: Vec<Complex64> = (0..n)
        .map(|i| gain * (plan.frame.symbols[i] + excess[i]) + vacuum[i])
        .collect();
    b.rotate_left(plan.offset);
    QuadratureStream::from_complex(&b, plan.node.symbol_rate())
}

/// QKD session over every node of the scenario.
pub fn run_qkd_session(config: &ScenarioConfig, seed: u64) -> Result<Vec<NodeSkrReport>> {
    run_qkd_session_with(config, seed, &BTreeSet::new())
}

/// QKD session with some nodes suspended: they send pilots only and get no
/// key. Per-node failures are reported in place; only configuration
/// problems abort the whole session.
pub fn run_qkd_session_with(
    config: &ScenarioConfig,
    seed: u64,
    suspended: &BTreeSet<u32>,
) -> Result<Vec<NodeSkrReport>> {
    config.validate()?;
    let layout = config.layout()?;
    let nodes = config.node_configs();
    let registry = config.registry()?;
    let det = config.detector_params();
    let quantum = aligned_quantum_count(config.qkd.symbols, &layout, &nodes)?;
    let plans = plan_nodes(config, seed, quantum, suspended, 0)?;

    let mut reports: Vec<NodeSkrReport> = plans
        .iter()
        .map(|p| {
            let entry = config.node(p.node.node_id).expect("node exists");
            let expected = qkd::secret_key_rate(
                p.node.modulation_variance,
                p.channel.transmittance,
                entry.excess_noise_snu,
                &det,
                config.beta,
                config.rep_rate_hz,
            )?;
            Ok(NodeSkrReport {
                node_id: p.node.node_id,
                seed,
                transmittance: p.channel.transmittance,
                excess_noise_snu: entry.excess_noise_snu,
                quantum_symbols: quantum,
                suspended: suspended.contains(&p.node.node_id),
                sync: None,
                pilot_snr: None,
                estimate: None,
                skr: None,
                expected,
                error: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let streams: Vec<Result<QuadratureStream>> = match config.qkd.fidelity {
        Fidelity::Symbol => plans
            .iter()
            .map(|p| Ok(symbol_domain_stream(config, p, seed)))
            .collect(),
        Fidelity::Waveform => {
            let none = vec![(Vec::new(), 0.0); plans.len()];
            let mut detected = fdm_capture(config, &plans, &none, derive_seed(seed, 0, DETECT))?;
            if det.lo_power != 1.0 {
                let sps = detected.snu_scale.round() as usize;
                let scale = receiver::calibrate_detector(
                    detected.len(),
                    detected.sample_rate,
                    detected.snu_scale,
                    &det,
                    sps,
                    derive_seed(seed, 0, BASELINE),
                )?;
                detected = detected.with_snu_scale(scale)?;
            }
            plans
                .par_iter()
                .map(|p| {
                    let band = receiver::band_select(&detected, &registry, p.node.node_id)?;
                    receiver::demodulate(&band, p.node.carrier_hz, p.node.baseband_hz)
                })
                .collect()
        }
    };

    let outcomes: Vec<(usize, Result<ChannelEstimate>, NodeSkrReport)> = plans
        .par_iter()
        .zip(streams.into_par_iter())
        .zip(reports.par_iter_mut())
        .enumerate()
        .filter(|(_, ((p, _), _))| !suspended.contains(&p.node.node_id))
        .map(|(i, ((p, stream), report))| {
            let mut r = report.clone();
            let est = stream.and_then(|s| {
                receive(
                    s,
                    &layout,
                    &p.alice,
                    &det,
                    config.qkd.smoothing_pilots,
                    &mut r,
                )
            });
            (i, est, r)
        })
        .collect();

    for (i, est, mut r) in outcomes {
        match est.map(|e| {
            let skr = qkd::secret_key_rate(
                e.v_a_hat,
                e.t_hat.clamp(f64::MIN_POSITIVE, 1.0),
                e.eps_hat,
                &det,
                config.beta,
                config.rep_rate_hz,
            );
            (e, skr)
        }) {
            Ok((e, skr)) => {
                r.estimate = Some(e);
                match skr {
                    Ok(s) => r.skr = Some(s),
                    Err(err) => r.error = Some(err.for_node(r.node_id).to_string()),
                }
            }
            Err(err) => r.error = Some(err.for_node(r.node_id).to_string()),
        }
        reports[i] = r;
    }
    Ok(reports)
}

/// Phase imprinted on node `node_id`'s fiber by every configured event, at
/// times `t` (seconds from capture start), before the return-fiber delay.
pub fn node_phase(config: &ScenarioConfig, node_id: u32, t: &[f64]) -> Result<Vec<f64>> {
    let entry = config
        .node(node_id)
        .ok_or_else(|| Error::invalid(format!("no node {node_id}")))?;
    let drives: Vec<_> = config
        .vibration_events
        .iter()
        .flat_map(|ev| {
            config
                .event_drives(ev)
                .into_iter()
                .filter(|d| d.node_id == node_id)
                .map(move |d| (ev, d))
        })
        .collect();
    if drives.is_empty() {
        return Ok(vec![0.0; t.len()]);
    }
    let volts: Vec<f64> = t
        .iter()
        .map(|&ti| {
            drives
                .iter()
                .map(|(ev, d)| d.amplitude_scale * ev.waveform.voltage(ti - d.onset_s))
                .sum()
        })
        .collect();
    channel::pzt_phase(&volts, &entry.pzt, &config.fiber)
}

/// Vibration phase as it reaches the center node, delayed by the fiber.
pub fn received_phase(config: &ScenarioConfig, node_id: u32, t: &[f64]) -> Result<Vec<f64>> {
    let entry = config
        .node(node_id)
        .ok_or_else(|| Error::invalid(format!("no node {node_id}")))?;
    let delay = entry.fiber_length_m / config.geometry().fiber_light_speed_mps;
    let shifted: Vec<f64> = t.iter().map(|v| v - delay).collect();
    node_phase(config, node_id, &shifted)
}

fn castdown_for(config: &ScenarioConfig, node_id: u32) -> Option<f64> {
    config
        .vibration_events
        .iter()
        .flat_map(|ev| config.event_drives(ev))
        .filter(|d| d.node_id == node_id)
        .map(|d| d.castdown_db)
        .reduce(f64::max)
}

/// Parameters of the pilot-only phase link of one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotLink {
    pub pilot_rate_hz: f64,
    /// Pilots coherently averaged into each output sample.
    pub average: usize,
    /// Received pilot amplitude, √(ηT)·A, in SNU units.
    pub amplitude: f64,
    /// Noise variance per quadrature (vacuum plus electronic).
    pub noise_var: f64,
    pub static_phase_rad: f64,
    pub castdown_db: f64,
    pub seed: u64,
}

impl PilotLink {
    pub fn for_node(config: &ScenarioConfig, node: &NodeConfig, seed: u64) -> Result<Self> {
        let layout = config.layout()?;
        let det = config.detector_params();
        let pilot_rate = node.symbol_rate() / layout.pilot_spacing() as f64;
        let sensing_rate = config.spm.sensing_rate_hz * config.profile.frequency_scale();
        let t = config.transmittance(node);
        Ok(Self {
            pilot_rate_hz: pilot_rate,
            average: ((pilot_rate / sensing_rate).floor() as usize).max(1),
            amplitude: (det.quantum_efficiency * t).sqrt() * layout.pilot_amplitude,
            noise_var: 1.0 + det.electronic_noise_snu,
            static_phase_rad: static_phase(config, node.node_id, seed),
            castdown_db: castdown_for(config, node.node_id).unwrap_or(0.0),
            seed: derive_seed(seed, node.node_id, PILOTS),
        })
    }

    pub fn output_rate(&self) -> f64 {
        self.pilot_rate_hz / self.average as f64
    }

    /// Center time of output sample 0.
    pub fn output_start(&self) -> f64 {
        (self.average as f64 - 1.0) / 2.0 / self.pilot_rate_hz
    }
}

/// Averaged pilot phasors and the largest inter-pilot phase step seen.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotCapture {
    pub phasors: Vec<Complex64>,
    pub rate_hz: f64,
    pub start_s: f64,
    /// Largest per-256-pilot-block mean phase step between consecutive pilots.
    pub max_step_rad: f64,
}

const STEP_BLOCK: usize = 256;

/// Simulate `n_out` averaged pilot measurements; `phase` maps pilot times
/// to the received vibration phase.
pub fn sense_pilots(
    link: &PilotLink,
    n_out: usize,
    phase: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<PilotCapture> {
    let m = link.average;
    let group = STEP_BLOCK.max(1);
    let chunk_out = group;
    let chunk = chunk_out * m;
    let dip = 10f64.powf(-link.castdown_db / 20.0);
    let mut rng = dsp::rng(link.seed, 0);
    let mut phasors = Vec::with_capacity(n_out);
    let mut max_step = 0.0f64;
    let mut carry: Option<Complex64> = None;
    let mut block = Complex64::new(0.0, 0.0);
    let mut block_len = 0usize;
    let mut k0 = 0usize;
    while phasors.len() < n_out {
        let take = ((n_out - phasors.len()) * m).min(chunk);
        // one extra time for the activity slope at the chunk end
        let times: Vec<f64> = (k0..k0 + take + 1)
            .map(|k| k as f64 / link.pilot_rate_hz)
            .collect();
        let phi = phase(&times)?;
        let noise = dsp::complex_noise(&mut rng, take, link.noise_var);
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..take {
            let slope = (phi[i + 1] - phi[i]) * link.pilot_rate_hz;
            let g = if link.castdown_db > 0.0 && slope.abs() > DEFAULT_ACTIVITY_THRESHOLD {
                dip
            } else {
                1.0
            };
            let z = Complex64::from_polar(link.amplitude * g, link.static_phase_rad + phi[i])
                + noise[i];
            if let Some(prev) = carry {
                block += z * prev.conj();
                block_len += 1;
                if block_len == STEP_BLOCK {
                    max_step = max_step.max(block.arg().abs());
                    block = Complex64::new(0.0, 0.0);
                    block_len = 0;
                }
            }
            carry = Some(z);
            acc += z;
            if (i + 1) % m == 0 {
                phasors.push(acc / m as f64);
                acc = Complex64::new(0.0, 0.0);
            }
        }
        k0 += take;
    }
    if block_len > 0 {
        max_step = max_step.max(block.arg().abs());
    }
    Ok(PilotCapture {
        phasors,
        rate_hz: link.output_rate(),
        start_s: link.output_start(),
        max_step_rad: max_step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrainSummary {
    pub floor_rad2_per_hz: f64,
    pub strain_resolution_per_rthz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensingReport {
    pub node_id: u32,
    pub seed: u64,
    pub band: Option<BandStatus>,
    pub qkd_suspended: bool,
    pub max_pilot_step_rad: f64,
    pub vibrating: bool,
    pub max_phase_rad: f64,
    pub max_length_change_m: f64,
    pub trace_rate_hz: f64,
    pub pilots_averaged: usize,
    pub strain: Option<StrainSummary>,
    /// Why no waveform was recovered for a suspended node.
    pub trace_unavailable: Option<String>,
    pub error: Option<String>,
    #[serde(skip)]
    pub trace: Option<VibrationTrace>,
    #[serde(skip)]
    pub psd: Option<StrainPsd>,
    /// Band-limited slice of the monitored spectrum (Hz, power density).
    #[serde(skip)]
    pub spectrum: Option<(Vec<f64>, Vec<f64>)>,
}

impl SensingReport {
    fn empty(node_id: u32, seed: u64) -> Self {
        Self {
            node_id,
            seed,
            band: None,
            qkd_suspended: false,
            max_pilot_step_rad: 0.0,
            vibrating: false,
            max_phase_rad: 0.0,
            max_length_change_m: 0.0,
            trace_rate_hz: 0.0,
            pilots_averaged: 0,
            strain: None,
            trace_unavailable: None,
            error: None,
            trace: None,
            psd: None,
            spectrum: None,
        }
    }
}

/// Spectrum-monitoring result for one seed: per-band flags plus the
/// band-limited spectra for plotting.
pub struct MonitorOutcome {
    pub statuses: Vec<BandStatus>,
    pub spectra: Vec<(u32, Vec<f64>, Vec<f64>)>,
}

/// Capture a vibration-free baseline and a monitored interval and compare
/// them band by band.
pub fn monitor_spectrum(config: &ScenarioConfig, seed: u64) -> Result<MonitorOutcome> {
    let baseline = spectrum_baseline(config, seed)?;
    monitor_against(config, seed, &baseline, true)
}

/// Vibration-free reference capture for the spectrum monitor.
pub fn spectrum_baseline(config: &ScenarioConfig, seed: u64) -> Result<SpectrumBaseline> {
    let layout = config.layout()?;
    let nodes = config.node_configs();
    let quantum = aligned_quantum_count(config.spm.monitor_symbols, &layout, &nodes)?;
    let none = vec![(Vec::new(), 0.0); nodes.len()];
    let plans = plan_nodes(config, seed, quantum, &BTreeSet::new(), BASELINE)?;
    let base = fdm_capture(config, &plans, &none, derive_seed(seed, 0, BASELINE))?;
    sensing::capture_baseline(&base, &config.registry()?, &config.spm.monitor())
}

/// One monitored capture compared against `baseline`. With
/// `vibrate = false` the configured events are left out, which is what
/// false-positive checks need.
pub fn monitor_against(
    config: &ScenarioConfig,
    seed: u64,
    baseline: &SpectrumBaseline,
    vibrate: bool,
) -> Result<MonitorOutcome> {
    let layout = config.layout()?;
    let nodes = config.node_configs();
    let registry = config.registry()?;
    let quantum = aligned_quantum_count(config.spm.monitor_symbols, &layout, &nodes)?;
    let plans = plan_nodes(config, seed, quantum, &BTreeSet::new(), MONITOR)?;
    let fs = config.sample_rate();
    let n = plans[0].frame.len() * dsp::samples_per_symbol(fs, nodes[0].baseband_hz).unwrap_or(1);
    let phases: Vec<(Vec<f64>, f64)> = nodes
        .iter()
        .map(|node| match castdown_for(config, node.node_id) {
            Some(c) if vibrate => {
                let t: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
                Ok((received_phase(config, node.node_id, &t)?, c))
            }
            _ => Ok((Vec::new(), 0.0)),
        })
        .collect::<Result<_>>()?;
    let detected = fdm_capture(config, &plans, &phases, derive_seed(seed, 0, MONITOR))?;
    let statuses =
        sensing::spectrum_monitor(&detected, &registry, baseline, &config.spm.monitor())?;
    let (freqs, psd) = dsp::welch_complex(&detected.samples, fs, baseline.segment);
    let spectra = registry
        .registered()
        .map(|(id, b)| {
            let mut pairs: Vec<(f64, f64)> = freqs
                .iter()
                .zip(&psd)
                .filter(|(f, _)| (**f - b.carrier_hz).abs() <= b.bandwidth_hz / 2.0)
                .map(|(f, p)| (*f, *p))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (f, p) = pairs.into_iter().unzip();
            (id, f, p)
        })
        .collect();
    Ok(MonitorOutcome { statuses, spectra })
}

/// Pilot-phase sensing of one node: averaged pilots, wrapped phase,
/// unwrapping, conversion to elongation and the suspension decision.
pub fn sense_node(config: &ScenarioConfig, node: &NodeConfig, seed: u64) -> Result<SensingReport> {
    let mut report = SensingReport::empty(node.node_id, seed);
    let link = PilotLink::for_node(config, node, seed)?;
    let n_out = (config.spm.duration_s * link.output_rate()).floor() as usize;
    if n_out < 2 {
        return Err(Error::invalid(format!(
            "sensing record of {} s holds fewer than two samples at {} Hz",
            config.spm.duration_s,
            link.output_rate()
        )));
    }
    let id = node.node_id;
    let cap = sense_pilots(&link, n_out, &|t| received_phase(config, id, t))?;
    report.max_pilot_step_rad = cap.max_step_rad;
    report.qkd_suspended = cap.max_step_rad > config.spm.suspend_threshold_rad;
    report.trace_rate_hz = cap.rate_hz;
    report.pilots_averaged = link.average;

    let wrapped = match sensing::pilot_phases(&cap.phasors, 1) {
        Ok(w) => w,
        // Fast motion smears the averaged pilots; the node is still known
        // to be vibrating, only its waveform is lost.
        Err(e) if report.qkd_suspended => {
            report.vibrating = true;
            report.trace_unavailable = Some(e.to_string());
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let mut unwrapped = sensing::unwrap_phase(&wrapped);
    let mean = dsp::mean(&unwrapped);
    unwrapped.iter_mut().for_each(|v| *v -= mean);
    let trace = VibrationTrace::from_phase(id, unwrapped, cap.rate_hz, cap.start_s, &config.fiber);
    let (swing, noise) = localize::amplitude_and_noise(&trace.unwrapped_phase_rad);
    report.vibrating = swing > localize::SILENT_NODE_SIGMAS * noise;
    report.max_phase_rad = trace.max_phase_rad;
    report.max_length_change_m = trace
        .length_change_m
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if trace.unwrapped_phase_rad.len() >= sensing::STRAIN_PSD_SEGMENT {
        let gauge = config.spm.gauge_length_m.unwrap_or(node.pzt.wound_fiber_m);
        let psd = sensing::strain_psd(
            &trace.unwrapped_phase_rad,
            cap.rate_hz,
            gauge,
            &config.fiber,
        )?;
        report.strain = Some(StrainSummary {
            floor_rad2_per_hz: psd.floor,
            strain_resolution_per_rthz: psd.strain_resolution,
        });
        report.psd = Some(psd);
    }
    report.trace = Some(trace);
    Ok(report)
}

/// Sensing pipeline for one seed: monitor spectra, then demodulate each
/// node's pilot phase. Failures stay with their node.
pub fn run_spm(config: &ScenarioConfig, seed: u64) -> Result<Vec<SensingReport>> {
    config.validate()?;
    let nodes = config.node_configs();
    let monitor = monitor_spectrum(config, seed);
    let mut reports: Vec<SensingReport> = nodes
        .par_iter()
        .map(|node| match sense_node(config, node, seed) {
            Ok(r) => r,
            Err(e) => {
                let mut r = SensingReport::empty(node.node_id, seed);
                r.error = Some(e.for_node(node.node_id).to_string());
                r
            }
        })
        .collect();
    match monitor {
        Ok(m) => {
            for r in reports.iter_mut() {
                r.band = m.statuses.iter().find(|s| s.node_id == r.node_id).cloned();
                r.spectrum = m
                    .spectra
                    .iter()
                    .find(|s| s.0 == r.node_id)
                    .map(|(_, f, p)| (f.clone(), p.clone()));
            }
        }
        Err(e) => {
            for r in reports.iter_mut() {
                if r.error.is_none() {
                    r.error = Some(e.clone().for_node(r.node_id).to_string());
                }
            }
        }
    }
    Ok(reports)
}

/// Localize an event seen by three or more vibrating nodes and estimate
/// its magnitude. Returns `None` when too few nodes saw anything.
pub fn estimate_event(
    config: &ScenarioConfig,
    reports: &[SensingReport],
) -> Option<Result<EventEstimate>> {
    let seen: Vec<&SensingReport> = reports
        .iter()
        .filter(|r| r.vibrating && r.trace.is_some())
        .collect();
    if seen.len() < 3 {
        return None;
    }
    let full = config.geometry();
    let nodes = config.node_configs();
    let idx: Vec<usize> = seen
        .iter()
        .map(|r| {
            nodes
                .iter()
                .position(|n| n.node_id == r.node_id)
                .expect("node exists")
        })
        .collect();
    let geometry = NetworkGeometry {
        node_positions: idx.iter().map(|&i| full.node_positions[i]).collect(),
        fiber_lengths_m: idx.iter().map(|&i| full.fiber_lengths_m[i]).collect(),
        ..full
    };
    let traces: Vec<VibrationTrace> = seen
        .iter()
        .map(|r| r.trace.clone().expect("checked"))
        .collect();
    Some((|| {
        let m = localize::tdoa(&traces)?;
        let mut est = localize::locate(&m, &geometry)?;
        let mag = localize::magnitude(&traces, &est, &geometry, &config.spm.attenuation)?;
        est.magnitude = Some(mag.magnitude);
        est.degraded = mag.degraded;
        Ok(est)
    })())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 1, SYMBOLS);
        assert_ne!(a, derive_seed(1, 2, SYMBOLS));
        assert_ne!(a, derive_seed(1, 1, CHANNEL));
        assert_ne!(a, derive_seed(2, 1, SYMBOLS));
        assert_eq!(a, derive_seed(1, 1, SYMBOLS));
    }

    #[test]
    fn aligned_count_puts_carriers_on_grid() {
        let s = bundled("paper_3node").unwrap();
        let layout = s.layout().unwrap();
        let nodes = s.node_configs();
        let k = aligned_quantum_count(20_000, &layout, &nodes).unwrap();
        assert!(k >= 20_000);
        let f = layout.symbols_per_frame(k);
        assert_eq!(f % 5, 0);
        assert_eq!(dsp::next_smooth(f), f);
    }

    #[test]
    fn symbol_and_waveform_sessions_agree() {
        let mut s = bundled("paper_3node").unwrap();
        s.qkd.symbols = 20_000;
        s.network_capacity = 3;
        for n in s.nodes.iter_mut() {
            n.fiber_length_m = 0.0;
        }
        s.detector = DetectorParams::ideal();
        let w = run_qkd_session(&s, 3).unwrap();
        s.qkd.fidelity = Fidelity::Symbol;
        let y = run_qkd_session(&s, 3).unwrap();
        for (a, b) in w.iter().zip(&y) {
            let (ea, eb) = (a.estimate.unwrap(), b.estimate.unwrap());
            assert!((ea.t_hat - 1.0 / 3.0).abs() < 0.01, "{}", ea.t_hat);
            assert!((eb.t_hat - 1.0 / 3.0).abs() < 0.01, "{}", eb.t_hat);
            assert!(ea.eps_hat.abs() < 0.1 && eb.eps_hat.abs() < 0.1);
        }
    }
}
