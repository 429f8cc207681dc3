//! Scenario files: schema, profiles, loading with field-level diagnostics.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{FiberConstants, PztParams};
use crate::error::{Error, Result};
use crate::localize::{AttenuationModel, NetworkGeometry};
use crate::node::{BandRegistry, NodeConfig};
use crate::receiver::DetectorParams;
use crate::sensing::MonitorConfig;
use crate::signal::{FrameLayout, DEFAULT_PILOT_AMPLITUDE, DEFAULT_PILOT_PERIOD, DEFAULT_SYNC_LEN};

pub const SCHEMA_VERSION: u32 = 1;

/// Frequencies in a scenario file are written at paper scale; the desk
/// profile multiplies them by this factor.
pub const DESK_FREQUENCY_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    PaperScale,
    #[default]
    DeskScale,
}

impl Profile {
    pub fn frequency_scale(self) -> f64 {
        match self {
            Profile::PaperScale => 1.0,
            Profile::DeskScale => DESK_FREQUENCY_SCALE,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper-scale" | "paper" => Ok(Profile::PaperScale),
            "desk-scale" | "desk" => Ok(Profile::DeskScale),
            _ => Err(Error::config("profile", format!("unknown profile `{s}`"))),
        }
    }
}

/// How the QKD session is simulated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Sampled FDM waveforms through the full receiver chain.
    #[default]
    Waveform,
    /// Demodulated symbols drawn directly from the equivalent linear
    /// Gaussian channel; sync, phase recovery and estimation still run.
    Symbol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub node_id: u32,
    pub carrier_hz: f64,
    pub baseband_hz: f64,
    pub fiber_length_m: f64,
    pub modulation_variance: f64,
    pub position_xy: [f64; 2],
    #[serde(default)]
    pub pzt: PztParams,
    /// Channel excess noise in SNU.
    #[serde(default)]
    pub excess_noise_snu: f64,
    /// Fixed return-path rotation; drawn from the seed when absent.
    #[serde(default)]
    pub static_phase_rad: Option<f64>,
    /// Symbols the capture starts into the frame; drawn from the seed when
    /// absent.
    #[serde(default)]
    pub capture_offset_symbols: Option<usize>,
}

impl NodeEntry {
    pub fn node_config(&self, profile: Profile) -> NodeConfig {
        let s = profile.frequency_scale();
        NodeConfig {
            node_id: self.node_id,
            carrier_hz: self.carrier_hz * s,
            baseband_hz: self.baseband_hz * s,
            fiber_length_m: self.fiber_length_m,
            modulation_variance: self.modulation_variance,
            position_xy: self.position_xy,
            pzt: self.pzt.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSection {
    pub pilot_period: usize,
    pub pilot_amplitude: f64,
    pub sync_len: usize,
}

impl Default for FrameSection {
    fn default() -> Self {
        Self {
            pilot_period: DEFAULT_PILOT_PERIOD,
            pilot_amplitude: DEFAULT_PILOT_AMPLITUDE,
            sync_len: DEFAULT_SYNC_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub wave_speed_mps: f64,
    pub center_position: [f64; 2],
    /// Signal speed in the return fiber; defaults to `fiber.light_speed_fiber_mps`.
    pub fiber_light_speed_mps: Option<f64>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            wave_speed_mps: 6000.0,
            center_position: [0.0, 0.0],
            fiber_light_speed_mps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QkdSection {
    /// Requested quantum symbols per node; rounded up so every carrier
    /// falls on the capture's frequency grid.
    pub symbols: usize,
    pub smoothing_pilots: usize,
    pub fidelity: Fidelity,
}

impl Default for QkdSection {
    fn default() -> Self {
        Self {
            symbols: 100_000,
            smoothing_pilots: 4096,
            fidelity: Fidelity::Waveform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpmSection {
    /// Length of the pilot-phase sensing record.
    pub duration_s: f64,
    /// Rate of the reported phase trace; pilots are averaged down to it.
    pub sensing_rate_hz: f64,
    /// Inter-pilot phase step beyond which QKD is suspended.
    pub suspend_threshold_rad: f64,
    pub castdown_threshold_db: f64,
    pub splitting_margin_db: f64,
    /// Quantum symbols in each spectrum-monitoring capture.
    pub monitor_symbols: usize,
    /// Fiber length the strain resolution is referred to; defaults to the
    /// wound fiber on each node's PZT.
    pub gauge_length_m: Option<f64>,
    pub attenuation: AttenuationModel,
}

impl Default for SpmSection {
    fn default() -> Self {
        Self {
            duration_s: 0.1,
            sensing_rate_hz: 100e3,
            suspend_threshold_rad: PI / 4.0,
            castdown_threshold_db: 3.0,
            splitting_margin_db: 6.0,
            monitor_symbols: 80_000,
            gauge_length_m: None,
            attenuation: AttenuationModel::default(),
        }
    }
}

impl SpmSection {
    pub fn monitor(&self) -> MonitorConfig {
        MonitorConfig {
            castdown_threshold_db: self.castdown_threshold_db,
            splitting_margin_db: self.splitting_margin_db,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformKind {
    Sine,
    /// Hann-windowed sine of `cycles` periods.
    Burst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformSpec {
    pub kind: WaveformKind,
    pub frequency_hz: f64,
    /// PZT drive amplitude (V).
    pub amplitude_v: f64,
    #[serde(default = "default_cycles")]
    pub cycles: f64,
    /// Sine length; unbounded when absent.
    #[serde(default)]
    pub duration_s: Option<f64>,
}

fn default_cycles() -> f64 {
    3.0
}

impl WaveformSpec {
    /// Drive voltage at `t` seconds after the waveform starts.
    pub fn voltage(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let s = (2.0 * PI * self.frequency_hz * t).sin();
        match self.kind {
            WaveformKind::Sine => match self.duration_s {
                Some(d) if t > d => 0.0,
                _ => self.amplitude_v * s,
            },
            WaveformKind::Burst => {
                let len = self.cycles / self.frequency_hz;
                if t > len {
                    0.0
                } else {
                    let w = (PI * t / len).sin().powi(2);
                    self.amplitude_v * w * s
                }
            }
        }
    }
}

fn default_castdown_db() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VibrationEvent {
    /// Affected nodes with explicit per-node delays.
    #[serde(default)]
    pub nodes: Vec<u32>,
    #[serde(default)]
    pub delays_s: Vec<f64>,
    /// Or a ground source: every node is driven, delayed by distance / v.
    #[serde(default)]
    pub source_xy: Option<[f64; 2]>,
    #[serde(default)]
    pub start_s: f64,
    pub waveform: WaveformSpec,
    /// Overrides the geometry's wave speed for this event.
    #[serde(default)]
    pub wave_speed_mps: Option<f64>,
    /// Amplitude attenuation with distance from `source_xy`; none when absent.
    #[serde(default)]
    pub attenuation: Option<AttenuationModel>,
    #[serde(default = "default_castdown_db")]
    pub castdown_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub profile: Profile,
    pub network_capacity: usize,
    #[serde(default = "default_rep_rate")]
    pub rep_rate_hz: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Receiver sampling rate at paper scale.
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default)]
    pub fiber: FiberConstants,
    #[serde(default)]
    pub frame: FrameSection,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub qkd: QkdSection,
    #[serde(default)]
    pub spm: SpmSection,
    pub nodes: Vec<NodeEntry>,
    #[serde(default)]
    pub vibration_events: Vec<VibrationEvent>,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}
fn default_rep_rate() -> f64 {
    50e6
}
fn default_beta() -> f64 {
    0.98
}
fn default_sample_rate() -> f64 {
    1e9
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}

/// Per-node drive of one event after resolving delays and attenuation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDrive {
    pub node_id: u32,
    /// Start of the vibration at the node.
    pub onset_s: f64,
    pub amplitude_scale: f64,
    pub castdown_db: f64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Parse("scenario file is empty".into()));
        }
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn with_profile(mut self, profile: Profile) -> Self {
        self.profile = profile;
        self
    }

    /// Node configurations at the active profile's scale.
    pub fn node_configs(&self) -> Vec<NodeConfig> {
        let mut v: Vec<NodeConfig> = self
            .nodes
            .iter()
            .map(|n| n.node_config(self.profile))
            .collect();
        v.sort_by_key(|n| n.node_id);
        v
    }

    pub fn node(&self, id: u32) -> Option<&NodeEntry> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate_hz * self.profile.frequency_scale()
    }

    pub fn detector_params(&self) -> DetectorParams {
        let mut d = self.detector;
        d.bandwidth_hz *= self.profile.frequency_scale();
        d
    }

    pub fn layout(&self) -> Result<FrameLayout> {
        FrameLayout::new(
            self.frame.pilot_period,
            self.frame.pilot_amplitude,
            self.frame.sync_len,
        )
        .map_err(|e| Error::config("frame", e.to_string()))
    }

    pub fn registry(&self) -> Result<BandRegistry> {
        let mut r = BandRegistry::new();
        for n in self.node_configs() {
            r.register(&n)?;
        }
        Ok(r)
    }

    /// Geometry over all nodes in id order.
    pub fn geometry(&self) -> NetworkGeometry {
        let nodes = self.node_configs();
        NetworkGeometry {
            node_positions: nodes.iter().map(|n| n.position_xy).collect(),
            center_position: self.geometry.center_position,
            fiber_lengths_m: nodes.iter().map(|n| n.fiber_length_m).collect(),
            wave_speed_mps: self.geometry.wave_speed_mps,
            fiber_light_speed_mps: self
                .geometry
                .fiber_light_speed_mps
                .unwrap_or(self.fiber.light_speed_fiber_mps),
        }
    }

    pub fn transmittance(&self, node: &NodeConfig) -> f64 {
        self.fiber
            .transmittance(node.fiber_length_m, self.network_capacity)
    }

    /// Resolve an event into per-node onsets and amplitude factors.
    pub fn event_drives(&self, event: &VibrationEvent) -> Vec<NodeDrive> {
        let v = event.wave_speed_mps.unwrap_or(self.geometry.wave_speed_mps);
        match event.source_xy {
            Some(src) => self
                .node_configs()
                .iter()
                .map(|n| {
                    let d = (n.position_xy[0] - src[0]).hypot(n.position_xy[1] - src[1]);
                    let g = event
                        .attenuation
                        .map(|m| m.gamma(d.max(1e-3)))
                        .unwrap_or(1.0);
                    NodeDrive {
                        node_id: n.node_id,
                        onset_s: event.start_s + d / v,
                        amplitude_scale: g,
                        castdown_db: event.castdown_db,
                    }
                })
                .collect(),
            None => event
                .nodes
                .iter()
                .enumerate()
                .map(|(i, &id)| NodeDrive {
                    node_id: id,
                    onset_s: event.start_s + event.delays_s.get(i).copied().unwrap_or(0.0),
                    amplitude_scale: 1.0,
                    castdown_db: event.castdown_db,
                })
                .collect(),
        }
    }

    /// Every invariant of the schema, each failure naming its field.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported schema version {}", self.version),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::config("nodes", "at least one node is required"));
        }
        if self.network_capacity < self.nodes.len() {
            return Err(Error::config(
                "network_capacity",
                format!(
                    "{} is smaller than the {} configured nodes",
                    self.network_capacity,
                    self.nodes.len()
                ),
            ));
        }
        if !(self.rep_rate_hz > 0.0) {
            return Err(Error::config("rep_rate_hz", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("beta", "must lie in (0, 1]"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("sample_rate_hz", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        self.detector.validate()?;
        self.fiber.validate()?;
        self.layout()?;
        if self.qkd.smoothing_pilots == 0 {
            return Err(Error::config("qkd.smoothing_pilots", "must be at least 1"));
        }
        if self.qkd.symbols < crate::qkd::MIN_ESTIMATION_SYMBOLS {
            return Err(Error::config(
                "qkd.symbols",
                format!("must be at least {}", crate::qkd::MIN_ESTIMATION_SYMBOLS),
            ));
        }
        let spm = &self.spm;
        for (field, v) in [
            ("spm.duration_s", spm.duration_s),
            ("spm.sensing_rate_hz", spm.sensing_rate_hz),
            ("spm.suspend_threshold_rad", spm.suspend_threshold_rad),
            ("spm.castdown_threshold_db", spm.castdown_threshold_db),
            ("spm.splitting_margin_db", spm.splitting_margin_db),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if spm.monitor_symbols < 1000 {
            return Err(Error::config(
                "spm.monitor_symbols",
                "must be at least 1000",
            ));
        }
        if let Some(g) = spm.gauge_length_m {
            if !(g > 0.0) {
                return Err(Error::config("spm.gauge_length_m", "must be positive"));
            }
        }

        let mut ids = BTreeSet::new();
        let fs = self.sample_rate();
        for (i, n) in self.nodes.iter().enumerate() {
            let field = |f: &str| format!("nodes[{i}].{f}");
            if !ids.insert(n.node_id) {
                return Err(Error::DuplicateNode(n.node_id));
            }
            n.node_config(self.profile)
                .validate()
                .map_err(|e| Error::config(field("node"), e.to_string()))?;
            if !(n.excess_noise_snu >= 0.0) {
                return Err(Error::config(
                    field("excess_noise_snu"),
                    "must be non-negative",
                ));
            }
            let cfg = n.node_config(self.profile);
            if fs < 2.0 * (cfg.carrier_hz + cfg.baseband_hz / 2.0) {
                return Err(Error::config(
                    field("carrier_hz"),
                    format!("band edge exceeds the Nyquist frequency of {fs} Hz"),
                ));
            }
            if crate::dsp::samples_per_symbol(fs, cfg.baseband_hz).is_none() {
                return Err(Error::config(
                    field("baseband_hz"),
                    "sample rate is not an integer multiple of the symbol rate",
                ));
            }
        }
        let first_band = self.nodes[0].baseband_hz;
        if self.nodes.iter().any(|n| n.baseband_hz != first_band) {
            return Err(Error::config(
                "nodes.baseband_hz",
                "all nodes must share one band width",
            ));
        }
        self.registry()?;

        if !(self.geometry.wave_speed_mps > 0.0) {
            return Err(Error::config("geometry.wave_speed_mps", "must be positive"));
        }
        if self.nodes.len() >= 3 {
            self.geometry().validate()?;
        }

        for (i, ev) in self.vibration_events.iter().enumerate() {
            let field = |f: &str| format!("vibration_events[{i}].{f}");
            let w = &ev.waveform;
            if !(w.frequency_hz > 0.0) {
                return Err(Error::config(
                    field("waveform.frequency_hz"),
                    "must be positive",
                ));
            }
            if !w.amplitude_v.is_finite() {
                return Err(Error::config(
                    field("waveform.amplitude_v"),
                    "must be finite",
                ));
            }
            if !(w.cycles > 0.0) {
                return Err(Error::config(field("waveform.cycles"), "must be positive"));
            }
            if !(ev.castdown_db >= 0.0) {
                return Err(Error::config(field("castdown_db"), "must be non-negative"));
            }
            if let Some(v) = ev.wave_speed_mps {
                if !(v > 0.0) {
                    return Err(Error::config(field("wave_speed_mps"), "must be positive"));
                }
            }
            match ev.source_xy {
                Some(_) => {
                    if !ev.nodes.is_empty() {
                        return Err(Error::config(
                            field("nodes"),
                            "give either nodes or source_xy, not both",
                        ));
                    }
                }
                None => {
                    if ev.nodes.is_empty() {
                        return Err(Error::config(field("nodes"), "no affected nodes"));
                    }
                    if !ev.delays_s.is_empty() && ev.delays_s.len() != ev.nodes.len() {
                        return Err(Error::config(
                            field("delays_s"),
                            "needs one delay per listed node",
                        ));
                    }
                    for id in &ev.nodes {
                        if !ids.contains(id) {
                            return Err(Error::config(
                                field("nodes"),
                                format!("node {id} does not exist"),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ScenarioConfig::from_toml(&text)
}

/// A bundled scenario by name (`paper_3node`, `eq_triangle`, `paper_8node`).
pub fn bundled(name: &str) -> Result<ScenarioConfig> {
    let text = match name {
        "paper_3node" => include_str!("../scenarios/paper_3node.toml"),
        "eq_triangle" => include_str!("../scenarios/eq_triangle.toml"),
        "paper_8node" => include_str!("../scenarios/paper_8node.toml"),
        _ => {
            return Err(Error::config(
                "scenario",
                format!("no bundled scenario `{name}`"),
            ))
        }
    };
    ScenarioConfig::from_toml(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_3node_loads() {
        let s = bundled("paper_3node").unwrap();
        let carriers: Vec<f64> = s.nodes.iter().map(|n| n.carrier_hz).collect();
        assert_eq!(carriers, vec![100e6, 200e6, 300e6]);
        assert!(s.nodes.iter().all(|n| n.fiber_length_m == 10_000.0));
        assert_eq!(s.network_capacity, 8);
        let desk = s.node_configs();
        assert_eq!(desk[0].carrier_hz, 100e3);
        assert_eq!(s.sample_rate(), 1e6);
    }

    #[test]
    fn bundled_scenarios_validate() {
        for name in ["paper_3node", "eq_triangle", "paper_8node"] {
            bundled(name).unwrap();
        }
        assert!(bundled("nope").unwrap_err().is_config());
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(
            ScenarioConfig::from_toml(""),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            ScenarioConfig::from_toml("nodes = 3 ="),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn overlapping_bands_name_both_nodes() {
        let mut s = bundled("paper_3node").unwrap();
        s.nodes[1].carrier_hz = 120e6;
        assert_eq!(
            s.validate().unwrap_err(),
            Error::BandConflict {
                existing: 1,
                incoming: 2
            }
        );
    }

    #[test]
    fn field_diagnostics() {
        let mut s = bundled("paper_3node").unwrap();
        s.network_capacity = 2;
        match s.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "network_capacity"),
            e => panic!("{e}"),
        }
        let mut s = bundled("paper_3node").unwrap();
        s.vibration_events.push(VibrationEvent {
            nodes: vec![9],
            delays_s: vec![],
            source_xy: None,
            start_s: 0.0,
            waveform: WaveformSpec {
                kind: WaveformKind::Sine,
                frequency_hz: 10.0,
                amplitude_v: 1.0,
                cycles: 3.0,
                duration_s: None,
            },
            wave_speed_mps: None,
            attenuation: None,
            castdown_db: 6.0,
        });
        match s.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "vibration_events[0].nodes"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn collinear_nodes_rejected() {
        let mut s = bundled("paper_3node").unwrap();
        for (i, n) in s.nodes.iter_mut().enumerate() {
            n.position_xy = [i as f64, 0.0];
        }
        assert!(matches!(s.validate(), Err(Error::GeometryError(_))));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = format!(
            "bogus = 1\n{}",
            bundled("paper_3node").unwrap().to_toml().unwrap()
        );
        assert!(matches!(
            ScenarioConfig::from_toml(&text),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn toml_roundtrip() {
        let s = bundled("eq_triangle").unwrap();
        let back = ScenarioConfig::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn burst_is_windowed() {
        let w = WaveformSpec {
            kind: WaveformKind::Burst,
            frequency_hz: 100.0,
            amplitude_v: 2.0,
            cycles: 3.0,
            duration_s: None,
        };
        assert_eq!(w.voltage(-0.1), 0.0);
        assert_eq!(w.voltage(0.0), 0.0);
        assert_eq!(w.voltage(0.031), 0.0);
        assert!(w.voltage(0.0125).abs() > 1.5);
    }
}
