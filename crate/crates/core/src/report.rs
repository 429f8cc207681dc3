//! Whole-scenario runs and their artifacts: a JSON report plus two-column
//! CSV tables for every plottable series.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::localize::EventEstimate;
use crate::qkd;
use crate::scenario::{Profile, ScenarioConfig};
use crate::session::{self, NodeSkrReport, SensingReport};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub profile: Profile,
    pub version: String,
    pub schema_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkrSweep {
    pub node_id: u32,
    pub excess_noise_snu: f64,
    pub distance_km: Vec<f64>,
    pub skr_bits_per_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub seed: u64,
    pub estimate: Option<EventEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunArtifacts {
    pub run_metadata: RunMetadata,
    pub skr_reports: Vec<NodeSkrReport>,
    pub sensing_reports: Vec<SensingReport>,
    pub event_estimates: Vec<EventRecord>,
    pub skr_sweeps: Vec<SkrSweep>,
    pub waveform_dumps: Vec<PathBuf>,
}

impl RunArtifacts {
    pub fn empty(config: &ScenarioConfig) -> Self {
        Self {
            run_metadata: metadata(config),
            skr_reports: Vec::new(),
            sensing_reports: Vec::new(),
            event_estimates: Vec::new(),
            skr_sweeps: Vec::new(),
            waveform_dumps: Vec::new(),
        }
    }

    /// Nodes whose QKD or sensing pipeline failed outright.
    pub fn failed_nodes(&self) -> BTreeSet<u32> {
        self.skr_reports
            .iter()
            .filter(|r| r.error.is_some())
            .map(|r| r.node_id)
            .chain(
                self.sensing_reports
                    .iter()
                    .filter(|r| r.error.is_some())
                    .map(|r| r.node_id),
            )
            .collect()
    }
}

fn metadata(config: &ScenarioConfig) -> RunMetadata {
    RunMetadata {
        scenario: config.name.clone(),
        seeds: config.seeds.clone(),
        profile: config.profile,
        version: env!("CARGO_PKG_VERSION").to_string(),
        schema_version: config.version,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub qkd: bool,
    pub sensing: bool,
    pub sweep: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            qkd: true,
            sensing: true,
            sweep: true,
        }
    }
}

/// Key rate against fiber length for each node at its configured excess
/// noise and modulation variance, every kilometer up to `max_km`.
pub fn skr_sweep(config: &ScenarioConfig, max_km: f64) -> Result<Vec<SkrSweep>> {
    let det = config.detector_params();
    let steps = max_km.max(0.0).floor() as usize;
    config
        .node_configs()
        .iter()
        .map(|n| {
            let eps = config
                .node(n.node_id)
                .expect("node exists")
                .excess_noise_snu;
            let distance_km: Vec<f64> = (0..=steps).map(|k| k as f64).collect();
            let skr_bits_per_s = distance_km
                .iter()
                .map(|&d| {
                    let t = config
                        .fiber
                        .transmittance(d * 1000.0, config.network_capacity);
                    qkd::secret_key_rate(
                        n.modulation_variance,
                        t,
                        eps,
                        &det,
                        config.beta,
                        config.rep_rate_hz,
                    )
                    .map(|r| r.k_bits_per_s)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SkrSweep {
                node_id: n.node_id,
                excess_noise_snu: eps,
                distance_km,
                skr_bits_per_s,
            })
        })
        .collect()
}

/// Run every seed of the scenario: sensing first, so that nodes it
/// suspends send pilots only during the QKD session, then localization.
pub fn simulate(config: &ScenarioConfig, options: &RunOptions) -> Result<RunArtifacts> {
    config.validate()?;
    let mut out = RunArtifacts::empty(config);
    for &seed in &config.seeds {
        let mut suspended = BTreeSet::new();
        if options.sensing {
            let reports = session::run_spm(config, seed)?;
            suspended = reports
                .iter()
                .filter(|r| r.qkd_suspended)
                .map(|r| r.node_id)
                .collect();
            if let Some(ev) = session::estimate_event(config, &reports) {
                out.event_estimates.push(match ev {
                    Ok(e) => EventRecord {
                        seed,
                        estimate: Some(e),
                        error: None,
                    },
                    Err(e) => EventRecord {
                        seed,
                        estimate: None,
                        error: Some(e.to_string()),
                    },
                });
            }
            out.sensing_reports.extend(reports);
        }
        if options.qkd {
            out.skr_reports
                .extend(session::run_qkd_session_with(config, seed, &suspended)?);
        }
    }
    if options.sweep {
        out.skr_sweeps = skr_sweep(config, 50.0)?;
    }
    Ok(out)
}

/// Simulate and write the report into `out_dir`.
pub fn run(config: &ScenarioConfig, out_dir: &Path, options: &RunOptions) -> Result<RunArtifacts> {
    let mut artifacts = simulate(config, options)?;
    artifacts.waveform_dumps = emit_report(&artifacts, out_dir)?;
    Ok(artifacts)
}

fn table(header: (&str, &str), x: &[f64], y: &[f64]) -> String {
    let mut s = format!("{},{}\n", header.0, header.1);
    for (a, b) in x.iter().zip(y) {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

/// Write `report.json` and one CSV table per plottable series. Returns
/// the table paths.
pub fn emit_report(artifacts: &RunArtifacts, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    let write = |name: &str, body: &str| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        Ok(p)
    };
    let json = serde_json::to_string_pretty(artifacts).map_err(|e| Error::Io(e.to_string()))?;
    write("report.json", &json)?;

    let mut tables = Vec::new();
    for s in &artifacts.skr_sweeps {
        tables.push(write(
            &format!("skr_sweep_node{}.csv", s.node_id),
            &table(
                ("distance_km", "skr_bits_per_s"),
                &s.distance_km,
                &s.skr_bits_per_s,
            ),
        )?);
    }
    for r in &artifacts.sensing_reports {
        let tag = format!("node{}_seed{}", r.node_id, r.seed);
        if let Some(t) = &r.trace {
            let time = t.times();
            tables.push(write(
                &format!("phase_{tag}.csv"),
                &table(("time_s", "phase_rad"), &time, &t.unwrapped_phase_rad),
            )?);
            tables.push(write(
                &format!("length_{tag}.csv"),
                &table(("time_s", "length_change_m"), &time, &t.length_change_m),
            )?);
        }
        if let Some(p) = &r.psd {
            tables.push(write(
                &format!("psd_{tag}.csv"),
                &table(("frequency_hz", "psd_rad2_per_hz"), &p.freqs, &p.psd),
            )?);
        }
        if let Some((f, p)) = &r.spectrum {
            tables.push(write(
                &format!("spectrum_{tag}.csv"),
                &table(("frequency_hz", "psd"), f, p),
            )?);
        }
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;

    #[test]
    fn sweep_decreases_with_distance() {
        let s = bundled("paper_3node").unwrap();
        for sw in skr_sweep(&s, 50.0).unwrap() {
            assert_eq!(sw.distance_km.len(), 51);
            assert!(sw.skr_bits_per_s.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn empty_artifacts_give_metadata_only() {
        let s = bundled("paper_3node").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = RunArtifacts::empty(&s);
        let files = emit_report(&a, dir.path()).unwrap();
        assert!(files.is_empty());
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["run_metadata"]["scenario"], "paper_3node");
        assert!(v["skr_reports"].as_array().unwrap().is_empty());
    }

    #[test]
    fn table_format() {
        assert_eq!(
            table(("a", "b"), &[1.0, 2.5], &[3.0, -1.0]),
            "a,b\n1,3\n2.5,-1\n"
        );
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let s = bundled("paper_3node").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "x").unwrap();
        let err = emit_report(&RunArtifacts::empty(&s), &file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
