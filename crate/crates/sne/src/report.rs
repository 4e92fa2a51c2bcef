//! Structured run reports and the flat CSV summary.

use crate::energy::EnergyLedger;
use crate::ensemble::EpochStats;
use crate::error::{Error, Result};
use crate::partition::PartitionPlan;
use crate::teacher::TeacherEpoch;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CSV_HEADER: &str = "run_id,arch,n_students,k_active,partition_scheme,alpha,lambda,T,seed,split,accuracy,sem,ce_loss,kd_loss,sim_loss,param_count,mac_ops,ac_ops,input_layer_macs,mean_firing_rate";

/// One summary line; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub arch: String,
    pub n_students: usize,
    pub k_active: usize,
    pub partition_scheme: String,
    pub alpha: f64,
    pub lambda: f64,
    pub t_steps: usize,
    pub seed: u64,
    pub split: String,
    pub accuracy: f64,
    pub sem: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub sim_loss: f64,
    pub param_count: u64,
    pub mac_ops: u64,
    pub ac_ops: u64,
    pub input_layer_macs: u64,
    pub mean_firing_rate: f64,
}

impl CsvRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.arch,
            self.n_students,
            self.k_active,
            self.partition_scheme,
            self.alpha,
            self.lambda,
            self.t_steps,
            self.seed,
            self.split,
            self.accuracy,
            self.sem,
            self.ce_loss,
            self.kd_loss,
            self.sim_loss,
            self.param_count,
            self.mac_ops,
            self.ac_ops,
            self.input_layer_macs,
            self.mean_firing_rate
        )
    }
}

pub fn render_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Everything one command produced; serialized as JSON next to its
/// checkpoints. Deterministic except `wall_clock_secs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    /// The input config, byte-for-byte.
    pub config_snapshot: String,
    #[serde(default)]
    pub teacher_epochs: Vec<TeacherEpoch>,
    #[serde(default)]
    pub ensemble_epochs: Vec<EpochStats>,
    #[serde(default)]
    pub final_accuracy: Option<f64>,
    #[serde(default)]
    pub final_sem: Option<f64>,
    #[serde(default)]
    pub ledger: Option<EnergyLedger>,
    #[serde(default)]
    pub plan: Option<PartitionPlan>,
    #[serde(default)]
    pub param_count: Option<u64>,
    #[serde(default)]
    pub csv_rows: Vec<CsvRow>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Stable id derived from command, seed, and config bytes.
    pub fn make_run_id(command: &str, seed: u64, config_snapshot: &str) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in config_snapshot.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{}-{:x}", command, h ^ seed)
    }

    pub fn new(command: &str, seed: u64, config_snapshot: String) -> Self {
        RunReport {
            run_id: Self::make_run_id(command, seed, &config_snapshot),
            command: command.to_string(),
            seed,
            config_snapshot,
            teacher_epochs: Vec::new(),
            ensemble_epochs: Vec::new(),
            final_accuracy: None,
            final_sem: None,
            ledger: None,
            plan: None,
            param_count: None,
            csv_rows: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(Error::from)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {}", path.display(), e)))
}

/// Collect every readable report in a directory, in file-name order.
/// Unreadable files are returned separately, not fatal.
pub fn collect_reports(dir: &Path) -> Result<(Vec<RunReport>, Vec<String>)> {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {}", dir.display(), e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("report_"))
        })
        .collect();
    entries.sort();
    for path in entries {
        match load_json::<RunReport>(&path) {
            Ok(r) => reports.push(r),
            Err(e) => skipped.push(format!("{}", e)),
        }
    }
    Ok((reports, skipped))
}
