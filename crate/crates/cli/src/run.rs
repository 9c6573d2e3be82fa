//! Single-run execution and its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use cellfed_core::federation::{run, write_checkpoint, RunConfig, Trajectory};
use serde::Serialize;

pub const CSV_FILE: &str = "iterations.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "weights.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub arm: String,
    pub seed: u64,
    /// Affordable rounds.
    pub k: usize,
    /// Rounds executed, including one that broke a budget.
    pub executed: usize,
    pub k_latency: usize,
    pub k_energy: usize,
    pub final_accuracy: Option<f64>,
    pub total_bits: usize,
    pub total_energy_j: f64,
    pub total_latency_s: f64,
}

impl Summary {
    pub fn new(cfg: &RunConfig, t: &Trajectory) -> Self {
        Self {
            arm: t.arm.to_string(),
            seed: cfg.seed,
            k: t.k(),
            executed: t.executed,
            k_latency: t.stop.k_latency,
            k_energy: t.stop.k_energy,
            final_accuracy: t.final_accuracy(),
            total_bits: t.total_bits(),
            total_energy_j: t.total_energy(),
            total_latency_s: t.total_latency(),
        }
    }

    pub fn line(&self) -> String {
        let acc = self
            .final_accuracy
            .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
        format!(
            "{}: K = {} ({} executed), accuracy {acc}, {} bits, {:.4e} J, {:.4e} s",
            self.arm, self.k, self.executed, self.total_bits, self.total_energy_j, self.total_latency_s
        )
    }
}

pub fn write_trajectory_csv(t: &Trajectory, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut out = BufWriter::new(file);
    t.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Runs `cfg` and writes the CSV, summary and final weights into `out_dir`.
pub fn execute(cfg: &RunConfig, out_dir: &Path) -> Result<Summary> {
    let t = run(cfg)?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    write_trajectory_csv(&t, &out_dir.join(CSV_FILE))?;
    let summary = Summary::new(cfg, &t);
    fs::write(
        out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let mut ckpt = BufWriter::new(File::create(out_dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(&mut ckpt, t.final_weights(), t.k() as u64)?;
    ckpt.flush()?;
    Ok(summary)
}
