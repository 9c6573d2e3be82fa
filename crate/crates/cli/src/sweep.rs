//! Cross-product sweeps over objective weights and budgets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cellfed_core::federation::{run, RunConfig};
use rayon::prelude::*;

use crate::run::{write_trajectory_csv, Summary};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SCHEMA: &str = "cellfed-sweep/1";

/// Values of each swept key. An empty axis keeps the configured value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Axes {
    pub theta_e: Vec<f64>,
    pub theta_l: Vec<f64>,
    /// `None` is an unlimited budget.
    pub energy_budget: Vec<Option<f64>>,
    pub latency_budget: Vec<Option<f64>>,
}

/// Parses a budget value; `inf` and `none` mean unlimited.
pub fn parse_budget(s: &str) -> Result<Option<f64>, String> {
    match s.trim() {
        "inf" | "none" => Ok(None),
        t => {
            let v: f64 = t.parse().map_err(|_| format!("`{t}` is not a number"))?;
            if v.is_infinite() && v > 0.0 {
                Ok(None)
            } else if v >= 0.0 {
                Ok(Some(v))
            } else {
                Err(format!("budget `{t}` must be non-negative"))
            }
        }
    }
}

fn check_unique<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            bail!("duplicate value {v:?} on the {name} axis");
        }
    }
    Ok(())
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// One configuration per cell, `theta_e` varying slowest.
pub fn cells(base: &RunConfig, axes: &Axes) -> Result<Vec<RunConfig>> {
    check_unique("theta_e", &axes.theta_e)?;
    check_unique("theta_l", &axes.theta_l)?;
    check_unique("energy_budget", &axes.energy_budget)?;
    check_unique("latency_budget", &axes.latency_budget)?;
    let mut out = Vec::new();
    for &te in &or_base(&axes.theta_e, base.theta_e) {
        for &tl in &or_base(&axes.theta_l, base.theta_l) {
            for &e in &or_base(&axes.energy_budget, base.energy_budget) {
                for &l in &or_base(&axes.latency_budget, base.latency_budget) {
                    let cfg = RunConfig {
                        theta_e: te,
                        theta_l: tl,
                        energy_budget: e,
                        latency_budget: l,
                        ..base.clone()
                    };
                    cfg.validate()
                        .with_context(|| format!("sweep cell theta_e={te}, theta_l={tl}"))?;
                    out.push(cfg);
                }
            }
        }
    }
    Ok(out)
}

fn budget_text(b: Option<f64>) -> String {
    b.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

/// Runs every cell in parallel. Writes `sweep.csv` and one iteration CSV
/// per cell under `cells/`.
pub fn execute(cells: &[RunConfig], out_dir: &Path) -> Result<Vec<Summary>> {
    let cell_dir = out_dir.join("cells");
    fs::create_dir_all(&cell_dir)
        .with_context(|| format!("cannot create {}", cell_dir.display()))?;
    let summaries = cells
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let t = run(cfg).with_context(|| format!("sweep cell {i}"))?;
            write_trajectory_csv(&t, &cell_dir.join(format!("cell-{i:03}.csv")))?;
            Ok(Summary::new(cfg, &t))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = format!("# schema={SWEEP_SCHEMA}\n");
    csv.push_str(
        "cell,theta_e,theta_l,energy_budget,latency_budget,arm,k,final_acc,total_bits,total_energy,total_latency\n",
    );
    for (i, (cfg, s)) in cells.iter().zip(&summaries).enumerate() {
        let acc = s.final_accuracy.map_or_else(String::new, |a| a.to_string());
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{acc},{},{},{}",
            cfg.theta_e,
            cfg.theta_l,
            budget_text(cfg.energy_budget),
            budget_text(cfg.latency_budget),
            s.arm,
            s.k,
            s.total_bits,
            s.total_energy_j,
            s.total_latency_s
        )?;
    }
    fs::write(out_dir.join(SWEEP_FILE), csv)?;
    Ok(summaries)
}

/// Whether `K` never decreases along the `theta_e` axis, holding the other
/// axes fixed. Cells are in [`cells`] order.
pub fn k_monotone_in_theta_e(axes: &Axes, summaries: &[Summary]) -> bool {
    let n_e = axes.theta_e.len().max(1);
    let stride = summaries.len() / n_e;
    (0..stride).all(|offset| {
        (1..n_e).all(|i| summaries[i * stride + offset].k >= summaries[(i - 1) * stride + offset].k)
    })
}
