//! One-axis parameter sweeps repeated over seeds.
//!
//! ```toml
//! seeds = [1, 2, 3]
//! axis = "epsilon"                       # transition_epoch | norm | epsilon | loss
//! values = [1e-8, 1e-3, 1e-2, { constant = 1e-3 }]
//! ```
//!
//! `{ constant = c }` replaces the IB factor with the fixed denominator `c`.
//! For the `loss` axis each value is a phase-2 loss table, e.g.
//! `{ kind = "focal", gamma = 1.0 }`.

use std::path::{Path, PathBuf};

use ibloss::losses::LossSpec;
use ibloss::numerics::Norm;
use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{run_experiment, write_metrics, HISTORY};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::output::{csv_text, write_text};

pub const SWEEP_TABLE: &str = "sweep.csv";
pub const SWEEP_CELLS: &str = "sweep_cells.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonValue {
    Epsilon(f64),
    Constant { constant: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    TransitionEpoch(Vec<usize>),
    Norm(Vec<Norm>),
    Epsilon(Vec<EpsilonValue>),
    Loss(Vec<LossSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub axis: SweepAxis,
}

fn loss_label(spec: &LossSpec) -> String {
    let ib = spec.ib_params().map(|p| {
        let denom = if p.use_factor {
            format!("eps={}", p.epsilon)
        } else {
            format!("constant={}", p.epsilon)
        };
        if p.norm == Norm::L1 {
            denom
        } else {
            format!("{denom},norm={}", p.norm.name())
        }
    });
    let mut args = Vec::new();
    match spec {
        LossSpec::Focal { gamma } | LossSpec::IbFocal { gamma, .. } => {
            args.push(format!("gamma={gamma}"))
        }
        LossSpec::Cb { beta } | LossSpec::IbCb { beta, .. } => args.push(format!("beta={beta}")),
        _ => {}
    }
    args.extend(ib);
    if args.is_empty() {
        spec.name().to_string()
    } else {
        format!("{}({})", spec.name(), args.join(","))
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<SweepSpec> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput {
            path: path.to_path_buf(),
        })?;
        let spec: SweepSpec = toml::from_str(&text).map_err(|e| CliError::ConfigSyntax {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn axis_name(&self) -> &'static str {
        match self.axis {
            SweepAxis::TransitionEpoch(_) => "transition_epoch",
            SweepAxis::Norm(_) => "norm",
            SweepAxis::Epsilon(_) => "epsilon",
            SweepAxis::Loss(_) => "loss",
        }
    }

    pub fn len(&self) -> usize {
        match &self.axis {
            SweepAxis::TransitionEpoch(v) => v.len(),
            SweepAxis::Norm(v) => v.len(),
            SweepAxis::Epsilon(v) => v.len(),
            SweepAxis::Loss(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config(
                "sweep.seeds",
                "must list at least one seed",
            ));
        }
        if self.is_empty() {
            return Err(CliError::config(
                "sweep.values",
                "must list at least one value",
            ));
        }
        if let SweepAxis::Epsilon(v) = &self.axis {
            for (i, e) in v.iter().enumerate() {
                let (EpsilonValue::Epsilon(x) | EpsilonValue::Constant { constant: x }) = *e;
                if !(x.is_finite() && x > 0.0) {
                    return Err(CliError::config(
                        format!("sweep.values[{i}]"),
                        format!("must be > 0, got {x}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self, i: usize) -> String {
        match &self.axis {
            SweepAxis::TransitionEpoch(v) => v[i].to_string(),
            SweepAxis::Norm(v) => v[i].name().to_string(),
            SweepAxis::Epsilon(v) => match v[i] {
                EpsilonValue::Epsilon(e) => e.to_string(),
                EpsilonValue::Constant { constant } => format!("constant {constant}"),
            },
            SweepAxis::Loss(v) => loss_label(&v[i]),
        }
    }

    /// `base` with the `i`-th axis value and `seed` applied.
    pub fn cell_config(
        &self,
        base: &ExperimentConfig,
        i: usize,
        seed: u64,
    ) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let ib_field = |cfg: &mut ExperimentConfig| -> Result<()> {
            if cfg.loss.phase2.ib_params().is_none() {
                return Err(CliError::config(
                    "loss.phase2",
                    format!(
                        "the {} axis needs an IB-family phase-2 loss, got {}",
                        self.axis_name(),
                        cfg.loss.phase2.name()
                    ),
                ));
            }
            Ok(())
        };
        match &self.axis {
            SweepAxis::TransitionEpoch(v) => cfg.train.transition_epoch = Some(v[i]),
            SweepAxis::Norm(v) => {
                ib_field(&mut cfg)?;
                cfg.loss.phase2.ib_params_mut().unwrap().norm = v[i];
            }
            SweepAxis::Epsilon(v) => {
                ib_field(&mut cfg)?;
                let p = cfg.loss.phase2.ib_params_mut().unwrap();
                match v[i] {
                    EpsilonValue::Epsilon(e) => {
                        p.epsilon = e;
                        p.use_factor = true;
                    }
                    EpsilonValue::Constant { constant } => {
                        p.epsilon = constant;
                        p.use_factor = false;
                    }
                }
            }
            SweepAxis::Loss(v) => cfg.loss.phase2 = v[i].clone(),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub value_index: usize,
    pub label: String,
    pub seed: u64,
    pub overall_accuracy: f64,
    pub balanced_accuracy: f64,
    /// Test accuracy on the class with the fewest training samples.
    pub minority_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub runs: usize,
    pub overall: (f64, f64),
    pub balanced: (f64, f64),
    pub minority: (f64, f64),
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub cells: Vec<CellResult>,
    pub rows: Vec<SweepRow>,
    pub table_path: PathBuf,
}

fn cell_dir(base: &ExperimentConfig, i: usize, seed: u64) -> PathBuf {
    base.output_dir
        .join("cells")
        .join(format!("v{i}_seed{seed}"))
}

fn run_cell(spec: &SweepSpec, base: &ExperimentConfig, i: usize, seed: u64) -> Result<CellResult> {
    let mut cfg = spec.cell_config(base, i, seed)?;
    cfg.output_dir = cell_dir(base, i, seed);
    let out = run_experiment(&cfg)?;
    let m = out.metrics.expect("sweep configs always carry a test set");
    write_text(&cfg.output_dir.join(HISTORY), &out.history.to_csv())?;
    write_metrics(&cfg.output_dir, &m)?;
    let minority = out
        .train_counts
        .iter()
        .enumerate()
        .min_by_key(|&(k, &c)| (c, k))
        .map(|(k, _)| k)
        .unwrap_or(0);
    Ok(CellResult {
        value_index: i,
        label: spec.label(i),
        seed,
        overall_accuracy: m.overall_accuracy,
        balanced_accuracy: m.balanced_accuracy,
        minority_accuracy: m.per_class_accuracy[minority],
    })
}

fn cells_csv(cells: &[CellResult]) -> String {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.label.clone(),
                c.seed.to_string(),
                c.overall_accuracy.to_string(),
                c.balanced_accuracy.to_string(),
                c.minority_accuracy.to_string(),
            ]
        })
        .collect();
    csv_text(
        &[
            "value",
            "seed",
            "overall_accuracy",
            "balanced_accuracy",
            "minority_accuracy",
        ],
        &rows,
    )
}

pub fn render_table(axis: &str, rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{axis:<24} {:>5}  {:>17}  {:>17}  {:>17}\n",
        "runs", "overall", "balanced", "minority"
    );
    for r in rows {
        let pm = |(m, sd): (f64, f64)| format!("{:.4} ± {:.4}", m, sd);
        s += &format!(
            "{:<24} {:>5}  {:>17}  {:>17}  {:>17}\n",
            r.label,
            r.runs,
            pm(r.overall),
            pm(r.balanced),
            pm(r.minority)
        );
    }
    s
}

/// Runs every (value, seed) cell in parallel. Completed cells are written to
/// `sweep_cells.csv` even when another cell fails; the first failure in grid
/// order is returned with its cell identity.
pub fn cmd_sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepOutput> {
    spec.validate()?;
    if base.data.test.is_none() {
        return Err(CliError::config("data.test", "a sweep needs a test set"));
    }
    for i in 0..spec.len() {
        spec.cell_config(base, i, spec.seeds[0])?;
    }
    let grid: Vec<(usize, u64)> = (0..spec.len())
        .flat_map(|i| spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    info!("sweeping {} over {} cells", spec.axis_name(), grid.len());
    let results: Vec<Result<CellResult>> = grid
        .par_iter()
        .map(|&(i, seed)| {
            run_cell(spec, base, i, seed).map_err(|e| {
                let cell = format!("{}={} seed={seed}", spec.axis_name(), spec.label(i));
                error!("cell {cell} failed: {e}");
                CliError::Cell {
                    cell,
                    source: Box::new(e),
                }
            })
        })
        .collect();
    let mut cells = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    write_text(&base.output_dir.join(SWEEP_CELLS), &cells_csv(&cells))?;
    if let Some(e) = first_err {
        return Err(e);
    }

    let rows: Vec<SweepRow> = (0..spec.len())
        .map(|i| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.value_index == i).collect();
            let col = |f: fn(&CellResult) -> f64| {
                mean_std(&mine.iter().map(|c| f(c)).collect::<Vec<_>>())
            };
            SweepRow {
                label: spec.label(i),
                runs: mine.len(),
                overall: col(|c| c.overall_accuracy),
                balanced: col(|c| c.balanced_accuracy),
                minority: col(|c| c.minority_accuracy),
            }
        })
        .collect();
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.runs.to_string(),
                r.overall.0.to_string(),
                r.overall.1.to_string(),
                r.balanced.0.to_string(),
                r.balanced.1.to_string(),
                r.minority.0.to_string(),
                r.minority.1.to_string(),
            ]
        })
        .collect();
    let header = [
        spec.axis_name(),
        "runs",
        "overall_mean",
        "overall_std",
        "balanced_mean",
        "balanced_std",
        "minority_mean",
        "minority_std",
    ];
    let table_path = base.output_dir.join(SWEEP_TABLE);
    write_text(&table_path, &csv_text(&header, &table_rows))?;
    Ok(SweepOutput {
        cells,
        rows,
        table_path,
    })
}
