//! Experiment configuration.
//!
//! A TOML file with the sections `data`, `model`, `train`, `loss` and
//! `report`, plus top-level `seed` and `output_dir`. Relative paths are
//! resolved against the directory holding the config file and stored as
//! absolute paths, so the resolved-config echo can be re-run from anywhere. Every stage of a
//! run draws its own seed from the master `seed`, so changing one stage
//! never shifts another stage's random stream.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/toy"
//!
//! [data.source]
//! kind = "gaussian"          # or: kind = "csv", path = "train.csv"
//! means = [[1.0, 0.0], [-1.0, 0.0]]
//! scale = 0.7
//! n_per_class = 2000
//!
//! [data.imbalance]           # optional
//! kind = "step"              # or: kind = "long_tailed", rho = 100.0
//! rho = 100.0
//! minority_classes = 1
//!
//! [data.test]                # optional
//! kind = "generate"          # or: "split" (fraction), "csv" (path)
//! n_per_class = 500
//!
//! [model]
//! layer_sizes = [2, 16, 16, 2]
//!
//! [train]
//! total_epochs = 60
//! transition_epoch = 30      # defaults to total_epochs / 2
//! decay_points = [{ epoch = 48, factor = 0.1 }]
//!
//! [loss.phase1]
//! kind = "ce"
//! [loss.phase2]
//! kind = "ib"
//! epsilon = 1e-3
//!
//! [report]
//! top_m = 10
//! ```

use std::path::{Path, PathBuf};

use ibloss::data::ImbalanceKind;
use ibloss::losses::LossSpec;
use ibloss::numerics::derive_seed;
use ibloss::trainer::{DecayPoint, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_DATA: u64 = 1;
pub const SEED_IMBALANCE: u64 = 2;
pub const SEED_TEST: u64 = 3;
pub const SEED_SPLIT: u64 = 4;
pub const SEED_INIT: u64 = 5;
pub const SEED_TRAIN: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<ImbalanceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Isotropic Gaussian per class; `scale` is the standard deviation.
    Gaussian {
        means: Vec<Vec<f64>>,
        scale: f64,
        n_per_class: usize,
    },
    Csv {
        path: PathBuf,
    },
}

/// Where the evaluation set comes from. `split` carves a class-balanced set
/// out of the source before the imbalance is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestConfig {
    Generate { n_per_class: usize },
    Split { fraction: f64 },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub total_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition_epoch: Option<usize>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_points: Vec<DecayPoint>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            total_epochs: 200,
            transition_epoch: None,
            batch_size: 128,
            base_lr: 0.1,
            warmup_epochs: 5,
            decay_points: Vec::new(),
            momentum: 0.9,
            weight_decay: 2e-4,
        }
    }
}

impl TrainSection {
    pub fn transition(&self) -> usize {
        self.transition_epoch.unwrap_or(self.total_epochs / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default)]
    pub phase1: LossSpec,
    #[serde(default = "LossSpec::ib")]
    pub phase2: LossSpec,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            phase1: LossSpec::Ce,
            phase2: LossSpec::ib(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub top_m: usize,
    pub k_for_topk: usize,
    /// Added to the Hessian diagonal by the exact influence oracle.
    pub damping: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            top_m: 10,
            k_for_topk: 1,
            damping: ibloss::eval::DEFAULT_DAMPING,
        }
    }
}

/// Reads, overrides and validates a config file.
///
/// Each override is `dotted.path=value`, where `value` is parsed as a TOML
/// value and falls back to a bare string.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput {
        path: path.to_path_buf(),
    })?;
    let syntax = |msg: String| CliError::ConfigSyntax {
        path: path.to_path_buf(),
        msg,
    };
    let mut cfg: ExperimentConfig = if overrides.is_empty() {
        toml::from_str(&text).map_err(|e| syntax(e.to_string()))?
    } else {
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| syntax(e.to_string()))?
    };
    let base = path.parent().unwrap_or(Path::new(""));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::ConfigSyntax {
        path: PathBuf::from("<inline>"),
        msg: e.to_string(),
    })?;
    cfg.resolve_paths(base_dir);
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like dotted.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty path segment in override"));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(parts[..=i].join("."), "is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn check(ok: bool, field: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(field, msg()))
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl ExperimentConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            let joined = base.join(&*p);
            *p = std::path::absolute(&joined).unwrap_or(joined);
        };
        join(&mut self.output_dir);
        if let SourceConfig::Csv { path } = &mut self.data.source {
            join(path);
        }
        if let Some(TestConfig::Csv { path }) = &mut self.data.test {
            join(path);
        }
    }

    /// Feature dimension and class count, when known without reading data.
    pub fn declared_shape(&self) -> Option<(usize, usize)> {
        match &self.data.source {
            SourceConfig::Gaussian { means, .. } => {
                Some((means.first().map_or(0, Vec::len), means.len()))
            }
            SourceConfig::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data.source {
            SourceConfig::Gaussian {
                means,
                scale,
                n_per_class,
            } => {
                check(means.len() >= 2, "data.source.means", || {
                    format!("need at least 2 class means, got {}", means.len())
                })?;
                let d = means[0].len();
                check(d >= 1, "data.source.means", || {
                    "means must have at least one coordinate".into()
                })?;
                if let Some(k) = means.iter().position(|m| m.len() != d) {
                    return Err(CliError::config(
                        format!("data.source.means[{k}]"),
                        format!("has {} coordinates, expected {d}", means[k].len()),
                    ));
                }
                if let Some(k) = means.iter().position(|m| m.iter().any(|v| !v.is_finite())) {
                    return Err(CliError::config(
                        format!("data.source.means[{k}]"),
                        "must be finite",
                    ));
                }
                check(
                    scale.is_finite() && *scale >= 0.0,
                    "data.source.scale",
                    || format!("must be >= 0, got {scale}"),
                )?;
                check(*n_per_class >= 1, "data.source.n_per_class", || {
                    "must be >= 1".into()
                })?;
            }
            SourceConfig::Csv { path } => {
                check(path.is_file(), "data.source.path", || {
                    format!("file not found: {}", path.display())
                })?;
            }
        }
        let k = self.declared_shape().map(|(_, k)| k);
        if let Some(imb) = &self.data.imbalance {
            let rho = match imb {
                ImbalanceKind::LongTailed { rho } => *rho,
                ImbalanceKind::Step {
                    rho,
                    minority_classes,
                } => {
                    check(
                        *minority_classes >= 1,
                        "data.imbalance.minority_classes",
                        || "must be >= 1".into(),
                    )?;
                    if let Some(k) = k {
                        check(
                            *minority_classes < k,
                            "data.imbalance.minority_classes",
                            || format!("must be < number of classes ({k}), got {minority_classes}"),
                        )?;
                    }
                    *rho
                }
            };
            check(rho.is_finite() && rho > 1.0, "data.imbalance.rho", || {
                format!("must be > 1, got {rho}")
            })?;
        }
        match &self.data.test {
            None => {}
            Some(TestConfig::Generate { n_per_class }) => {
                check(self.declared_shape().is_some(), "data.test.kind", || {
                    "\"generate\" needs a gaussian data.source".into()
                })?;
                check(*n_per_class >= 1, "data.test.n_per_class", || {
                    "must be >= 1".into()
                })?;
            }
            Some(TestConfig::Split { fraction }) => {
                check(
                    *fraction > 0.0 && *fraction < 1.0,
                    "data.test.fraction",
                    || format!("must be in (0, 1), got {fraction}"),
                )?;
            }
            Some(TestConfig::Csv { path }) => {
                check(path.is_file(), "data.test.path", || {
                    format!("file not found: {}", path.display())
                })?;
            }
        }

        let sizes = &self.model.layer_sizes;
        check(sizes.len() >= 2, "model.layer_sizes", || {
            format!("needs at least input and output sizes, got {sizes:?}")
        })?;
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(CliError::config(
                format!("model.layer_sizes[{i}]"),
                "must be >= 1",
            ));
        }
        if let Some((d, k)) = self.declared_shape() {
            check(sizes[0] == d, "model.layer_sizes[0]", || {
                format!("is {} but the data has {d} features", sizes[0])
            })?;
            check(*sizes.last().unwrap() == k, "model.layer_sizes", || {
                format!(
                    "last entry is {} but the data has {k} classes",
                    sizes.last().unwrap()
                )
            })?;
        }

        let t = &self.train;
        check(t.total_epochs >= 1, "train.total_epochs", || {
            "must be >= 1".into()
        })?;
        check(
            t.transition() <= t.total_epochs,
            "train.transition_epoch",
            || {
                format!(
                    "{} exceeds train.total_epochs {}",
                    t.transition(),
                    t.total_epochs
                )
            },
        )?;
        check(t.batch_size >= 1, "train.batch_size", || {
            "must be >= 1".into()
        })?;
        check(positive(t.base_lr), "train.base_lr", || {
            format!("must be > 0, got {}", t.base_lr)
        })?;
        check((0.0..1.0).contains(&t.momentum), "train.momentum", || {
            format!("must be in [0, 1), got {}", t.momentum)
        })?;
        check(
            t.weight_decay.is_finite() && t.weight_decay >= 0.0,
            "train.weight_decay",
            || format!("must be >= 0, got {}", t.weight_decay),
        )?;
        for (i, p) in t.decay_points.iter().enumerate() {
            check(
                positive(p.factor),
                &format!("train.decay_points[{i}].factor"),
                || format!("must be > 0, got {}", p.factor),
            )?;
            if i > 0 {
                check(
                    t.decay_points[i - 1].epoch < p.epoch,
                    &format!("train.decay_points[{i}].epoch"),
                    || "decay epochs must be strictly increasing".into(),
                )?;
            }
        }

        self.loss
            .phase1
            .validate()
            .map_err(|e| CliError::config("loss.phase1", e.to_string()))?;
        self.loss
            .phase2
            .validate()
            .map_err(|e| CliError::config("loss.phase2", e.to_string()))?;

        let r = &self.report;
        check(r.top_m >= 1, "report.top_m", || "must be >= 1".into())?;
        check(r.k_for_topk >= 1, "report.k_for_topk", || {
            "must be >= 1".into()
        })?;
        if let Some(k) = k {
            check(r.k_for_topk <= k, "report.k_for_topk", || {
                format!("must be <= number of classes ({k}), got {}", r.k_for_topk)
            })?;
        }
        check(
            r.damping.is_finite() && r.damping >= 0.0,
            "report.damping",
            || format!("must be >= 0, got {}", r.damping),
        )?;
        Ok(())
    }

    pub fn seed_for(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn train_config(&self, num_classes: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            total_epochs: t.total_epochs,
            transition_epoch: t.transition(),
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            warmup_epochs: t.warmup_epochs,
            decay_points: t.decay_points.clone(),
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            phase1_loss: self.loss.phase1.resolved(num_classes),
            phase2_loss: self.loss.phase2.resolved(num_classes),
            seed: self.seed_for(SEED_TRAIN),
        }
    }

    /// Copy with every default written out, suitable for re-running.
    pub fn resolved(&self, num_classes: usize) -> ExperimentConfig {
        let mut out = self.clone();
        out.train.transition_epoch = Some(self.train.transition());
        out.loss.phase1 = self.loss.phase1.resolved(num_classes);
        out.loss.phase2 = self.loss.phase2.resolved(num_classes);
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}
