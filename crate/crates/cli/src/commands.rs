use std::path::{Path, PathBuf};

use ibloss::data::{
    apply_imbalance, load_csv, make_gaussian_mixture, meta_path, stratified_split, write_csv,
    Dataset, DatasetMeta, GaussianMixtureSpec, ImbalanceSpec,
};
use ibloss::eval::{
    evaluate, exact_influence, influence_report, spearman_rank_corr, ClassInfluence,
    LastLayerParams, Metrics, MAX_EXACT_PARAMS,
};
use ibloss::model::MlpParams;
use ibloss::trainer::{train, RunHistory};
use ibloss::Error;
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    ExperimentConfig, SourceConfig, TestConfig, SEED_DATA, SEED_IMBALANCE, SEED_INIT, SEED_SPLIT,
    SEED_TEST,
};
use crate::error::{CliError, Result};
use crate::output::{csv_text, ensure_dir, write_atomic, write_json, write_text};

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS: &str = "metrics.json";
pub const PER_CLASS: &str = "per_class.csv";
pub const INFLUENCE: &str = "influence.json";
pub const INFLUENCE_SAMPLES: &str = "influence_samples.csv";
pub const INFLUENCE_CLASSES: &str = "influence_classes.csv";
pub const INFLUENCE_HISTOGRAM: &str = "influence_histogram.csv";

const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

fn load_input(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(CliError::MissingInput {
            path: path.to_path_buf(),
        });
    }
    Ok(load_csv(path)?)
}

/// Builds the training set (imbalance applied) and the optional test set.
/// A split test set is taken before the imbalance, so it stays balanced.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let source = match &cfg.data.source {
        SourceConfig::Gaussian {
            means,
            scale,
            n_per_class,
        } => make_gaussian_mixture(&GaussianMixtureSpec {
            means: means.clone(),
            scale: *scale,
            n_per_class: *n_per_class,
            seed: cfg.seed_for(SEED_DATA),
        })?
        .with_name("train"),
        SourceConfig::Csv { path } => load_input(path)?.with_name("train"),
    };
    let (base, test) = match &cfg.data.test {
        None => (source, None),
        Some(TestConfig::Split { fraction }) => {
            let (tr, te) = stratified_split(&source, *fraction, cfg.seed_for(SEED_SPLIT))?;
            (tr.with_name("train"), Some(te.with_name("test")))
        }
        Some(TestConfig::Generate { n_per_class }) => {
            let SourceConfig::Gaussian { means, scale, .. } = &cfg.data.source else {
                return Err(CliError::config(
                    "data.test.kind",
                    "\"generate\" needs a gaussian data.source",
                ));
            };
            let test = make_gaussian_mixture(&GaussianMixtureSpec {
                means: means.clone(),
                scale: *scale,
                n_per_class: *n_per_class,
                seed: cfg.seed_for(SEED_TEST),
            })?;
            (source, Some(test.with_name("test")))
        }
        Some(TestConfig::Csv { path }) => (source, Some(load_input(path)?.with_name("test"))),
    };
    let train = match &cfg.data.imbalance {
        Some(kind) => apply_imbalance(
            &base,
            &ImbalanceSpec {
                kind: *kind,
                seed: cfg.seed_for(SEED_IMBALANCE),
            },
        )?
        .with_name("train"),
        None => base,
    };
    check_model_shape(cfg, &train)?;
    if let Some(t) = &test {
        if t.dim() != train.dim() {
            return Err(CliError::config(
                "data.test",
                format!(
                    "test set has {} features, training set has {}",
                    t.dim(),
                    train.dim()
                ),
            ));
        }
    }
    Ok(PreparedData { train, test })
}

fn check_model_shape(cfg: &ExperimentConfig, train: &Dataset) -> Result<()> {
    let sizes = &cfg.model.layer_sizes;
    if sizes[0] != train.dim() {
        return Err(CliError::config(
            "model.layer_sizes[0]",
            format!("is {} but the data has {} features", sizes[0], train.dim()),
        ));
    }
    if *sizes.last().unwrap() != train.num_classes() {
        return Err(CliError::config(
            "model.layer_sizes",
            format!(
                "last entry is {} but the data has {} classes",
                sizes.last().unwrap(),
                train.num_classes()
            ),
        ));
    }
    if cfg.report.k_for_topk > train.num_classes() {
        return Err(CliError::config(
            "report.k_for_topk",
            format!("must be <= number of classes ({})", train.num_classes()),
        ));
    }
    Ok(())
}

fn provenance(cfg: &ExperimentConfig, role: &str) -> serde_json::Value {
    json!({
        "role": role,
        "seed": cfg.seed,
        "source": cfg.data.source,
        "imbalance": cfg.data.imbalance,
        "test": cfg.data.test,
    })
}

fn write_dataset(ds: &Dataset, path: &Path, provenance: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf)?;
    write_atomic(path, &buf)?;
    write_json(&meta_path(path), &DatasetMeta::describe(ds, provenance))
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub train_csv: PathBuf,
    pub test_csv: Option<PathBuf>,
    pub data: PreparedData,
}

/// Writes `train.csv` (and `test.csv` when configured) with metadata sidecars.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenDataOutput> {
    let data = prepare_data(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let train_csv = cfg.output_dir.join(TRAIN_CSV);
    write_dataset(&data.train, &train_csv, provenance(cfg, "train"))?;
    info!(
        "wrote {} ({} samples, counts {:?})",
        train_csv.display(),
        data.train.len(),
        data.train.class_counts()
    );
    let test_csv = match &data.test {
        Some(t) => {
            let p = cfg.output_dir.join(TEST_CSV);
            write_dataset(t, &p, provenance(cfg, "test"))?;
            info!("wrote {} ({} samples)", p.display(), t.len());
            Some(p)
        }
        None => None,
    };
    Ok(GenDataOutput {
        train_csv,
        test_csv,
        data,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: MlpParams,
    pub history: RunHistory,
    pub metrics: Option<Metrics>,
    pub train_counts: Vec<usize>,
}

/// Trains on the configured data and evaluates on the test set, if any.
/// Writes nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = prepare_data(cfg)?;
    let k = data.train.num_classes();
    let tc = cfg.train_config(k);
    tc.validate()
        .map_err(|e| CliError::config("train", e.to_string()))?;
    let model = MlpParams::init(&cfg.model.layer_sizes, cfg.seed_for(SEED_INIT))?;
    let (model, history) = train(model, &data.train, &tc)?;
    let metrics = match &data.test {
        Some(t) => Some(evaluate(&model, t, cfg.report.k_for_topk)?),
        None => None,
    };
    Ok(RunOutcome {
        model,
        history,
        metrics,
        train_counts: data.train.class_counts().to_vec(),
    })
}

/// Trains, then writes the checkpoint, history, resolved config and (with a
/// test set) the metrics files into `output_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let out = run_experiment(cfg)?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    write_atomic(&dir.join(CHECKPOINT), &out.model.to_bytes())?;
    write_text(&dir.join(HISTORY), &out.history.to_csv())?;
    write_text(
        &dir.join(RESOLVED_CONFIG),
        &cfg.resolved(out.model.num_classes()).to_toml(),
    )?;
    if let Some(m) = &out.metrics {
        write_metrics(dir, m)?;
        info!(
            "test accuracy {:.4}, balanced {:.4}",
            m.overall_accuracy, m.balanced_accuracy
        );
    }
    info!(
        "trained {} epochs ({} fine-tune); outputs in {}",
        out.history.records.len(),
        out.history.fine_tune_epochs(),
        dir.display()
    );
    Ok(out)
}

pub fn per_class_csv(m: &Metrics) -> String {
    let rows: Vec<Vec<String>> = (0..m.class_totals.len())
        .map(|k| {
            vec![
                k.to_string(),
                m.class_totals[k].to_string(),
                (m.confusion.get(k, k) as usize).to_string(),
                m.per_class_accuracy[k].to_string(),
            ]
        })
        .collect();
    csv_text(&["class", "test_count", "correct", "accuracy"], &rows)
}

pub fn write_metrics(dir: &Path, m: &Metrics) -> Result<()> {
    write_json(&dir.join(METRICS), m)?;
    write_text(&dir.join(PER_CLASS), &per_class_csv(m))
}

fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    if !path.is_file() {
        return Err(CliError::MissingInput {
            path: path.to_path_buf(),
        });
    }
    Ok(MlpParams::load(path)?)
}

/// Evaluates a checkpoint on a CSV dataset and writes `metrics.json` and
/// `per_class.csv` into `out_dir`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out_dir: &Path, top_k: usize) -> Result<Metrics> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_input(data)?;
    if top_k == 0 || top_k > model.num_classes() {
        return Err(CliError::config(
            "top_k",
            format!("must be in [1, {}], got {top_k}", model.num_classes()),
        ));
    }
    let m = evaluate(&model, &ds, top_k)?;
    write_metrics(out_dir, &m)?;
    info!(
        "accuracy {:.4}, balanced {:.4}, top-{top_k} {:.4}",
        m.overall_accuracy, m.balanced_accuracy, m.top_k_accuracy
    );
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactSummary {
    pub damping: f64,
    pub params: LastLayerParams,
    pub max_residual: f64,
    /// Spearman correlation between exact influence L1 magnitudes and the
    /// per-sample IB factors; absent when either side is constant.
    pub spearman_vs_ib_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceSummary {
    pub samples: usize,
    pub top_m: usize,
    pub classes: Vec<ClassInfluence>,
    pub majority_class: usize,
    pub minority_class: usize,
    pub majority_mean_normalized: f64,
    pub minority_mean_normalized: f64,
    pub majority_top_mean_normalized: f64,
    pub minority_top_mean_normalized: f64,
    /// Majority's top-m mean normalized factor exceeds the minority's.
    pub majority_dominates: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactSummary>,
}

fn extreme_classes(counts: &[usize]) -> (usize, usize) {
    let mut major = 0;
    let mut minor = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[major] {
            major = k;
        }
        if c < counts[minor] {
            minor = k;
        }
    }
    (major, minor)
}

/// Exact last-layer influence for single-layer models, raising the damping
/// tenfold while the damped Hessian stays singular.
fn exact_for_linear(
    model: &MlpParams,
    ds: &Dataset,
    damping: f64,
) -> Result<Option<(Vec<f64>, ExactSummary)>> {
    let params = LastLayerParams::WeightsAndBias;
    if model.num_layers() != 1 || model.param_count() > MAX_EXACT_PARAMS {
        return Ok(None);
    }
    let mut d = damping;
    for _ in 0..6 {
        match exact_influence(model, ds, d, params) {
            Ok(ex) => {
                info!(
                    "exact influence with damping {d:e}, max residual {:e}",
                    ex.max_residual
                );
                let summary = ExactSummary {
                    damping: d,
                    params,
                    max_residual: ex.max_residual,
                    spearman_vs_ib_factor: None,
                };
                return Ok(Some((ex.magnitudes, summary)));
            }
            Err(Error::Singular(msg)) => {
                warn!("{msg}");
                d = if d == 0.0 { 1e-8 } else { d * 10.0 };
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::Singular(format!("Hessian still singular at damping {d:e}")).into())
}

fn histogram_rows(normalized: &[f64], labels: &[usize], num_classes: usize) -> Vec<Vec<String>> {
    let mut counts = vec![vec![0usize; HISTOGRAM_BINS]; num_classes];
    for (&v, &y) in normalized.iter().zip(labels) {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[y][bin] += 1;
    }
    let mut rows = Vec::new();
    for (k, bins) in counts.iter().enumerate() {
        for (b, c) in bins.iter().enumerate() {
            rows.push(vec![
                k.to_string(),
                (b as f64 / HISTOGRAM_BINS as f64).to_string(),
                ((b + 1) as f64 / HISTOGRAM_BINS as f64).to_string(),
                c.to_string(),
            ]);
        }
    }
    rows
}

/// Per-sample IB factors, their global min-max scaling and per-class
/// summaries; single-layer models also get the exact influence oracle.
pub fn cmd_influence(
    checkpoint: &Path,
    data: &Path,
    top_m: usize,
    damping: f64,
    out_dir: &Path,
) -> Result<InfluenceSummary> {
    if !(damping.is_finite() && damping >= 0.0) {
        return Err(CliError::config(
            "damping",
            format!("must be >= 0, got {damping}"),
        ));
    }
    let model = load_checkpoint(checkpoint)?;
    let ds = load_input(data)?;
    let report = influence_report(&model, &ds, top_m)?;
    let exact = exact_for_linear(&model, &ds, damping)?;

    let mut header = vec!["index", "label", "ib_factor", "normalized"];
    if exact.is_some() {
        header.push("exact_l1");
    }
    let rows: Vec<Vec<String>> = (0..ds.len())
        .map(|i| {
            let mut r = vec![
                i.to_string(),
                report.labels[i].to_string(),
                report.raw[i].to_string(),
                report.normalized[i].to_string(),
            ];
            if let Some((mags, _)) = &exact {
                r.push(mags[i].to_string());
            }
            r
        })
        .collect();
    write_text(&out_dir.join(INFLUENCE_SAMPLES), &csv_text(&header, &rows))?;

    let class_rows: Vec<Vec<String>> = report
        .classes
        .iter()
        .map(|c| {
            vec![
                c.class.to_string(),
                c.count.to_string(),
                c.mean_raw.to_string(),
                c.mean_normalized.to_string(),
                c.top_mean_normalized.to_string(),
            ]
        })
        .collect();
    write_text(
        &out_dir.join(INFLUENCE_CLASSES),
        &csv_text(
            &[
                "class",
                "count",
                "mean_raw",
                "mean_normalized",
                "top_mean_normalized",
            ],
            &class_rows,
        ),
    )?;
    write_text(
        &out_dir.join(INFLUENCE_HISTOGRAM),
        &csv_text(
            &["class", "bin_low", "bin_high", "count"],
            &histogram_rows(&report.normalized, &report.labels, ds.num_classes()),
        ),
    )?;

    let (major, minor) = extreme_classes(ds.class_counts());
    let exact = exact.map(|(mags, mut s)| {
        s.spearman_vs_ib_factor = spearman_rank_corr(&mags, &report.raw).ok();
        match s.spearman_vs_ib_factor {
            Some(r) => info!("rank correlation, exact influence vs IB factor: {r:.4}"),
            None => warn!("rank correlation undefined (constant input)"),
        }
        s
    });
    let summary = InfluenceSummary {
        samples: ds.len(),
        top_m,
        majority_class: major,
        minority_class: minor,
        majority_mean_normalized: report.classes[major].mean_normalized,
        minority_mean_normalized: report.classes[minor].mean_normalized,
        majority_top_mean_normalized: report.classes[major].top_mean_normalized,
        minority_top_mean_normalized: report.classes[minor].top_mean_normalized,
        majority_dominates: report.classes[major].top_mean_normalized
            > report.classes[minor].top_mean_normalized,
        classes: report.classes,
        exact,
    };
    write_json(&out_dir.join(INFLUENCE), &summary)?;
    info!(
        "top-{top_m} mean normalized factor: class {major} (majority) {:.4}, class {minor} (minority) {:.4}",
        summary.majority_top_mean_normalized, summary.minority_top_mean_normalized
    );
    Ok(summary)
}
