//! Labeled datasets, synthetic Gaussian mixtures, the long-tailed and step
//! imbalance transforms, balanced test splits and CSV I/O.
//!
//! CSV layout: a header `f0,f1,...,f{d-1},label` followed by one row per
//! sample. Features are written in shortest round-trip form, so a save/load
//! cycle reproduces every bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!(
                    "{} feature rows but {} labels",
                    features.rows(),
                    labels.len()
                ),
            ));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let mut class_counts = vec![0; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {y} but there are {num_classes} classes"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Dataset {
            features,
            labels,
            class_counts,
            name: name.into(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Indices of each class's samples, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            name,
            Matrix::from_vec(indices.len(), d, data)?,
            labels,
            self.num_classes(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub means: Vec<Vec<f64>>,
    /// Standard deviation of the isotropic noise around each mean.
    pub scale: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

pub fn make_gaussian_mixture(spec: &GaussianMixtureSpec) -> Result<Dataset> {
    let k = spec.means.len();
    if k == 0 {
        return Err(Error::invalid("mixture needs at least one mean"));
    }
    let d = spec.means[0].len();
    if d == 0 || spec.means.iter().any(|m| m.len() != d) {
        return Err(Error::invalid(
            "mixture means must share a nonzero dimension",
        ));
    }
    if spec.means.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture means".into()));
    }
    for i in 0..k {
        for j in i + 1..k {
            if spec.means[i] == spec.means[j] {
                return Err(Error::invalid(format!(
                    "mixture means {i} and {j} coincide"
                )));
            }
        }
    }
    if !(spec.scale.is_finite() && spec.scale >= 0.0) {
        return Err(Error::invalid(format!(
            "mixture scale must be >= 0, got {}",
            spec.scale
        )));
    }
    if spec.n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    let mut rng = SeededRng::new(spec.seed);
    let n = k * spec.n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            data.extend(mean.iter().map(|m| m + spec.scale * rng.normal()));
            labels.push(class);
        }
    }
    Dataset::new("gaussian_mixture", Matrix::from_vec(n, d, data)?, labels, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImbalanceKind {
    LongTailed { rho: f64 },
    Step { rho: f64, minority_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    #[serde(flatten)]
    pub kind: ImbalanceKind,
    pub seed: u64,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho > 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "imbalance ratio rho must be > 1, got {rho}"
        )))
    }
}

fn rounded_count(class: usize, value: f64) -> Result<usize> {
    let n = value.round();
    if n < 1.0 {
        return Err(Error::invalid(format!(
            "class {class} would keep {value:.3} samples, which rounds to 0"
        )));
    }
    Ok(n as usize)
}

/// Long-tailed target counts `round(n_max · μ^k)` with `μ = ρ^{-1/(K-1)}`.
pub fn long_tail_counts(n_max: usize, num_classes: usize, rho: f64) -> Result<Vec<usize>> {
    check_rho(rho)?;
    if num_classes < 2 {
        return Err(Error::invalid(
            "long-tailed imbalance needs at least 2 classes",
        ));
    }
    let mu = long_tail_mu(num_classes, rho);
    (0..num_classes)
        .map(|k| rounded_count(k, n_max as f64 * mu.powi(k as i32)))
        .collect()
}

/// Per-class decay factor that makes the last class `1/ρ` the size of the first.
pub fn long_tail_mu(num_classes: usize, rho: f64) -> f64 {
    rho.powf(-1.0 / (num_classes as f64 - 1.0))
}

/// Step target counts: the first `K − m` classes keep `n_max`, the last `m`
/// keep `round(n_max / ρ)`.
pub fn step_counts(
    n_max: usize,
    num_classes: usize,
    rho: f64,
    minority_classes: usize,
) -> Result<Vec<usize>> {
    check_rho(rho)?;
    if minority_classes == 0 || minority_classes >= num_classes {
        return Err(Error::invalid(format!(
            "minority_classes must be in [1, {}), got {minority_classes}",
            num_classes
        )));
    }
    let minority = rounded_count(num_classes - 1, n_max as f64 / rho)?;
    Ok((0..num_classes)
        .map(|k| {
            if k < num_classes - minority_classes {
                n_max
            } else {
                minority
            }
        })
        .collect())
}

/// Keeps `targets[k]` samples of class `k`, chosen without replacement.
/// Kept samples stay in their original order.
pub fn subsample_to_counts(ds: &Dataset, targets: &[usize], seed: u64) -> Result<Dataset> {
    if targets.len() != ds.num_classes() {
        return Err(Error::shape(
            "subsample",
            format!("{} targets for {} classes", targets.len(), ds.num_classes()),
        ));
    }
    let mut keep = vec![false; ds.len()];
    for (k, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.len() < targets[k] {
            return Err(Error::invalid(format!(
                "class {k} has {} samples but {} are required",
                idx.len(),
                targets[k]
            )));
        }
        SeededRng::child(seed, k as u64).shuffle(&mut idx);
        for &i in &idx[..targets[k]] {
            keep[i] = true;
        }
    }
    let indices: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    ds.subset(&indices, ds.name())
}

pub fn apply_long_tail(ds: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    let n_max = *ds
        .class_counts()
        .first()
        .ok_or_else(|| Error::invalid("dataset has no classes"))?;
    let targets = long_tail_counts(n_max, ds.num_classes(), rho)?;
    subsample_to_counts(ds, &targets, seed)
}

pub fn apply_step(ds: &Dataset, rho: f64, minority_classes: usize, seed: u64) -> Result<Dataset> {
    let n_max = *ds
        .class_counts()
        .first()
        .ok_or_else(|| Error::invalid("dataset has no classes"))?;
    let targets = step_counts(n_max, ds.num_classes(), rho, minority_classes)?;
    subsample_to_counts(ds, &targets, seed)
}

pub fn apply_imbalance(ds: &Dataset, spec: &ImbalanceSpec) -> Result<Dataset> {
    match spec.kind {
        ImbalanceKind::LongTailed { rho } => apply_long_tail(ds, rho, spec.seed),
        ImbalanceKind::Step {
            rho,
            minority_classes,
        } => apply_step(ds, rho, minority_classes, spec.seed),
    }
}

/// `max_k n_k / min_k n_k`.
pub fn imbalance_ratio_of_counts(counts: &[usize]) -> Result<f64> {
    let max = counts
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::invalid("no classes"))?;
    let min = counts.iter().copied().min().unwrap();
    if min == 0 {
        let k = counts.iter().position(|&n| n == 0).unwrap();
        return Err(Error::invalid(format!("class {k} is empty")));
    }
    Ok(max as f64 / min as f64)
}

pub fn imbalance_ratio(ds: &Dataset) -> Result<f64> {
    imbalance_ratio_of_counts(ds.class_counts())
}

/// Splits off a class-balanced test set of `floor(min_k n_k · fraction)`
/// samples per class; the rest is the training set.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let min = ds.class_counts().iter().copied().min().unwrap_or(0);
    let per_class = (min as f64 * test_fraction + 1e-9).floor() as usize;
    if per_class == 0 {
        return Err(Error::invalid(format!(
            "test fraction {test_fraction} leaves no test samples for the smallest class ({min} samples)"
        )));
    }
    let mut in_test = vec![false; ds.len()];
    for (k, mut idx) in ds.class_indices().into_iter().enumerate() {
        SeededRng::child(seed, k as u64).shuffle(&mut idx);
        for &i in &idx[..per_class] {
            in_test[i] = true;
        }
    }
    let test_idx: Vec<usize> = (0..ds.len()).filter(|&i| in_test[i]).collect();
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !in_test[i]).collect();
    Ok((
        ds.subset(&train_idx, format!("{}_train", ds.name()))?,
        ds.subset(&test_idx, format!("{}_test", ds.name()))?,
    ))
}

fn header(dim: usize) -> Vec<String> {
    (0..dim)
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect()
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_csv<W: std::io::Write>(ds: &Dataset, out: W) -> Result<()> {
    let to_err = |e: csv::Error| Error::invalid(format!("csv write: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(ds.dim())).map_err(to_err)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.y(i).to_string());
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    read_csv(file, path, name)
}

fn read_csv<R: std::io::Read>(input: R, path: &Path, name: String) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols != header(cols.len() - 1) {
        return Err(parse_err(
            1,
            format!(
                "expected header f0,...,f{{d-1}},label, got {}",
                cols.join(",")
            ),
        ));
    }
    let dim = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("feature f{j} is not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("feature f{j} is not finite: {field:?}"),
                ));
            }
            data.push(v);
        }
        let label_field = &record[dim];
        let y: usize = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label is not a class index: {label_field:?}")))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no samples".into(),
        });
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut seen = vec![false; num_classes];
    labels.iter().for_each(|&y| seen[y] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("label set is not contiguous: class {missing} never appears"),
        });
    }
    let n = labels.len();
    Dataset::new(name, Matrix::from_vec(n, dim, data)?, labels, num_classes)
}

/// Sidecar record written next to a saved dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub imbalance_ratio: Option<f64>,
    /// Free-form description of how the data was produced (spec, seeds).
    pub provenance: serde_json::Value,
}

impl DatasetMeta {
    pub fn describe(ds: &Dataset, provenance: serde_json::Value) -> Self {
        DatasetMeta {
            name: ds.name().to_string(),
            samples: ds.len(),
            dim: ds.dim(),
            num_classes: ds.num_classes(),
            class_counts: ds.class_counts().to_vec(),
            imbalance_ratio: imbalance_ratio(ds).ok(),
            provenance,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes") + "\n"
    }
}

/// `train.csv` → `train.meta.json`.
pub fn meta_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mixture(k: usize, n: usize, seed: u64) -> Dataset {
        let means = (0..k).map(|c| vec![c as f64, -(c as f64) * 0.5]).collect();
        make_gaussian_mixture(&GaussianMixtureSpec {
            means,
            scale: 0.5,
            n_per_class: n,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn mixture_bookkeeping_and_determinism() {
        let spec = GaussianMixtureSpec {
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            scale: 0.5,
            n_per_class: 100,
            seed: 4,
        };
        let a = make_gaussian_mixture(&spec).unwrap();
        assert_eq!(a.class_counts(), &[100, 100]);
        let b = make_gaussian_mixture(&spec).unwrap();
        assert_eq!(a.features().data(), b.features().data());

        let zero = make_gaussian_mixture(&GaussianMixtureSpec {
            scale: 0.0,
            ..spec.clone()
        })
        .unwrap();
        for i in 0..zero.len() {
            assert_eq!(zero.x(i), spec.means[zero.y(i)].as_slice());
        }
        let dup = GaussianMixtureSpec {
            means: vec![vec![1.0], vec![1.0]],
            ..spec.clone()
        };
        assert!(make_gaussian_mixture(&dup).is_err());
        assert!(make_gaussian_mixture(&GaussianMixtureSpec {
            n_per_class: 0,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn long_tail_counts_cifar_shape() {
        let counts = long_tail_counts(5000, 10, 100.0).unwrap();
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 50);
        assert_eq!(imbalance_ratio_of_counts(&counts).unwrap(), 100.0);
        assert!(counts.windows(2).all(|p| p[0] > p[1]));
        assert!((long_tail_mu(10, 100.0) - 0.59948).abs() < 1e-5);
        let near_one = long_tail_counts(500, 10, 1.0001).unwrap();
        assert!(near_one.iter().all(|&n| n == 500));
        assert!(long_tail_counts(500, 10, 1.0).is_err());
    }

    #[test]
    fn long_tail_rejects_empty_class() {
        let err = long_tail_counts(10, 5, 100.0).unwrap_err();
        assert!(err.to_string().contains("class 3"), "{err}");
    }

    #[test]
    fn step_counts_cases() {
        assert_eq!(
            step_counts(5000, 10, 50.0, 5).unwrap(),
            [vec![5000; 5], vec![100; 5]].concat()
        );
        let mut want = vec![10];
        want.extend(vec![5; 9]);
        assert_eq!(step_counts(10, 10, 2.0, 9).unwrap(), want);
        assert!(step_counts(10, 10, 1.0, 5).is_err());
        assert!(step_counts(10, 10, 2.0, 10).is_err());
        assert!(step_counts(10, 10, 2.0, 0).is_err());
    }

    #[test]
    fn transforms_subsample_without_duplicates() {
        let ds = mixture(5, 200, 1);
        let lt = apply_long_tail(&ds, 20.0, 9).unwrap();
        assert_eq!(
            lt.class_counts(),
            long_tail_counts(200, 5, 20.0).unwrap().as_slice()
        );
        let original: Vec<&[f64]> = (0..ds.len()).map(|i| ds.x(i)).collect();
        let mut positions: Vec<usize> = (0..lt.len())
            .map(|i| {
                original
                    .iter()
                    .position(|x| *x == lt.x(i))
                    .expect("kept sample exists in input")
            })
            .collect();
        assert!(positions.windows(2).all(|p| p[0] < p[1]), "order preserved");
        positions.dedup();
        assert_eq!(positions.len(), lt.len());
        assert_eq!(apply_long_tail(&ds, 20.0, 9).unwrap(), lt);
        assert_ne!(apply_long_tail(&ds, 20.0, 10).unwrap(), lt);

        let st = apply_step(&ds, 4.0, 2, 3).unwrap();
        assert_eq!(st.class_counts(), &[200, 200, 200, 50, 50]);
    }

    #[test]
    fn imbalance_ratio_cases() {
        let counts = long_tail_counts(5000, 10, 100.0).unwrap();
        assert_eq!(imbalance_ratio_of_counts(&counts).unwrap(), 100.0);
        assert_eq!(imbalance_ratio(&mixture(3, 10, 0)).unwrap(), 1.0);
        assert_eq!(
            imbalance_ratio_of_counts(&[[5000; 5], [100; 5]].concat()).unwrap(),
            50.0
        );
        assert!(imbalance_ratio_of_counts(&[3, 0]).is_err());
    }

    #[test]
    fn stratified_split_cases() {
        let ds = mixture(2, 200, 2);
        let (train, test) = stratified_split(&ds, 0.5, 1).unwrap();
        assert_eq!(test.class_counts(), &[100, 100]);
        assert_eq!(train.class_counts(), &[100, 100]);
        let (train2, test2) = stratified_split(&ds, 0.5, 1).unwrap();
        assert_eq!((train, test), (train2, test2));

        let big = mixture(2, 1000, 3);
        let imb = subsample_to_counts(&big, &[1000, 100], 0).unwrap();
        let (train, test) = stratified_split(&imb, 0.1, 5).unwrap();
        assert_eq!(test.class_counts(), &[10, 10]);
        assert_eq!(train.class_counts(), &[990, 90]);
        assert!(stratified_split(&imb, 0.001, 5).is_err());
        assert!(stratified_split(&imb, 1.0, 5).is_err());
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = mixture(3, 7, 11);
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.features().data(), ds.features().data());
        assert_eq!(back.labels(), ds.labels());

        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\n0.5,-1,1\n3,4,1\n").unwrap();
        let small = load_csv(&path).unwrap();
        assert_eq!(small.len(), 3);
        assert_eq!(small.class_counts(), &[1, 2]);

        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\nNaN,1,1\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

        std::fs::write(&path, "f0,f1,label\n1.0,2.0,0\n1,1,2\n").unwrap();
        assert!(matches!(load_csv(&path).unwrap_err(), Error::Format { .. }));

        std::fs::write(&path, "a,b,label\n1.0,2.0,0\n").unwrap();
        assert!(matches!(
            load_csv(&path).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));

        assert!(matches!(
            load_csv(&dir.path().join("missing.csv")).unwrap_err(),
            Error::Io { .. }
        ));
    }

    #[test]
    fn metadata_sidecar_path_and_contents() {
        assert_eq!(
            meta_path(Path::new("out/train.csv")),
            Path::new("out/train.meta.json")
        );
        let ds = subsample_to_counts(&mixture(2, 30, 0), &[30, 3], 1).unwrap();
        let meta = DatasetMeta::describe(&ds, serde_json::json!({"seed": 1}));
        assert_eq!(meta.class_counts, vec![30, 3]);
        assert_eq!(meta.imbalance_ratio, Some(10.0));
    }

    proptest! {
        #[test]
        fn long_tail_ratio_within_rounding(n_max in 50usize..3000, k in 2usize..12, rho in 1.5f64..50.0) {
            if let Ok(counts) = long_tail_counts(n_max, k, rho) {
                let n_min = *counts.iter().min().unwrap() as f64;
                let ratio = imbalance_ratio_of_counts(&counts).unwrap();
                prop_assert!(ratio >= rho * (1.0 - 2.0 / n_min) && ratio <= rho * (1.0 + 2.0 / n_min));
                prop_assert!(counts.windows(2).all(|p| p[0] >= p[1]));
            }
        }

        #[test]
        fn step_has_two_levels(n_max in 10usize..3000, k in 2usize..12, m in 1usize..11, rho in 1.5f64..50.0) {
            prop_assume!(m < k);
            if let Ok(counts) = step_counts(n_max, k, rho, m) {
                let mut levels = counts.clone();
                levels.sort_unstable();
                levels.dedup();
                prop_assert!(levels.len() <= 2);
                let n_min = levels[0] as f64;
                let ratio = imbalance_ratio_of_counts(&counts).unwrap();
                prop_assert!((ratio - rho).abs() <= rho / n_min);
            }
        }
    }
}
