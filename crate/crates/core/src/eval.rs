//! Evaluation metrics, influence reporting and exact-influence oracles.
//!
//! The oracles work on output-layer parameters only. [`exact_influence`]
//! assembles the mean cross-entropy Hessian in closed form and solves
//! `(H + damping·I) I(x) = −∇L(x)` for every sample; [`LooOracle`] retrains a
//! linear softmax classifier with each sample removed. They exist to check
//! that cheap influence proxies rank samples the way real influence does.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ib_factor;
use crate::model::{ForwardTrace, MlpParams};
use crate::numerics::{argmax, norm, one_hot, Cholesky, Matrix, Norm, Vector};

pub const DEFAULT_DAMPING: f64 = 1e-4;

/// Largest output-layer parameter count the dense Hessian oracle accepts.
pub const MAX_EXACT_PARAMS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Mean of the per-class accuracies.
    pub balanced_accuracy: f64,
    pub per_class_accuracy: Vector,
    pub class_totals: Vec<usize>,
    pub top_k: usize,
    pub top_k_accuracy: f64,
    /// `confusion[(true, predicted)]` sample counts.
    pub confusion: Matrix,
}

fn check_compat(model: &MlpParams, ds: &Dataset) -> Result<()> {
    if ds.dim() != model.input_dim() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "data has {} features, model expects {}",
                ds.dim(),
                model.input_dim()
            ),
        ));
    }
    if ds.num_classes() > model.num_classes() {
        return Err(Error::invalid(format!(
            "data has labels up to {} but the model has {} classes",
            ds.num_classes() - 1,
            model.num_classes()
        )));
    }
    Ok(())
}

/// Position of `label` when logits are sorted descending with ties to the
/// smaller index (0 = predicted class).
fn label_rank(logits: &[f64], label: usize) -> usize {
    let z = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

pub fn evaluate(model: &MlpParams, test: &Dataset, top_k: usize) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    check_compat(model, test)?;
    let k = model.num_classes();
    if top_k == 0 || top_k > k {
        return Err(Error::invalid(format!(
            "top-k must be in [1, {k}], got {top_k}"
        )));
    }
    let mut confusion = Matrix::zeros(k, k);
    let mut in_top_k = 0usize;
    for i in 0..test.len() {
        let trace = model.forward(test.x(i))?;
        let y = test.y(i);
        let pred = argmax(trace.logits());
        confusion.set(y, pred, confusion.get(y, pred) + 1.0);
        if label_rank(trace.logits(), y) < top_k {
            in_top_k += 1;
        }
    }
    let mut totals = vec![0usize; k];
    totals[..test.num_classes()].copy_from_slice(test.class_counts());
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            if totals[c] == 0 {
                0.0
            } else {
                confusion.get(c, c) / totals[c] as f64
            }
        })
        .collect();
    let present: Vec<usize> = (0..k).filter(|&c| totals[c] > 0).collect();
    let trace_sum: f64 = (0..k).map(|c| confusion.get(c, c)).sum();
    Ok(Metrics {
        overall_accuracy: trace_sum / test.len() as f64,
        balanced_accuracy: present.iter().map(|&c| per_class[c]).sum::<f64>()
            / present.len() as f64,
        per_class_accuracy: per_class.into(),
        class_totals: totals,
        top_k,
        top_k_accuracy: in_top_k as f64 / test.len() as f64,
        confusion,
    })
}

/// Global min-max scaling to `[0, 1]`; all-equal input maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / span).collect()
}

/// The `m` candidates with the largest `values`, descending; ties go to the
/// smaller index.
pub fn top_m(values: &[f64], candidates: &[usize], m: usize) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    sorted.truncate(m);
    sorted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfluence {
    pub class: usize,
    pub count: usize,
    pub mean_raw: f64,
    pub mean_normalized: f64,
    /// Sample indices of the class's `top_m` largest factors, descending.
    pub top: Vec<usize>,
    pub top_mean_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub top_m: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: Vec<ClassInfluence>,
}

/// Per-sample IB factor `‖f − y‖₁ · ‖h‖₁` for every sample of `ds`.
pub fn ib_factors(model: &MlpParams, ds: &Dataset) -> Result<Vec<f64>> {
    check_compat(model, ds)?;
    (0..ds.len())
        .map(|i| {
            let t = model.forward(ds.x(i))?;
            let y = one_hot(ds.y(i), model.num_classes())?;
            ib_factor(&t.probs, &y, t.h())
        })
        .collect()
}

pub fn influence_report(
    model: &MlpParams,
    ds: &Dataset,
    top_m_count: usize,
) -> Result<InfluenceReport> {
    let min_count = ds.class_counts().iter().copied().min().unwrap_or(0);
    if top_m_count == 0 || top_m_count > min_count {
        return Err(Error::invalid(format!(
            "top_m must be in [1, {min_count}] (smallest class size), got {top_m_count}"
        )));
    }
    let raw = ib_factors(model, ds)?;
    let normalized = min_max_normalize(&raw);
    let classes = ds
        .class_indices()
        .into_iter()
        .enumerate()
        .map(|(class, idx)| {
            let mean = |v: &[f64], ids: &[usize]| {
                ids.iter().map(|&i| v[i]).sum::<f64>() / ids.len() as f64
            };
            let top = top_m(&raw, &idx, top_m_count);
            ClassInfluence {
                class,
                count: idx.len(),
                mean_raw: mean(&raw, &idx),
                mean_normalized: mean(&normalized, &idx),
                top_mean_normalized: mean(&normalized, &top),
                top,
            }
        })
        .collect();
    Ok(InfluenceReport {
        top_m: top_m_count,
        raw,
        normalized,
        labels: ds.labels().to_vec(),
        classes,
    })
}

/// Which output-layer parameters the exact oracle differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LastLayerParams {
    Weights,
    /// Weights plus bias; each class row is ordered `[w_k1, ..., w_kL, b_k]`.
    WeightsAndBias,
}

fn layer_input(trace: &ForwardTrace, params: LastLayerParams) -> Vec<f64> {
    let mut h = trace.h().to_vec();
    if params == LastLayerParams::WeightsAndBias {
        h.push(1.0);
    }
    h
}

/// `(f − y) ⊗ h̃`, flattened class-major.
pub fn last_layer_gradient(trace: &ForwardTrace, y: usize, params: LastLayerParams) -> Vector {
    let h = layer_input(trace, params);
    let mut g = Vec::with_capacity(trace.num_classes() * h.len());
    for (k, fk) in trace.probs.iter().enumerate() {
        let r = fk - if k == y { 1.0 } else { 0.0 };
        g.extend(h.iter().map(|hl| r * hl));
    }
    g.into()
}

/// Accumulates `weight · (diag(f) − f fᵀ) ⊗ h̃ h̃ᵀ` into `hessian`.
fn add_sample_hessian(hessian: &mut Matrix, f: &[f64], h: &[f64], weight: f64) {
    let l = h.len();
    for (k, &fk) in f.iter().enumerate() {
        for (k2, &fk2) in f.iter().enumerate() {
            let a = weight * (if k == k2 { fk } else { 0.0 } - fk * fk2);
            if a == 0.0 {
                continue;
            }
            for (i, &hi) in h.iter().enumerate() {
                let row = k * l + i;
                for (j, &hj) in h.iter().enumerate() {
                    let col = k2 * l + j;
                    hessian.set(row, col, hessian.get(row, col) + a * hi * hj);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactInfluence {
    pub params: LastLayerParams,
    pub damping: f64,
    /// Mean per-sample cross-entropy Hessian (without damping).
    pub hessian: Matrix,
    pub influences: Vec<Vector>,
    /// `‖I(x)‖₁` per sample.
    pub magnitudes: Vec<f64>,
    /// Largest `‖(H + damping·I) I(x) + ∇L(x)‖∞` over samples.
    pub max_residual: f64,
}

pub fn exact_influence(
    model: &MlpParams,
    ds: &Dataset,
    damping: f64,
    params: LastLayerParams,
) -> Result<ExactInfluence> {
    check_compat(model, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if !(damping.is_finite() && damping >= 0.0) {
        return Err(Error::invalid(format!(
            "damping must be >= 0, got {damping}"
        )));
    }
    let width = model.layer_sizes()[model.num_layers() - 1]
        + usize::from(params == LastLayerParams::WeightsAndBias);
    let p = model.num_classes() * width;
    if p > MAX_EXACT_PARAMS {
        return Err(Error::invalid(format!(
            "output layer has {p} parameters; the dense oracle supports at most {MAX_EXACT_PARAMS}"
        )));
    }
    let traces = (0..ds.len())
        .map(|i| model.forward(ds.x(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut hessian = Matrix::zeros(p, p);
    let inv_n = 1.0 / ds.len() as f64;
    for t in &traces {
        add_sample_hessian(&mut hessian, &t.probs, &layer_input(t, params), inv_n);
    }
    let mut damped = hessian.clone();
    for i in 0..p {
        damped.set(i, i, damped.get(i, i) + damping);
    }
    let chol = Cholesky::factor(&damped).map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!(
            "{msg} (damping {damping:e}; retry with larger damping)"
        )),
        other => other,
    })?;
    let mut influences = Vec::with_capacity(ds.len());
    let mut max_residual: f64 = 0.0;
    for (i, t) in traces.iter().enumerate() {
        let g = last_layer_gradient(t, ds.y(i), params);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let inf = chol.solve(&neg)?;
        let back = damped.matvec(&inf)?;
        let r = back
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (a + b).abs())
            .fold(0.0, f64::max);
        max_residual = max_residual.max(r);
        influences.push(inf);
    }
    let magnitudes = influences.iter().map(|v| norm(v, Norm::L1)).collect();
    Ok(ExactInfluence {
        params,
        damping,
        hessian,
        influences,
        magnitudes,
        max_residual,
    })
}

/// Linear softmax classifier fitted by full-batch Newton iterations from a
/// zero initialization, minimizing mean cross-entropy plus `l2/2 · ‖θ‖²`
/// over weights and biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexModelSpec {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the L2 norm of the objective gradient falls below this.
    pub grad_tol: f64,
}

impl Default for ConvexModelSpec {
    fn default() -> Self {
        ConvexModelSpec {
            l2: 0.0,
            max_iter: 100,
            grad_tol: 1e-8,
        }
    }
}

struct Objective {
    value: f64,
    grad: Vec<f64>,
    hessian: Matrix,
}

fn theta_to_model(theta: &[f64], d: usize, k: usize) -> Result<MlpParams> {
    let mut w = Vec::with_capacity(k * d);
    let mut b = Vec::with_capacity(k);
    for row in theta.chunks(d + 1) {
        w.extend_from_slice(&row[..d]);
        b.push(row[d]);
    }
    MlpParams::from_parts(vec![d, k], vec![Matrix::from_vec(k, d, w)?], vec![b.into()])
}

fn convex_objective(
    theta: &[f64],
    ds: &Dataset,
    skip: Option<usize>,
    l2: f64,
    with_hessian: bool,
) -> Result<Objective> {
    let (d, k) = (ds.dim(), ds.num_classes());
    let model = theta_to_model(theta, d, k)?;
    let p = theta.len();
    let n_used = ds.len() - usize::from(skip.is_some());
    let inv_n = 1.0 / n_used as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; p];
    let mut hessian = Matrix::zeros(
        if with_hessian { p } else { 0 },
        if with_hessian { p } else { 0 },
    );
    for i in (0..ds.len()).filter(|&i| Some(i) != skip) {
        let t = model.forward(ds.x(i))?;
        let y = ds.y(i);
        let z = t.logits();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        value += inv_n * (lse - z[y]);
        let g = last_layer_gradient(&t, y, LastLayerParams::WeightsAndBias);
        grad.iter_mut()
            .zip(g.iter())
            .for_each(|(a, b)| *a += inv_n * b);
        if with_hessian {
            add_sample_hessian(
                &mut hessian,
                &t.probs,
                &layer_input(&t, LastLayerParams::WeightsAndBias),
                inv_n,
            );
        }
    }
    value += 0.5 * l2 * theta.iter().map(|v| v * v).sum::<f64>();
    grad.iter_mut().zip(theta).for_each(|(g, t)| *g += l2 * t);
    if with_hessian {
        for i in 0..p {
            hessian.set(i, i, hessian.get(i, i) + l2);
        }
    }
    Ok(Objective {
        value,
        grad,
        hessian,
    })
}

fn fit_convex_theta(spec: &ConvexModelSpec, ds: &Dataset, skip: Option<usize>) -> Result<Vec<f64>> {
    let p = ds.num_classes() * (ds.dim() + 1);
    let mut theta = vec![0.0; p];
    for _ in 0..spec.max_iter {
        let obj = convex_objective(&theta, ds, skip, spec.l2, true)?;
        let gnorm = norm(&obj.grad, Norm::L2);
        if gnorm < spec.grad_tol {
            return Ok(theta);
        }
        // A tiny ridge keeps the softmax's shift-invariant direction solvable;
        // the gradient has no component along it.
        let mut h = obj.hessian;
        let ridge = 1e-10 * (0..p).map(|i| h.get(i, i)).fold(1e-300, f64::max);
        for i in 0..p {
            h.set(i, i, h.get(i, i) + ridge);
        }
        let neg: Vec<f64> = obj.grad.iter().map(|g| -g).collect();
        let step = Cholesky::factor(&h)?.solve(&neg)?;
        let slope: f64 = step.iter().zip(&obj.grad).map(|(s, g)| s * g).sum();
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a + t * s)
                .collect();
            let v = convex_objective(&trial, ds, skip, spec.l2, false)?.value;
            if v <= obj.value + 1e-4 * t * slope || t < 1e-10 {
                theta = trial;
                break;
            }
            t *= 0.5;
        }
    }
    let gnorm = norm(
        &convex_objective(&theta, ds, skip, spec.l2, false)?.grad,
        Norm::L2,
    );
    if gnorm < spec.grad_tol {
        return Ok(theta);
    }
    Err(Error::NonConvergence(format!(
        "gradient norm {gnorm:e} after {} Newton iterations (tolerance {:e})",
        spec.max_iter, spec.grad_tol
    )))
}

/// Fits the convex toy model on the whole dataset.
pub fn fit_convex(spec: &ConvexModelSpec, ds: &Dataset) -> Result<MlpParams> {
    let theta = fit_convex_theta(spec, ds, None)?;
    theta_to_model(&theta, ds.dim(), ds.num_classes())
}

/// Leave-one-out retraining against a cached full-data fit.
#[derive(Debug, Clone)]
pub struct LooOracle {
    spec: ConvexModelSpec,
    full: Vec<f64>,
}

impl LooOracle {
    pub fn new(spec: ConvexModelSpec, ds: &Dataset) -> Result<Self> {
        if ds.len() < 2 || ds.len() > 200 {
            return Err(Error::invalid(format!(
                "leave-one-out oracle needs 2..=200 samples, got {}",
                ds.len()
            )));
        }
        let full = fit_convex_theta(&spec, ds, None)?;
        Ok(LooOracle { spec, full })
    }

    pub fn full_model(&self, ds: &Dataset) -> Result<MlpParams> {
        theta_to_model(&self.full, ds.dim(), ds.num_classes())
    }

    /// `‖θ₋ᵢ − θ‖₁` after retraining without sample `i`.
    pub fn change_norm(&self, ds: &Dataset, i: usize) -> Result<f64> {
        if i >= ds.len() {
            return Err(Error::invalid(format!(
                "sample {i} out of range for {} samples",
                ds.len()
            )));
        }
        let without = fit_convex_theta(&self.spec, ds, Some(i))?;
        Ok(without
            .iter()
            .zip(&self.full)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }
}

pub fn leave_one_out(spec: &ConvexModelSpec, ds: &Dataset, i: usize) -> Result<f64> {
    if i >= ds.len() {
        return Err(Error::invalid(format!(
            "sample {i} out of range for {} samples",
            ds.len()
        )));
    }
    LooOracle::new(*spec, ds)?.change_norm(ds, i)
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "spearman",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    if a.len() < 3 {
        return Err(Error::invalid(format!(
            "spearman needs at least 3 points, got {}",
            a.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() + 1) as f64 / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid(
            "spearman correlation is undefined for constant input",
        ));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gaussian_mixture, GaussianMixtureSpec};
    use crate::numerics::SeededRng;

    fn linear(w: &[&[f64]], b: &[f64]) -> MlpParams {
        let rows: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        MlpParams::from_parts(vec![m.cols(), m.rows()], vec![m], vec![b.to_vec().into()]).unwrap()
    }

    fn two_class(n: usize, seed: u64) -> Dataset {
        make_gaussian_mixture(&GaussianMixtureSpec {
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            scale: 0.8,
            n_per_class: n,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let ds = two_class(5, 1);
        // predicts class 1 iff x0 > 0; with scale 0.8 a few may cross, so build labels from the rule
        let model = linear(&[&[-1.0, 0.0], &[1.0, 0.0]], &[0.0, 0.0]);
        let labels: Vec<usize> = (0..ds.len())
            .map(|i| usize::from(ds.x(i)[0] > 0.0))
            .collect();
        let relabeled = Dataset::new("r", ds.features().clone(), labels, 2).unwrap();
        let m = evaluate(&model, &relabeled, 1).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        assert!(m.per_class_accuracy.iter().all(|&a| a == 1.0));

        let constant = MlpParams::zeros(&[2, 2]).unwrap();
        let m = evaluate(&constant, &ds, 1).unwrap();
        assert_eq!(m.overall_accuracy, 0.5);
        assert_eq!(m.per_class_accuracy.as_slice(), &[1.0, 0.0]);
        assert_eq!(m.balanced_accuracy, 0.5);
        let m = evaluate(&constant, &ds, 2).unwrap();
        assert_eq!(m.top_k_accuracy, 1.0);
        assert!(evaluate(&constant, &ds, 3).is_err());
    }

    #[test]
    fn confusion_is_consistent() {
        let ds = make_gaussian_mixture(&GaussianMixtureSpec {
            means: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0]],
            scale: 1.0,
            n_per_class: 30,
            seed: 3,
        })
        .unwrap();
        let model = MlpParams::init(&[2, 5, 3], 4).unwrap();
        let m = evaluate(&model, &ds, 2).unwrap();
        let mut diag = 0.0;
        for c in 0..3 {
            let row: f64 = (0..3).map(|j| m.confusion.get(c, j)).sum();
            assert_eq!(row, ds.class_counts()[c] as f64);
            assert_eq!(m.per_class_accuracy[c], m.confusion.get(c, c) / row);
            diag += m.confusion.get(c, c);
        }
        assert_eq!(m.overall_accuracy, diag / ds.len() as f64);
        assert!(m.top_k_accuracy >= m.overall_accuracy);
    }

    #[test]
    fn evaluate_rejects_foreign_labels() {
        let ds = make_gaussian_mixture(&GaussianMixtureSpec {
            means: vec![vec![0.0], vec![1.0], vec![2.0]],
            scale: 0.1,
            n_per_class: 2,
            seed: 0,
        })
        .unwrap();
        assert!(evaluate(&MlpParams::zeros(&[1, 2]).unwrap(), &ds, 1).is_err());
    }

    #[test]
    fn normalization_and_selection() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[3.0, 3.0]), vec![0.0, 0.0]);
        assert_eq!(top_m(&[5.0, 1.0, 9.0], &[0, 1, 2], 2), vec![2, 0]);
        assert_eq!(top_m(&[1.0, 1.0, 1.0], &[2, 0, 1], 2), vec![0, 1]);
    }

    #[test]
    fn influence_report_degenerate_and_limits() {
        let features = Matrix::from_rows(&vec![vec![0.5, 0.5]; 6]).unwrap();
        let ds = Dataset::new("same", features, vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let model = MlpParams::zeros(&[2, 2]).unwrap();
        let r = influence_report(&model, &ds, 3).unwrap();
        assert!(r.normalized.iter().all(|&v| v == 0.0));
        assert!(influence_report(&model, &ds, 4).is_err());
        assert!(influence_report(&model, &ds, 0).is_err());
    }

    #[test]
    fn influence_report_reordering_invariance() {
        let ds = two_class(20, 5);
        let model = MlpParams::init(&[2, 6, 2], 6).unwrap();
        let r = influence_report(&model, &ds, 5).unwrap();
        let mut perm: Vec<usize> = (0..ds.len()).collect();
        SeededRng::new(1).shuffle(&mut perm);
        let shuffled = ds.subset(&perm, "s").unwrap();
        let s = influence_report(&model, &shuffled, 5).unwrap();
        for (a, b) in r.classes.iter().zip(&s.classes) {
            assert!((a.mean_raw - b.mean_raw).abs() < 1e-12);
            assert!((a.top_mean_normalized - b.top_mean_normalized).abs() < 1e-12);
            let ta: Vec<f64> = a.top.iter().map(|&i| r.raw[i]).collect();
            let tb: Vec<f64> = b.top.iter().map(|&i| s.raw[i]).collect();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn exact_influence_zero_gradient_sample() {
        // a confident, correct sample: f ≈ y up to rounding, gradient ≈ 0
        let model = linear(&[&[0.0], &[0.0]], &[800.0, 0.0]);
        let ds = Dataset::new("one", Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![0], 2).unwrap();
        let ex = exact_influence(&model, &ds, 1e-4, LastLayerParams::Weights).unwrap();
        assert!(ex.influences[0].iter().all(|&v| v == 0.0));
    }

    fn mean_ce(model_theta: &[f64], ds: &Dataset) -> f64 {
        // weights-only [1 -> 2] model, theta = [w0, w1]
        let m = linear(&[&[model_theta[0]], &[model_theta[1]]], &[0.0, 0.0]);
        (0..ds.len())
            .map(|i| {
                let t = m.forward(ds.x(i)).unwrap();
                -t.probs[ds.y(i)].ln()
            })
            .sum::<f64>()
            / ds.len() as f64
    }

    #[test]
    fn exact_influence_matches_finite_difference_hessian() {
        let mut rng = SeededRng::new(12);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.normal() * 1.5]).collect();
        let ys: Vec<usize> = (0..10)
            .map(|i| usize::from(xs[i][0] + 0.5 * rng.normal() > 0.0))
            .collect();
        let ds = Dataset::new("lr", Matrix::from_rows(&xs).unwrap(), ys, 2).unwrap();
        let theta = [0.3, -0.4];
        let model = linear(&[&[theta[0]], &[theta[1]]], &[0.0, 0.0]);
        let damping = 0.05;
        let ex = exact_influence(&model, &ds, damping, LastLayerParams::Weights).unwrap();

        let step = 1e-4;
        let mut fd = Matrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let at = |si: f64, sj: f64| {
                    let mut t = theta;
                    t[i] += si * step;
                    t[j] += sj * step;
                    mean_ce(&t, &ds)
                };
                let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0))
                    / (4.0 * step * step);
                fd.set(i, j, v + if i == j { damping } else { 0.0 });
            }
        }
        let chol = Cholesky::factor(&fd).unwrap();
        for (s, inf) in ex.influences.iter().enumerate() {
            let t = model.forward(ds.x(s)).unwrap();
            let g = last_layer_gradient(&t, ds.y(s), LastLayerParams::Weights);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let want = chol.solve(&neg).unwrap();
            for (a, b) in inf.iter().zip(want.iter()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn exact_influence_hessian_symmetric_and_residual_small() {
        let ds = two_class(15, 8);
        let model = MlpParams::init(&[2, 4, 3], 2).unwrap();
        let relabeled = Dataset::new("r", ds.features().clone(), ds.labels().to_vec(), 3).unwrap();
        let ex =
            exact_influence(&model, &relabeled, 1e-6, LastLayerParams::WeightsAndBias).unwrap();
        let h = &ex.hessian;
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                assert!((h.get(i, j) - h.get(j, i)).abs() < 1e-8);
            }
        }
        assert!(ex.max_residual < 1e-8, "{}", ex.max_residual);
    }

    #[test]
    fn exact_influence_singular_without_damping() {
        let ds = two_class(5, 2);
        let model = MlpParams::init(&[2, 2], 1).unwrap();
        let err = exact_influence(&model, &ds, 0.0, LastLayerParams::WeightsAndBias).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn convex_fit_converges() {
        let ds = two_class(20, 4);
        let spec = ConvexModelSpec::default();
        let model = fit_convex(&spec, &ds).unwrap();
        let m = evaluate(&model, &ds, 1).unwrap();
        assert!(m.overall_accuracy > 0.7);
    }

    #[test]
    fn leave_one_out_range_checked() {
        let ds = two_class(10, 4);
        assert!(leave_one_out(&ConvexModelSpec::default(), &ds, 20).is_err());
    }

    #[test]
    fn spearman_cases() {
        let a = [0.3, 1.7, -2.0, 5.0, 0.9];
        assert!((spearman_rank_corr(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman_rank_corr(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!(
            (spearman_rank_corr(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0]).unwrap() - 0.5).abs()
                < 1e-15
        );
        assert!(spearman_rank_corr(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman_rank_corr(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert_eq!(
            average_ranks(&[5.0, 1.0, 5.0, 3.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }
}
