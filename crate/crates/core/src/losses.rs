//! Per-sample losses and weighting rules.
//!
//! The influence-balanced (IB) weight of a sample is
//! `λ_k / (‖f − y‖ · ‖h‖ + ε)`, where `f` are the softmax outputs, `y` the
//! one-hot label, `h` the activation feeding the output layer and `λ_k` an
//! inverse-frequency class weight normalized to sum to `α`. The weight is
//! held constant when differentiating: the gradient of an IB term is the
//! weight times the gradient of the underlying cross-entropy (or focal) term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::numerics::{norm, Norm, Vector};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Floor applied to `f_y` before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

/// Options shared by the IB loss variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbParams {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Norm used for the factor. `l1` is the standard choice.
    #[serde(default)]
    pub norm: Norm,
    /// When false the denominator is the constant `epsilon` (no influence factor).
    #[serde(default = "default_true")]
    pub use_factor: bool,
    /// Rescale the per-sample weights of each batch to mean one.
    #[serde(default)]
    pub renormalize: bool,
}

impl Default for IbParams {
    fn default() -> Self {
        IbParams {
            epsilon: DEFAULT_EPSILON,
            norm: Norm::L1,
            use_factor: true,
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    #[default]
    Ce,
    Focal {
        gamma: f64,
    },
    Cb {
        beta: f64,
    },
    Ib {
        /// Sum of the class weights; `None` means the class count.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(flatten)]
        ib: IbParams,
    },
    IbFocal {
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(flatten)]
        ib: IbParams,
    },
    /// IB with class-balanced effective-number weights in place of λ.
    IbCb {
        beta: f64,
        #[serde(flatten)]
        ib: IbParams,
    },
}

impl LossSpec {
    pub fn ib() -> Self {
        LossSpec::Ib {
            alpha: None,
            ib: IbParams::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Ce => "ce",
            LossSpec::Focal { .. } => "focal",
            LossSpec::Cb { .. } => "cb",
            LossSpec::Ib { .. } => "ib",
            LossSpec::IbFocal { .. } => "ib_focal",
            LossSpec::IbCb { .. } => "ib_cb",
        }
    }

    pub fn ib_params(&self) -> Option<&IbParams> {
        match self {
            LossSpec::Ib { ib, .. } | LossSpec::IbFocal { ib, .. } | LossSpec::IbCb { ib, .. } => {
                Some(ib)
            }
            _ => None,
        }
    }

    pub fn ib_params_mut(&mut self) -> Option<&mut IbParams> {
        match self {
            LossSpec::Ib { ib, .. } | LossSpec::IbFocal { ib, .. } | LossSpec::IbCb { ib, .. } => {
                Some(ib)
            }
            _ => None,
        }
    }

    /// Fills in defaults that depend on the class count.
    pub fn resolved(&self, num_classes: usize) -> LossSpec {
        let mut spec = self.clone();
        match &mut spec {
            LossSpec::Ib { alpha, .. } | LossSpec::IbFocal { alpha, .. } if alpha.is_none() => {
                *alpha = Some(num_classes as f64);
            }
            _ => {}
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let check_gamma = |g: f64| {
            if g.is_finite() && g >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("gamma must be >= 0, got {g}")))
            }
        };
        let check_beta = |b: f64| {
            if (0.0..1.0).contains(&b) {
                Ok(())
            } else {
                Err(Error::invalid(format!("beta must be in [0, 1), got {b}")))
            }
        };
        let check_alpha = |a: Option<f64>| match a {
            Some(a) if !(a.is_finite() && a > 0.0) => {
                Err(Error::invalid(format!("alpha must be > 0, got {a}")))
            }
            _ => Ok(()),
        };
        match self {
            LossSpec::Ce => Ok(()),
            LossSpec::Focal { gamma } => check_gamma(*gamma),
            LossSpec::Cb { beta } => check_beta(*beta),
            LossSpec::Ib { alpha, .. } => check_alpha(*alpha),
            LossSpec::IbFocal { gamma, alpha, .. } => {
                check_gamma(*gamma)?;
                check_alpha(*alpha)
            }
            LossSpec::IbCb { beta, .. } => check_beta(*beta),
        }?;
        if let Some(ib) = self.ib_params() {
            if !(ib.epsilon.is_finite() && ib.epsilon > 0.0) {
                return Err(Error::invalid(format!(
                    "epsilon must be > 0, got {}",
                    ib.epsilon
                )));
            }
        }
        Ok(())
    }
}

fn check_label(f: &[f64], y: usize) -> Result<()> {
    if y >= f.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            f.len()
        )));
    }
    Ok(())
}

/// `-ln f_y` with `f_y` floored at [`PROB_FLOOR`].
pub fn cross_entropy(f: &[f64], y: usize) -> Result<f64> {
    check_label(f, y)?;
    Ok(-f[y].max(PROB_FLOOR).ln())
}

/// `(1 - f_y)^γ · (-ln f_y)`.
pub fn focal(f: &[f64], y: usize, gamma: f64) -> Result<f64> {
    let ce = cross_entropy(f, y)?;
    Ok((1.0 - f[y]).max(0.0).powf(gamma) * ce)
}

/// Gradient of [`focal`] with respect to the logits.
fn focal_logit_grad(f: &[f64], y: usize, gamma: f64) -> Vec<f64> {
    let mut g: Vec<f64> = f.to_vec();
    g[y] -= 1.0;
    if gamma == 0.0 {
        return g;
    }
    let p = f[y].max(PROB_FLOOR);
    let q = (1.0 - f[y]).max(0.0);
    if q == 0.0 {
        return vec![0.0; f.len()];
    }
    // dL/dp, then dp/dz_j = p (δ_jy − f_j)
    let dl_dp = gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p;
    f.iter()
        .enumerate()
        .map(|(j, &fj)| {
            let delta = if j == y { 1.0 } else { 0.0 };
            dl_dp * p * (delta - fj)
        })
        .collect()
}

fn check_counts(counts: &[usize]) -> Result<()> {
    if counts.is_empty() {
        return Err(Error::invalid("class counts are empty"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {k} has no samples")));
    }
    Ok(())
}

/// Class-balanced weights `(1 − β) / (1 − β^{n_k})` before rescaling.
pub fn effective_number_weights(counts: &[usize], beta: f64) -> Result<Vector> {
    check_counts(counts)?;
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "beta must be in [0, 1), got {beta}"
        )));
    }
    Ok(counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
        .collect::<Vec<_>>()
        .into())
}

/// Class-balanced weights rescaled to sum to the class count.
pub fn cb_weights(counts: &[usize], beta: f64) -> Result<Vector> {
    let mut w = effective_number_weights(counts, beta)?;
    let total: f64 = w.iter().sum();
    let k = counts.len() as f64;
    w.iter_mut().for_each(|v| *v *= k / total);
    Ok(w)
}

/// Inverse-frequency class weights `λ_k = α n_k⁻¹ / Σ n_j⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub lambda: Vector,
    pub alpha: f64,
    pub counts: Vec<usize>,
}

pub fn lambda_weights(counts: &[usize], alpha: f64) -> Result<ClassWeights> {
    check_counts(counts)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let inv_total: f64 = counts.iter().map(|&n| 1.0 / n as f64).sum();
    let lambda = counts
        .iter()
        .map(|&n| alpha * (1.0 / n as f64) / inv_total)
        .collect::<Vec<_>>();
    Ok(ClassWeights {
        lambda: lambda.into(),
        alpha,
        counts: counts.to_vec(),
    })
}

/// `‖f − y‖ · ‖h‖` under the chosen norm. This equals that norm of the
/// flattened output-layer gradient `(f − y) hᵀ` for L1, L2 and L∞ alike.
pub fn ib_factor_with_norm(f: &[f64], y_onehot: &[f64], h: &[f64], mode: Norm) -> Result<f64> {
    if f.len() != y_onehot.len() {
        return Err(Error::shape(
            "ib_factor",
            format!(
                "f has length {} but y has length {}",
                f.len(),
                y_onehot.len()
            ),
        ));
    }
    let residual: Vec<f64> = f.iter().zip(y_onehot).map(|(a, b)| a - b).collect();
    Ok(norm(&residual, mode) * norm(h, mode))
}

/// `‖f − y‖₁ · ‖h‖₁`.
pub fn ib_factor(f: &[f64], y_onehot: &[f64], h: &[f64]) -> Result<f64> {
    ib_factor_with_norm(f, y_onehot, h, Norm::L1)
}

fn label_factor(f: &[f64], y: usize, h: &[f64], mode: Norm) -> Result<f64> {
    check_label(f, y)?;
    let mut onehot = vec![0.0; f.len()];
    onehot[y] = 1.0;
    ib_factor_with_norm(f, &onehot, h, mode)
}

/// Returns `(loss, weight)` with `weight = λ / (factor + ε)` and
/// `loss = weight · CE`.
pub fn ib_loss(f: &[f64], y: usize, h: &[f64], lambda_k: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(lambda_k > 0.0 && epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "lambda and epsilon must be > 0, got {lambda_k} and {epsilon}"
        )));
    }
    let factor = label_factor(f, y, h, Norm::L1)?;
    let weight = lambda_k / (factor + epsilon);
    Ok((weight * cross_entropy(f, y)?, weight))
}

/// One sample's contribution: loss value, its multiplicative weight and the
/// gradient of `weight · base_loss` with respect to the logits.
#[derive(Debug, Clone)]
pub struct SampleTerm {
    pub loss: f64,
    pub weight: f64,
    pub dlogits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub mean_loss: f64,
    pub weights: Vector,
    /// Per-sample logit gradients of the batch mean (already divided by m).
    pub dlogits: Vec<Vec<f64>>,
}

/// A loss spec bound to the class counts of a training set.
#[derive(Debug, Clone)]
pub struct LossContext {
    spec: LossSpec,
    class_weights: Option<Vector>,
}

impl LossContext {
    pub fn new(spec: &LossSpec, counts: &[usize]) -> Result<Self> {
        check_counts(counts)?;
        let spec = spec.resolved(counts.len());
        spec.validate()?;
        let class_weights = match &spec {
            LossSpec::Ce | LossSpec::Focal { .. } => None,
            LossSpec::Cb { beta } | LossSpec::IbCb { beta, .. } => Some(cb_weights(counts, *beta)?),
            LossSpec::Ib { alpha, .. } | LossSpec::IbFocal { alpha, .. } => {
                Some(lambda_weights(counts, alpha.expect("resolved"))?.lambda)
            }
        };
        Ok(LossContext {
            spec,
            class_weights,
        })
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn class_weights(&self) -> Option<&Vector> {
        self.class_weights.as_ref()
    }

    pub fn is_influence_balanced(&self) -> bool {
        self.spec.ib_params().is_some()
    }

    fn class_weight(&self, y: usize) -> Result<f64> {
        match &self.class_weights {
            None => Ok(1.0),
            Some(w) => w.get(y).copied().ok_or_else(|| {
                Error::invalid(format!("label {y} out of range for {} classes", w.len()))
            }),
        }
    }

    fn gamma(&self) -> f64 {
        match self.spec {
            LossSpec::Focal { gamma } | LossSpec::IbFocal { gamma, .. } => gamma,
            _ => 0.0,
        }
    }

    pub fn sample(&self, trace: &ForwardTrace, y: usize) -> Result<SampleTerm> {
        let f = trace.probs.as_slice();
        check_label(f, y)?;
        if let Some(w) = &self.class_weights {
            if w.len() != f.len() {
                return Err(Error::shape(
                    "loss",
                    format!("{} class weights for a {}-class model", w.len(), f.len()),
                ));
            }
        }
        let gamma = self.gamma();
        let base = if gamma == 0.0 {
            cross_entropy(f, y)?
        } else {
            focal(f, y, gamma)?
        };
        let class_weight = self.class_weight(y)?;
        let weight = match self.spec.ib_params() {
            None => class_weight,
            Some(ib) => {
                let denom = if ib.use_factor {
                    label_factor(f, y, trace.h(), ib.norm)? + ib.epsilon
                } else {
                    ib.epsilon
                };
                class_weight / denom
            }
        };
        let mut dlogits = focal_logit_grad(f, y, gamma);
        dlogits.iter_mut().for_each(|g| *g *= weight);
        Ok(SampleTerm {
            loss: weight * base,
            weight,
            dlogits,
        })
    }
}

/// Mean loss over a batch of `(trace, label)` pairs plus the per-sample weights.
pub fn batch_loss(ctx: &LossContext, batch: &[(&ForwardTrace, usize)]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut terms = batch
        .iter()
        .map(|(t, y)| ctx.sample(t, *y))
        .collect::<Result<Vec<_>>>()?;
    if ctx.spec.ib_params().is_some_and(|ib| ib.renormalize) {
        let mean_w = terms.iter().map(|t| t.weight).sum::<f64>() / terms.len() as f64;
        for t in &mut terms {
            t.weight /= mean_w;
            t.loss /= mean_w;
            t.dlogits.iter_mut().for_each(|g| *g /= mean_w);
        }
    }
    let m = terms.len() as f64;
    let mean_loss = terms.iter().map(|t| t.loss).sum::<f64>() / m;
    let weights = terms.iter().map(|t| t.weight).collect::<Vec<_>>().into();
    let dlogits = terms
        .into_iter()
        .map(|t| t.dlogits.into_iter().map(|g| g / m).collect())
        .collect();
    Ok(BatchLoss {
        mean_loss,
        weights,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpParams;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn trace(f: &[f64], h: &[f64]) -> ForwardTrace {
        ForwardTrace {
            inputs: vec![Vector::new(h.to_vec())],
            pre_activations: vec![Vector::new(f.iter().map(|p| p.ln()).collect())],
            probs: Vector::new(f.to_vec()),
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[1.0 - 1e-15, 1e-15], 0).unwrap() < 1e-14);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.1, 0.9], 0).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 27.631021115928547).abs() < 1e-9);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn focal_cases() {
        for f in [[0.3, 0.7], [0.9, 0.1], [0.5, 0.5]] {
            for y in 0..2 {
                assert!(
                    (focal(&f, y, 0.0).unwrap() - cross_entropy(&f, y).unwrap()).abs() <= 1e-15
                );
            }
        }
        assert!((focal(&[0.5, 0.5], 0, 2.0).unwrap() - 0.25 * 2f64.ln()).abs() < 1e-15);
        let mut prev_ratio = f64::INFINITY;
        for p in [0.6, 0.8, 0.95, 0.999] {
            let f = [p, 1.0 - p];
            let ratio = focal(&f, 0, 2.0).unwrap() / cross_entropy(&f, 0).unwrap();
            assert!(ratio < prev_ratio);
            prev_ratio = ratio;
        }
    }

    #[test]
    fn cb_weight_cases() {
        let w = cb_weights(&[10, 200, 3000], 0.0).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let raw = effective_number_weights(&[1, 1], 0.9).unwrap();
        assert!(raw.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let raw = effective_number_weights(&[5000, 50], 0.999).unwrap();
        let want0 = 0.001 / (1.0 - 0.999f64.powi(5000));
        let want1 = 0.001 / (1.0 - 0.999f64.powi(50));
        assert!((raw[0] - want0).abs() < 1e-15);
        assert!((raw[1] - want1).abs() < 1e-14);
        assert!(raw[1] > raw[0]);
        let w = cb_weights(&[5000, 50], 0.999).unwrap();
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(cb_weights(&[5, 5], 1.0).is_err());
        let eq = cb_weights(&[7, 7, 7], 0.99).unwrap();
        assert!(eq.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn lambda_cases() {
        let cw = lambda_weights(&[100, 10], 1.0).unwrap();
        assert!((cw.lambda[0] - 1.0 / 11.0).abs() < 1e-15);
        assert!((cw.lambda[1] - 10.0 / 11.0).abs() < 1e-15);
        let cw = lambda_weights(&[40; 5], 5.0).unwrap();
        assert!(cw.lambda.iter().all(|&l| (l - 1.0).abs() < 1e-15));
        let counts: Vec<usize> = (0..10)
            .map(|k| (5000.0 * 0.01f64.powf(k as f64 / 9.0)).round() as usize)
            .collect();
        let cw = lambda_weights(&counts, 10.0).unwrap();
        assert!(cw.lambda.windows(2).all(|p| p[0] < p[1]));
        assert!(lambda_weights(&[3, 0], 1.0).is_err());
        assert!(lambda_weights(&[3, 1], 0.0).is_err());
    }

    #[test]
    fn ib_factor_and_loss_cases() {
        assert_eq!(
            ib_factor(&[0.0, 1.0], &[0.0, 1.0], &[3.0, 4.0]).unwrap(),
            0.0
        );
        assert!(
            (ib_factor(&[0.7, 0.3], &[1.0, 0.0], &[1.0, -1.0, 2.0]).unwrap() - 2.4).abs() < 1e-12
        );
        assert!(ib_factor(&[0.7, 0.3], &[1.0, 0.0, 0.0], &[1.0]).is_err());

        let (loss, weight) = ib_loss(&[1.0, 0.0], 0, &[1.0, 2.0], 1.0, 1e-3).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(weight, 1000.0);

        let (loss, weight) = ib_loss(&[0.7, 0.3], 0, &[1.0, -1.0, 2.0], 1.0, 1e-3).unwrap();
        assert!((weight - 1.0 / 2.401).abs() < 1e-15);
        assert!((weight - 0.41649).abs() < 1e-5);
        assert!((loss - (1.0 / 2.401) * -(0.7f64.ln())).abs() < 1e-15);
        assert!((loss - 0.14855).abs() < 1e-5);

        let (_, w_double) = ib_loss(&[0.7, 0.3], 0, &[2.0, -2.0, 4.0], 1.0, 1e-3).unwrap();
        assert!(w_double < weight);
    }

    #[test]
    fn ib_factor_norm_variants_match_flattened_gradient() {
        let f = [0.2, 0.5, 0.3];
        let h = [0.4, -1.5, 2.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        let grad: Vec<f64> = f
            .iter()
            .zip(&y)
            .flat_map(|(fk, yk)| h.iter().map(move |hl| (fk - yk) * hl))
            .collect();
        for mode in [Norm::L1, Norm::L2, Norm::Linf] {
            let direct = norm(&grad, mode);
            let closed = ib_factor_with_norm(&f, &y, &h, mode).unwrap();
            assert!((direct - closed).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn batch_loss_cases() {
        let t1 = trace(&[0.7, 0.3], &[1.0, -1.0, 2.0]);
        let t2 = trace(&[0.2, 0.8], &[0.5, 0.5, 0.0]);
        let ce = LossContext::new(&LossSpec::Ce, &[10, 10]).unwrap();
        let one = batch_loss(&ce, &[(&t1, 0)]).unwrap();
        assert!((one.mean_loss - cross_entropy(&t1.probs, 0).unwrap()).abs() < 1e-15);
        let two = batch_loss(&ce, &[(&t1, 0), (&t2, 0)]).unwrap();
        let (a, b) = (-(0.7f64.ln()), -(0.2f64.ln()));
        assert!((two.mean_loss - (a + b) / 2.0).abs() < 1e-15);
        assert!(batch_loss(&ce, &[]).is_err());
    }

    #[test]
    fn ib_batch_matches_hand_sum() {
        let samples = [
            (trace(&[0.7, 0.3], &[1.0, -1.0, 2.0]), 0usize),
            (trace(&[0.4, 0.6], &[0.0, 2.0, 1.0]), 1),
            (trace(&[0.9, 0.1], &[0.5, 0.5, 0.5]), 1),
            (trace(&[0.25, 0.75], &[3.0, 0.0, 0.1]), 0),
        ];
        let counts = [100, 10];
        let ctx = LossContext::new(&LossSpec::ib(), &counts).unwrap();
        let batch: Vec<(&ForwardTrace, usize)> = samples.iter().map(|(t, y)| (t, *y)).collect();
        let got = batch_loss(&ctx, &batch).unwrap();

        // λ with α = K = 2: [2/11, 20/11]
        let lambda = [2.0 / 11.0, 20.0 / 11.0];
        let mut total = 0.0;
        for (t, y) in &samples {
            let f = t.probs.as_slice();
            let h = t.h().as_slice();
            let resid: f64 = f
                .iter()
                .enumerate()
                .map(|(k, fk)| (fk - if k == *y { 1.0 } else { 0.0 }).abs())
                .sum();
            let hn: f64 = h.iter().map(|v| v.abs()).sum();
            total += lambda[*y] / (resid * hn + 1e-3) * -(f[*y].ln());
        }
        assert!((got.mean_loss - total / 4.0).abs() < 1e-12);
        assert!(got.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn ib_cb_uses_cb_weights_and_ib_focal_uses_focal() {
        let t = trace(&[0.7, 0.3], &[1.0, -1.0, 2.0]);
        let counts = [500, 20];
        let ib_cb = LossSpec::IbCb {
            beta: 0.99,
            ib: IbParams::default(),
        };
        let ctx = LossContext::new(&ib_cb, &counts).unwrap();
        let cb = cb_weights(&counts, 0.99).unwrap();
        let term = ctx.sample(&t, 1).unwrap();
        let factor = ib_factor(&t.probs, &[0.0, 1.0], t.h()).unwrap();
        assert!((term.weight - cb[1] / (factor + 1e-3)).abs() < 1e-12);

        let ib_focal = LossSpec::IbFocal {
            gamma: 2.0,
            alpha: Some(1.0),
            ib: IbParams::default(),
        };
        let ctx = LossContext::new(&ib_focal, &counts).unwrap();
        let lambda = lambda_weights(&counts, 1.0).unwrap().lambda;
        let term = ctx.sample(&t, 0).unwrap();
        let factor = ib_factor(&t.probs, &[1.0, 0.0], t.h()).unwrap();
        let w = lambda[0] / (factor + 1e-3);
        assert!((term.loss - w * focal(&t.probs, 0, 2.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_denominator_ignores_factor() {
        let t = trace(&[0.7, 0.3], &[1.0, -1.0, 2.0]);
        let spec = LossSpec::Ib {
            alpha: Some(1.0),
            ib: IbParams {
                use_factor: false,
                ..IbParams::default()
            },
        };
        let ctx = LossContext::new(&spec, &[10, 10]).unwrap();
        let term = ctx.sample(&t, 0).unwrap();
        assert!((term.weight - 0.5 / 1e-3).abs() < 1e-9);
    }

    #[test]
    fn renormalized_weights_have_mean_one() {
        let ts = [
            trace(&[0.7, 0.3], &[1.0, 1.0]),
            trace(&[0.4, 0.6], &[2.0, 0.5]),
        ];
        let spec = LossSpec::Ib {
            alpha: None,
            ib: IbParams {
                renormalize: true,
                ..IbParams::default()
            },
        };
        let ctx = LossContext::new(&spec, &[30, 3]).unwrap();
        let got = batch_loss(&ctx, &[(&ts[0], 0), (&ts[1], 1)]).unwrap();
        assert!((got.weights.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LossContext::new(&LossSpec::Focal { gamma: -1.0 }, &[1, 1]).is_err());
        assert!(LossContext::new(&LossSpec::Cb { beta: 1.0 }, &[1, 1]).is_err());
        let bad_eps = LossSpec::Ib {
            alpha: None,
            ib: IbParams {
                epsilon: 0.0,
                ..IbParams::default()
            },
        };
        assert!(LossContext::new(&bad_eps, &[1, 1]).is_err());
        assert!(LossContext::new(&LossSpec::Ce, &[1, 0]).is_err());
    }

    #[test]
    fn spec_serde_shapes() {
        let spec: LossSpec =
            serde_json::from_str(r#"{"kind":"ib","epsilon":0.01,"norm":"l2"}"#).unwrap();
        assert_eq!(
            spec,
            LossSpec::Ib {
                alpha: None,
                ib: IbParams {
                    epsilon: 0.01,
                    norm: Norm::L2,
                    ..IbParams::default()
                }
            }
        );
        let spec: LossSpec =
            serde_json::from_str(r#"{"kind":"ib_focal","gamma":1.0,"alpha":3.0}"#).unwrap();
        assert!(
            matches!(spec, LossSpec::IbFocal { gamma, alpha: Some(a), .. } if gamma == 1.0 && a == 3.0)
        );
        let back: LossSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    /// Central differences of `weight · base_loss` through a random linear model,
    /// holding the IB weight fixed at its value at the unperturbed point.
    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        let specs = [
            LossSpec::Ce,
            LossSpec::Focal { gamma: 2.0 },
            LossSpec::Focal { gamma: 0.5 },
            LossSpec::Cb { beta: 0.9 },
            LossSpec::ib(),
            LossSpec::IbFocal {
                gamma: 1.0,
                alpha: None,
                ib: IbParams::default(),
            },
        ];
        for spec in &specs {
            let ctx = LossContext::new(spec, &[50, 5, 12]).unwrap();
            for _ in 0..5 {
                let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let y = rng.below(3) as usize;
                let build = |z: &[f64]| ForwardTrace {
                    inputs: vec![Vector::new(vec![0.3, -1.2])],
                    pre_activations: vec![Vector::new(z.to_vec())],
                    probs: crate::numerics::stable_softmax(z).unwrap(),
                };
                let t0 = build(&z);
                let term = ctx.sample(&t0, y).unwrap();
                let gamma = match spec {
                    LossSpec::Focal { gamma } | LossSpec::IbFocal { gamma, .. } => *gamma,
                    _ => 0.0,
                };
                let base = |t: &ForwardTrace| focal(&t.probs, y, gamma).unwrap();
                for j in 0..3 {
                    let step = 1e-6;
                    let mut zp = z.clone();
                    zp[j] += step;
                    let mut zm = z.clone();
                    zm[j] -= step;
                    let fd = term.weight * (base(&build(&zp)) - base(&build(&zm))) / (2.0 * step);
                    assert!(
                        (fd - term.dlogits[j]).abs() <= 1e-6 * fd.abs().max(1.0),
                        "{spec:?} j={j}: fd {fd} vs {}",
                        term.dlogits[j]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn lambda_sums_to_alpha_and_is_antitone(
            counts in prop::collection::vec(1usize..10_000, 1..20),
            alpha in 0.01f64..100.0,
        ) {
            let cw = lambda_weights(&counts, alpha).unwrap();
            prop_assert!((cw.lambda.iter().sum::<f64>() - alpha).abs() <= 1e-12 * alpha.max(1.0));
            for i in 0..counts.len() {
                prop_assert!(cw.lambda[i] > 0.0);
                for j in 0..counts.len() {
                    if counts[i] < counts[j] {
                        prop_assert!(cw.lambda[i] > cw.lambda[j]);
                    }
                }
            }
        }

        #[test]
        fn factor_obeys_simplex_identity(
            z in prop::collection::vec(-20.0f64..20.0, 2..8),
            h in prop::collection::vec(-5.0f64..5.0, 1..10),
            pick in 0usize..100,
        ) {
            let f = crate::numerics::stable_softmax(&z).unwrap();
            let t = pick % f.len();
            let mut y = vec![0.0; f.len()];
            y[t] = 1.0;
            let factor = ib_factor(&f, &y, &h).unwrap();
            let h1: f64 = h.iter().map(|v| v.abs()).sum();
            prop_assert!((factor - 2.0 * (1.0 - f[t]) * h1).abs() <= 1e-12 * h1.max(1.0));
        }

        #[test]
        fn ib_weight_decreases_in_factor(a in 0.0f64..100.0, b in 0.0f64..100.0, lambda in 0.01f64..10.0) {
            prop_assume!(a < b);
            let w = |factor: f64| lambda / (factor + DEFAULT_EPSILON);
            prop_assert!(w(a) > w(b));
        }

        #[test]
        fn batch_loss_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let model = MlpParams::init(&[3, 6, 3], seed).unwrap();
            let samples: Vec<(ForwardTrace, usize)> = (0..7)
                .map(|_| {
                    let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                    (model.forward(&x).unwrap(), rng.below(3) as usize)
                })
                .collect();
            let mut order: Vec<usize> = (0..samples.len()).collect();
            rng.shuffle(&mut order);
            for spec in [LossSpec::Ce, LossSpec::Focal { gamma: 2.0 }, LossSpec::Cb { beta: 0.99 }, LossSpec::ib(),
                         LossSpec::IbCb { beta: 0.9, ib: IbParams::default() }] {
                let ctx = LossContext::new(&spec, &[40, 9, 3]).unwrap();
                let a: Vec<(&ForwardTrace, usize)> = samples.iter().map(|(t, y)| (t, *y)).collect();
                let b: Vec<(&ForwardTrace, usize)> = order.iter().map(|&i| (&samples[i].0, samples[i].1)).collect();
                let la = batch_loss(&ctx, &a).unwrap().mean_loss;
                let lb = batch_loss(&ctx, &b).unwrap().mean_loss;
                prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
            }
        }
    }
}
