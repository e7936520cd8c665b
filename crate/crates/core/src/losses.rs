//! Losses of the basic and refined streams with closed-form gradients.
//!
//! Gradients are taken with respect to stream logits and then chained by
//! hand through the heads and the shared embedding. Supervisions enter only
//! as constants.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::clustering::{BackgroundMember, ObjectCluster, Supervision};
use crate::error::{PclError, Result};
use crate::model::{BasicOutput, Linear, ModelParams, StreamOutputs};

/// Floor applied to every probability before taking its log.
pub const LOG_EPS: f64 = 1e-9;

/// Which refinement loss the refined streams are trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineLoss {
    /// Per-proposal cluster labels, unit weights.
    Assigned,
    /// Per-proposal cluster labels weighted by cluster confidence.
    AssignedWeighted,
    /// Object clusters as bags with average pooling.
    Bag,
}

impl FromStr for RefineLoss {
    type Err = PclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assigned" => Ok(RefineLoss::Assigned),
            "assigned_weighted" => Ok(RefineLoss::AssignedWeighted),
            "bag" => Ok(RefineLoss::Bag),
            other => Err(PclError::Config(format!("unknown refine loss {other:?}"))),
        }
    }
}

impl fmt::Display for RefineLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineLoss::Assigned => "assigned",
            RefineLoss::AssignedWeighted => "assigned_weighted",
            RefineLoss::Bag => "bag",
        })
    }
}

/// Multi-label cross entropy on pooled image scores.
///
/// Returns the loss and its gradient with respect to the image scores.
pub fn loss_basic(image_scores: &Array1<f64>, labels: &Array1<f64>) -> (f64, Array1<f64>) {
    debug_assert_eq!(image_scores.len(), labels.len());
    let mut loss = 0.0;
    let mut grad = Array1::zeros(labels.len());
    for (c, (&phi, &y)) in image_scores.iter().zip(labels).enumerate() {
        let p = phi.clamp(LOG_EPS, 1.0 - LOG_EPS);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        if phi == p {
            grad[c] = -y / p + (1.0 - y) / (1.0 - p);
        }
    }
    (loss, grad)
}

/// Softmax loss with per-proposal labels and weights on a `(C + 1) x R`
/// probability matrix. Labels are 1-based; `C + 1` is background.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn loss_assigned(scores: &Array2<f64>, labels: &[usize], weights: &[f64]) -> Result<(f64, Array2<f64>)> {
    let r_n = scores.ncols();
    if labels.len() != r_n || weights.len() != r_n {
        return Err(PclError::Config(format!(
            "{} labels / {} weights for {} proposals",
            labels.len(),
            weights.len(),
            r_n
        )));
    }
    let inv_r = 1.0 / r_n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(scores.raw_dim());
    for r in 0..r_n {
        let y = labels[r] - 1;
        let p = scores[[y, r]];
        loss -= weights[r] * p.max(LOG_EPS).ln();
        if p >= LOG_EPS {
            let w = weights[r] * inv_r;
            let mut col = grad.column_mut(r);
            col.assign(&scores.column(r));
            col[y] -= 1.0;
            col *= w;
        }
    }
    Ok((loss * inv_r, grad))
}

/// Bag loss: average pooling inside each object cluster, per-proposal
/// background loss for the background cluster, normalised by `R`.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn loss_bag(
    scores: &Array2<f64>,
    bags: &[ObjectCluster],
    background: &[BackgroundMember],
) -> Result<(f64, Array2<f64>)> {
    let r_n = scores.ncols();
    let bg_row = scores.nrows() - 1;
    let inv_r = 1.0 / r_n as f64;
    // dL/dphi, accumulated sparsely then pushed through each column's softmax
    let mut dphi = Array2::<f64>::zeros(scores.raw_dim());
    let mut loss = 0.0;
    for bag in bags {
        if bag.members.is_empty() {
            continue;
        }
        if bag.label == 0 || bag.label > bg_row {
            return Err(PclError::Config(format!("bag label {} out of range", bag.label)));
        }
        let y = bag.label - 1;
        let m = bag.members.len() as f64;
        let mut sum = 0.0;
        for &r in &bag.members {
            sum += scores[[y, r]];
        }
        let mean = sum / m;
        loss -= bag.confidence * m * mean.max(LOG_EPS).ln();
        if mean >= LOG_EPS {
            // d/dphi_{y r} of -s M log(sum / M) = -s / mean
            let g = -bag.confidence / mean * inv_r;
            for &r in &bag.members {
                dphi[[y, r]] += g;
            }
        }
    }
    for m in background {
        let p = scores[[bg_row, m.proposal]];
        loss -= m.confidence * p.max(LOG_EPS).ln();
        if p >= LOG_EPS {
            dphi[[bg_row, m.proposal]] += -m.confidence / p * inv_r;
        }
    }
    Ok((loss * inv_r, softmax_columns_backward(scores, &dphi)))
}

/// Loss for one refined stream under either supervision flavour.
pub fn refine_loss(scores: &Array2<f64>, supervision: &Supervision) -> Result<(f64, Array2<f64>)> {
    match supervision {
        Supervision::ProposalLabels { labels, weights } => loss_assigned(scores, labels, weights),
        Supervision::ClusterBags { bags, background } => loss_bag(scores, bags, background),
    }
}

/// Backward pass of a column-wise softmax: given probabilities `p` and
/// `dL/dp`, returns `dL/dlogits`.
fn softmax_columns_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let dot = (p * dp).sum_axis(Axis(0));
    let mut out = dp - &dot.insert_axis(Axis(0));
    out *= p;
    out
}

/// Backward pass of a row-wise softmax.
fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let dot = (p * dp).sum_axis(Axis(1));
    let mut out = dp - &dot.insert_axis(Axis(1));
    out *= p;
    out
}

/// Pushes `dL/d(image scores)` back through weighted sum pooling and both
/// softmax branches. Returns `(dL/dX_cls, dL/dX_det)`, each `C x R`.
pub fn basic_logit_gradients(basic: &BasicOutput, grad_image: &Array1<f64>) -> (Array2<f64>, Array2<f64>) {
    let g = grad_image.view().insert_axis(Axis(1));
    let d_cls_prob = &basic.det_softmax * &g;
    let d_det_prob = &basic.cls_softmax * &g;
    (
        softmax_columns_backward(&basic.cls_softmax, &d_cls_prob),
        softmax_rows_backward(&basic.det_softmax, &d_det_prob),
    )
}

/// Accumulates the gradient of a head whose logits are `(F W + b)^T` into
/// `grad`, and returns the contribution to `dL/dF`.
fn head_backward(features: &Array2<f64>, layer: &Linear, d_logits: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
    // d_logits is classes x R
    grad.weight += &features.t().dot(&d_logits.t());
    grad.bias += &d_logits.sum_axis(Axis(1));
    d_logits.t().dot(&layer.weight.t())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Stream 0 (basic MIL) first, then each refined stream.
    pub per_stream: Vec<f64>,
    pub grads: ModelParams,
}

/// Total loss over all streams of one image and its gradient with respect to
/// every parameter. `supervisions[k - 1]` supervises refined stream `k`.
pub fn total_loss(
    outputs: &StreamOutputs,
    params: &ModelParams,
    labels: &Array1<f64>,
    supervisions: &[Supervision],
) -> Result<LossReport> {
    let k_n = params.refine.len();
    if supervisions.len() != k_n {
        return Err(PclError::Config(format!(
            "{} supervisions for {} refined streams",
            supervisions.len(),
            k_n
        )));
    }
    if labels.len() != params.cls.outputs() {
        return Err(PclError::Config(format!(
            "label vector of length {} for {} classes",
            labels.len(),
            params.cls.outputs()
        )));
    }
    let features = outputs.features.embedded();
    let mut grads = params.zeros_like();
    let mut per_stream = Vec::with_capacity(k_n + 1);

    let (l0, g_image) = loss_basic(&outputs.basic.image_scores, labels);
    per_stream.push(l0);
    let (d_cls, d_det) = basic_logit_gradients(&outputs.basic, &g_image);
    let mut d_features = head_backward(features, &params.cls, &d_cls, &mut grads.cls);
    d_features += &head_backward(features, &params.det, &d_det, &mut grads.det);

    for (k, sup) in supervisions.iter().enumerate() {
        let (lk, d_logits) = refine_loss(outputs.refined[k].values(), sup)?;
        per_stream.push(lk);
        d_features += &head_backward(features, &params.refine[k], &d_logits, &mut grads.refine[k]);
    }

    let mask = outputs.features.pre_activation().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let d_pre = d_features * mask;
    grads.embed.weight += &outputs.features.raw().t().dot(&d_pre);
    grads.embed.bias += &d_pre.sum_axis(Axis(0));

    Ok(LossReport {
        total: per_stream.iter().sum(),
        per_stream,
        grads,
    })
}

/// Dense 0/1 label vector from 1-based positive class ids.
pub fn label_vector(positives: &[usize], num_classes: usize) -> Array1<f64> {
    let mut y = Array1::zeros(num_classes);
    for &c in positives {
        y[c - 1] = 1.0;
    }
    y
}
