//! The scoring model: a shared rectified linear embedding of raw proposal
//! features, the two-branch weighted-sum-pooling MIL head, and `K` refined
//! instance classifier heads. Forward pass only; gradients are in
//! [`crate::losses`].
//!
//! Score matrices are laid out class-major: row `c` holds the scores of
//! class `c + 1` for every proposal, so a column is one proposal.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PclError, Result};

/// A dense affine map `x -> x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn gaussian<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, bias: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Linear {
            weight: Array2::from_shape_fn((inputs, outputs), |_| normal.sample(rng)),
            bias: Array1::from_elem(outputs, bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    /// `x W + b` for a batch of row vectors.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Raw feature width per proposal.
    pub d_raw: usize,
    /// Embedded feature width shared by every stream.
    pub d: usize,
    pub classes: usize,
    pub refinements: usize,
}

/// All trainable parameters. Also used as the gradient accumulator, so any
/// quantity stored here is by construction something SGD updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Linear,
    pub cls: Linear,
    pub det: Linear,
    pub refine: Vec<Linear>,
}

/// A named, flattened view of one parameter tensor.
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_bias: bool,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub is_bias: bool,
    pub data: &'a mut [f64],
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            embed: Linear::zeros(dims.d_raw, dims.d),
            cls: Linear::zeros(dims.d, dims.classes),
            det: Linear::zeros(dims.d, dims.classes),
            refine: (0..dims.refinements)
                .map(|_| Linear::zeros(dims.d, dims.classes + 1))
                .collect(),
        }
    }

    /// He-initialised embedding and small Gaussian heads.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, head_std: f64, rng: &mut R) -> Self {
        let embed_std = (2.0 / dims.d_raw as f64).sqrt();
        ModelParams {
            embed: Linear::gaussian(dims.d_raw, dims.d, embed_std, 0.0, rng),
            cls: Linear::gaussian(dims.d, dims.classes, head_std, 0.0, rng),
            det: Linear::gaussian(dims.d, dims.classes, head_std, 0.0, rng),
            refine: (0..dims.refinements)
                .map(|_| Linear::gaussian(dims.d, dims.classes + 1, head_std, 0.0, rng))
                .collect(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_raw: self.embed.inputs(),
            d: self.embed.outputs(),
            classes: self.cls.outputs(),
            refinements: self.refine.len(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims())
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("cls".to_string(), &self.cls),
            ("det".to_string(), &self.det),
        ];
        for (k, l) in self.refine.iter().enumerate() {
            out.push((format!("refine{}", k + 1), l));
        }
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push(Tensor {
                name: format!("{name}.weight"),
                shape: layer.weight.shape().to_vec(),
                is_bias: false,
                data: layer.weight.as_slice().expect("standard layout"),
            });
            out.push(Tensor {
                name: format!("{name}.bias"),
                shape: layer.bias.shape().to_vec(),
                is_bias: true,
                data: layer.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn push<'a>(out: &mut Vec<TensorMut<'a>>, name: String, layer: &'a mut Linear) {
            out.push(TensorMut {
                name: format!("{name}.weight"),
                is_bias: false,
                data: layer.weight.as_slice_mut().expect("standard layout"),
            });
            out.push(TensorMut {
                name: format!("{name}.bias"),
                is_bias: true,
                data: layer.bias.as_slice_mut().expect("standard layout"),
            });
        }
        let mut out = Vec::new();
        push(&mut out, "embed".into(), &mut self.embed);
        push(&mut out, "cls".into(), &mut self.cls);
        push(&mut out, "det".into(), &mut self.det);
        for (k, l) in self.refine.iter_mut().enumerate() {
            push(&mut out, format!("refine{}", k + 1), l);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.data.len(), src.data.len());
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }
}

/// Raw proposal features together with their shared embedding.
#[derive(Debug, Clone)]
pub struct ProposalFeatures {
    raw: Array2<f64>,
    pre_activation: Array2<f64>,
    embedded: Array2<f64>,
}

impl ProposalFeatures {
    pub fn new(raw: Array2<f64>, params: &ModelParams) -> Result<Self> {
        check_raw(&raw, params)?;
        let pre_activation = params.embed.apply(raw.view());
        let embedded = pre_activation.mapv(|v| v.max(0.0));
        Ok(ProposalFeatures {
            raw,
            pre_activation,
            embedded,
        })
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.raw
    }

    pub fn pre_activation(&self) -> &Array2<f64> {
        &self.pre_activation
    }

    /// The `R x D` feature matrix every stream reads.
    pub fn embedded(&self) -> &Array2<f64> {
        &self.embedded
    }

    pub fn num_proposals(&self) -> usize {
        self.raw.nrows()
    }
}

fn check_raw(raw: &Array2<f64>, params: &ModelParams) -> Result<()> {
    if raw.nrows() == 0 {
        return Err(PclError::Config("an image needs at least one proposal".into()));
    }
    if raw.ncols() != params.embed.inputs() {
        return Err(PclError::Config(format!(
            "raw feature width {} does not match model input width {}",
            raw.ncols(),
            params.embed.inputs()
        )));
    }
    Ok(())
}

/// `max(0, raw W_emb + b_emb)`.
pub fn embed(raw: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_raw(raw, params)?;
    Ok(params.embed.apply(raw.view()).mapv(|v| v.max(0.0)))
}

/// Per-stream proposal scores. Stream 0 has `C` rows; refined streams have
/// `C + 1`, the last row being background.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    stream: usize,
    scores: Array2<f64>,
}

impl ScoreMatrix {
    pub fn new(stream: usize, scores: Array2<f64>) -> Self {
        ScoreMatrix { stream, scores }
    }

    pub fn stream(&self) -> usize {
        self.stream
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn num_proposals(&self) -> usize {
        self.scores.ncols()
    }

    /// Number of object classes, excluding the background row.
    pub fn num_classes(&self) -> usize {
        if self.stream == 0 {
            self.scores.nrows()
        } else {
            self.scores.nrows() - 1
        }
    }

    /// Rows for object classes only.
    pub fn object_scores(&self) -> ArrayView2<'_, f64> {
        self.scores.slice(ndarray::s![..self.num_classes(), ..])
    }

    /// Score of 1-based `class_id` at `proposal`.
    pub fn score(&self, class_id: usize, proposal: usize) -> f64 {
        self.scores[[class_id - 1, proposal]]
    }
}

/// Softmax down each column, shifted by the column max.
pub fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Softmax along each row, shifted by the row max.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Intermediate values of the basic MIL head, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BasicOutput {
    /// Softmax over classes of the classification branch, `C x R`.
    pub cls_softmax: Array2<f64>,
    /// Softmax over proposals of the detection branch, `C x R`.
    pub det_softmax: Array2<f64>,
    pub scores: ScoreMatrix,
    /// Weighted-sum pooled image scores, one per class.
    pub image_scores: Array1<f64>,
}

pub fn forward_basic(features: &Array2<f64>, params: &ModelParams) -> Result<BasicOutput> {
    check_embedded(features, params)?;
    let x_cls = params.cls.apply(features.view()).reversed_axes();
    let x_det = params.det.apply(features.view()).reversed_axes();
    let cls_softmax = softmax_columns(&x_cls);
    let det_softmax = softmax_rows(&x_det);
    let phi = &cls_softmax * &det_softmax;
    // saturated softmaxes can round the sum onto 0 or 1; the loss clamps far
    // inside this range, so the clamp never changes a gradient
    let image_scores = phi
        .sum_axis(Axis(1))
        .mapv(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
    Ok(BasicOutput {
        cls_softmax,
        det_softmax,
        scores: ScoreMatrix::new(0, phi),
        image_scores,
    })
}

/// Scores of refined stream `k` (1-based), `(C + 1) x R`.
pub fn forward_refined(features: &Array2<f64>, params: &ModelParams, k: usize) -> Result<ScoreMatrix> {
    check_embedded(features, params)?;
    if k == 0 || k > params.refine.len() {
        return Err(PclError::Config(format!(
            "refined stream {k} out of range 1..={}",
            params.refine.len()
        )));
    }
    let logits = params.refine[k - 1].apply(features.view()).reversed_axes();
    Ok(ScoreMatrix::new(k, softmax_columns(&logits)))
}

fn check_embedded(features: &Array2<f64>, params: &ModelParams) -> Result<()> {
    if features.ncols() != params.cls.inputs() {
        return Err(PclError::Config(format!(
            "embedded feature width {} does not match head input width {}",
            features.ncols(),
            params.cls.inputs()
        )));
    }
    if features.nrows() == 0 {
        return Err(PclError::Config("an image needs at least one proposal".into()));
    }
    Ok(())
}

/// Every stream of one image, evaluated against the same features.
#[derive(Debug, Clone)]
pub struct StreamOutputs {
    pub features: ProposalFeatures,
    pub basic: BasicOutput,
    pub refined: Vec<ScoreMatrix>,
}

impl StreamOutputs {
    /// Scores of stream `k`, where 0 is the basic head.
    pub fn stream(&self, k: usize) -> &ScoreMatrix {
        if k == 0 {
            &self.basic.scores
        } else {
            &self.refined[k - 1]
        }
    }
}

pub fn forward_all(raw: Array2<f64>, params: &ModelParams) -> Result<StreamOutputs> {
    let features = ProposalFeatures::new(raw, params)?;
    let basic = forward_basic(features.embedded(), params)?;
    let refined = (1..=params.refine.len())
        .map(|k| forward_refined(features.embedded(), params, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamOutputs {
        features,
        basic,
        refined,
    })
}

const CHECKPOINT_FORMAT: &str = "pcl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dims: ModelDims,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            tensors: self
                .tensors()
                .into_iter()
                .map(|t| TensorRecord {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| PclError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(PclError::Config(format!("not a checkpoint: format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(PclError::Version {
                what: "checkpoint",
                found: file.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut params = ModelParams::zeros(file.dims);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != file.tensors.len() {
            return Err(PclError::Config(format!(
                "checkpoint has {} tensors, dims imply {}",
                file.tensors.len(),
                expected.len()
            )));
        }
        for ((dst, (name, shape)), rec) in params.tensors_mut().into_iter().zip(expected).zip(file.tensors) {
            if rec.name != name || rec.shape != shape || rec.data.len() != dst.data.len() {
                return Err(PclError::Config(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    rec.name, rec.shape, name, shape
                )));
            }
            dst.data.copy_from_slice(&rec.data);
        }
        if !params.is_finite() {
            return Err(PclError::Config("checkpoint contains non-finite values".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_checkpoint_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PclError::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

/// Writes through a sibling temp file and renames into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| PclError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PclError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PclError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PclError::io(path, e))
}
