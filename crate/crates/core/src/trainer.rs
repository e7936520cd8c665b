//! Online training: every iteration runs all streams forward, rebuilds each
//! refined stream's supervision from the stream before it, and takes one
//! momentum SGD step on the summed loss.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{supervise, CenterMethod, ClusterConfig, Supervision};
use crate::datagen::TrainImage;
use crate::error::{PclError, Result};
use crate::losses::{label_vector, total_loss, RefineLoss};
use crate::model::{forward_all, ModelDims, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of refined streams.
    pub refinements: usize,
    pub clustering: ClusterConfig,
    pub center_method: CenterMethod,
    pub refine_loss: RefineLoss,
    /// `(iterations, learning rate)` stages, run in order.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Width of the shared proposal embedding.
    pub embed_dim: usize,
    /// Standard deviation of the initial head weights.
    pub head_std: f64,
    /// When set, supervisions are frozen for blocks of this many iterations
    /// instead of being rebuilt every iteration.
    pub alternating: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            refinements: 3,
            clustering: ClusterConfig::default(),
            center_method: CenterMethod::Graph,
            refine_loss: RefineLoss::Bag,
            lr_schedule: vec![(2000, 5e-2), (500, 5e-3)],
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            seed: 0,
            embed_dim: 16,
            head_std: 0.01,
            alternating: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.clustering.validate()?;
        if self.lr_schedule.is_empty() {
            return Err(PclError::Config("empty learning-rate schedule".into()));
        }
        for &(n, lr) in &self.lr_schedule {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(PclError::Config(format!("learning rate {lr} must be positive")));
            }
            if n == 0 {
                return Err(PclError::Config("schedule stage with zero iterations".into()));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PclError::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PclError::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return Err(PclError::Config("batch size and embedding width must be positive".into()));
        }
        if !(self.head_std >= 0.0) {
            return Err(PclError::Config("head std must be non-negative".into()));
        }
        if self.alternating == Some(0) {
            return Err(PclError::Config("alternating block length must be positive".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.lr_schedule.iter().map(|s| s.0).sum()
    }

    /// Learning rate at a 0-based iteration; the last stage extends forever.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.lr_schedule {
            end += n;
            if iteration < end {
                return lr;
            }
        }
        self.lr_schedule.last().map_or(0.0, |s| s.1)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// Momentum buffers, one per parameter.
    pub velocity: ModelParams,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    /// How many per-image supervisions have been built so far.
    pub supervisions_built: u64,
    frozen: HashMap<u64, Vec<Supervision>>,
}

impl TrainState {
    /// Fresh parameters drawn from the config's seed.
    pub fn new(d_raw: usize, num_classes: usize, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = ModelDims {
            d_raw,
            d: config.embed_dim,
            classes: num_classes,
            refinements: config.refinements,
        };
        let params = ModelParams::init(dims, config.head_std, &mut rng);
        TrainState::from_params(params, rng)
    }

    pub fn from_params(params: ModelParams, rng: ChaCha8Rng) -> Self {
        TrainState {
            velocity: params.zeros_like(),
            params,
            iteration: 0,
            rng,
            supervisions_built: 0,
            frozen: HashMap::new(),
        }
    }
}

/// Losses and center counts of one iteration, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_streams: Vec<f64>,
    /// Mean number of centers per image and refined stream.
    pub mean_num_centers: f64,
}

fn check_image(image: &TrainImage, params: &ModelParams) -> Result<()> {
    let dims = params.dims();
    let fail = |why: String| Err(PclError::Data(format!("image {}: {why}", image.image_id)));
    if image.labels.is_empty() {
        return fail("no positive label".into());
    }
    if image.proposals.is_empty() {
        return fail("no proposals".into());
    }
    if let Some(&c) = image.labels.iter().find(|&&c| c == 0 || c > dims.classes) {
        return fail(format!("label {c} outside 1..={}", dims.classes));
    }
    if image.features.nrows() != image.proposals.len() || image.features.ncols() != dims.d_raw {
        return fail(format!(
            "features are {}x{}, expected {}x{}",
            image.features.nrows(),
            image.features.ncols(),
            image.proposals.len(),
            dims.d_raw
        ));
    }
    Ok(())
}

struct ImageStep {
    image_id: u64,
    loss: Vec<f64>,
    grads: ModelParams,
    centers: usize,
    built: Option<Vec<Supervision>>,
}

fn image_step(
    image: &TrainImage,
    params: &ModelParams,
    frozen: Option<&Vec<Supervision>>,
    config: &TrainConfig,
) -> Result<ImageStep> {
    let outputs = forward_all(image.features.clone(), params)?;
    let (supervisions, centers, built) = match frozen {
        Some(s) => (s.clone(), 0, None),
        None => {
            let mut sups = Vec::with_capacity(config.refinements);
            let mut centers = 0;
            for k in 1..=config.refinements {
                let s = supervise(
                    outputs.stream(k - 1),
                    &image.labels,
                    &image.proposals,
                    &config.clustering,
                    config.center_method,
                    config.refine_loss,
                )?;
                centers += s.centers.len();
                sups.push(s.supervision);
            }
            (sups.clone(), centers, Some(sups))
        }
    };
    let labels = label_vector(&image.labels, params.dims().classes);
    let report = total_loss(&outputs, params, &labels, &supervisions)?;
    Ok(ImageStep {
        image_id: image.image_id,
        loss: report.per_stream,
        grads: report.grads,
        centers,
        built,
    })
}

/// One SGD-with-momentum step on a batch. The learning rate comes from the
/// schedule at `state.iteration`.
pub fn train_iteration(batch: &[&TrainImage], state: &mut TrainState, config: &TrainConfig) -> Result<IterationLog> {
    if batch.is_empty() {
        return Err(PclError::Config("empty batch".into()));
    }
    for image in batch {
        check_image(image, &state.params)?;
    }
    if let Some(block) = config.alternating {
        if state.iteration % block == 0 {
            state.frozen.clear();
        }
    }
    let frozen = &state.frozen;
    let params = &state.params;
    let steps: Vec<ImageStep> = batch
        .par_iter()
        .map(|image| {
            let fixed = if config.alternating.is_some() {
                frozen.get(&image.image_id)
            } else {
                None
            };
            image_step(image, params, fixed, config)
        })
        .collect::<Result<_>>()?;

    let n = steps.len() as f64;
    let streams = config.refinements + 1;
    let mut grads = state.params.zeros_like();
    let mut loss_streams = vec![0.0; streams];
    let mut centers = 0usize;
    let mut fresh = 0usize;
    for step in steps {
        grads.add_scaled(&step.grads, 1.0 / n);
        for (acc, l) in loss_streams.iter_mut().zip(&step.loss) {
            *acc += l / n;
        }
        centers += step.centers;
        if let Some(built) = step.built {
            fresh += 1;
            state.supervisions_built += config.refinements as u64;
            if config.alternating.is_some() {
                state.frozen.insert(step.image_id, built);
            }
        }
    }
    let loss_total: f64 = loss_streams.iter().sum();
    if !loss_total.is_finite() || !grads.is_finite() {
        return Err(PclError::Data(format!(
            "non-finite loss or gradient at iteration {}",
            state.iteration
        )));
    }

    let lr = config.lr_at(state.iteration);
    let TrainState { params, velocity, .. } = state;
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grads.tensors())
    {
        let decay = if p.is_bias { 0.0 } else { config.weight_decay };
        for ((p, v), g) in p.data.iter_mut().zip(v.data.iter_mut()).zip(g.data) {
            *v = config.momentum * *v - lr * (g + decay * *p);
            *p += *v;
        }
    }

    let log = IterationLog {
        iteration: state.iteration,
        lr,
        loss_total,
        loss_streams,
        mean_num_centers: if fresh > 0 && config.refinements > 0 {
            centers as f64 / (fresh * config.refinements) as f64
        } else {
            0.0
        },
    };
    state.iteration += 1;
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<IterationLog>,
}

/// Runs the whole schedule over seeded, reshuffled epochs. The last batch of
/// an epoch may be short.
pub fn train(images: &[TrainImage], num_classes: usize, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let first = images
        .first()
        .ok_or_else(|| PclError::Config("cannot train on an empty dataset".into()))?;
    let mut state = TrainState::new(first.features.ncols(), num_classes, config);
    for image in images {
        check_image(image, &state.params)?;
    }
    let total = config.total_iterations();
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..images.len()).collect();
    while state.iteration < total {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(config.batch_size) {
            if state.iteration >= total {
                break;
            }
            let batch: Vec<&TrainImage> = chunk.iter().map(|&i| &images[i]).collect();
            log.push(train_iteration(&batch, &mut state, config)?);
        }
    }
    Ok(TrainOutput { state, log })
}

/// Training log as CSV, one row per iteration.
pub fn log_to_csv(log: &[IterationLog], refinements: usize) -> String {
    let mut out = String::from("iteration,lr,loss_total");
    for k in 0..=refinements {
        let _ = write!(out, ",loss_stream_{k}");
    }
    out.push_str(",mean_num_centers\n");
    for row in log {
        let _ = write!(out, "{},{},{}", row.iteration, row.lr, row.loss_total);
        for l in &row.loss_streams {
            let _ = write!(out, ",{l}");
        }
        let _ = writeln!(out, ",{}", row.mean_num_centers);
    }
    out
}
