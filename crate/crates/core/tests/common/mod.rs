//! Oracles and instance generators shared by the integration and
//! acceptance tests. Nothing here calls back into the code under test
//! except to obtain the values being checked.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcl_core::clustering::{
    find_centers_graph, generate_clusters, supervise, BackgroundMember, CenterMethod, ClusterCenter, ClusterConfig,
    ObjectCluster, Supervision,
};
use pcl_core::datagen::{generate_synthetic, GenConfig};
use pcl_core::losses::{label_vector, loss_assigned, loss_bag, loss_basic, total_loss, RefineLoss};
use pcl_core::metrics::{evaluate, GroundTruth, GtObject, ImageDetection};
use pcl_core::model::{forward_all, softmax_columns, ModelDims, ModelParams};
use pcl_core::trainer::{train, TrainConfig};
use pcl_core::{BBox, Detection};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative error. Central differences of an O(1)
/// loss carry about 1e-10 of rounding error (a few ulps over 2e-5), so
/// entries below 1e-5 are judged by absolute error at the 1e-9 level.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Max relative error between an analytic gradient and central differences
/// of `f` around `x`.
pub fn check_gradient(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn shaped(v: &[f64], like: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec(like.raw_dim(), v.to_vec()).unwrap()
}

/// Image-level cross entropy: gradient with respect to the image scores.
pub fn grad_check_basic(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let c = rng.gen_range(2..6);
    let scores: Array1<f64> = (0..c).map(|_| rng.gen_range(0.05..0.95)).collect();
    let labels: Array1<f64> = (0..c).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let (_, g) = loss_basic(&scores, &labels);
    let x: Vec<f64> = scores.to_vec();
    check_gradient(&x, &g.to_vec(), |p| loss_basic(&Array1::from(p.to_vec()), &labels).0)
}

fn random_labels<R: Rng>(rng: &mut R, classes: usize, r: usize) -> Vec<usize> {
    (0..r).map(|_| rng.gen_range(1..=classes + 1)).collect()
}

/// Per-proposal loss with unit weights, or random weights when `weighted`.
pub fn grad_check_assigned(seed: u64, weighted: bool) -> f64 {
    let mut rng = rng(seed);
    let (c, r) = (rng.gen_range(2..5), rng.gen_range(2..12));
    let logits = random_matrix(&mut rng, c + 1, r, 3.0);
    let labels = random_labels(&mut rng, c, r);
    let weights: Vec<f64> = if weighted {
        (0..r).map(|_| rng.gen_range(0.0..1.0)).collect()
    } else {
        vec![1.0; r]
    };
    let (_, g) = loss_assigned(&softmax_columns(&logits), &labels, &weights).unwrap();
    check_gradient(&flat(&logits), &flat(&g), |p| {
        loss_assigned(&softmax_columns(&shaped(p, &logits)), &labels, &weights)
            .unwrap()
            .0
    })
}

/// A random split of `0..r` into object bags and background members.
pub fn random_bags<R: Rng>(rng: &mut R, classes: usize, r: usize) -> (Vec<ObjectCluster>, Vec<BackgroundMember>) {
    let mut idx: Vec<usize> = (0..r).collect();
    idx.shuffle(rng);
    let n_bags = rng.gen_range(1..=3.min(r));
    let mut bags: Vec<ObjectCluster> = (0..n_bags)
        .map(|n| ObjectCluster {
            center: idx[n],
            members: vec![idx[n]],
            label: rng.gen_range(1..=classes),
            confidence: rng.gen_range(0.05..1.0),
        })
        .collect();
    let mut background = Vec::new();
    for &p in &idx[n_bags..] {
        if rng.gen_bool(0.4) {
            background.push(BackgroundMember {
                proposal: p,
                confidence: rng.gen_range(0.05..1.0),
            });
        } else {
            let n = rng.gen_range(0..n_bags);
            bags[n].members.push(p);
        }
    }
    for b in &mut bags {
        b.members.sort_unstable();
    }
    (bags, background)
}

/// Cluster bag loss with average pooling.
pub fn grad_check_bag(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (c, r) = (rng.gen_range(2..5), rng.gen_range(2..12));
    let logits = random_matrix(&mut rng, c + 1, r, 3.0);
    let (bags, background) = random_bags(&mut rng, c, r);
    let (_, g) = loss_bag(&softmax_columns(&logits), &bags, &background).unwrap();
    check_gradient(&flat(&logits), &flat(&g), |p| {
        loss_bag(&softmax_columns(&shaped(p, &logits)), &bags, &background)
            .unwrap()
            .0
    })
}

fn params_vec(p: &ModelParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn params_from(like: &ModelParams, v: &[f64]) -> ModelParams {
    let mut out = like.clone();
    let mut i = 0;
    for t in out.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = v[i];
            i += 1;
        }
    }
    out
}

/// Summed loss over all streams with respect to every parameter, holding the
/// supervisions fixed at the unperturbed model's values. Instances whose
/// embedding pre-activations sit near the ReLU kink are redrawn. `None`
/// draws the number of refined streams at random.
pub fn grad_check_total(seed: u64, refinements: Option<usize>) -> f64 {
    let mut rng = rng(seed);
    loop {
        let dims = ModelDims {
            d_raw: rng.gen_range(2..6),
            d: rng.gen_range(2..5),
            classes: rng.gen_range(2..4),
            refinements: refinements.unwrap_or_else(|| rng.gen_range(1..4)),
        };
        let r = rng.gen_range(3..9);
        let mut params = ModelParams::init(dims, 0.5, &mut rng);
        for t in params.tensors_mut() {
            if t.is_bias {
                t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            }
        }
        let raw = random_matrix(&mut rng, r, dims.d_raw, 1.0);
        let outputs = forward_all(raw.clone(), &params).unwrap();
        if outputs.features.pre_activation().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let boxes = random_boxes(&mut rng, r);
        let mut positives: Vec<usize> = (1..=dims.classes).filter(|_| rng.gen_bool(0.5)).collect();
        if positives.is_empty() {
            positives.push(1);
        }
        let method = if rng.gen_bool(0.5) { CenterMethod::Graph } else { CenterMethod::Highest };
        let loss = *[RefineLoss::Assigned, RefineLoss::AssignedWeighted, RefineLoss::Bag]
            .choose(&mut rng)
            .unwrap();
        let supervisions: Vec<Supervision> = (1..=dims.refinements)
            .map(|k| {
                supervise(
                    outputs.stream(k - 1),
                    &positives,
                    &boxes,
                    &ClusterConfig::default(),
                    method,
                    loss,
                )
                .unwrap()
                .supervision
            })
            .collect();
        let labels = label_vector(&positives, dims.classes);
        let report = total_loss(&outputs, &params, &labels, &supervisions).unwrap();
        let x = params_vec(&params);
        let analytic = params_vec(&report.grads);
        return check_gradient(&x, &analytic, |v| {
            let p = params_from(&params, v);
            let o = forward_all(raw.clone(), &p).unwrap();
            total_loss(&o, &p, &labels, &supervisions).unwrap().total
        });
    }
}

pub fn random_boxes<R: Rng>(rng: &mut R, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0));
            BBox::new(x, y, x + rng.gen_range(4.0..40.0), y + rng.gen_range(4.0..40.0)).unwrap()
        })
        .collect()
}

/// Boxes jittered around a few anchors so IoU graphs have real structure.
pub fn clustered_boxes<R: Rng>(rng: &mut R, n: usize) -> Vec<BBox> {
    let anchors: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), rng.gen_range(10.0..30.0)))
        .collect();
    (0..n)
        .map(|_| {
            let (ax, ay, s) = *anchors.choose(rng).unwrap();
            let j = s * 0.35;
            let x1 = ax + rng.gen_range(-j..j);
            let y1 = ay + rng.gen_range(-j..j);
            let x2 = ax + s + rng.gen_range(-j..j);
            let y2 = ay + s + rng.gen_range(-j..j);
            BBox::new(x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0)).unwrap()
        })
        .collect()
}

/// Oracle IoU, written out independently of the library.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.to_array();
    let [bx1, by1, bx2, by2] = b.to_array();
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = w * h;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// Top score group by exhaustive search over contiguous 3-way splits of
/// the sorted scores.
pub fn oracle_top_group(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap());
    let v: Vec<f64> = order.iter().map(|&i| row[i]).collect();
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    let n = v.len();
    let mut best = (f64::INFINITY, n);
    for i in 1..n - 1 {
        for j in i + 1..n {
            let e = sse(&v[..i]) + sse(&v[i..j]) + sse(&v[j..]);
            if e < best.0 {
                best = (e, j);
            }
        }
    }
    let mut top = order[best.1..].to_vec();
    top.sort_unstable();
    top
}

/// Greedy max-degree picks computed from scratch each round over bitmask
/// adjacency: `(proposal, confidence)` in pick order.
pub fn oracle_greedy(boxes: &[BBox], vertices: &[usize], row: &[f64], threshold: f64) -> Vec<(usize, f64)> {
    let n = vertices.len();
    assert!(n <= 16);
    let mut adj = vec![0u32; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && oracle_iou(&boxes[vertices[i]], &boxes[vertices[j]]) > threshold {
                adj[i] |= 1 << j;
            }
        }
    }
    let mut live: u32 = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
    let mut out = Vec::new();
    while live != 0 {
        let key = |i: usize| ((adj[i] & live).count_ones(), row[vertices[i]], std::cmp::Reverse(vertices[i]));
        let pick = (0..n)
            .filter(|&i| live & (1 << i) != 0)
            .max_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap())
            .unwrap();
        let group = (adj[pick] & live) | (1 << pick);
        let confidence = (0..n)
            .filter(|&j| group & (1 << j) != 0)
            .map(|j| row[vertices[j]])
            .fold(f64::NEG_INFINITY, f64::max);
        out.push((vertices[pick], confidence));
        live &= !group;
    }
    out
}

/// Full graph-center oracle: classes claim in order of their best score,
/// a class colliding with claimed proposals repeats the greedy pass without
/// them, and each class keeps its most confident picks.
pub fn oracle_graph_centers(
    scores: &Array2<f64>,
    positives: &[usize],
    boxes: &[BBox],
    config: &ClusterConfig,
) -> Vec<ClusterCenter> {
    let mut classes = positives.to_vec();
    let best = |c: usize| scores.row(c - 1).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    classes.sort_by(|&a, &b| best(b).partial_cmp(&best(a)).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; boxes.len()];
    let mut out = Vec::new();
    for c in classes {
        let row = scores.row(c - 1).to_vec();
        let top = oracle_top_group(&row);
        let mut picks = oracle_greedy(boxes, &top, &row, config.graph_iou);
        if picks.iter().any(|&(r, _)| claimed[r]) {
            let free: Vec<usize> = top.iter().copied().filter(|&r| !claimed[r]).collect();
            picks = if free.is_empty() {
                let r = (0..row.len())
                    .filter(|&r| !claimed[r])
                    .fold(None, |b: Option<usize>, r| match b {
                        Some(b) if row[b] >= row[r] => Some(b),
                        _ => Some(r),
                    });
                r.map(|r| (r, row[r])).into_iter().collect()
            } else {
                oracle_greedy(boxes, &free, &row, config.graph_iou)
            };
        }
        let mut ranked: Vec<usize> = (0..picks.len()).collect();
        ranked.sort_by(|&a, &b| picks[b].1.partial_cmp(&picks[a].1).unwrap().then(a.cmp(&b)));
        ranked.truncate(config.max_centers);
        ranked.sort_unstable();
        for i in ranked {
            let (r, confidence) = picks[i];
            claimed[r] = true;
            out.push(ClusterCenter {
                bbox: boxes[r],
                proposal: r,
                label: c,
                confidence,
            });
        }
    }
    out.sort_by_key(|s| s.label);
    out
}

/// Score rows in three separated bands so the top group is unambiguous;
/// the top band holds `1..=max_top` proposals. The low band is no larger
/// than the middle one and no smaller than the top one, which keeps
/// quantile-seeded Lloyd iterations out of local optima.
pub fn banded_scores<R: Rng>(rng: &mut R, classes: usize, r: usize, max_top: usize) -> Array2<f64> {
    assert!(r >= 3);
    let mut m = Array2::zeros((classes, r));
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..r).collect();
        idx.shuffle(rng);
        let top = rng.gen_range(1..=max_top.min(r / 3));
        let mid = rng.gen_range((r - top + 1) / 2..=r - 2 * top);
        for (k, &p) in idx.iter().enumerate() {
            m[[c, p]] = if k < top {
                rng.gen_range(0.70..0.74)
            } else if k < top + mid {
                rng.gen_range(0.35..0.39)
            } else {
                rng.gen_range(0.00..0.04)
            };
        }
    }
    m
}

pub struct GraphCase {
    pub scores: Array2<f64>,
    pub positives: Vec<usize>,
    pub boxes: Vec<BBox>,
}

pub fn graph_case(seed: u64) -> GraphCase {
    let mut rng = rng(seed);
    let classes = rng.gen_range(1..4);
    let r = rng.gen_range(12..30);
    let boxes = clustered_boxes(&mut rng, r);
    let scores = banded_scores(&mut rng, classes, r, 10);
    let mut positives: Vec<usize> = (1..=classes).filter(|_| rng.gen_bool(0.7)).collect();
    if positives.is_empty() {
        positives.push(rng.gen_range(1..=classes));
    }
    GraphCase {
        scores,
        positives,
        boxes,
    }
}

/// Whether the library's graph centers equal the oracle's on one case.
pub fn graph_centers_match(case: &GraphCase) -> bool {
    let config = ClusterConfig::default();
    let got = find_centers_graph(case.scores.view(), &case.positives, &case.boxes, &config).unwrap();
    got == oracle_graph_centers(&case.scores, &case.positives, &case.boxes, &config)
}

/// Checks partition, self-membership and same-class center separation of
/// the clusters built from graph centers on one random case.
pub fn cluster_invariants_hold(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let classes = rng.gen_range(1..4);
    let r = rng.gen_range(5..40);
    let boxes = if rng.gen_bool(0.5) {
        clustered_boxes(&mut rng, r)
    } else {
        random_boxes(&mut rng, r)
    };
    let scores = Array2::from_shape_fn((classes, r), |_| rng.gen_range(0.0..1.0));
    let positives: Vec<usize> = (1..=classes).filter(|&c| c == 1 || rng.gen_bool(0.5)).collect();
    let config = ClusterConfig::default();
    let centers = find_centers_graph(scores.view(), &positives, &boxes, &config).map_err(|e| e.to_string())?;
    let clustering = generate_clusters(&boxes, &centers, config.cluster_iou).map_err(|e| e.to_string())?;
    if !clustering.is_partition(r) {
        return Err(format!("seed {seed}: not a partition"));
    }
    for (cluster, center) in clustering.objects.iter().zip(&centers) {
        if !cluster.members.contains(&center.proposal) {
            return Err(format!("seed {seed}: center {} outside its cluster", center.proposal));
        }
    }
    for a in &centers {
        for b in &centers {
            if a.proposal != b.proposal && a.label == b.label && oracle_iou(&a.bbox, &b.bbox) > config.graph_iou {
                return Err(format!("seed {seed}: centers {} and {} too close", a.proposal, b.proposal));
            }
        }
    }
    Ok(())
}

/// All-points interpolated AP computed from scratch: rank, match greedily,
/// then integrate the precision envelope over recall.
pub fn oracle_ap(dets: &[(u64, BBox, f64)], gts: &[(u64, BBox)]) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.partial_cmp(&dets[a].2).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &i in &order {
        let (img, b, _) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, &(gi, gb)) in gts.iter().enumerate() {
            if gi != img || used[g] {
                continue;
            }
            let v = oracle_iou(&b, &gb);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v > 0.5 => {
                used[g] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    let n = gts.len() as f64;
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    let mut hits = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        recall.push(hits / n);
        precision.push(hits / (k + 1) as f64);
    }
    // area: for each distinct recall step, the best precision at or beyond it
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev {
            let p = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += (recall[k] - prev) * p;
            prev = recall[k];
        }
    }
    ap
}

/// One benchmark run: train on the default synthetic set for `seed`, report
/// CorLoc on the training images and mAP on an independent test split.
pub fn benchmark_run(seed: u64, refinements: usize, method: CenterMethod, loss: RefineLoss) -> (f64, f64) {
    let gen = GenConfig {
        seed,
        ..GenConfig::default()
    };
    let trainset = generate_synthetic(&gen).unwrap();
    let testset = generate_synthetic(&GenConfig { split: 1, ..gen }).unwrap();
    let config = TrainConfig {
        refinements,
        center_method: method,
        refine_loss: loss,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&trainset.training_view(), trainset.num_classes(), &config).unwrap();
    assert!(out.log.iter().all(|l| l.loss_total.is_finite()));
    let (on_train, _) = evaluate(&out.state.params, &trainset, 0.3).unwrap();
    let (on_test, _) = evaluate(&out.state.params, &testset, 0.3).unwrap();
    (on_train.mean_corloc.unwrap(), on_test.map.unwrap())
}

pub fn random_model(seed: u64, refinements: usize) -> (ModelParams, Array2<f64>) {
    let mut rng = rng(seed);
    let dims = ModelDims {
        d_raw: rng.gen_range(1..8),
        d: rng.gen_range(1..8),
        classes: rng.gen_range(2..6),
        refinements,
    };
    let params = ModelParams::init(dims, rng.gen_range(0.01..3.0), &mut rng);
    let r = rng.gen_range(1..40);
    let raw = random_matrix(&mut rng, r, dims.d_raw, 5.0);
    (params, raw)
}

/// Class-1 detections over a handful of images with distinct scores.
pub fn random_detections(seed: u64) -> (Vec<ImageDetection>, Vec<GroundTruth>) {
    let mut rng = rng(seed);
    let images = rng.gen_range(1..5u64);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..images {
        let n = rng.gen_range(0..3);
        let objects: Vec<GtObject> = random_boxes(&mut rng, n)
            .into_iter()
            .map(|bbox| GtObject { bbox, class_id: 1 })
            .collect();
        for o in &objects {
            for _ in 0..rng.gen_range(0..3) {
                let [x1, y1, x2, y2] = o.bbox.to_array();
                let j = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(-3.0..3.0);
                let (a, b) = (x1 + j(&mut rng), y1 + j(&mut rng));
                let bbox = BBox::new(a, b, (x2 + j(&mut rng)).max(a + 1.0), (y2 + j(&mut rng)).max(b + 1.0)).unwrap();
                dets.push((image_id, bbox));
            }
        }
        let n = rng.gen_range(0..4);
        for bbox in random_boxes(&mut rng, n) {
            dets.push((image_id, bbox));
        }
        gts.push(GroundTruth { image_id, objects });
    }
    let dets = dets
        .into_iter()
        .map(|(image_id, bbox)| ImageDetection {
            image_id,
            detection: Detection {
                bbox,
                class_id: 1,
                score: rng.gen_range(0.0..1.0),
            },
        })
        .collect();
    (dets, gts)
}
