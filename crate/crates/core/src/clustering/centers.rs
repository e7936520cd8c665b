//! Proposal cluster center selection: the single highest scoring proposal
//! per class, or greedy max-degree picks on a graph of top-ranking
//! proposals.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::graph::build_graph;
use super::kmeans::select_top_ranking;
use super::ClusterConfig;
use crate::error::{PclError, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenter {
    pub bbox: BBox,
    pub proposal: usize,
    /// 1-based object class.
    pub label: usize,
    pub confidence: f64,
}

fn check_inputs(scores: &ArrayView2<'_, f64>, positives: &[usize], boxes: &[BBox]) -> Result<()> {
    if positives.is_empty() {
        return Err(PclError::Data("image has no positive class".into()));
    }
    if scores.ncols() != boxes.len() {
        return Err(PclError::Config(format!(
            "{} score columns for {} boxes",
            scores.ncols(),
            boxes.len()
        )));
    }
    if let Some(&c) = positives.iter().find(|&&c| c == 0 || c > scores.nrows()) {
        return Err(PclError::Data(format!("class {c} out of range 1..={}", scores.nrows())));
    }
    Ok(())
}

/// Positive classes ordered by their best score, highest first; ties go to
/// the lower class id. Earlier classes win contested proposals.
fn claim_order(scores: &ArrayView2<'_, f64>, positives: &[usize]) -> Vec<usize> {
    let mut classes = positives.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let best = |c: usize| scores.row(c - 1).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    classes.sort_by(|&a, &b| best(b).partial_cmp(&best(a)).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    classes
}

/// Highest unclaimed proposal in `row`, lowest index on ties.
fn best_unclaimed(row: &[f64], claimed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (r, &s) in row.iter().enumerate() {
        if !claimed[r] && best.map_or(true, |b| s > row[b]) {
            best = Some(r);
        }
    }
    best
}

/// One center per positive class: its highest scoring proposal.
///
/// `scores` holds object-class rows only (`C x R`). A proposal that is the
/// argmax for several classes stays with the class scoring highest; the
/// others fall back to their best unclaimed proposal. Output is ordered by
/// class id.
pub fn find_centers_highest(
    scores: ArrayView2<'_, f64>,
    positives: &[usize],
    boxes: &[BBox],
) -> Result<Vec<ClusterCenter>> {
    check_inputs(&scores, positives, boxes)?;
    let mut claimed = vec![false; boxes.len()];
    let mut centers = Vec::new();
    for c in claim_order(&scores, positives) {
        let row = scores.row(c - 1).to_vec();
        if let Some(r) = best_unclaimed(&row, &claimed) {
            claimed[r] = true;
            centers.push(ClusterCenter {
                bbox: boxes[r],
                proposal: r,
                label: c,
                confidence: row[r],
            });
        }
    }
    centers.sort_by_key(|s| s.label);
    Ok(centers)
}

/// Greedy center picking on the spatial graph over `vertices` (proposal
/// indices). Returns `(proposal, confidence)` in selection order.
///
/// Each step takes the live vertex with the most live neighbours (ties:
/// higher score, then lower proposal index), scores it by the max over
/// itself and those neighbours, and removes all of them.
pub fn greedy_graph_centers(boxes: &[BBox], vertices: &[usize], row: &[f64], threshold: f64) -> Vec<(usize, f64)> {
    let graph = build_graph(boxes, vertices, threshold);
    let mut alive = vec![true; graph.len()];
    let mut out = Vec::new();
    while alive.iter().any(|&a| a) {
        let mut pick: Option<(usize, usize)> = None;
        for i in (0..graph.len()).filter(|&i| alive[i]) {
            let deg = graph.live_degree(i, &alive);
            let better = match pick {
                None => true,
                Some((j, dj)) => {
                    let (si, sj) = (row[graph.vertices[i]], row[graph.vertices[j]]);
                    deg > dj
                        || (deg == dj && si > sj)
                        || (deg == dj && si == sj && graph.vertices[i] < graph.vertices[j])
                }
            };
            if better {
                pick = Some((i, deg));
            }
        }
        let (i, _) = pick.expect("a live vertex exists");
        let mut confidence = row[graph.vertices[i]];
        for j in 0..graph.len() {
            if alive[j] && graph.adjacency[i][j] {
                confidence = confidence.max(row[graph.vertices[j]]);
                alive[j] = false;
            }
        }
        alive[i] = false;
        out.push((graph.vertices[i], confidence));
    }
    out
}

/// Keeps the `max` most confident picks, preserving selection order.
fn cap_by_confidence(picks: Vec<(usize, f64)>, max: usize) -> Vec<(usize, f64)> {
    if picks.len() <= max {
        return picks;
    }
    let mut order: Vec<usize> = (0..picks.len()).collect();
    order.sort_by(|&a, &b| {
        picks[b]
            .1
            .partial_cmp(&picks[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = order[..max].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| picks[i]).collect()
}

/// Graph-based centers: possibly several per positive class.
///
/// For each class the top-ranking proposals come from 1-D k-means over its
/// scores; centers are then picked greedily by degree on their IoU graph. A
/// class whose picks collide with proposals already claimed by an earlier
/// (higher scoring) class re-runs the greedy pass without those proposals.
/// At most `config.max_centers` centers survive per class.
pub fn find_centers_graph(
    scores: ArrayView2<'_, f64>,
    positives: &[usize],
    boxes: &[BBox],
    config: &ClusterConfig,
) -> Result<Vec<ClusterCenter>> {
    check_inputs(&scores, positives, boxes)?;
    config.validate()?;
    let mut claimed = vec![false; boxes.len()];
    let mut centers = Vec::new();
    for c in claim_order(&scores, positives) {
        let row = scores.row(c - 1).to_vec();
        let top = select_top_ranking(&row, config.kmeans_clusters);
        let mut picks = greedy_graph_centers(boxes, &top, &row, config.graph_iou);
        if picks.iter().any(|&(r, _)| claimed[r]) {
            let free: Vec<usize> = top.iter().copied().filter(|&r| !claimed[r]).collect();
            picks = if free.is_empty() {
                best_unclaimed(&row, &claimed).map(|r| (r, row[r])).into_iter().collect()
            } else {
                greedy_graph_centers(boxes, &free, &row, config.graph_iou)
            };
        }
        for (r, confidence) in cap_by_confidence(picks, config.max_centers) {
            claimed[r] = true;
            centers.push(ClusterCenter {
                bbox: boxes[r],
                proposal: r,
                label: c,
                confidence,
            });
        }
    }
    centers.sort_by_key(|s| s.label);
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use ndarray::{array, Array2};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn spread_boxes(n: usize) -> Vec<BBox> {
        (0..n).map(|i| b(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0)).collect()
    }

    #[test]
    fn highest_is_the_argmax() {
        let scores = array![[0.1, 0.7, 0.2]];
        let centers = find_centers_highest(scores.view(), &[1], &spread_boxes(3)).unwrap();
        assert_eq!(centers.len(), 1);
        assert_eq!(centers[0].proposal, 1);
        assert_eq!(centers[0].confidence, 0.7);
        assert_eq!(centers[0].label, 1);
    }

    #[test]
    fn highest_single_proposal() {
        let scores = array![[0.3], [0.6]];
        let centers = find_centers_highest(scores.view(), &[2], &spread_boxes(1)).unwrap();
        assert_eq!(centers[0].proposal, 0);
        assert_eq!(centers[0].label, 2);
    }

    #[test]
    fn highest_resolves_shared_argmax() {
        // proposal 3 is best for class 1 (0.9) and class 2 (0.8)
        let scores = array![[0.1, 0.2, 0.3, 0.9, 0.0], [0.5, 0.1, 0.6, 0.8, 0.2]];
        let centers = find_centers_highest(scores.view(), &[1, 2], &spread_boxes(5)).unwrap();
        // enumerate every assignment of distinct proposals and keep the ones
        // where class 1 holds 3 and class 2 has its best remaining proposal
        let mut expected = None;
        for p1 in 0..5 {
            for p2 in 0..5 {
                if p1 == p2 || p1 != 3 {
                    continue;
                }
                let best2 = (0..5).filter(|&r| r != 3).all(|r| scores[[1, r]] <= scores[[1, p2]]);
                if best2 {
                    expected = Some((p1, p2));
                }
            }
        }
        let (p1, p2) = expected.unwrap();
        assert_eq!((centers[0].proposal, centers[1].proposal), (p1, p2));
        assert_eq!((p1, p2), (3, 2));
        assert_eq!(centers[1].confidence, 0.6);
    }

    #[test]
    fn no_positive_class_is_an_error() {
        let scores = array![[0.1, 0.2]];
        assert!(matches!(
            find_centers_highest(scores.view(), &[], &spread_boxes(2)),
            Err(PclError::Data(_))
        ));
        assert!(find_centers_graph(scores.view(), &[], &spread_boxes(2), &ClusterConfig::default()).is_err());
    }

    #[test]
    fn graph_two_components() {
        // b1 overlaps b2 and b3, b4 overlaps b5; nothing else touches
        let boxes = vec![
            b(0.0, 0.0, 10.0, 10.0),
            b(1.0, 0.0, 11.0, 10.0),
            b(-2.0, 2.0, 8.0, 12.0),
            b(50.0, 50.0, 60.0, 60.0),
            b(51.0, 50.0, 61.0, 60.0),
        ];
        assert!(iou(&boxes[1], &boxes[2]) <= 0.4);
        assert!(iou(&boxes[0], &boxes[1]) > 0.4 && iou(&boxes[0], &boxes[2]) > 0.4);
        let row = [0.80, 0.90, 0.85, 0.75, 0.70];
        let picks = greedy_graph_centers(&boxes, &[0, 1, 2, 3, 4], &row, 0.4);
        // b1 has degree 2; b4/b5 tie at 1 and b4 scores higher
        assert_eq!(picks, vec![(0, 0.90), (3, 0.75)]);
    }

    #[test]
    fn graph_without_edges_is_capped_by_confidence() {
        let boxes = spread_boxes(7);
        let row = [0.50, 0.51, 0.52, 0.53, 0.54, 0.55, 0.56];
        let picks = greedy_graph_centers(&boxes, &[0, 1, 2, 3, 4, 5, 6], &row, 0.4);
        assert_eq!(picks.len(), 7);
        // zero degree everywhere: highest score first
        assert_eq!(picks[0], (6, 0.56));
        let capped = cap_by_confidence(picks, 5);
        let mut kept: Vec<usize> = capped.iter().map(|p| p.0).collect();
        kept.sort();
        assert_eq!(kept, vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn graph_single_vertex() {
        let boxes = spread_boxes(3);
        let scores = Array2::from_shape_vec((1, 3), vec![0.01, 0.02, 0.97]).unwrap();
        let centers = find_centers_graph(scores.view(), &[1], &boxes, &ClusterConfig::default()).unwrap();
        assert_eq!(centers.len(), 1);
        assert_eq!((centers[0].proposal, centers[0].confidence), (2, 0.97));
    }

    #[test]
    fn graph_dedup_across_classes() {
        let boxes = spread_boxes(4);
        // both classes peak at proposal 0; class 1 is more confident
        let scores = array![[0.9, 0.0, 0.0, 0.0], [0.8, 0.0, 0.0, 0.5]];
        let centers = find_centers_graph(scores.view(), &[1, 2], &boxes, &ClusterConfig::default()).unwrap();
        let c1: Vec<usize> = centers.iter().filter(|c| c.label == 1).map(|c| c.proposal).collect();
        let c2: Vec<usize> = centers.iter().filter(|c| c.label == 2).map(|c| c.proposal).collect();
        assert_eq!(c1, vec![0]);
        assert_eq!(c2, vec![3]);
    }
}
