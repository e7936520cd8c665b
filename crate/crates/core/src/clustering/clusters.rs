//! Proposal cluster generation and the two supervision flavours derived
//! from clusters.

use serde::{Deserialize, Serialize};

use super::centers::ClusterCenter;
use crate::error::{PclError, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCluster {
    /// Proposal index of the cluster center.
    pub center: usize,
    /// Member proposal indices, ascending. Always contains `center`.
    pub members: Vec<usize>,
    /// 1-based object class.
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMember {
    pub proposal: usize,
    /// Confidence of the nearest center, used as this proposal's weight.
    pub confidence: f64,
}

/// Object clusters plus the single background cluster of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub objects: Vec<ObjectCluster>,
    pub background: Vec<BackgroundMember>,
}

impl Clustering {
    /// Checks that every index in `0..num_proposals` is in exactly one
    /// cluster.
    pub fn is_partition(&self, num_proposals: usize) -> bool {
        let mut seen = vec![0u32; num_proposals];
        let indices = self
            .objects
            .iter()
            .flat_map(|o| o.members.iter().copied())
            .chain(self.background.iter().map(|m| m.proposal));
        for r in indices {
            match seen.get_mut(r) {
                Some(n) => *n += 1,
                None => return false,
            }
        }
        seen.iter().all(|&n| n == 1)
    }
}

/// Assigns each proposal to the object cluster of its highest-IoU center
/// when that IoU is above `threshold`, otherwise to background carrying
/// that center's confidence.
///
/// Ties in IoU go to the lower center index, except that a center's own
/// proposal always joins its own cluster.
pub fn generate_clusters(boxes: &[BBox], centers: &[ClusterCenter], threshold: f64) -> Result<Clustering> {
    if centers.is_empty() {
        return Err(PclError::Data("cannot build clusters without centers".into()));
    }
    let mut objects: Vec<ObjectCluster> = centers
        .iter()
        .map(|s| ObjectCluster {
            center: s.proposal,
            members: Vec::new(),
            label: s.label,
            confidence: s.confidence,
        })
        .collect();
    let mut background = Vec::new();
    for (r, bbox) in boxes.iter().enumerate() {
        let nearest = match centers.iter().position(|s| s.proposal == r) {
            Some(n) => n,
            None => {
                let mut best = 0;
                let mut best_iou = iou(bbox, &centers[0].bbox);
                for (n, s) in centers.iter().enumerate().skip(1) {
                    let v = iou(bbox, &s.bbox);
                    if v > best_iou {
                        best = n;
                        best_iou = v;
                    }
                }
                best
            }
        };
        if iou(bbox, &centers[nearest].bbox) > threshold {
            objects[nearest].members.push(r);
        } else {
            background.push(BackgroundMember {
                proposal: r,
                confidence: centers[nearest].confidence,
            });
        }
    }
    Ok(Clustering { objects, background })
}

/// Supervision for one refined stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Supervision {
    /// One label (1-based, `C + 1` = background) and one loss weight per
    /// proposal.
    ProposalLabels { labels: Vec<usize>, weights: Vec<f64> },
    /// Object clusters as bags, plus per-proposal background members.
    ClusterBags {
        bags: Vec<ObjectCluster>,
        background: Vec<BackgroundMember>,
    },
}

impl Supervision {
    /// Same labels with every weight set to one.
    pub fn with_unit_weights(self) -> Self {
        match self {
            Supervision::ProposalLabels { labels, weights } => Supervision::ProposalLabels {
                weights: vec![1.0; weights.len()],
                labels,
            },
            bags => bags,
        }
    }
}

/// Per-proposal labels: object cluster members take the cluster label and
/// confidence, background members take label `C + 1` and their own weight.
pub fn supervision_labels(clustering: &Clustering, num_proposals: usize, num_classes: usize) -> Supervision {
    let mut labels = vec![num_classes + 1; num_proposals];
    let mut weights = vec![0.0; num_proposals];
    for cluster in &clustering.objects {
        for &r in &cluster.members {
            labels[r] = cluster.label;
            weights[r] = cluster.confidence;
        }
    }
    for m in &clustering.background {
        labels[m.proposal] = num_classes + 1;
        weights[m.proposal] = m.confidence;
    }
    Supervision::ProposalLabels { labels, weights }
}

/// Each non-empty object cluster becomes a bag; background is kept per
/// member.
pub fn supervision_bags(clustering: &Clustering) -> Supervision {
    Supervision::ClusterBags {
        bags: clustering.objects.iter().filter(|o| !o.members.is_empty()).cloned().collect(),
        background: clustering.background.clone(),
    }
}
