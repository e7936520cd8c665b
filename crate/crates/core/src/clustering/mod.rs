//! Proposal cluster learning: center finding, cluster generation and the
//! supervision each refined stream is trained against.

mod centers;
mod clusters;
mod graph;
mod kmeans;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use centers::{find_centers_graph, find_centers_highest, greedy_graph_centers, ClusterCenter};
pub use clusters::{
    generate_clusters, supervision_bags, supervision_labels, BackgroundMember, Clustering, ObjectCluster,
    Supervision,
};
pub use graph::{build_graph, ProposalGraph};
pub use kmeans::{kmeans_1d, select_top_ranking};

use crate::error::{PclError, Result};
use crate::geometry::BBox;
use crate::losses::RefineLoss;
use crate::model::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// IoU above which two top-ranking proposals are connected.
    pub graph_iou: f64,
    /// IoU above which a proposal joins its nearest center's cluster.
    pub cluster_iou: f64,
    pub kmeans_clusters: usize,
    /// Per-class cap on graph centers.
    pub max_centers: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            graph_iou: 0.4,
            cluster_iou: 0.5,
            kmeans_clusters: 3,
            max_centers: 5,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("graph IoU", self.graph_iou), ("cluster IoU", self.cluster_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(PclError::Config(format!("{name} threshold {v} not in (0, 1)")));
            }
        }
        if self.kmeans_clusters == 0 || self.max_centers == 0 {
            return Err(PclError::Config("k-means clusters and max centers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMethod {
    Highest,
    Graph,
}

impl FromStr for CenterMethod {
    type Err = PclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest" => Ok(CenterMethod::Highest),
            "graph" => Ok(CenterMethod::Graph),
            other => Err(PclError::Config(format!("unknown center method {other:?}"))),
        }
    }
}

impl fmt::Display for CenterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CenterMethod::Highest => "highest",
            CenterMethod::Graph => "graph",
        })
    }
}

/// Everything derived from one stream's scores for the next stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamSupervision {
    pub centers: Vec<ClusterCenter>,
    pub clustering: Clustering,
    pub supervision: Supervision,
}

/// Builds the supervision for stream `k + 1` from the scores of stream `k`.
/// Only object-class rows are used; a background row is ignored.
pub fn supervise(
    previous: &ScoreMatrix,
    positives: &[usize],
    boxes: &[BBox],
    config: &ClusterConfig,
    method: CenterMethod,
    loss: RefineLoss,
) -> Result<StreamSupervision> {
    let scores = previous.object_scores();
    let centers = match method {
        CenterMethod::Highest => find_centers_highest(scores, positives, boxes)?,
        CenterMethod::Graph => find_centers_graph(scores, positives, boxes, config)?,
    };
    let clustering = generate_clusters(boxes, &centers, config.cluster_iou)?;
    let supervision = match loss {
        RefineLoss::Assigned => supervision_labels(&clustering, boxes.len(), previous.num_classes()).with_unit_weights(),
        RefineLoss::AssignedWeighted => supervision_labels(&clustering, boxes.len(), previous.num_classes()),
        RefineLoss::Bag => supervision_bags(&clustering),
    };
    Ok(StreamSupervision {
        centers,
        clustering,
        supervision,
    })
}
