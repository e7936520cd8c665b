use serde::Serialize;

use crate::geometry::{iou, BBox};

/// Undirected spatial-adjacency graph over a subset of proposals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProposalGraph {
    /// Proposal indices, one per vertex.
    pub vertices: Vec<usize>,
    /// `adjacency[i][j]` for vertex positions `i`, `j`. Symmetric, no loops.
    pub adjacency: Vec<Vec<bool>>,
}

impl ProposalGraph {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Neighbours of vertex `i` among the vertices flagged in `alive`.
    pub fn live_degree(&self, i: usize, alive: &[bool]) -> usize {
        self.adjacency[i]
            .iter()
            .zip(alive)
            .filter(|(&e, &a)| e && a)
            .count()
    }
}

/// Connects two proposals when their IoU is strictly above `threshold`.
pub fn build_graph(boxes: &[BBox], indices: &[usize], threshold: f64) -> ProposalGraph {
    let n = indices.len();
    let mut adjacency = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            debug_assert_ne!(indices[i], indices[j], "duplicate vertex");
            let connected = iou(&boxes[indices[i]], &boxes[indices[j]]) > threshold;
            adjacency[i][j] = connected;
            adjacency[j][i] = connected;
        }
    }
    ProposalGraph {
        vertices: indices.to_vec(),
        adjacency,
    }
}
