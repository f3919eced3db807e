//! Follower communication topology plus leader access flags.
//!
//! Followers are indexed `1..=N`; the leader is always index `0` and is never
//! part of the follower edge set. Leader access is carried separately as one
//! flag per follower.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of the leader in the augmented graph.
pub const LEADER: usize = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph needs at least one follower")]
    Empty,
    #[error("edge ({0},{1}) appears more than once")]
    DuplicateEdge(usize, usize),
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("agent index {index} out of range 1..={num_followers}")]
    IndexOutOfRange { index: usize, num_followers: usize },
    #[error("leader_links has {got} entries, expected {expected}")]
    LeaderLinksLength { got: usize, expected: usize },
    #[error("leader link for agent {0} must be 0 or 1")]
    InvalidLeaderLink(usize),
    #[error("follower graph is disconnected")]
    Disconnected,
    #[error("no follower has access to the leader")]
    NoLeaderAccess,
}

/// Validated undirected follower graph with leader-access flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct CommGraph {
    num_followers: usize,
    // adjacency[i-1] holds the neighbours of follower i, sorted.
    adjacency: Vec<BTreeSet<usize>>,
    leader_links: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    num_followers: usize,
    edges: Vec<(usize, usize)>,
    leader_links: Vec<u8>,
}

impl TryFrom<RawGraph> for CommGraph {
    type Error = GraphError;

    fn try_from(raw: RawGraph) -> Result<Self, Self::Error> {
        CommGraph::new(raw.num_followers, &raw.edges, &raw.leader_links)
    }
}

impl From<CommGraph> for RawGraph {
    fn from(g: CommGraph) -> Self {
        RawGraph {
            num_followers: g.num_followers,
            edges: g.edges(),
            leader_links: g.leader_links.iter().map(|&b| b as u8).collect(),
        }
    }
}

impl CommGraph {
    /// Builds and validates a graph. `leader_links` holds one 0/1 flag per
    /// follower, in index order.
    pub fn new(
        num_followers: usize,
        edges: &[(usize, usize)],
        leader_links: &[u8],
    ) -> Result<Self, GraphError> {
        if num_followers == 0 {
            return Err(GraphError::Empty);
        }
        if leader_links.len() != num_followers {
            return Err(GraphError::LeaderLinksLength {
                got: leader_links.len(),
                expected: num_followers,
            });
        }
        let mut adjacency = vec![BTreeSet::new(); num_followers];
        for &(a, b) in edges {
            for idx in [a, b] {
                if idx == 0 || idx > num_followers {
                    return Err(GraphError::IndexOutOfRange {
                        index: idx,
                        num_followers,
                    });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !adjacency[a - 1].insert(b) {
                return Err(GraphError::DuplicateEdge(a, b));
            }
            adjacency[b - 1].insert(a);
        }
        let mut links = Vec::with_capacity(num_followers);
        for (k, &flag) in leader_links.iter().enumerate() {
            match flag {
                0 => links.push(false),
                1 => links.push(true),
                _ => return Err(GraphError::InvalidLeaderLink(k + 1)),
            }
        }
        let graph = CommGraph {
            num_followers,
            adjacency,
            leader_links: links,
        };
        if !graph.is_connected() {
            return Err(GraphError::Disconnected);
        }
        if !graph.leader_links.iter().any(|&b| b) {
            return Err(GraphError::NoLeaderAccess);
        }
        Ok(graph)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.num_followers];
        let mut queue = VecDeque::from([1usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.adjacency[i - 1] {
                if !seen[j - 1] {
                    seen[j - 1] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn num_followers(&self) -> usize {
        self.num_followers
    }

    fn check_index(&self, i: usize) -> Result<(), GraphError> {
        if i == 0 || i > self.num_followers {
            Err(GraphError::IndexOutOfRange {
                index: i,
                num_followers: self.num_followers,
            })
        } else {
            Ok(())
        }
    }

    /// Follower neighbours of agent `i`, ascending. The leader is never listed
    /// here; see [`CommGraph::has_leader_link`].
    pub fn neighbors(&self, i: usize) -> Result<&BTreeSet<usize>, GraphError> {
        self.check_index(i)?;
        Ok(&self.adjacency[i - 1])
    }

    pub fn has_leader_link(&self, i: usize) -> Result<bool, GraphError> {
        self.check_index(i)?;
        Ok(self.leader_links[i - 1])
    }

    /// Leader flag `b_i` as a number.
    pub fn b(&self, i: usize) -> f64 {
        if self.leader_links[i - 1] {
            1.0
        } else {
            0.0
        }
    }

    /// Every agent `i` may read in the augmented graph: itself, its follower
    /// neighbours and the leader when `b_i = 1`.
    pub fn permitted_reads(&self, i: usize) -> Result<BTreeSet<usize>, GraphError> {
        let mut set = self.neighbors(i)?.clone();
        set.insert(i);
        if self.leader_links[i - 1] {
            set.insert(LEADER);
        }
        Ok(set)
    }

    /// Neighbour ids in the augmented graph (leader included when linked).
    pub fn augmented_neighbors(&self, i: usize) -> Result<BTreeSet<usize>, GraphError> {
        let mut set = self.neighbors(i)?.clone();
        if self.leader_links[i - 1] {
            set.insert(LEADER);
        }
        Ok(set)
    }

    /// Unordered follower edges, each reported once as `(small, large)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, nbrs) in self.adjacency.iter().enumerate() {
            let i = k + 1;
            out.extend(nbrs.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn leader_links(&self) -> Vec<u8> {
        self.leader_links.iter().map(|&b| b as u8).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i - 1].len()
    }

    /// `L + B`, with `L` the follower graph Laplacian and `B = diag(b_i)`.
    pub fn laplacian_plus_b(&self) -> DMatrix<f64> {
        let n = self.num_followers;
        let mut m = DMatrix::zeros(n, n);
        for i in 1..=n {
            m[(i - 1, i - 1)] = self.degree(i) as f64 + self.b(i);
            for &j in &self.adjacency[i - 1] {
                m[(i - 1, j - 1)] = -1.0;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph() -> CommGraph {
        CommGraph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)], &[1, 0, 1, 0, 1]).unwrap()
    }

    #[test]
    fn path_graph_neighbors() {
        let g = path_graph();
        assert_eq!(g.neighbors(2).unwrap().iter().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(g.neighbors(1).unwrap().iter().copied().collect::<Vec<_>>(), vec![2]);
        assert!(!g.neighbors(3).unwrap().contains(&LEADER));
        assert!(g.has_leader_link(3).unwrap());
        assert!(!g.has_leader_link(2).unwrap());
    }

    #[test]
    fn trivial_single_follower() {
        let g = CommGraph::new(1, &[], &[1]).unwrap();
        assert!(g.neighbors(1).unwrap().is_empty());
        assert_eq!(g.laplacian_plus_b()[(0, 0)], 1.0);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            CommGraph::new(4, &[(1, 2), (3, 4)], &[1, 0, 0, 0]),
            Err(GraphError::Disconnected)
        );
        assert_eq!(
            CommGraph::new(2, &[(1, 2), (2, 1)], &[1, 0]),
            Err(GraphError::DuplicateEdge(2, 1))
        );
        assert_eq!(CommGraph::new(2, &[(1, 1)], &[1, 0]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            CommGraph::new(2, &[(1, 2)], &[0, 0]),
            Err(GraphError::NoLeaderAccess)
        );
        assert!(matches!(
            CommGraph::new(2, &[(1, 3)], &[1, 0]),
            Err(GraphError::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            path_graph().neighbors(6),
            Err(GraphError::IndexOutOfRange { index: 6, .. })
        ));
        assert!(matches!(
            path_graph().neighbors(0),
            Err(GraphError::IndexOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn path_laplacian() {
        let g = CommGraph::new(2, &[(1, 2)], &[1, 0]).unwrap();
        let m = g.laplacian_plus_b();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn path_laplacian_diagonal() {
        let m = path_graph().laplacian_plus_b();
        // |N_i| + b_i by hand: (1+1, 2+0, 2+1, 2+0, 1+1)
        let diag: Vec<f64> = (0..5).map(|k| m[(k, k)]).collect();
        assert_eq!(diag, vec![2.0, 2.0, 3.0, 2.0, 2.0]);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn permitted_reads_follow_leader_flag() {
        let g = path_graph();
        let r2: Vec<_> = g.permitted_reads(2).unwrap().into_iter().collect();
        assert_eq!(r2, vec![1, 2, 3]);
        let r3: Vec<_> = g.permitted_reads(3).unwrap().into_iter().collect();
        assert_eq!(r3, vec![0, 2, 3, 4]);
    }

    #[test]
    fn serde_round_trip_validates() {
        let g = path_graph();
        let s = serde_json::to_string(&g).unwrap();
        let back: CommGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"num_followers":2,"edges":[],"leader_links":[1,1]}"#;
        assert!(serde_json::from_str::<CommGraph>(bad).is_err());
    }
}
