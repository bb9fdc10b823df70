//! Residue graphs with sequential, radius and k-nearest edges, and the
//! micro-environment around each residue.
//!
//! Micro-environment membership is the union of the three neighbourhood
//! predicates by default; [`GraphConfig::conjunction`] switches to requiring
//! all three at once.

mod kdtree;

use std::collections::BTreeSet;

use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{dist2, edge_feature_matrix, node_feature_matrix, protein_frames, FeatureConfig};
use crate::ingest::{Protein, Vec3};

pub use kdtree::{brute_knn, KdTree};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GraphConfig {
    /// Sequence-separation cutoff.
    pub d_s: usize,
    /// Cα radius cutoff in Å (inclusive, compared on squared distances).
    pub d_r: f64,
    pub k: usize,
    pub k_hop: usize,
    /// Require all three predicates instead of any one of them.
    pub conjunction: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            d_s: 2,
            d_r: 10.0,
            k: 30,
            k_hop: 1,
            conjunction: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_r > 0.0) {
            return Err(Error::Config("d_r must be positive".into()));
        }
        if self.k == 0 || self.k_hop == 0 {
            return Err(Error::Config("k and k_hop must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeType {
    Sequential,
    Radius,
    KNearest,
}

impl EdgeType {
    pub const ALL: [EdgeType; 3] = [EdgeType::Sequential, EdgeType::Radius, EdgeType::KNearest];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::Sequential => "sequential",
            EdgeType::Radius => "radius",
            EdgeType::KNearest => "k_nearest",
        }
    }
}

/// Directed edge `i → j`; its features are expressed in the frame of `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeType,
}

#[derive(Clone, Debug)]
pub struct ResidueGraph {
    pub n: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    /// Row-major `n × node_dim`.
    pub node_feat: Vec<f64>,
    /// Sorted by `(i, j, kind)`.
    pub edges: Vec<Edge>,
    /// Row-major `edges.len() × edge_dim`.
    pub edge_feat: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    index: KdTree,
    knn_adj: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroEnv {
    pub center: usize,
    /// Ascending residue indices, center included.
    pub member_nodes: Vec<usize>,
    /// Indices into `ResidueGraph::edges` joining the center and a member.
    pub member_edges: Vec<usize>,
}

/// The typed edge set of a protein, without features.
pub fn typed_edges(ca: &[Vec3], index: &KdTree, cfg: &GraphConfig) -> Vec<Edge> {
    let n = ca.len();
    let mut edges = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(cfg.d_s);
        let hi = (i + cfg.d_s).min(n - 1);
        for j in lo..=hi {
            if j != i {
                edges.push(Edge {
                    i,
                    j,
                    kind: EdgeType::Sequential,
                });
            }
        }
        for j in index.within(ca[i], cfg.d_r, Some(i)) {
            edges.push(Edge {
                i,
                j,
                kind: EdgeType::Radius,
            });
        }
        for j in index.knn(ca[i], cfg.k, Some(i)) {
            edges.push(Edge {
                i,
                j,
                kind: EdgeType::KNearest,
            });
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn build_graph(p: &Protein, cfg: &GraphConfig, fcfg: &FeatureConfig) -> Result<ResidueGraph> {
    cfg.validate()?;
    fcfg.validate()?;
    p.validate()?;
    let ca = p.ca_trace();
    let index = KdTree::new(ca.clone())?;
    let edges = typed_edges(&ca, &index, cfg);
    let frames = protein_frames(p)?;
    let node_feat = node_feature_matrix(p, &frames, fcfg)?;
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.i, e.j)).collect();
    let edge_feat = edge_feature_matrix(p, &frames, &pairs, fcfg)?;
    let mut knn_adj = vec![Vec::new(); p.len()];
    for e in &edges {
        if e.kind == EdgeType::KNearest {
            knn_adj[e.i].push(e.j);
        }
    }
    Ok(ResidueGraph {
        n: p.len(),
        node_dim: fcfg.node_dim(),
        edge_dim: fcfg.edge_dim(),
        node_feat,
        edges,
        edge_feat,
        labels: None,
        index,
        knn_adj,
    })
}

impl ResidueGraph {
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Dataset(format!(
                "{} labels for {} residues",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn ca(&self) -> &[Vec3] {
        self.index.points()
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.node_feat[i * self.node_dim..(i + 1) * self.node_dim]
    }

    pub fn edge_row(&self, e: usize) -> &[f64] {
        &self.edge_feat[e * self.edge_dim..(e + 1) * self.edge_dim]
    }

    /// Residues reachable from `i` within `hops` steps along k-nearest edges.
    pub fn knn_hops(&self, i: usize, hops: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([i]);
        let mut frontier = vec![i];
        for _ in 0..hops {
            let mut next = Vec::new();
            for u in frontier {
                for &v in &self.knn_adj[u] {
                    if seen.insert(v) {
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    pub fn micro_env(&self, i: usize, cfg: &GraphConfig) -> Result<MicroEnv> {
        if i >= self.n {
            return Err(Error::Index(format!(
                "residue {i} out of range for {} residues",
                self.n
            )));
        }
        let ca = self.ca();
        let hop = self.knn_hops(i, cfg.k_hop);
        let seq = |j: usize| i.abs_diff(j) <= cfg.d_s;
        let members: BTreeSet<usize> = if cfg.conjunction {
            let radius: BTreeSet<usize> = self.index.within(ca[i], cfg.d_r, None).into_iter().collect();
            hop.iter()
                .copied()
                .filter(|&j| j == i || (seq(j) && radius.contains(&j)))
                .collect()
        } else {
            let lo = i.saturating_sub(cfg.d_s);
            let hi = (i + cfg.d_s).min(self.n - 1);
            let mut m: BTreeSet<usize> = (lo..=hi).collect();
            m.extend(self.index.within(ca[i], cfg.d_r, None));
            m.extend(hop);
            m
        };
        let member_edges = self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| (e.i == i && members.contains(&e.j)) || (e.j == i && members.contains(&e.i)))
            .map(|(k, _)| k)
            .collect();
        Ok(MicroEnv {
            center: i,
            member_nodes: members.into_iter().collect(),
            member_edges,
        })
    }

    /// Debug dump: typed edge lists plus feature checksums.
    pub fn dump_json(&self, id: &str) -> serde_json::Value {
        let mut typed = serde_json::Map::new();
        for t in EdgeType::ALL {
            let list: Vec<[usize; 2]> = self.edges.iter().filter(|e| e.kind == t).map(|e| [e.i, e.j]).collect();
            typed.insert(t.name().into(), json!(list));
        }
        let nodes: Vec<_> = (0..self.n)
            .map(|i| json!({ "index": i, "checksum": checksum(self.node_row(i)) }))
            .collect();
        json!({
            "id": id,
            "n": self.n,
            "node_dim": self.node_dim,
            "edge_dim": self.edge_dim,
            "nodes": nodes,
            "edges": typed,
            "node_feature_checksum": checksum(&self.node_feat),
            "edge_feature_checksum": checksum(&self.edge_feat),
        })
    }
}

/// FNV-1a over the IEEE bit patterns, as 16 hex digits.
pub fn checksum(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Brute-force micro-environment membership, for cross-checking.
pub fn brute_micro_env(ca: &[Vec3], i: usize, cfg: &GraphConfig) -> Vec<usize> {
    let n = ca.len();
    let knn_of = |u: usize| brute_knn(ca, ca[u], cfg.k, Some(u));
    let mut hop = BTreeSet::from([i]);
    let mut frontier = vec![i];
    for _ in 0..cfg.k_hop {
        let mut next = Vec::new();
        for u in frontier {
            for v in knn_of(u) {
                if hop.insert(v) {
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    (0..n)
        .filter(|&j| {
            let s = i.abs_diff(j) <= cfg.d_s;
            let r = dist2(ca[i], ca[j]) <= cfg.d_r * cfg.d_r;
            let h = hop.contains(&j);
            if j == i {
                true
            } else if cfg.conjunction {
                s && r && h
            } else {
                s || r || h
            }
        })
        .collect()
}
