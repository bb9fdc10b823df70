//! Per-protein training tensors and protein batches.

use std::collections::BTreeSet;

use ptmtok_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::geometry::FeatureConfig;
use crate::ingest::{aa_index, AnnotatedProtein, Protein, AA_VOCAB};
use crate::pgraph::{build_graph, EdgeType, GraphConfig};

/// Value of the hot entry in the residue-type one-hot. Keeps the 21 type
/// columns from vanishing next to the geometric columns in the
/// reconstruction error.
pub const RESIDUE_ONEHOT_SCALE: f64 = 3.0;

/// Node input width: geometric features plus a residue-type one-hot.
pub fn node_input_dim(fcfg: &FeatureConfig) -> usize {
    fcfg.node_dim() + AA_VOCAB
}

/// Edge input width: geometric features plus one bit per edge type.
pub fn edge_input_dim(fcfg: &FeatureConfig) -> usize {
    fcfg.edge_dim() + EdgeType::ALL.len()
}

/// A protein graph reduced to what the networks consume. Each message pair
/// `(recv, send)` appears once, with the types of every typed edge joining
/// them set as bits after the geometric edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphData {
    pub id: String,
    pub n: usize,
    /// `n × node_input_dim`.
    pub x: Tensor,
    /// `pairs × edge_input_dim`, features in the frame of `recv`.
    pub e: Tensor,
    pub recv: Vec<usize>,
    pub send: Vec<usize>,
    /// Empty when unlabelled.
    pub labels: Vec<usize>,
}

pub fn featurize(p: &Protein, labels: Option<&[usize]>, gcfg: &GraphConfig, fcfg: &FeatureConfig) -> Result<GraphData> {
    let g = build_graph(p, gcfg, fcfg)?;
    let nd = fcfg.node_dim();
    let ni = node_input_dim(fcfg);
    let mut x = Vec::with_capacity(g.n * ni);
    for i in 0..g.n {
        x.extend_from_slice(g.node_row(i));
        let mut onehot = [0.0; AA_VOCAB];
        onehot[aa_index(p.residue(i))] = RESIDUE_ONEHOT_SCALE;
        x.extend_from_slice(&onehot);
    }
    debug_assert_eq!(x.len(), g.n * (nd + AA_VOCAB));

    // in strict mode a center only hears members of its micro-environment
    let members: Option<Vec<BTreeSet<usize>>> = if gcfg.conjunction {
        Some(
            (0..g.n)
                .map(|i| g.micro_env(i, gcfg).map(|m| m.member_nodes.into_iter().collect()))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let ed = fcfg.edge_dim();
    let ei = edge_input_dim(fcfg);
    let mut e = Vec::new();
    let mut recv = Vec::new();
    let mut send = Vec::new();
    let mut k = 0;
    while k < g.edges.len() {
        let (i, j) = (g.edges[k].i, g.edges[k].j);
        let first = k;
        let mut bits = [0.0; 3];
        while k < g.edges.len() && g.edges[k].i == i && g.edges[k].j == j {
            bits[g.edges[k].kind.index()] = 1.0;
            k += 1;
        }
        if members.as_ref().is_some_and(|m| !m[i].contains(&j)) {
            continue;
        }
        e.extend_from_slice(g.edge_row(first));
        e.extend_from_slice(&bits);
        recv.push(i);
        send.push(j);
    }
    debug_assert_eq!(e.len(), recv.len() * (ed + 3));
    let labels = match labels {
        Some(l) if l.len() != g.n => {
            return Err(Error::Dataset(format!(
                "protein {}: {} labels for {} residues",
                p.id,
                l.len(),
                g.n
            )))
        }
        Some(l) => l.to_vec(),
        None => Vec::new(),
    };
    Ok(GraphData {
        id: p.id.clone(),
        n: g.n,
        x: Tensor::matrix(g.n, ni, x)?,
        e: Tensor::matrix(recv.len(), ei, e)?,
        recv,
        send,
        labels,
    })
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("featurize worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Featurizes a labelled dataset on `threads` worker threads; output order
/// matches input.
pub fn featurize_all(
    data: &[AnnotatedProtein],
    gcfg: &GraphConfig,
    fcfg: &FeatureConfig,
    threads: usize,
) -> Result<Vec<GraphData>> {
    par_map(data, threads, |a| featurize(&a.protein, Some(&a.labels), gcfg, fcfg))
}

/// Unlabelled counterpart of [`featurize_all`].
pub fn featurize_proteins(
    proteins: &[Protein],
    gcfg: &GraphConfig,
    fcfg: &FeatureConfig,
    threads: usize,
) -> Result<Vec<GraphData>> {
    par_map(proteins, threads, |p| featurize(p, None, gcfg, fcfg))
}

/// Several graphs stacked into one disconnected graph.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n: usize,
    pub x: Tensor,
    pub e: Tensor,
    pub recv: Vec<usize>,
    pub send: Vec<usize>,
    pub labels: Vec<usize>,
    /// Node offset of each member graph.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn new(graphs: &[&GraphData]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let ni = graphs[0].x.cols();
        let ei = graphs[0].e.cols();
        let mut x = Vec::new();
        let mut e = Vec::new();
        let (mut recv, mut send, mut labels, mut offsets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut n = 0;
        for g in graphs {
            if g.x.cols() != ni || (g.e.rows() > 0 && g.e.cols() != ei) {
                return Err(Error::Shape(format!("graph {} has mismatched feature widths", g.id)));
            }
            offsets.push(n);
            x.extend_from_slice(g.x.data());
            e.extend_from_slice(g.e.data());
            recv.extend(g.recv.iter().map(|r| r + n));
            send.extend(g.send.iter().map(|s| s + n));
            labels.extend_from_slice(&g.labels);
            n += g.n;
        }
        let pairs = recv.len();
        Ok(Self {
            n,
            x: Tensor::matrix(n, ni, x)?,
            e: Tensor::matrix(pairs, ei, e)?,
            recv,
            send,
            labels,
            offsets,
        })
    }

    pub fn is_labelled(&self) -> bool {
        self.labels.len() == self.n
    }
}
