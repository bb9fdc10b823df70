//! Identity-clustered train/validation/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::identity::{identity_upper_bound, seq_identity, SeqProfile};
use crate::error::{Error, Result};

pub const DEFAULT_IDENTITY_THRESHOLD: f64 = 0.40;
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: Split,
    pub cluster: usize,
    pub residues: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub threshold: f64,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub num_clusters: usize,
    pub assignments: BTreeMap<String, SplitEntry>,
}

impl SplitManifest {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.assignments.get(id).map(|e| e.split)
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, e)| e.split == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins, keeps cluster ids order-stable
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Single-linkage clusters: two sequences share a cluster when a chain of
/// pairs with identity `≥ threshold` joins them. Returns a cluster id per
/// input, numbered by first appearance.
pub fn identity_clusters(seqs: &[&str], threshold: f64) -> Result<Vec<usize>> {
    let n = seqs.len();
    let profiles: Vec<SeqProfile> = seqs.iter().map(|s| SeqProfile::new(s)).collect();
    let mut uf = UnionFind((0..n).collect());
    for i in 0..n {
        for j in i + 1..n {
            if uf.find(i) == uf.find(j) {
                continue;
            }
            if identity_upper_bound(&profiles[i], &profiles[j], seqs[i].as_bytes(), threshold) < threshold {
                continue;
            }
            if seq_identity(seqs[i], seqs[j])? >= threshold {
                uf.union(i, j);
            }
        }
    }
    let mut ids = BTreeMap::new();
    Ok((0..n)
        .map(|i| {
            let r = uf.find(i);
            let next = ids.len();
            *ids.entry(r).or_insert(next)
        })
        .collect())
}

/// Assigns whole clusters to train/val/test approximating `ratios` by
/// residue count. `items` are `(id, sequence)`.
pub fn cluster_split(items: &[(String, String)], threshold: f64, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if items.len() < 3 {
        return Err(Error::Split(format!("need at least 3 proteins, got {}", items.len())));
    }
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Split("split ratios must be positive".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some((id, _)) = items.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::Split(format!("duplicate protein id {id}")));
    }
    let seqs: Vec<&str> = items.iter().map(|(_, s)| s.as_str()).collect();
    let cluster = identity_clusters(&seqs, threshold)?;
    let k = cluster.iter().max().map_or(0, |m| m + 1);
    if k < 3 {
        return Err(Error::Split(format!(
            "only {k} identity cluster(s); cannot fill 3 splits"
        )));
    }
    let mut size = vec![0usize; k];
    for (i, &c) in cluster.iter().enumerate() {
        size[c] += items[i].1.len();
    }
    let total: usize = size.iter().sum();
    let ratio_sum: f64 = ratios.iter().sum();
    let target: Vec<f64> = ratios.iter().map(|r| r / ratio_sum * total as f64).collect();

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split_of = vec![Split::Train; k];
    let mut filled = [0usize; 3];
    // the first three clusters guarantee every split is non-empty
    for (slot, &c) in [Split::Test, Split::Val, Split::Train].iter().zip(&order) {
        split_of[c] = *slot;
        filled[*slot as usize] += size[c];
    }
    for &c in &order[3..] {
        let s = (0..3)
            .max_by(|&a, &b| {
                let da = target[a] - filled[a] as f64;
                let db = target[b] - filled[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("three splits");
        split_of[c] = Split::ALL[s];
        filled[s] += size[c];
    }
    let assignments = items
        .iter()
        .enumerate()
        .map(|(i, (id, seq))| {
            (
                id.clone(),
                SplitEntry {
                    split: split_of[cluster[i]],
                    cluster: cluster[i],
                    residues: seq.len(),
                },
            )
        })
        .collect();
    Ok(SplitManifest {
        threshold,
        ratios,
        seed,
        num_clusters: k,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(seqs: &[&str]) -> Vec<(String, String)> {
        seqs.iter()
            .enumerate()
            .map(|(i, s)| (format!("p{i}"), s.to_string()))
            .collect()
    }

    #[test]
    fn identical_proteins_fail() {
        let r = cluster_split(&items(&["ACDEFGHIK"; 4]), 0.4, DEFAULT_RATIOS, 1);
        assert!(matches!(r, Err(Error::Split(_))));
    }

    #[test]
    fn three_dissimilar_proteins() {
        let m = cluster_split(&items(&["AAAAAAAA", "CCCCCCCC", "WWWWWWWW"]), 0.4, DEFAULT_RATIOS, 7).unwrap();
        assert_eq!(m.num_clusters, 3);
        for s in Split::ALL {
            assert_eq!(m.ids(s).len(), 1);
        }
    }

    #[test]
    fn too_few_proteins() {
        assert!(cluster_split(&items(&["AAAA", "CCCC"]), 0.4, DEFAULT_RATIOS, 0).is_err());
    }

    #[test]
    fn family_members_share_a_split() {
        let seqs = [
            "ACDEFGHIKLMN",
            "ACDEFGHIKLMW",
            "WWWWPPPPYYYY",
            "QQQQRRRRSSSS",
            "TTTTVVVVGGGG",
        ];
        let m = cluster_split(&items(&seqs), 0.4, DEFAULT_RATIOS, 3).unwrap();
        assert_eq!(m.num_clusters, 4);
        assert_eq!(m.split_of("p0"), m.split_of("p1"));
        assert_eq!(m.assignments["p0"].cluster, m.assignments["p1"].cluster);
    }
}
