//! Global-alignment sequence identity and sound prefilter bounds.
//!
//! Scoring: match +1, mismatch 0, a gap of length `L` costs `10 + (L − 1)`.
//! Among optimal-score alignments the one with most matches, then the
//! shortest, is used; identity is `matches / alignment length`. The
//! tie-breaks make the value symmetric in its arguments.

use crate::error::{Error, Result};

pub const MATCH: i64 = 1;
pub const MISMATCH: i64 = 0;
pub const GAP_OPEN: i64 = -10;
pub const GAP_EXTEND: i64 = -1;
pub const PREFILTER_K: usize = 5;

// (score, matches, -length) packed so integer order is lexicographic order.
const B: i64 = 1 << 20;
const NEG: i64 = i64::MIN / 4;

const fn pack(score: i64, matches: i64, len: i64) -> i64 {
    score * B * B + matches * B - len
}

fn unpack(v: i64) -> (i64, i64, i64) {
    let r = v.rem_euclid(B);
    let len = if r == 0 { 0 } else { B - r };
    let hi = (v + len) / B;
    let matches = hi.rem_euclid(B);
    (((hi - matches) / B), matches, len)
}

/// Alignment summary: `(score, matches, length)`.
pub fn align(a: &[u8], b: &[u8]) -> Result<(i64, usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Dataset("seq_identity: empty sequence".into()));
    }
    if a.len().max(b.len()) >= (B / 4) as usize {
        return Err(Error::Dataset("seq_identity: sequence too long".into()));
    }
    let m = b.len();
    let open = pack(GAP_OPEN, 0, 1);
    let ext = pack(GAP_EXTEND, 0, 1);
    let hit = pack(MATCH, 1, 1);
    let miss = pack(MISMATCH, 0, 1);
    // row i−1 of the three Gotoh matrices: M (aligned pair), X (gap in b), Y (gap in a)
    let mut pm = vec![NEG; m + 1];
    let mut px = vec![NEG; m + 1];
    let mut py = vec![NEG; m + 1];
    pm[0] = 0;
    for j in 1..=m {
        py[j] = open + (j as i64 - 1) * ext;
    }
    let mut cm = vec![NEG; m + 1];
    let mut cx = vec![NEG; m + 1];
    let mut cy = vec![NEG; m + 1];
    for (i, &ai) in a.iter().enumerate() {
        cm[0] = NEG;
        cy[0] = NEG;
        cx[0] = open + i as i64 * ext;
        for j in 1..=m {
            let diag = pm[j - 1].max(px[j - 1]).max(py[j - 1]);
            cm[j] = diag + if ai == b[j - 1] { hit } else { miss };
            cx[j] = (pm[j] + open).max(px[j] + ext).max(py[j] + open);
            cy[j] = (cm[j - 1] + open).max(cy[j - 1] + ext).max(cx[j - 1] + open);
        }
        std::mem::swap(&mut pm, &mut cm);
        std::mem::swap(&mut px, &mut cx);
        std::mem::swap(&mut py, &mut cy);
    }
    let best = pm[m].max(px[m]).max(py[m]);
    let (s, mt, len) = unpack(best);
    Ok((s, mt as usize, len as usize))
}

pub fn seq_identity(a: &str, b: &str) -> Result<f64> {
    let (_, matches, len) = align(a.as_bytes(), b.as_bytes())?;
    Ok(matches as f64 / len as f64)
}

/// Precomputed per-sequence data for [`identity_upper_bound`].
#[derive(Clone, Debug)]
pub struct SeqProfile {
    len: usize,
    /// Sorted packed k-mers (with repeats).
    kmers: Vec<u64>,
    /// Bit masks of each byte's positions, `words` u64 per byte value.
    peq: Vec<u64>,
    words: usize,
}

impl SeqProfile {
    pub fn new(seq: &str) -> Self {
        let s = seq.as_bytes();
        let mut kmers: Vec<u64> = if s.len() >= PREFILTER_K {
            s.windows(PREFILTER_K)
                .map(|w| w.iter().fold(0u64, |acc, &c| (acc << 8) | c as u64))
                .collect()
        } else {
            Vec::new()
        };
        kmers.sort_unstable();
        let words = s.len().div_ceil(64).max(1);
        let mut peq = vec![0u64; 256 * words];
        for (j, &c) in s.iter().enumerate() {
            peq[c as usize * words + j / 64] |= 1 << (j % 64);
        }
        Self {
            len: s.len(),
            kmers,
            peq,
            words,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Multiset intersection size of the two k-mer lists.
    fn shared_kmers(&self, other: &Self) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.kmers.len() && j < other.kmers.len() {
            match self.kmers[i].cmp(&other.kmers[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Longest common subsequence with `a`, bit-parallel over this sequence.
    pub fn lcs_with(&self, a: &[u8]) -> usize {
        if a.is_empty() || self.len == 0 {
            return 0;
        }
        let words = self.words;
        let mut v = vec![u64::MAX; words];
        for &c in a {
            let eq = &self.peq[c as usize * words..(c as usize + 1) * words];
            let mut carry = 0u64;
            for w in 0..words {
                let u = v[w] & eq[w];
                let (s1, c1) = v[w].overflowing_add(u);
                let (s2, c2) = s1.overflowing_add(carry);
                carry = u64::from(c1 || c2);
                v[w] = s2 | (v[w] - u);
            }
        }
        let tail = self.len % 64;
        let mut zeros = 0;
        for (w, &x) in v.iter().enumerate() {
            let mask = if w + 1 == words && tail != 0 {
                (1u64 << tail) - 1
            } else {
                u64::MAX
            };
            zeros += (!x & mask).count_ones() as usize;
        }
        zeros
    }
}

pub fn lcs_len(a: &[u8], b: &[u8]) -> usize {
    SeqProfile::new(&String::from_utf8_lossy(b)).lcs_with(a)
}

/// An upper bound on the identity of any alignment of the two sequences,
/// used to skip pairs that cannot reach a threshold.
///
/// Three bounds are combined, cheapest first:
/// - at most `min(n, m)` matches over at least `max(n, m)` columns;
/// - no alignment has more matches than the longest common subsequence;
/// - an alignment with `e` non-matching columns keeps at least
///   `n − k + 1 − k·e` of a length-`n` sequence's k-mers intact, so `s`
///   shared k-mers force `e ≥ (max(n, m) − k + 1 − s) / k`, capping the
///   identity at `min(n, m) / (min(n, m) + e)`.
pub fn identity_upper_bound(a: &SeqProfile, b: &SeqProfile, a_seq: &[u8], threshold: f64) -> f64 {
    let (lo, hi) = (a.len.min(b.len), a.len.max(b.len));
    if lo == 0 {
        return 0.0;
    }
    let mut bound = lo as f64 / hi as f64;
    if bound < threshold {
        return bound;
    }
    bound = bound.min(b.lcs_with(a_seq) as f64 / hi as f64);
    if bound < threshold {
        return bound;
    }
    let kept = (hi + 1).saturating_sub(PREFILTER_K);
    let missing = kept.saturating_sub(a.shared_kmers(b));
    let e = missing.div_ceil(PREFILTER_K);
    bound.min(lo as f64 / (lo + e) as f64)
}
