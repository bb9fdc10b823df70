//! Seeded synthetic long-tail dataset with labels fixed by a known rule.
//!
//! Backbones are built residue by residue from ideal bond geometry and
//! sampled (φ, ψ) torsions, rejecting steric clashes. Each residue's class is
//! a lookup on (amino acid, neighbour-count bucket), where the neighbour count
//! is the number of other Cα atoms within `d_r`. Amino acids are drawn after
//! the structure so that class frequencies follow the requested weights.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::classes::default_class_names;
use crate::error::{Error, Result};
use crate::geometry::{add, cross, dist2, norm, scale, sub};
use crate::ingest::{AnnotatedProtein, Backbone, Protein, Vec3};
use crate::pgraph::KdTree;

/// Residues that can carry a modification, in class-table order.
pub const MODIFIABLE: &[u8; 13] = b"STYKNCREDPMHW";
/// Residues that are never modified.
pub const INERT: &[u8; 7] = b"AGVLIFQ";

const N_CA: f64 = 1.458;
const CA_C: f64 = 1.525;
const C_N: f64 = 1.329;
const C_O: f64 = 1.231;
const ANG_N_CA_C: f64 = 111.2;
const ANG_CA_C_N: f64 = 116.2;
const ANG_C_N_CA: f64 = 121.7;
const ANG_CA_C_O: f64 = 120.5;
const CLASH_CA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_proteins: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Radius for the neighbour count, Å.
    pub d_r: f64,
    pub class_weights: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_proteins: 2000,
            min_len: 30,
            max_len: 60,
            d_r: 10.0,
            class_weights: default_longtail_weights(),
        }
    }
}

/// 26-class skew: 45% unmodified, the 25 other classes decaying
/// geometrically by 0.84 per rank.
pub fn default_longtail_weights() -> Vec<f64> {
    let ratio: f64 = 0.84;
    let raw: Vec<f64> = (0..25).map(|k| ratio.powi(k)).collect();
    let total: f64 = raw.iter().sum();
    std::iter::once(0.45)
        .chain(raw.iter().map(|r| 0.55 * r / total))
        .collect()
}

/// The recorded generating rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRule {
    pub d_r: f64,
    /// Residues with at least this many Cα neighbours are in bucket 1.
    pub neighbor_threshold: usize,
    pub modifiable: String,
    pub inert: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub class_weights: Vec<f64>,
}

impl SynthRule {
    /// Class of a residue from its one-letter code and Cα neighbour count.
    pub fn label(&self, aa: u8, neighbors: usize) -> usize {
        let Some(k) = self.modifiable.bytes().position(|m| m == aa) else {
            return 0;
        };
        let bucket = usize::from(neighbors >= self.neighbor_threshold);
        let c = 2 * k + 1 + bucket;
        if c < self.num_classes {
            c
        } else {
            0
        }
    }

    fn combo(&self, class: usize) -> (usize, usize) {
        ((class - 1) / 2, (class - 1) % 2)
    }

    /// Recomputes labels of any protein from the rule.
    pub fn apply(&self, p: &Protein) -> Result<Vec<usize>> {
        let counts = neighbor_counts(&p.ca_trace(), self.d_r)?;
        Ok(counts
            .iter()
            .enumerate()
            .map(|(i, &c)| self.label(p.residue(i), c))
            .collect())
    }
}

pub fn neighbor_counts(ca: &[Vec3], d_r: f64) -> Result<Vec<usize>> {
    let tree = KdTree::new(ca.to_vec())?;
    Ok((0..ca.len()).map(|i| tree.within(ca[i], d_r, Some(i)).len()).collect())
}

/// Places atom `d` so that |cd| = bond, ∠bcd = angle, dihedral(a,b,c,d) = torsion.
pub fn place_atom(a: Vec3, b: Vec3, c: Vec3, bond: f64, angle_deg: f64, torsion_deg: f64) -> Vec3 {
    let (ang, tor) = (angle_deg.to_radians(), torsion_deg.to_radians());
    let bc = scale(sub(c, b), 1.0 / norm(sub(c, b)));
    let n = cross(sub(b, a), bc);
    let n = scale(n, 1.0 / norm(n));
    let m = cross(n, bc);
    let d2 = [
        -bond * ang.cos(),
        bond * ang.sin() * tor.cos(),
        bond * ang.sin() * tor.sin(),
    ];
    let off = add(add(scale(bc, d2[0]), scale(m, d2[1])), scale(n, d2[2]));
    add(c, off)
}

#[derive(Clone, Copy)]
enum Segment {
    Helix,
    Strand,
    Loop,
}

fn sample_torsions(rng: &mut ChaCha8Rng, seg: Segment) -> (f64, f64) {
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    match seg {
        Segment::Helix => (-63.0 + 8.0 * jitter.sample(rng), -43.0 + 8.0 * jitter.sample(rng)),
        Segment::Strand => (-120.0 + 12.0 * jitter.sample(rng), 130.0 + 12.0 * jitter.sample(rng)),
        Segment::Loop => {
            if rng.random_bool(0.15) {
                (60.0 + 15.0 * jitter.sample(rng), 40.0 + 20.0 * jitter.sample(rng))
            } else {
                (rng.random_range(-160.0..-50.0), rng.random_range(-60.0..170.0))
            }
        }
    }
}

fn segment_plan(rng: &mut ChaCha8Rng, n: usize) -> Vec<Segment> {
    let mut plan = Vec::with_capacity(n);
    while plan.len() < n {
        let (seg, len) = match rng.random_range(0..10) {
            0..=3 => (Segment::Helix, rng.random_range(6..=14)),
            4..=5 => (Segment::Strand, rng.random_range(4..=8)),
            _ => (Segment::Loop, rng.random_range(2..=6)),
        };
        plan.extend(std::iter::repeat_n(seg, len));
    }
    plan.truncate(n);
    plan
}

fn try_chain(rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<Backbone>> {
    let plan = segment_plan(rng, n);
    let mut n_at = vec![[0.0, 0.0, 0.0]];
    let mut ca_at = vec![[N_CA, 0.0, 0.0]];
    let a = ANG_N_CA_C.to_radians();
    let mut c_at = vec![add(ca_at[0], [-CA_C * a.cos(), CA_C * a.sin(), 0.0])];
    let mut psi_prev = sample_torsions(rng, plan[0]).1;
    for i in 1..n {
        let mut placed = false;
        for attempt in 0..60 {
            // the next Cα depends on the previous ψ, so retries redraw it
            let psi_in = if attempt == 0 {
                psi_prev
            } else {
                sample_torsions(rng, plan[i - 1]).1
            };
            let (phi, psi) = sample_torsions(rng, plan[i]);
            let omega = 180.0 + 4.0 * Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
            let ni = place_atom(n_at[i - 1], ca_at[i - 1], c_at[i - 1], C_N, ANG_CA_C_N, psi_in);
            let cai = place_atom(ca_at[i - 1], c_at[i - 1], ni, N_CA, ANG_C_N_CA, omega);
            let ci = place_atom(c_at[i - 1], ni, cai, CA_C, ANG_N_CA_C, phi);
            let clash = (0..i.saturating_sub(2)).any(|j| dist2(ca_at[j], cai) < CLASH_CA * CLASH_CA);
            if !clash {
                n_at.push(ni);
                ca_at.push(cai);
                c_at.push(ci);
                psi_prev = psi;
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    // carbonyl O sits trans to the next N; the last residue uses a virtual N
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let next_n = if i + 1 < n {
            n_at[i + 1]
        } else {
            place_atom(n_at[i], ca_at[i], c_at[i], C_N, ANG_CA_C_N, psi_prev)
        };
        let o = place_atom(next_n, ca_at[i], c_at[i], C_O, ANG_CA_C_O, 180.0);
        out.push([n_at[i], ca_at[i], c_at[i], o]);
    }
    Some(out)
}

/// A self-avoiding backbone of `n` residues.
pub fn random_backbone(rng: &mut ChaCha8Rng, n: usize) -> Vec<Backbone> {
    loop {
        if let Some(c) = try_chain(rng, n) {
            return c;
        }
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Dataset("class weights are empty".into()));
    }
    if w.len() > 2 * MODIFIABLE.len() + 1 {
        return Err(Error::Dataset(format!(
            "synthetic rule supports at most {} classes, got {}",
            2 * MODIFIABLE.len() + 1,
            w.len()
        )));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Dataset("class weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Dataset(format!("class weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// Generates `cfg.n_proteins` labelled backbones; the same seed gives the
/// same dataset. Fails with `DatasetError` when a bucket cannot supply the
/// mass its classes request.
pub fn synth_longtail(seed: u64, cfg: &SynthConfig) -> Result<(Vec<AnnotatedProtein>, SynthRule)> {
    check_weights(&cfg.class_weights)?;
    if cfg.n_proteins == 0 || cfg.min_len < 2 || cfg.min_len > cfg.max_len {
        return Err(Error::Dataset(
            "synthetic config needs n ≥ 1 and 2 ≤ min_len ≤ max_len".into(),
        ));
    }
    let k = cfg.class_weights.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chains: Vec<Vec<Backbone>> = (0..cfg.n_proteins)
        .map(|_| {
            let n = rng.random_range(cfg.min_len..=cfg.max_len);
            random_backbone(&mut rng, n)
        })
        .collect();
    let counts: Vec<Vec<usize>> = chains
        .iter()
        .map(|c| neighbor_counts(&c.iter().map(|r| r[1]).collect::<Vec<_>>(), cfg.d_r))
        .collect::<Result<_>>()?;

    // bucket threshold at the median neighbour count
    let mut all: Vec<usize> = counts.iter().flatten().copied().collect();
    all.sort_unstable();
    let threshold = all[all.len() / 2].max(1);
    let total = all.len() as f64;
    let in_high = all.iter().filter(|&&c| c >= threshold).count() as f64;
    let share = [(total - in_high) / total, in_high / total];

    let mut names = default_class_names();
    if k != names.len() {
        names = (0..k)
            .map(|c| if c == 0 { names[0].clone() } else { format!("class {c}") })
            .collect();
    }
    let rule = SynthRule {
        d_r: cfg.d_r,
        neighbor_threshold: threshold,
        modifiable: String::from_utf8(MODIFIABLE.to_vec()).expect("ascii"),
        inert: String::from_utf8(INERT.to_vec()).expect("ascii"),
        num_classes: k,
        class_names: names,
        class_weights: cfg.class_weights.clone(),
    };

    // per bucket: probability of each modifiable residue, rest spread over inert ones
    let mut samplers = Vec::with_capacity(2);
    for (b, &p_b) in share.iter().enumerate() {
        let mut probs = vec![0.0; MODIFIABLE.len() + INERT.len()];
        let mut used = 0.0;
        for c in 1..k {
            let (aa, bucket) = rule.combo(c);
            if bucket == b && cfg.class_weights[c] > 0.0 {
                if p_b == 0.0 {
                    return Err(Error::Dataset(format!("class {c} needs an empty neighbour bucket")));
                }
                probs[aa] = cfg.class_weights[c] / p_b;
                used += probs[aa];
            }
        }
        if used > 1.0 + 1e-12 {
            return Err(Error::Dataset(format!(
                "infeasible weights: bucket {b} holds {:.4} of residues but its classes request {:.4}",
                p_b,
                used * p_b
            )));
        }
        let rest = (1.0 - used).max(0.0) / INERT.len() as f64;
        for p in probs[MODIFIABLE.len()..].iter_mut() {
            *p = rest;
        }
        if probs.iter().all(|p| *p == 0.0) {
            probs[MODIFIABLE.len()] = 1.0;
        }
        samplers.push(WeightedIndex::new(&probs).map_err(|e| Error::Dataset(e.to_string()))?);
    }
    let alphabet: Vec<u8> = MODIFIABLE.iter().chain(INERT.iter()).copied().collect();

    let mut out = Vec::with_capacity(cfg.n_proteins);
    for (idx, (coords, nc)) in chains.into_iter().zip(&counts).enumerate() {
        let seq: String = nc
            .iter()
            .map(|&c| alphabet[samplers[usize::from(c >= threshold)].sample(&mut rng)] as char)
            .collect();
        let labels: Vec<usize> = seq.bytes().zip(nc).map(|(a, &c)| rule.label(a, c)).collect();
        let protein = Protein::new(format!("synth_{seed}_{idx:05}"), seq, coords, "A")?;
        out.push(AnnotatedProtein::new(protein, labels, k)?);
    }
    Ok((out, rule))
}

/// Angle in degrees wrapped to (−180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    let mut x = a % 360.0;
    if x <= -180.0 {
        x += 360.0;
    } else if x > 180.0 {
        x -= 360.0;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bond_angle, dihedral, dist};

    #[test]
    fn placement_reproduces_internal_coordinates() {
        let (a, b, c) = ([0.3, 1.1, -0.2], [0.0, 0.0, 0.0], [1.5, 0.1, 0.0]);
        for tor in [-170.0, -60.0, 0.0, 45.0, 180.0] {
            let d = place_atom(a, b, c, 1.33, 116.0, tor);
            assert!((dist(c, d) - 1.33).abs() < 1e-12);
            assert!((bond_angle(b, c, d).unwrap().to_degrees() - 116.0).abs() < 1e-9);
            let got = dihedral(a, b, c, d).unwrap().to_degrees();
            assert!(wrap_degrees(got - tor).abs() < 1e-9, "{got} vs {tor}");
        }
    }

    #[test]
    fn chains_are_self_avoiding_with_ideal_bonds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let c = random_backbone(&mut rng, 50);
            for i in 0..c.len() {
                assert!((dist(c[i][0], c[i][1]) - N_CA).abs() < 1e-9);
                assert!((dist(c[i][1], c[i][2]) - CA_C).abs() < 1e-9);
                if i + 1 < c.len() {
                    let d = dist(c[i][1], c[i + 1][1]);
                    assert!((3.6..4.0).contains(&d), "CA-CA {d}");
                }
                for j in 0..i.saturating_sub(2) {
                    assert!(dist(c[i][1], c[j][1]) >= CLASH_CA);
                }
            }
        }
    }

    fn small(n: usize, weights: Vec<f64>) -> SynthConfig {
        SynthConfig {
            n_proteins: n,
            class_weights: weights,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn labels_follow_recorded_rule() {
        let (data, rule) = synth_longtail(3, &small(20, default_longtail_weights())).unwrap();
        for ap in &data {
            assert_eq!(rule.apply(&ap.protein).unwrap(), ap.labels);
        }
    }

    #[test]
    fn all_mass_on_no_modification() {
        let mut w = vec![0.0; 26];
        w[0] = 1.0;
        let (data, _) = synth_longtail(1, &small(10, w)).unwrap();
        assert!(data.iter().all(|p| p.labels.iter().all(|&l| l == 0)));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small(8, default_longtail_weights());
        assert_eq!(synth_longtail(5, &cfg).unwrap().0, synth_longtail(5, &cfg).unwrap().0);
    }

    #[test]
    fn infeasible_weights() {
        // nearly everything on odd classes, which all live in one bucket
        let mut w = vec![0.0; 26];
        w[1] = 0.5;
        w[3] = 0.5;
        assert!(matches!(synth_longtail(1, &small(10, w)), Err(Error::Dataset(_))));
        assert!(synth_longtail(1, &small(10, vec![0.5, 0.4])).is_err());
    }

    #[test]
    fn default_weights_are_long_tailed() {
        let w = default_longtail_weights();
        assert_eq!(w.len(), 26);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).skip(1).all(|p| p[0] > p[1]));
    }
}
