//! Backbone geometry: local frames, angles, RBF encodings, quaternions and
//! the per-residue / per-pair feature vectors built from them.
//!
//! Node layout (69): sin/cos pairs for α, β, γ, φ, ψ, ω; then RBF distances
//! Cα→{C, N, O}; then frame-local unit directions Cα→{C, N, O}.
//!
//! Edge layout (80): quaternion of `Q_iᵀ Q_j`; RBF distances between the
//! same atom type of both residues for {Cα, C, N, O}; then the frame-local
//! unit directions of `ω_i − ω_j` in the same atom order.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{Protein, Vec3, ATOM_C, ATOM_CA, ATOM_N, ATOM_O};

/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const NODE_ANGLE_DIM: usize = 12;
const DEGENERATE: f64 = 1e-12;

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

fn normalize(a: Vec3, what: &str) -> Result<Vec3> {
    let n = norm(a);
    if !(n > DEGENERATE) {
        return Err(Error::Geometry(format!("{what}: zero-length vector")));
    }
    Ok(scale(a, 1.0 / n))
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

/// Orthonormal residue frame with the Cα position as origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    /// Columns are the frame axes e1, e2, e3.
    pub rotation: Mat3,
    pub origin: Vec3,
}

impl LocalFrame {
    /// Coordinates of a global-frame vector in this frame (`Qᵀ v`).
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        let q = &self.rotation;
        [
            q[0][0] * v[0] + q[1][0] * v[1] + q[2][0] * v[2],
            q[0][1] * v[0] + q[1][1] * v[1] + q[2][1] * v[2],
            q[0][2] * v[0] + q[1][2] * v[1] + q[2][2] * v[2],
        ]
    }
}

/// e1 along Cα→C, e2 the component of Cα→N orthogonal to e1, e3 = e1 × e2.
pub fn local_frame(n: Vec3, ca: Vec3, c: Vec3) -> Result<LocalFrame> {
    let e1 = normalize(sub(c, ca), "local_frame")?;
    let u = sub(n, ca);
    let perp = sub(u, scale(e1, dot(u, e1)));
    if norm(perp) <= 1e-9 * norm(u).max(1.0) {
        return Err(Error::Geometry("local_frame: collinear points".into()));
    }
    let e2 = normalize(perp, "local_frame")?;
    let e3 = cross(e1, e2);
    let mut rotation = [[0.0; 3]; 3];
    for r in 0..3 {
        rotation[r] = [e1[r], e2[r], e3[r]];
    }
    Ok(LocalFrame { rotation, origin: ca })
}

/// Angle at vertex `b`, in `[0, π]`.
pub fn bond_angle(a: Vec3, b: Vec3, c: Vec3) -> Result<f64> {
    let u = sub(a, b);
    let v = sub(c, b);
    if !(norm(u) > DEGENERATE && norm(v) > DEGENERATE) {
        return Err(Error::Geometry("bond_angle: zero-length arm".into()));
    }
    Ok(norm(cross(u, v)).atan2(dot(u, v)))
}

/// Signed torsion about `p2→p3`, in `(−π, π]`.
pub fn dihedral(p1: Vec3, p2: Vec3, p3: Vec3, p4: Vec3) -> Result<f64> {
    let b1 = sub(p2, p1);
    let b2 = sub(p3, p2);
    let b3 = sub(p4, p3);
    let b2n = norm(b2);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let tol = 1e-10;
    if !(b2n > DEGENERATE) || norm(n1) <= tol * norm(b1) * b2n || norm(n2) <= tol * norm(b3) * b2n {
        return Err(Error::Geometry("dihedral: degenerate plane".into()));
    }
    let y = dot(cross(n1, n2), b2) / b2n;
    let x = dot(n1, n2);
    let a = y.atan2(x);
    Ok(if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub rbf_count: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
    pub noise_sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            rbf_count: 16,
            rbf_min: 2.0,
            rbf_max: 22.0,
            noise_sigma: 0.0005,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rbf_count < 2 {
            return Err(Error::Config("rbf_count must be at least 2".into()));
        }
        if !(self.rbf_min < self.rbf_max) {
            return Err(Error::Config("rbf_min must be below rbf_max".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rbf_center(&self, k: usize) -> f64 {
        self.rbf_min + (self.rbf_max - self.rbf_min) * k as f64 / (self.rbf_count - 1) as f64
    }

    pub fn rbf_sigma(&self) -> f64 {
        (self.rbf_max - self.rbf_min) / self.rbf_count as f64
    }

    pub fn node_dim(&self) -> usize {
        NODE_ANGLE_DIM + 3 * self.rbf_count + 9
    }

    pub fn edge_dim(&self) -> usize {
        4 + 4 * self.rbf_count + 12
    }
}

/// Gaussian bank with centers spread evenly over `[rbf_min, rbf_max]`.
pub fn rbf_encode(d: f64, cfg: &FeatureConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.rbf_count);
    rbf_into(d, cfg, &mut out);
    out
}

fn rbf_into(d: f64, cfg: &FeatureConfig, out: &mut Vec<f64>) {
    let s = cfg.rbf_sigma();
    let denom = 2.0 * s * s;
    for k in 0..cfg.rbf_count {
        let z = d - cfg.rbf_center(k);
        out.push((-z * z / denom).exp());
    }
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0`; when `w == 0` the first
/// nonzero vector component is positive.
pub fn rotation_to_quaternion(r: &Mat3) -> Result<[f64; 4]> {
    let rtr = mat_mul(&transpose(r), r);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            if !((rtr[i][j] - want).abs() <= 1e-6) {
                return Err(Error::Geometry("rotation_to_quaternion: not orthonormal".into()));
            }
        }
    }
    if !((det(r) - 1.0).abs() <= 1e-6) {
        return Err(Error::Geometry("rotation_to_quaternion: determinant is not +1".into()));
    }
    let tr = r[0][0] + r[1][1] + r[2][2];
    // pick the largest diagonal term to divide by (numerically stable branch)
    let mut q = if tr > r[0][0].max(r[1][1]).max(r[2][2]) {
        let s = (1.0 + tr).sqrt() * 2.0;
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] >= r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in q.iter_mut() {
        *v /= n;
    }
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else {
        q[1..].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
    };
    if flip {
        for v in q.iter_mut() {
            *v = -*v;
        }
    }
    // canonical +0.0 instead of -0.0
    for v in q.iter_mut() {
        *v += 0.0;
    }
    Ok(q)
}

pub fn quaternion_to_rotation(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Frames of every residue of a protein, computed once and reused.
pub fn protein_frames(p: &Protein) -> Result<Vec<LocalFrame>> {
    p.coords
        .iter()
        .enumerate()
        .map(|(i, r)| {
            local_frame(r[ATOM_N], r[ATOM_CA], r[ATOM_C]).map_err(|e| Error::Geometry(format!("residue {i}: {e}")))
        })
        .collect()
}

fn check_index(p: &Protein, i: usize) -> Result<()> {
    if i >= p.len() {
        return Err(Error::Index(format!("residue {i} out of range for length {}", p.len())));
    }
    Ok(())
}

/// The six backbone angles (α, β, γ, φ, ψ, ω) of residue `i`; angles that
/// need a missing neighbour are 0.0.
pub fn backbone_angles(p: &Protein, i: usize) -> Result<[f64; 6]> {
    check_index(p, i)?;
    let r = &p.coords[i];
    let prev = i.checked_sub(1).map(|k| &p.coords[k]);
    let next = p.coords.get(i + 1);
    let alpha = bond_angle(r[ATOM_N], r[ATOM_CA], r[ATOM_C])?;
    let beta = match prev {
        Some(q) => bond_angle(q[ATOM_C], r[ATOM_N], r[ATOM_CA])?,
        None => 0.0,
    };
    let gamma = match next {
        Some(s) => bond_angle(r[ATOM_CA], r[ATOM_C], s[ATOM_N])?,
        None => 0.0,
    };
    let phi = match prev {
        Some(q) => dihedral(q[ATOM_C], r[ATOM_N], r[ATOM_CA], r[ATOM_C])?,
        None => 0.0,
    };
    let (psi, omega) = match next {
        Some(s) => (
            dihedral(r[ATOM_N], r[ATOM_CA], r[ATOM_C], s[ATOM_N])?,
            dihedral(r[ATOM_CA], r[ATOM_C], s[ATOM_N], s[ATOM_CA])?,
        ),
        None => (0.0, 0.0),
    };
    Ok([alpha, beta, gamma, phi, psi, omega])
}

fn node_features_with(p: &Protein, i: usize, frame: &LocalFrame, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cfg.node_dim());
    for a in backbone_angles(p, i)? {
        out.push(a.sin());
        out.push(a.cos());
    }
    let r = &p.coords[i];
    let ca = r[ATOM_CA];
    for atom in [ATOM_C, ATOM_N, ATOM_O] {
        rbf_into(dist(r[atom], ca), cfg, &mut out);
    }
    for atom in [ATOM_C, ATOM_N, ATOM_O] {
        let u = normalize(sub(r[atom], ca), "node direction")?;
        out.extend(frame.to_local(u));
    }
    Ok(out)
}

pub fn node_features(p: &Protein, i: usize, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    check_index(p, i)?;
    let r = &p.coords[i];
    let frame = local_frame(r[ATOM_N], r[ATOM_CA], r[ATOM_C])?;
    node_features_with(p, i, &frame, cfg)
}

fn edge_features_with(
    p: &Protein,
    i: usize,
    j: usize,
    qi: &LocalFrame,
    qj: &LocalFrame,
    cfg: &FeatureConfig,
    out: &mut Vec<f64>,
) -> Result<()> {
    let rel = mat_mul(&transpose(&qi.rotation), &qj.rotation);
    out.extend(rotation_to_quaternion(&rel)?);
    const ORDER: [usize; 4] = [ATOM_CA, ATOM_C, ATOM_N, ATOM_O];
    let (ri, rj) = (&p.coords[i], &p.coords[j]);
    for atom in ORDER {
        rbf_into(dist(ri[atom], rj[atom]), cfg, out);
    }
    for atom in ORDER {
        let u = normalize(sub(ri[atom], rj[atom]), "edge direction")?;
        out.extend(qi.to_local(u));
    }
    Ok(())
}

pub fn edge_features(p: &Protein, i: usize, j: usize, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    check_index(p, i)?;
    check_index(p, j)?;
    if i == j {
        return Err(Error::Geometry("edge_features: i == j".into()));
    }
    let frame = |k: usize| local_frame(p.coords[k][ATOM_N], p.coords[k][ATOM_CA], p.coords[k][ATOM_C]);
    let mut out = Vec::with_capacity(cfg.edge_dim());
    edge_features_with(p, i, j, &frame(i)?, &frame(j)?, cfg, &mut out)?;
    Ok(out)
}

/// All node features as a row-major `len × node_dim` buffer.
pub fn node_feature_matrix(p: &Protein, frames: &[LocalFrame], cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(p.len() * cfg.node_dim());
    for (i, f) in frames.iter().enumerate() {
        out.extend(node_features_with(p, i, f, cfg)?);
    }
    Ok(out)
}

/// Edge features for each `(i, j)` pair, row-major `pairs × edge_dim`.
pub fn edge_feature_matrix(
    p: &Protein,
    frames: &[LocalFrame],
    pairs: &[(usize, usize)],
    cfg: &FeatureConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len() * cfg.edge_dim());
    for &(i, j) in pairs {
        if i >= p.len() || j >= p.len() || i == j {
            return Err(Error::Index(format!("invalid edge ({i}, {j})")));
        }
        edge_features_with(p, i, j, &frames[i], &frames[j], cfg, &mut out)?;
    }
    Ok(out)
}

/// Adds independent `N(0, noise_sigma²)` noise to every coordinate.
pub fn perturb_coords(p: &Protein, cfg: &FeatureConfig, seed: u64) -> Protein {
    let mut out = p.clone();
    if cfg.noise_sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated non-negative");
    for v in out.coords.iter_mut().flatten().flatten() {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Applies `x ↦ R x + t` to every atom.
pub fn transform_protein(p: &Protein, r: &Mat3, t: Vec3) -> Protein {
    let mut out = p.clone();
    for v in out.coords.iter_mut().flatten() {
        *v = add(mat_vec(r, *v), t);
    }
    out
}

pub const FEATURE_DUMP_MAGIC: [u8; 8] = *b"RESFEAT1";

/// Writes `rows × cols` little-endian `f64` values behind an 8-byte magic and
/// `u32` row/column counts.
pub fn write_feature_dump<W: Write>(mut w: W, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if rows * cols != data.len() {
        return Err(Error::Shape(format!(
            "feature dump: {rows}×{cols} header for {} values",
            data.len()
        )));
    }
    let r = u32::try_from(rows).map_err(|_| Error::Shape("too many rows".into()))?;
    let c = u32::try_from(cols).map_err(|_| Error::Shape("too many columns".into()))?;
    w.write_all(&FEATURE_DUMP_MAGIC)?;
    w.write_all(&r.to_le_bytes())?;
    w.write_all(&c.to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_dump<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != FEATURE_DUMP_MAGIC {
        return Err(Error::Parse {
            line: None,
            msg: "feature dump: bad magic".into(),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b8 = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok((rows, cols, data))
}
