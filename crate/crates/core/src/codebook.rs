//! Class-partitioned codebook: every class owns an equal, contiguous block of
//! tokens. Provides soft (temperature-scaled) and hard assignment, the
//! class-uniformity loss, temperature annealing and the vanilla VQ baseline.

use ptmtok_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `|C| × d` token embeddings.
    pub embeddings: Tensor,
    token_class: Vec<usize>,
    sub_size: usize,
    num_classes: usize,
}

impl Codebook {
    /// Rebuilds a codebook from stored embeddings; `token_class` is derived
    /// from the block layout.
    pub fn from_embeddings(embeddings: Tensor, num_classes: usize, sub_size: usize) -> Result<Self> {
        if num_classes == 0 || sub_size == 0 {
            return Err(Error::Config("num_classes and sub_size must be at least 1".into()));
        }
        if embeddings.rank() != 2 || embeddings.rows() != num_classes * sub_size {
            return Err(Error::Checkpoint(format!(
                "codebook embeddings have shape {:?}, expected {} rows",
                embeddings.shape(),
                num_classes * sub_size
            )));
        }
        let token_class = (0..num_classes * sub_size).map(|j| j / sub_size).collect();
        Ok(Self {
            embeddings,
            token_class,
            sub_size,
            num_classes,
        })
    }

    pub fn size(&self) -> usize {
        self.token_class.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn sub_size(&self) -> usize {
        self.sub_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn token_class(&self) -> &[usize] {
        &self.token_class
    }

    pub fn class_of(&self, token: usize) -> usize {
        self.token_class[token]
    }

    /// Token range owned by class `c`.
    pub fn class_tokens(&self, c: usize) -> std::ops::Range<usize> {
        c * self.sub_size..(c + 1) * self.sub_size
    }

    pub fn token(&self, j: usize) -> &[f64] {
        self.embeddings.row(j)
    }

    pub fn meta(&self, tau_u: f64) -> CodebookMeta {
        CodebookMeta {
            num_classes: self.num_classes,
            sub_size: self.sub_size,
            d: self.dim(),
            tau_u,
            format_version: CODEBOOK_FORMAT_VERSION,
        }
    }
}

/// JSON sidecar stored next to the codebook arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub num_classes: usize,
    pub sub_size: usize,
    pub d: usize,
    pub tau_u: f64,
    pub format_version: u32,
}

/// Embeddings drawn i.i.d. from `N(0, 1/d)`, classes in contiguous blocks.
pub fn init_codebook(num_classes: usize, sub_size: usize, d: usize, seed: u64) -> Result<Codebook> {
    if d == 0 {
        return Err(Error::Config("codebook dimension must be at least 1".into()));
    }
    let n = num_classes * sub_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
    let data = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    Codebook::from_embeddings(Tensor::matrix(n, d, data)?, num_classes, sub_size)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anneal {
    Exponential { rate: f64 },
    Linear { total_steps: usize },
}

impl Anneal {
    /// Exponential decay that reaches `tau_min` after 80% of `total_steps`.
    pub fn exponential_for(total_steps: usize, tau0: f64, tau_min: f64) -> Self {
        let reach = (0.8 * total_steps as f64).max(1.0);
        Anneal::Exponential {
            rate: (tau_min / tau0).powf(1.0 / reach),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqMode {
    TemperatureScaled,
    VanillaVq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VQConfig {
    pub tau_u: f64,
    pub tau_v0: f64,
    pub tau_v_min: f64,
    pub anneal: Anneal,
    pub alpha: f64,
    pub beta: f64,
    pub mode: VqMode,
    /// Mix only the true class's tokens during training (label-gated assignment).
    pub masked: bool,
}

impl Default for VQConfig {
    fn default() -> Self {
        Self {
            tau_u: 0.1,
            tau_v0: 1.0,
            tau_v_min: 0.01,
            anneal: Anneal::exponential_for(1000, 1.0, 0.01),
            alpha: 0.1,
            beta: 0.25,
            mode: VqMode::TemperatureScaled,
            masked: false,
        }
    }
}

impl VQConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_u > 0.0) {
            return Err(Error::Config("tau_u must be positive".into()));
        }
        if !(self.tau_v_min > 0.0 && self.tau_v0 >= self.tau_v_min) {
            return Err(Error::Config("need tau_v0 >= tau_v_min > 0".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        match self.anneal {
            Anneal::Exponential { rate } if !(rate > 0.0 && rate <= 1.0) => {
                Err(Error::Config("anneal rate must be in (0, 1]".into()))
            }
            Anneal::Linear { total_steps: 0 } => Err(Error::Config("linear anneal needs total_steps >= 1".into())),
            _ => Ok(()),
        }
    }
}

pub fn anneal_tau(step: usize, cfg: &VQConfig) -> f64 {
    let t = match cfg.anneal {
        Anneal::Exponential { rate } => cfg.tau_v0 * rate.powf(step as f64),
        Anneal::Linear { total_steps } => cfg.tau_v0 * (1.0 - step as f64 / total_steps as f64),
    };
    t.max(cfg.tau_v_min)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax weights over tokens of `h·e_j / tau_v`, and the weighted mix.
pub fn soft_assign(h: &[f64], cb: &Codebook, tau_v: f64) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = (0..cb.size()).map(|j| dot(h, cb.token(j)) / tau_v).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut a: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= s);
    let mut h_hat = vec![0.0; cb.dim()];
    for (j, w) in a.iter().enumerate() {
        if *w != 0.0 {
            for (o, e) in h_hat.iter_mut().zip(cb.token(j)) {
                *o += w * e;
            }
        }
    }
    (a, h_hat)
}

/// Inner-product argmax, ties to the lowest index.
pub fn hard_assign(h: &[f64], cb: &Codebook) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..cb.size() {
        let v = dot(h, cb.token(j));
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Euclidean argmin, ties to the lowest index.
pub fn vanilla_assign(h: &[f64], cb: &Codebook) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for j in 0..cb.size() {
        let v: f64 = h.iter().zip(cb.token(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        if v < best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Mean over tokens of `−log(same-class mass / total mass)` where the mass of
/// pair `(i, j)` is `exp(cos(e_i, e_j) / tau_u)`, self-pairs included.
pub fn uniform_loss(cb: &Codebook, tau_u: f64) -> Result<f64> {
    let n = cb.size();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let e = cb.token(j);
            let norm = dot(e, e).sqrt();
            if !(norm > 0.0) {
                return Err(Error::Numerical(format!("uniform_loss: token {j} has zero norm")));
            }
            Ok(e.iter().map(|v| v / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..n {
        // shifting by 1/tau_u keeps every term in (0, 1]
        let (mut same, mut other) = (0.0, 0.0);
        for j in 0..n {
            let c = ((dot(&unit[i], &unit[j]) - 1.0) / tau_u).exp();
            if cb.class_of(i) == cb.class_of(j) {
                same += c;
            } else {
                other += c;
            }
        }
        total += (other / same).ln_1p();
    }
    Ok(total / n as f64)
}

/// Differentiable counterpart of [`uniform_loss`] on a `|C| × d` variable.
pub fn uniform_loss_tape(tape: &mut Tape, emb: Var, token_class: &[usize], tau_u: f64) -> Result<Var> {
    let n = token_class.len();
    if tape.value(emb).rows() != n {
        return Err(Error::Shape(format!(
            "uniform_loss: {} embeddings for {} token classes",
            tape.value(emb).rows(),
            n
        )));
    }
    let unit = tape
        .l2_normalize(emb, 1)
        .map_err(|_| Error::Numerical("uniform_loss: zero-norm token embedding".into()))?;
    let unit_t = tape.transpose(unit)?;
    let cos = tape.matmul(unit, unit_t)?;
    let shifted = tape.scale(cos, 1.0 / tau_u);
    let offset = tape.constant(Tensor::scalar(-1.0 / tau_u));
    let logits = tape.add(shifted, offset)?;
    let c = tape.exp(logits);
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if token_class[i] == token_class[j] {
                mask.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    let mask = tape.constant(mask);
    let same_m = tape.mul(c, mask)?;
    let same = tape.sum_axis(same_m, 1)?;
    let all = tape.sum_axis(c, 1)?;
    let log_same = tape.log(same)?;
    let log_all = tape.log(all)?;
    let per_token = tape.sub(log_all, log_same)?;
    Ok(tape.mean(per_token)?)
}

pub fn codebook_loss(recon: f64, l_u: f64, cfg: &VQConfig) -> f64 {
    recon + cfg.alpha * l_u
}

/// Soft assignment on the tape. `h` is `n × d`, `emb` is `|C| × d`.
///
/// With `gate = (row_class, token_class)` the weights stay the softmax over
/// all tokens but the mixture keeps only tokens of class `row_class[i]`, so
/// `h_hat` shrinks unless the row puts its mass on its own sub-codebook.
pub fn soft_assign_tape(
    tape: &mut Tape,
    h: Var,
    emb: Var,
    tau_v: f64,
    gate: Option<(&[usize], &[usize])>,
) -> Result<(Var, Var)> {
    let emb_t = tape.transpose(emb)?;
    let raw = tape.matmul(h, emb_t)?;
    let logits = tape.scale(raw, 1.0 / tau_v);
    let mut a = tape.softmax(logits, 1)?;
    if let Some((row_class, token_class)) = gate {
        let (n, k) = (row_class.len(), token_class.len());
        if tape.value(a).shape() != [n, k] {
            return Err(Error::Shape(format!(
                "soft_assign: gate is {n}×{k}, weights are {:?}",
                tape.value(a).shape()
            )));
        }
        let mut keep = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for j in 0..k {
                if token_class[j] == row_class[i] {
                    keep.data_mut()[i * k + j] = 1.0;
                }
            }
        }
        let keep = tape.constant(keep);
        a = tape.mul(a, keep)?;
    }
    let h_hat = tape.matmul(a, emb)?;
    Ok((a, h_hat))
}

/// Straight-through quantization for vanilla VQ plus its two penalty terms:
/// returns `(h_hat, ‖sg[h] − e_z‖² + β‖h − sg[e_z]‖²)`, norms averaged over rows.
pub fn vanilla_quantize_tape(tape: &mut Tape, h: Var, emb: Var, z: &[usize], beta: f64) -> Result<(Var, Var)> {
    let n = z.len() as f64;
    let e_z = tape.gather_rows(emb, z)?;
    let h_sg = tape.detach(h);
    let e_sg = tape.detach(e_z);
    let d1 = tape.sub(h_sg, e_z)?;
    let sq1 = tape.mul(d1, d1)?;
    let codebook_term = tape.sum(sq1);
    let d2 = tape.sub(h, e_sg)?;
    let sq2 = tape.mul(d2, d2)?;
    let commit_sum = tape.sum(sq2);
    let commit = tape.scale(commit_sum, beta);
    let pen_sum = tape.add(codebook_term, commit)?;
    let penalty = tape.scale(pen_sum, 1.0 / n);
    // h + sg(e_z − h): forward value e_z, gradient passes straight to h
    let shift = tape.sub(e_sg, h_sg)?;
    let h_hat = tape.add(h, shift)?;
    Ok((h_hat, penalty))
}

/// Plain value of the vanilla VQ objective for rows `h` with assignments `z`.
pub fn vanilla_vq_loss(h: &Tensor, cb: &Codebook, z: &[usize], recon: f64, cfg: &VQConfig) -> f64 {
    let n = z.len() as f64;
    let mut pen = 0.0;
    for (i, &k) in z.iter().enumerate() {
        let d2: f64 = h.row(i).iter().zip(cb.token(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        pen += (1.0 + cfg.beta) * d2;
    }
    recon + pen / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_layout() {
        let cb = init_codebook(26, 128, 8, 1).unwrap();
        assert_eq!(cb.size(), 3328);
        assert!(cb.class_tokens(7).eq(896..1024));
        assert!((896..1024).all(|j| cb.class_of(j) == 7));
        assert_eq!(cb.class_of(895), 6);
        for c in 0..26 {
            assert_eq!(cb.token_class().iter().filter(|&&k| k == c).count(), 128);
        }
        let one = init_codebook(1, 1, 4, 0).unwrap();
        assert_eq!(one.size(), 1);
        assert_eq!(one.class_of(0), 0);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_codebook(3, 4, 5, 9).unwrap(), init_codebook(3, 4, 5, 9).unwrap());
        assert_ne!(init_codebook(3, 4, 5, 9).unwrap(), init_codebook(3, 4, 5, 10).unwrap());
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let emb = Tensor::from_rows(&[[0.3, -0.2], [0.3, -0.2], [0.3, -0.2]]).unwrap();
        let cb = Codebook::from_embeddings(emb, 3, 1).unwrap();
        let (a, h_hat) = soft_assign(&[1.0, 2.0], &cb, 0.5);
        assert!(a.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!((h_hat[0] - 0.3).abs() < 1e-15 && (h_hat[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn tie_rules() {
        let emb = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        let cb = Codebook::from_embeddings(emb, 3, 1).unwrap();
        assert_eq!(hard_assign(&[1.0, 0.0], &cb), 1);
        assert_eq!(vanilla_assign(&[0.5, 0.5], &cb), 0);
        assert_eq!(vanilla_assign(&[1.0, 0.0], &cb), 1);
    }

    #[test]
    fn single_class_uniform_loss_is_zero() {
        let cb = init_codebook(1, 6, 4, 2).unwrap();
        assert_eq!(uniform_loss(&cb, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn antipodal_pair() {
        let emb = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let cb = Codebook::from_embeddings(emb, 2, 1).unwrap();
        let want = (-2.0f64 / 0.1).exp().ln_1p();
        assert!((uniform_loss(&cb, 0.1).unwrap() - want).abs() < 1e-18);
    }

    #[test]
    fn zero_token_is_numerical_error() {
        let emb = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let cb = Codebook::from_embeddings(emb, 2, 1).unwrap();
        assert!(matches!(uniform_loss(&cb, 0.1), Err(Error::Numerical(_))));
        let mut t = Tape::new();
        let e = t.param(cb.embeddings.clone());
        assert!(matches!(
            uniform_loss_tape(&mut t, e, cb.token_class(), 0.1),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn tape_and_plain_uniform_loss_agree() {
        let cb = init_codebook(4, 3, 6, 11).unwrap();
        let mut t = Tape::new();
        let e = t.param(cb.embeddings.clone());
        let l = uniform_loss_tape(&mut t, e, cb.token_class(), 0.1).unwrap();
        let v = t.value(l).item().unwrap();
        assert!((v - uniform_loss(&cb, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule() {
        let cfg = VQConfig {
            anneal: Anneal::exponential_for(100, 1.0, 0.01),
            ..VQConfig::default()
        };
        assert_eq!(anneal_tau(0, &cfg), 1.0);
        assert!((anneal_tau(80, &cfg) - 0.01).abs() < 1e-12);
        assert_eq!(anneal_tau(10_000, &cfg), 0.01);
        let lin = VQConfig {
            anneal: Anneal::Linear { total_steps: 10 },
            ..VQConfig::default()
        };
        assert!((anneal_tau(5, &lin) - 0.5).abs() < 1e-15);
        assert_eq!(anneal_tau(10, &lin), 0.01);
        let mut prev = f64::INFINITY;
        for s in 0..200 {
            let t = anneal_tau(s, &cfg);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn codebook_loss_arithmetic() {
        let cfg = VQConfig::default();
        assert!((codebook_loss(1.0, 0.5, &cfg) - 1.05).abs() < 1e-15);
        let zero = VQConfig { alpha: 0.0, ..cfg };
        assert_eq!(codebook_loss(0.7, 3.0, &zero), 0.7);
    }

    #[test]
    fn vanilla_penalties_vanish_on_exact_match() {
        let cb = init_codebook(2, 2, 3, 5).unwrap();
        let h = Tensor::from_rows(&[cb.token(3), cb.token(0)]).unwrap();
        assert_eq!(vanilla_vq_loss(&h, &cb, &[3, 0], 0.25, &VQConfig::default()), 0.25);
        let mut t = Tape::new();
        let hv = t.param(h.clone());
        let ev = t.param(cb.embeddings.clone());
        let (h_hat, pen) = vanilla_quantize_tape(&mut t, hv, ev, &[3, 0], 0.25).unwrap();
        assert_eq!(t.value(pen).item().unwrap(), 0.0);
        assert_eq!(t.value(h_hat), &h);
    }

    #[test]
    fn zero_beta_sends_no_penalty_gradient_to_h() {
        let cb = init_codebook(2, 2, 3, 5).unwrap();
        let h = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-0.4, 0.0, 0.5]]).unwrap();
        let mut t = Tape::new();
        let hv = t.param(h);
        let ev = t.param(cb.embeddings.clone());
        let (_, pen) = vanilla_quantize_tape(&mut t, hv, ev, &[1, 2], 0.0).unwrap();
        t.backward(pen).unwrap();
        assert!(t.grad(hv).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
        assert!(t.grad(ev).unwrap().norm() > 0.0);
    }

    #[test]
    fn gated_soft_assign_keeps_global_weights() {
        let cb = init_codebook(3, 2, 4, 8).unwrap();
        let h = Tensor::from_rows(&[[0.5, -0.1, 0.2, 0.9], [0.0, 0.3, -0.7, 0.1]]).unwrap();
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let ev = t.constant(cb.embeddings.clone());
        let (a, _) = soft_assign_tape(&mut t, hv, ev, 0.5, Some((&[2, 0], cb.token_class()))).unwrap();
        let a = t.value(a);
        for (i, c) in [(0, 2), (1, 0)] {
            let (full, _) = soft_assign(h.row(i), &cb, 0.5);
            for j in 0..6 {
                let want = if cb.class_of(j) == c { full[j] } else { 0.0 };
                assert!((a.get2(i, j) - want).abs() < 1e-15);
            }
        }
    }
}
