//! Named parameter collections and the Adam optimizer.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered set of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    /// Records every parameter as a leaf; `trainable` decides `requires_grad`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Collects accumulated gradients for `vars`, zeros where none arrived.
    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, t), v)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Order-sensitive FNV-1a digest over names, shapes and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, t) in &self.entries {
            eat(n.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Adam moments and hyper-parameters for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::Shape(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let p = &params.entries[i].1;
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(AutodiffError::Shape(format!(
                "adam_step: parameter {} has shape {:?}, gradient {:?}",
                params.entries[i].0,
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, g) in grads.iter().enumerate() {
        let p = params.entries[i].1.data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t);
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", Tensor::vector(vec![1.0, -2.0]));
        let before = p.clone();
        let mut st = OptimState::new(&p, 0.1);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = one("w", Tensor::scalar(1.0));
        let mut st = OptimState::new(&p, 0.1);
        let g = Tensor::scalar(2.0);
        adam_step(&mut p, &[g], &mut st).unwrap();
        assert!(p.get("w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one("w", Tensor::vector(vec![1.0, 2.0]));
        let mut st = OptimState::new(&p, 0.1);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).is_err());
    }

    #[test]
    fn checksum_sees_single_bit() {
        let a = one("w", Tensor::vector(vec![1.0, 2.0]));
        let b = one("w", Tensor::vector(vec![1.0, f64::from_bits(2.0f64.to_bits() + 1)]));
        assert_ne!(a.checksum(), b.checksum());
    }
}
