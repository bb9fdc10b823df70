//! Micro-environment encoder, reconstruction decoder, token-input predictor,
//! the two training stages and inference.
//!
//! Encoder and predictor share one message-passing layer design. For a layer
//! with state `h` the message on pair `(i, j)` is
//! `MLP(h_i ‖ h_j ‖ edge_ij)`, messages are summed per receiving residue and
//! `h_i ← LN(h_i + node_MLP(Σ_j m_ij))`. The first MLP layer is evaluated as
//! `h·W_self` gathered by receiver plus `h·W_nbr` gathered by sender plus
//! `edge·W_edge`, which equals the concatenated form.

mod bundle;
mod data;
mod train;

use std::collections::HashMap;

use ptmtok_autodiff::{ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FeatureConfig;

pub use bundle::{write_predictions, Model, PredictionRow, MODEL_FORMAT_VERSION};
pub use data::{edge_input_dim, featurize, featurize_all, featurize_proteins, node_input_dim, Batch, GraphData};
pub use train::{
    assign_tokens, stage1_loss_tape, train_codebook, train_predictor, write_stage1_log, write_stage2_log, ReconTarget,
    Stage1Losses, Stage1Output, Stage1Row, Stage2Output, Stage2Row, TrainConfig,
};

/// Messages are scaled by this before aggregation so that summed inputs stay
/// O(1) for the neighbourhood sizes in use.
const MESSAGE_SCALE: f64 = 1.0 / 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub node_in: usize,
    pub edge_in: usize,
    pub d_h: usize,
    /// Codebook / embedding dimension.
    pub d: usize,
    /// Number of predicted classes.
    pub num_classes: usize,
    /// Number of codebook blocks: `num_classes`, or 1 for an unconstrained codebook.
    pub codebook_classes: usize,
    /// Tokens per codebook block.
    pub sub_size: usize,
    pub layers: usize,
}

impl ModelConfig {
    /// Class-partitioned codebook with `sub_size` tokens per class, or with
    /// `unconstrained`, a single block of the same total size.
    pub fn new(
        fcfg: &FeatureConfig,
        d_h: usize,
        d: usize,
        num_classes: usize,
        sub_size: usize,
        unconstrained: bool,
    ) -> Self {
        let (codebook_classes, sub_size) = if unconstrained {
            (1, num_classes * sub_size)
        } else {
            (num_classes, sub_size)
        };
        Self {
            node_in: node_input_dim(fcfg),
            edge_in: edge_input_dim(fcfg),
            d_h,
            d,
            num_classes,
            codebook_classes,
            sub_size,
            layers: 3,
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_classes * self.sub_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d == 0 || self.layers == 0 {
            return Err(Error::Config("d_h, d and layers must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.sub_size == 0 || !(self.codebook_classes == 1 || self.codebook_classes == self.num_classes) {
            return Err(Error::Config(
                "codebook blocks must be 1 or num_classes, sub_size >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Maps a residue label to the codebook block it belongs to.
    pub fn block_of(&self, label: usize) -> usize {
        if self.codebook_classes == 1 {
            0
        } else {
            label
        }
    }
}

fn he(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

fn add_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    p.insert(format!("{name}.w"), he(rng, fan_in, fan_out, gain));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn add_mp_layer(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_h: usize, edge_in: usize) {
    let fan_in = 2 * d_h + edge_in;
    for part in ["self", "nbr", "edge"] {
        let rows = if part == "edge" { edge_in } else { d_h };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..rows * d_h).map(|_| normal.sample(rng)).collect();
        p.insert(
            format!("{name}.msg1.{part}"),
            Tensor::new(vec![rows, d_h], data).expect("consistent shape"),
        );
    }
    p.insert(format!("{name}.msg1.b"), Tensor::zeros(&[d_h]));
    add_linear(p, rng, &format!("{name}.msg2"), d_h, d_h, 1.0);
    add_linear(p, rng, &format!("{name}.msg3"), d_h, d_h, 0.5);
    add_linear(p, rng, &format!("{name}.node1"), d_h, d_h, 1.0);
    add_linear(p, rng, &format!("{name}.node2"), d_h, d_h, 0.5);
    p.insert(format!("{name}.ln.gain"), Tensor::ones(&[d_h]));
    p.insert(format!("{name}.ln.bias"), Tensor::zeros(&[d_h]));
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const ENCODER: u64 = 1;
    pub const DECODER: u64 = 2;
    pub const CODEBOOK: u64 = 3;
    pub const PREDICTOR: u64 = 4;
    pub const STAGE1_BATCHES: u64 = 5;
    pub const STAGE2_BATCHES: u64 = 6;
}

pub fn init_encoder(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = stream_rng(seed, streams::ENCODER);
    let mut p = ParamSet::new();
    add_linear(&mut p, &mut rng, "in", cfg.node_in, cfg.d_h, 1.0);
    for l in 0..cfg.layers {
        add_mp_layer(&mut p, &mut rng, &format!("mp{l}"), cfg.d_h, cfg.edge_in);
    }
    add_linear(&mut p, &mut rng, "out", cfg.d_h, cfg.d, 0.5);
    p
}

/// Decoder output width is `node_in` under node-feature reconstruction.
pub fn init_decoder(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = stream_rng(seed, streams::DECODER);
    let mut p = ParamSet::new();
    add_linear(&mut p, &mut rng, "hid", cfg.d, cfg.d_h, 1.0);
    add_linear(&mut p, &mut rng, "out", cfg.d_h, cfg.node_in, 0.5);
    p
}

pub fn init_predictor(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = stream_rng(seed, streams::PREDICTOR);
    let mut p = ParamSet::new();
    add_linear(&mut p, &mut rng, "tok", cfg.d, cfg.d_h, 1.0);
    for l in 0..cfg.layers {
        add_mp_layer(&mut p, &mut rng, &format!("mp{l}"), cfg.d_h, cfg.edge_in);
    }
    add_linear(&mut p, &mut rng, "head", cfg.d_h, cfg.num_classes, 0.5);
    p
}

/// A parameter set registered on a tape, addressed by name.
pub struct Net {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Net {
    pub fn register(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        Self {
            index: params
                .iter()
                .enumerate()
                .map(|(i, (n, _))| (n.to_string(), i))
                .collect(),
            vars: params.register(tape, trainable),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.v(&format!("{name}.w"))?;
        let b = self.v(&format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

/// Graph structure shared by all layers of one forward pass.
pub struct Edges<'a> {
    pub n: usize,
    pub e: Var,
    pub recv: &'a [usize],
    pub send: &'a [usize],
}

fn mp_layer(tape: &mut Tape, net: &Net, name: &str, h: Var, g: &Edges) -> Result<Var> {
    let hs = tape.matmul(h, net.v(&format!("{name}.msg1.self"))?)?;
    let hn = tape.matmul(h, net.v(&format!("{name}.msg1.nbr"))?)?;
    let he = tape.matmul(g.e, net.v(&format!("{name}.msg1.edge"))?)?;
    let from_recv = tape.gather_rows(hs, g.recv)?;
    let from_send = tape.gather_rows(hn, g.send)?;
    let pre = tape.add(from_recv, from_send)?;
    let pre = tape.add(pre, he)?;
    let pre = tape.add(pre, net.v(&format!("{name}.msg1.b"))?)?;
    let m = tape.relu(pre);
    let m = net.linear(tape, m, &format!("{name}.msg2"))?;
    let m = tape.relu(m);
    let m = net.linear(tape, m, &format!("{name}.msg3"))?;
    let agg = tape.segment_sum(m, g.recv, g.n)?;
    let agg = tape.scale(agg, MESSAGE_SCALE);
    let u = net.linear(tape, agg, &format!("{name}.node1"))?;
    let u = tape.relu(u);
    let u = net.linear(tape, u, &format!("{name}.node2"))?;
    let r = tape.add(h, u)?;
    let r = tape.layer_norm(r)?;
    let r = tape.mul(r, net.v(&format!("{name}.ln.gain"))?)?;
    Ok(tape.add(r, net.v(&format!("{name}.ln.bias"))?)?)
}

fn mp_stack(tape: &mut Tape, net: &Net, layers: usize, mut h: Var, g: &Edges) -> Result<Var> {
    for l in 0..layers {
        h = mp_layer(tape, net, &format!("mp{l}"), h, g)?;
    }
    Ok(h)
}

/// Message-passing states of the encoder before the output projection,
/// `n × d_h`.
pub fn encode_hidden_tape(tape: &mut Tape, enc: &Net, cfg: &ModelConfig, x: Var, g: &Edges) -> Result<Var> {
    let cols = tape.value(x).cols();
    if cols != cfg.node_in {
        return Err(Error::Shape(format!(
            "encoder input has {cols} columns, expected {}",
            cfg.node_in
        )));
    }
    let h = enc.linear(tape, x, "in")?;
    mp_stack(tape, enc, cfg.layers, h, g)
}

/// Encoder forward on the tape: `x` is `n × node_in`, returns unit rows `n × d`.
pub fn encode_tape(tape: &mut Tape, enc: &Net, cfg: &ModelConfig, x: Var, g: &Edges) -> Result<Var> {
    let h = encode_hidden_tape(tape, enc, cfg, x, g)?;
    let out = enc.linear(tape, h, "out")?;
    // unit-length outputs leave the assignment sharpness to tau_v alone
    Ok(tape.l2_normalize(out, 1)?)
}

pub fn decode_tape(tape: &mut Tape, dec: &Net, h_hat: Var) -> Result<Var> {
    let y = dec.linear(tape, h_hat, "hid")?;
    let y = tape.relu(y);
    dec.linear(tape, y, "out")
}

/// Predictor forward from token embeddings `tokens` (`n × d`) to logits.
pub fn predict_tape(tape: &mut Tape, pred: &Net, cfg: &ModelConfig, tokens: Var, g: &Edges) -> Result<Var> {
    let h = pred.linear(tape, tokens, "tok")?;
    let h = mp_stack(tape, pred, cfg.layers, h, g)?;
    pred.linear(tape, h, "head")
}

/// Mean squared error of the decoded `h_hat` against `target`.
pub fn reconstruct_tape(tape: &mut Tape, dec: &Net, h_hat: Var, target: Var) -> Result<Var> {
    let y = decode_tape(tape, dec, h_hat)?;
    Ok(tape.mse(y, target)?)
}

fn check_labels(labels: &[usize], k: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dataset(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against `labels`.
pub fn ce_loss_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    check_labels(labels, k, n)?;
    let mut onehot = Tensor::zeros(&[n, k]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + l] = 1.0;
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let y = tape.constant(onehot);
    let picked = tape.mul(lsm, y)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = ce_loss_tape(&mut tape, l, labels)?;
    Ok(tape.value(loss).item()?)
}

fn run_encoder(g: &GraphData, enc: &ParamSet, cfg: &ModelConfig, hidden: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = Net::register(&mut tape, enc, false);
    let x = tape.constant(g.x.clone());
    let e = tape.constant(g.e.clone());
    let edges = Edges {
        n: g.n,
        e,
        recv: &g.recv,
        send: &g.send,
    };
    let h = if hidden {
        encode_hidden_tape(&mut tape, &net, cfg, x, &edges)?
    } else {
        encode_tape(&mut tape, &net, cfg, x, &edges)?
    };
    Ok(tape.value(h).clone())
}

/// Encoder output for one graph.
pub fn encode(g: &GraphData, enc: &ParamSet, cfg: &ModelConfig) -> Result<Tensor> {
    run_encoder(g, enc, cfg, false)
}

/// Encoder message-passing states for one graph, before the output projection.
pub fn encode_hidden(g: &GraphData, enc: &ParamSet, cfg: &ModelConfig) -> Result<Tensor> {
    run_encoder(g, enc, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasetops::{synth_longtail, SynthConfig};
    use crate::pgraph::GraphConfig;

    fn tiny() -> (ModelConfig, GraphData) {
        let fcfg = FeatureConfig::default();
        let cfg = ModelConfig::new(&fcfg, 8, 4, 3, 2, false);
        let sc = SynthConfig {
            n_proteins: 1,
            min_len: 12,
            max_len: 12,
            ..SynthConfig::default()
        };
        let (data, _) = synth_longtail(5, &sc).unwrap();
        let g = featurize(&data[0].protein, None, &GraphConfig::default(), &fcfg).unwrap();
        (cfg, g)
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let (cfg, g) = tiny();
        let enc = init_encoder(&cfg, 1);
        let a = encode(&g, &enc, &cfg).unwrap();
        assert_eq!(a.shape(), &[g.n, cfg.d]);
        assert_eq!(a, encode(&g, &enc, &cfg).unwrap());
        assert_ne!(enc.checksum(), init_encoder(&cfg, 2).checksum());
    }

    #[test]
    fn ce_closed_forms() {
        let uniform = Tensor::zeros(&[3, 5]);
        assert!((ce_loss(&uniform, &[0, 4, 2]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let sharp = Tensor::from_rows(&[[50.0, -50.0], [-50.0, 50.0]]).unwrap();
        assert!(ce_loss(&sharp, &[0, 1]).unwrap() < 1e-6);
        assert!(matches!(ce_loss(&uniform, &[0, 5, 1]), Err(Error::Dataset(_))));
    }

    #[test]
    fn unconstrained_keeps_total_size() {
        let fcfg = FeatureConfig::default();
        let a = ModelConfig::new(&fcfg, 8, 4, 26, 8, false);
        let b = ModelConfig::new(&fcfg, 8, 4, 26, 8, true);
        assert_eq!(a.codebook_size(), b.codebook_size());
        assert_eq!(b.codebook_classes, 1);
        assert_eq!(b.block_of(17), 0);
    }
}
