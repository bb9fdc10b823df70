//! Stage 1 (encoder, decoder, codebook) and stage 2 (predictor) training.

use std::io::Write;

use ptmtok_autodiff::{adam_step, OptimState, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ce_loss_tape, encode_tape, init_decoder, init_encoder, init_predictor, predict_tape, reconstruct_tape, stream_rng,
    streams, Batch, Edges, GraphData, ModelConfig, Net,
};
use crate::codebook::{
    anneal_tau, hard_assign, init_codebook, soft_assign_tape, uniform_loss_tape, vanilla_assign, vanilla_quantize_tape,
    Codebook, VQConfig, VqMode,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Decode `h_hat` back to the encoder's node inputs.
    NodeFeatures,
    /// `‖h_hat − sg[h]‖²` in embedding space; the decoder is unused.
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_proteins: usize,
    pub lr: f64,
    pub seed: u64,
    pub vq: VQConfig,
    pub joint_finetune: bool,
    pub recon: ReconTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 2000,
            batch_proteins: 4,
            lr: 1e-3,
            seed: 0,
            vq: VQConfig::default(),
            joint_finetune: false,
            recon: ReconTarget::NodeFeatures,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err(Error::Config("training steps must be at least 1".into()));
        }
        if self.batch_proteins == 0 {
            return Err(Error::Config("batch_proteins must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        self.vq.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub step: usize,
    pub tau_v: f64,
    pub l_recon: f64,
    pub l_u: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub step: usize,
    pub l_ce: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub codebook: Codebook,
    pub log: Vec<Stage1Row>,
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub predictor: ParamSet,
    /// Unchanged from stage 1 unless `joint_finetune`.
    pub encoder: ParamSet,
    pub codebook: Codebook,
    pub log: Vec<Stage2Row>,
}

pub fn write_stage1_log<W: Write>(mut w: W, log: &[Stage1Row]) -> Result<()> {
    writeln!(w, "step,tau_v,L_recon,L_u,L_total")?;
    for r in log {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e}",
            r.step, r.tau_v, r.l_recon, r.l_u, r.l_total
        )?;
    }
    Ok(())
}

pub fn write_stage2_log<W: Write>(mut w: W, log: &[Stage2Row]) -> Result<()> {
    writeln!(w, "step,L_ce")?;
    for r in log {
        writeln!(w, "{},{:e}", r.step, r.l_ce)?;
    }
    Ok(())
}

/// Epoch-wise shuffled protein order.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn make_batch(data: &[GraphData], idx: &[usize]) -> Result<Batch> {
    let graphs: Vec<&GraphData> = idx.iter().map(|&i| &data[i]).collect();
    Batch::new(&graphs)
}

/// Token index per row: inner-product argmax, or the Euclidean nearest token
/// for codebooks trained as vanilla VQ.
pub fn assign_tokens(h: &Tensor, cb: &Codebook, mode: VqMode) -> Vec<usize> {
    (0..h.rows())
        .map(|i| match mode {
            VqMode::TemperatureScaled => hard_assign(h.row(i), cb),
            VqMode::VanillaVq => vanilla_assign(h.row(i), cb),
        })
        .collect()
}

fn check_data(data: &[GraphData], mcfg: &ModelConfig, labelled: bool) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for g in data {
        if g.x.cols() != mcfg.node_in || (g.e.rows() > 0 && g.e.cols() != mcfg.edge_in) {
            return Err(Error::Shape(format!(
                "graph {} features ({}, {}) do not match model ({}, {})",
                g.id,
                g.x.cols(),
                g.e.cols(),
                mcfg.node_in,
                mcfg.edge_in
            )));
        }
        if labelled && g.labels.len() != g.n {
            return Err(Error::Dataset(format!("graph {} is unlabelled", g.id)));
        }
        if let Some(&bad) = g.labels.iter().find(|&&l| l >= mcfg.num_classes) {
            return Err(Error::Dataset(format!("graph {}: label {bad} out of range", g.id)));
        }
    }
    Ok(())
}

fn finite_or_fail(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Train {
            step,
            msg: format!("{what} is not finite ({v})"),
        })
    }
}

fn update(params: &mut ParamSet, tape: &Tape, vars: &[Var], state: &mut OptimState, step: usize) -> Result<()> {
    let grads = params.grads(tape, vars);
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::Train {
            step,
            msg: format!("gradient of {name} is not finite"),
        });
    }
    adam_step(params, &grads, state)?;
    Ok(())
}

fn codebook_params(cb: &Codebook) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("embeddings", cb.embeddings.clone());
    p
}

fn take_embeddings(p: &ParamSet) -> Tensor {
    p.get("embeddings").expect("codebook parameter").clone()
}

/// Stage-1 loss terms recorded on a tape.
pub struct Stage1Losses {
    pub recon: Var,
    /// Absent for single-block codebooks, where the term is identically 0.
    pub l_u: Option<Var>,
    pub total: Var,
}

/// Builds the stage-1 objective for one batch. `emb` is the registered
/// codebook matrix and `codebook` supplies its class layout.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss_tape(
    tape: &mut Tape,
    enc: &Net,
    dec: &Net,
    emb: Var,
    codebook: &Codebook,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    batch: &Batch,
    tau_v: f64,
) -> Result<Stage1Losses> {
    let x = tape.constant(batch.x.clone());
    let e = tape.constant(batch.e.clone());
    let edges = Edges {
        n: batch.n,
        e,
        recv: &batch.recv,
        send: &batch.send,
    };
    let h = encode_tape(tape, enc, mcfg, x, &edges)?;
    let (h_hat, penalty) = match cfg.vq.mode {
        VqMode::TemperatureScaled => {
            let blocks: Vec<usize> = batch.labels.iter().map(|&l| mcfg.block_of(l)).collect();
            let mask = cfg.vq.masked.then_some((blocks.as_slice(), codebook.token_class()));
            let (_, h_hat) = soft_assign_tape(tape, h, emb, tau_v, mask)?;
            (h_hat, None)
        }
        VqMode::VanillaVq => {
            let cur = Codebook::from_embeddings(tape.value(emb).clone(), codebook.num_classes(), codebook.sub_size())?;
            let z = assign_tokens(tape.value(h), &cur, VqMode::VanillaVq);
            let (h_hat, pen) = vanilla_quantize_tape(tape, h, emb, &z, cfg.vq.beta)?;
            (h_hat, Some(pen))
        }
    };
    let recon = match cfg.recon {
        ReconTarget::NodeFeatures => reconstruct_tape(tape, dec, h_hat, x)?,
        ReconTarget::Embedding => {
            let h_sg = tape.detach(h);
            tape.mse(h_hat, h_sg)?
        }
    };
    let mut total = recon;
    let mut l_u = None;
    if codebook.num_classes() > 1 {
        let u = uniform_loss_tape(tape, emb, codebook.token_class(), cfg.vq.tau_u)?;
        let weighted = tape.scale(u, cfg.vq.alpha);
        total = tape.add(total, weighted)?;
        l_u = Some(u);
    }
    if let Some(p) = penalty {
        total = tape.add(total, p)?;
    }
    Ok(Stage1Losses { recon, l_u, total })
}

/// Stage 1: encoder, decoder and codebook trained on reconstruction plus the
/// class-uniformity term.
pub fn train_codebook(data: &[GraphData], mcfg: &ModelConfig, cfg: &TrainConfig) -> Result<Stage1Output> {
    mcfg.validate()?;
    cfg.validate()?;
    check_data(data, mcfg, cfg.vq.masked)?;
    let mut encoder = init_encoder(mcfg, cfg.seed);
    let mut decoder = init_decoder(mcfg, cfg.seed);
    let cb_seed = stream_rng(cfg.seed, streams::CODEBOOK).next_u64();
    let mut codebook = init_codebook(mcfg.codebook_classes, mcfg.sub_size, mcfg.d, cb_seed)?;
    let mut cbp = codebook_params(&codebook);
    let mut enc_state = OptimState::new(&encoder, cfg.lr);
    let mut dec_state = OptimState::new(&decoder, cfg.lr);
    let mut cb_state = OptimState::new(&cbp, cfg.lr);
    let mut sampler = Sampler::new(data.len(), stream_rng(cfg.seed, streams::STAGE1_BATCHES));
    let mut log = Vec::with_capacity(cfg.stage1_steps);

    for step in 0..cfg.stage1_steps {
        let batch = make_batch(data, &sampler.next(cfg.batch_proteins))?;
        let mut tape = Tape::new();
        let enc = Net::register(&mut tape, &encoder, true);
        let dec = Net::register(&mut tape, &decoder, true);
        let cb_vars = cbp.register(&mut tape, true);
        let emb = cb_vars[0];
        let tau_v = anneal_tau(step, &cfg.vq);
        let losses = stage1_loss_tape(&mut tape, &enc, &dec, emb, &codebook, mcfg, cfg, &batch, tau_v)?;
        let (recon, total) = (losses.recon, losses.total);
        let l_u_value = match losses.l_u {
            Some(l) => tape.value(l).item()?,
            None => 0.0,
        };
        let l_recon = tape.value(recon).item()?;
        let l_total = tape.value(total).item()?;
        finite_or_fail(step, "stage-1 loss", l_total)?;
        tape.backward(total)?;
        update(&mut encoder, &tape, enc.vars(), &mut enc_state, step)?;
        update(&mut decoder, &tape, dec.vars(), &mut dec_state, step)?;
        update(&mut cbp, &tape, &cb_vars, &mut cb_state, step)?;
        codebook.embeddings = take_embeddings(&cbp);
        log.push(Stage1Row {
            step,
            tau_v,
            l_recon,
            l_u: l_u_value,
            l_total,
        });
    }
    Ok(Stage1Output {
        encoder,
        decoder,
        codebook,
        log,
    })
}

fn encode_values(g: &GraphData, encoder: &ParamSet, mcfg: &ModelConfig) -> Result<Tensor> {
    super::encode(g, encoder, mcfg)
}

/// Stage 2: the predictor learns residue classes from the embeddings of the
/// hard-assigned tokens. Encoder and codebook stay frozen unless
/// `joint_finetune`, in which case gradients reach them straight through the
/// assignment.
pub fn train_predictor(
    data: &[GraphData],
    mcfg: &ModelConfig,
    encoder: &ParamSet,
    codebook: &Codebook,
    cfg: &TrainConfig,
) -> Result<Stage2Output> {
    mcfg.validate()?;
    cfg.validate()?;
    check_data(data, mcfg, true)?;
    if codebook.size() != mcfg.codebook_size() || codebook.dim() != mcfg.d {
        return Err(Error::Checkpoint(format!(
            "codebook is {}×{}, model expects {}×{}",
            codebook.size(),
            codebook.dim(),
            mcfg.codebook_size(),
            mcfg.d
        )));
    }
    let mode = cfg.vq.mode;
    let mut predictor = init_predictor(mcfg, cfg.seed);
    let mut encoder = encoder.clone();
    let mut codebook = codebook.clone();
    let mut cbp = codebook_params(&codebook);
    let mut pred_state = OptimState::new(&predictor, cfg.lr);
    let mut enc_state = OptimState::new(&encoder, cfg.lr);
    let mut cb_state = OptimState::new(&cbp, cfg.lr);
    let mut sampler = Sampler::new(data.len(), stream_rng(cfg.seed, streams::STAGE2_BATCHES));
    // frozen encoder: token assignments never change, compute them once
    let cached: Vec<Vec<usize>> = if cfg.joint_finetune {
        Vec::new()
    } else {
        data.iter()
            .map(|g| Ok(assign_tokens(&encode_values(g, &encoder, mcfg)?, &codebook, mode)))
            .collect::<Result<_>>()?
    };
    let mut log = Vec::with_capacity(cfg.stage2_steps);

    for step in 0..cfg.stage2_steps {
        let idx = sampler.next(cfg.batch_proteins);
        let batch = make_batch(data, &idx)?;
        let mut tape = Tape::new();
        let pred = Net::register(&mut tape, &predictor, true);
        let e = tape.constant(batch.e.clone());
        let edges = Edges {
            n: batch.n,
            e,
            recv: &batch.recv,
            send: &batch.send,
        };
        let mut joint = None;
        let tokens = if cfg.joint_finetune {
            let enc = Net::register(&mut tape, &encoder, true);
            let cb_vars = cbp.register(&mut tape, true);
            let x = tape.constant(batch.x.clone());
            let h = encode_tape(&mut tape, &enc, mcfg, x, &edges)?;
            let z = assign_tokens(tape.value(h), &codebook, mode);
            let e_z = tape.gather_rows(cb_vars[0], &z)?;
            // forward value e_z; gradient reaches both e_z and h
            let h_sg = tape.detach(h);
            let delta = tape.sub(h, h_sg)?;
            let t = tape.add(e_z, delta)?;
            joint = Some((enc.vars().to_vec(), cb_vars));
            t
        } else {
            let z: Vec<usize> = idx.iter().flat_map(|&i| cached[i].iter().copied()).collect();
            let mut rows = Vec::with_capacity(z.len() * mcfg.d);
            for &t in &z {
                rows.extend_from_slice(codebook.token(t));
            }
            tape.constant(Tensor::matrix(z.len(), mcfg.d, rows)?)
        };
        let logits = predict_tape(&mut tape, &pred, mcfg, tokens, &edges)?;
        let loss = ce_loss_tape(&mut tape, logits, &batch.labels)?;
        let l_ce = tape.value(loss).item()?;
        finite_or_fail(step, "cross-entropy", l_ce)?;
        tape.backward(loss)?;
        update(&mut predictor, &tape, pred.vars(), &mut pred_state, step)?;
        if let Some((enc_vars, cb_vars)) = joint {
            update(&mut encoder, &tape, &enc_vars, &mut enc_state, step)?;
            update(&mut cbp, &tape, &cb_vars, &mut cb_state, step)?;
            codebook.embeddings = take_embeddings(&cbp);
        }
        log.push(Stage2Row { step, l_ce });
    }
    Ok(Stage2Output {
        predictor,
        encoder,
        codebook,
        log,
    })
}
