//! Trained model bundle: on-disk layout, loading checks and inference.
//!
//! A model directory holds `model.json` (configuration), `stage1.mtk`
//! (encoder, decoder, codebook arrays), `codebook.json` (codebook sidecar)
//! and, once the predictor is trained, `stage2.mtk`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ptmtok_autodiff::checkpoint::{read_arrays, write_arrays};
use ptmtok_autodiff::{ParamSet, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::train::assign_tokens;
use super::{featurize, init_decoder, init_encoder, init_predictor, predict_tape, Edges, GraphData, ModelConfig, Net};
use crate::codebook::{Codebook, CodebookMeta, VqMode, CODEBOOK_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::geometry::FeatureConfig;
use crate::ingest::{to_json_line, Protein};
use crate::metrics::{evaluate_named, EvalReport};
use crate::pgraph::GraphConfig;

pub const MODEL_FORMAT_VERSION: u32 = 1;

const MODEL_JSON: &str = "model.json";
const CODEBOOK_JSON: &str = "codebook.json";
const STAGE1: &str = "stage1.mtk";
const STAGE2: &str = "stage2.mtk";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    format_version: u32,
    model: ModelConfig,
    graph: GraphConfig,
    features: FeatureConfig,
    vq_mode: VqMode,
    tau_u: f64,
    class_names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: GraphConfig,
    pub features: FeatureConfig,
    pub vq_mode: VqMode,
    pub tau_u: f64,
    pub class_names: Vec<String>,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub codebook: Codebook,
    pub predictor: Option<ParamSet>,
}

/// One residue of `predict` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub position: usize,
    pub token_index: usize,
    /// Codebook block of the assigned token.
    pub token_class: usize,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
}

fn prefixed(prefix: &str, p: &ParamSet) -> Vec<(String, Tensor)> {
    p.iter().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())).collect()
}

/// Pulls `prefix.*` arrays out of `arrays` in the layout of `template`,
/// failing on any missing name or shape difference.
fn restore(arrays: &[(String, Tensor)], prefix: &str, template: &ParamSet, file: &str) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let key = format!("{prefix}.{name}");
        let found = arrays
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::Checkpoint(format!("{file}: missing array {key}")))?;
        if found.1.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{file}: {key} has shape {:?}, configuration expects {:?}",
                found.1.shape(),
                t.shape()
            )));
        }
        out.insert(name, found.1.clone());
    }
    let expected = arrays
        .iter()
        .filter(|(n, _)| n.starts_with(&format!("{prefix}.")))
        .count();
    if expected != template.len() {
        return Err(Error::Checkpoint(format!(
            "{file}: {expected} {prefix} arrays, configuration expects {}",
            template.len()
        )));
    }
    Ok(out)
}

fn read_mtk(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(read_arrays(BufReader::new(f))?)
}

fn write_mtk(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_arrays(&mut w, arrays)?;
    w.flush()?;
    Ok(())
}

impl Model {
    fn meta(&self) -> ModelMeta {
        ModelMeta {
            format_version: MODEL_FORMAT_VERSION,
            model: self.config.clone(),
            graph: self.graph.clone(),
            features: self.features.clone(),
            vq_mode: self.vq_mode,
            tau_u: self.tau_u,
            class_names: self.class_names.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MODEL_JSON), serde_json::to_string_pretty(&self.meta())? + "\n")?;
        std::fs::write(
            dir.join(CODEBOOK_JSON),
            serde_json::to_string_pretty(&self.codebook.meta(self.tau_u))? + "\n",
        )?;
        let mut arrays = prefixed("encoder", &self.encoder);
        arrays.extend(prefixed("decoder", &self.decoder));
        arrays.push(("codebook.embeddings".into(), self.codebook.embeddings.clone()));
        let classes = self.codebook.token_class().iter().map(|&c| c as f64).collect();
        arrays.push(("codebook.token_class".into(), Tensor::vector(classes)));
        write_mtk(&dir.join(STAGE1), &arrays)?;
        match &self.predictor {
            Some(p) => write_mtk(&dir.join(STAGE2), &prefixed("predictor", p))?,
            None => {
                let stale = dir.join(STAGE2);
                if stale.exists() {
                    std::fs::remove_file(stale)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MODEL_JSON))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MODEL_JSON).display())))?;
        let meta: ModelMeta =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{MODEL_JSON}: {e}")))?;
        if meta.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model format {}",
                meta.format_version
            )));
        }
        let cfg = meta.model;
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.class_names.len() != cfg.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for {} classes",
                meta.class_names.len(),
                cfg.num_classes
            )));
        }
        let cb_text = std::fs::read_to_string(dir.join(CODEBOOK_JSON))
            .map_err(|e| Error::Checkpoint(format!("{CODEBOOK_JSON}: {e}")))?;
        let cb_meta: CodebookMeta =
            serde_json::from_str(&cb_text).map_err(|e| Error::Checkpoint(format!("{CODEBOOK_JSON}: {e}")))?;
        if cb_meta.format_version != CODEBOOK_FORMAT_VERSION
            || cb_meta.num_classes != cfg.codebook_classes
            || cb_meta.sub_size != cfg.sub_size
            || cb_meta.d != cfg.d
        {
            return Err(Error::Checkpoint(format!(
                "codebook sidecar ({} classes × {}, d = {}) disagrees with model configuration",
                cb_meta.num_classes, cb_meta.sub_size, cb_meta.d
            )));
        }

        let arrays = read_mtk(&dir.join(STAGE1))?;
        let encoder = restore(&arrays, "encoder", &init_encoder(&cfg, 0), STAGE1)?;
        let decoder = restore(&arrays, "decoder", &init_decoder(&cfg, 0), STAGE1)?;
        let find = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("{STAGE1}: missing array {name}")))
        };
        let emb = find("codebook.embeddings")?;
        if emb.shape() != [cfg.codebook_size(), cfg.d] {
            return Err(Error::Checkpoint(format!(
                "codebook embeddings have shape {:?}, configuration expects [{}, {}]",
                emb.shape(),
                cfg.codebook_size(),
                cfg.d
            )));
        }
        let codebook = Codebook::from_embeddings(emb, cfg.codebook_classes, cfg.sub_size)?;
        let stored_classes = find("codebook.token_class")?;
        let derived: Vec<f64> = codebook.token_class().iter().map(|&c| c as f64).collect();
        if stored_classes.data() != derived.as_slice() {
            return Err(Error::Checkpoint(
                "stored token classes differ from the block layout".into(),
            ));
        }
        let stage2 = dir.join(STAGE2);
        let predictor = if stage2.exists() {
            Some(restore(
                &read_mtk(&stage2)?,
                "predictor",
                &init_predictor(&cfg, 0),
                STAGE2,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: cfg,
            graph: meta.graph,
            features: meta.features,
            vq_mode: meta.vq_mode,
            tau_u: meta.tau_u,
            class_names: meta.class_names,
            encoder,
            decoder,
            codebook,
            predictor,
        })
    }

    pub fn graph_data(&self, p: &Protein) -> Result<GraphData> {
        featurize(p, None, &self.graph, &self.features)
    }

    /// Hard token assignment for every residue of `g`.
    pub fn tokens(&self, g: &GraphData) -> Result<Vec<usize>> {
        let h = super::encode(g, &self.encoder, &self.config)?;
        Ok(assign_tokens(&h, &self.codebook, self.vq_mode))
    }

    /// Token indices and `n × num_classes` class probabilities.
    pub fn predict_graph(&self, g: &GraphData) -> Result<(Vec<usize>, Tensor)> {
        let predictor = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no trained predictor".into()))?;
        if g.x.cols() != self.config.node_in {
            return Err(Error::Checkpoint(format!(
                "input has {} node features, model expects {}",
                g.x.cols(),
                self.config.node_in
            )));
        }
        let z = self.tokens(g)?;
        let d = self.config.d;
        let mut rows = Vec::with_capacity(z.len() * d);
        for &t in &z {
            rows.extend_from_slice(self.codebook.token(t));
        }
        let mut tape = Tape::new();
        let net = Net::register(&mut tape, predictor, false);
        let tokens = tape.constant(Tensor::matrix(z.len(), d, rows)?);
        let e = tape.constant(g.e.clone());
        let edges = Edges {
            n: g.n,
            e,
            recv: &g.recv,
            send: &g.send,
        };
        let logits = predict_tape(&mut tape, &net, &self.config, tokens, &edges)?;
        let probs = tape.softmax(logits, 1)?;
        Ok((z, tape.value(probs).clone()))
    }

    pub fn predict_rows(&self, g: &GraphData) -> Result<Vec<PredictionRow>> {
        let (z, probs) = self.predict_graph(g)?;
        Ok(z.iter()
            .enumerate()
            .map(|(i, &t)| {
                let p = probs.row(i).to_vec();
                PredictionRow {
                    id: g.id.clone(),
                    position: i,
                    token_index: t,
                    token_class: self.codebook.class_of(t),
                    predicted_class: argmax(&p),
                    probabilities: p,
                }
            })
            .collect())
    }

    pub fn predict(&self, p: &Protein) -> Result<Vec<PredictionRow>> {
        self.predict_rows(&self.graph_data(p)?)
    }

    /// Metrics over labelled graphs.
    pub fn evaluate(&self, graphs: &[GraphData]) -> Result<EvalReport> {
        let k = self.config.num_classes;
        let (mut y_true, mut y_pred, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for g in graphs {
            if g.labels.len() != g.n {
                return Err(Error::Dataset(format!("protein {} has no labels", g.id)));
            }
            let (_, probs) = self.predict_graph(g)?;
            y_true.extend_from_slice(&g.labels);
            for i in 0..g.n {
                y_pred.push(argmax(probs.row(i)));
            }
            scores.extend_from_slice(probs.data());
        }
        evaluate_named(&y_true, &y_pred, &scores, k, &self.class_names)
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn write_predictions<W: Write>(rows: &[PredictionRow], mut w: W) -> Result<()> {
    for r in rows {
        writeln!(w, "{}", to_json_line(r)?)?;
    }
    Ok(())
}
