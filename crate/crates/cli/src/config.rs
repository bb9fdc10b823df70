//! Flat `key=value` run configuration.

use std::fmt::Write as _;

use ptmtok_core::codebook::{Anneal, VQConfig, VqMode};
use ptmtok_core::geometry::FeatureConfig;
use ptmtok_core::model::{ReconTarget, TrainConfig};
use ptmtok_core::pgraph::GraphConfig;
use ptmtok_core::{Error, Result};
use sha2::{Digest, Sha256};

/// Every accepted key with its description, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("rbf_count", "number of Gaussian distance bins"),
    ("rbf_min", "first RBF center, Å"),
    ("rbf_max", "last RBF center, Å"),
    (
        "noise_sigma",
        "coordinate noise std, Å (stored, not applied in training)",
    ),
    ("d_s", "sequence-separation cutoff"),
    ("d_r", "Cα radius cutoff, Å"),
    ("k", "nearest neighbours per residue"),
    ("k_hop", "hops along k-nearest edges in a micro-environment"),
    ("conjunction", "require all three neighbourhood predicates (true|false)"),
    ("d_h", "hidden width of encoder and predictor"),
    ("d", "token embedding width"),
    ("sub_size", "tokens per class sub-codebook"),
    ("num_classes", "number of residue classes"),
    (
        "unconstrained",
        "one shared codebook block instead of per-class blocks (true|false)",
    ),
    ("tau_u", "uniform-loss temperature"),
    ("tau_v0", "initial assignment temperature"),
    ("tau_v_min", "assignment temperature floor"),
    ("anneal", "temperature schedule (exponential|linear)"),
    ("alpha", "uniform-loss weight"),
    ("beta", "commitment weight (vanilla VQ)"),
    ("vq_mode", "quantizer (temperature_scaled|vanilla_vq)"),
    ("masked", "label-gated assignment during stage 1 (true|false)"),
    ("recon", "stage-1 reconstruction target (node_features|embedding)"),
    ("stage1_steps", "codebook training steps"),
    ("stage2_steps", "predictor training steps"),
    ("batch_proteins", "proteins per batch"),
    ("lr", "Adam learning rate"),
    ("seed", "seed for every random stream of a command"),
    (
        "joint_finetune",
        "update encoder and codebook during stage 2 (true|false)",
    ),
    ("threads", "featurization threads, 0 = hardware count"),
    ("chain", "PDB chain to read, empty = first chain"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub graph: GraphConfig,
    pub d_h: usize,
    pub d: usize,
    pub sub_size: usize,
    pub num_classes: usize,
    pub unconstrained: bool,
    pub vq: VQConfig,
    /// `true` for the linear schedule; both reach `tau_v_min` from the step count.
    pub linear_anneal: bool,
    pub train: TrainConfig,
    pub threads: usize,
    pub chain: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let mut cfg = Self {
            features: FeatureConfig::default(),
            graph: GraphConfig::default(),
            d_h: 128,
            d: 128,
            sub_size: 128,
            num_classes: 26,
            unconstrained: false,
            vq: train.vq.clone(),
            linear_anneal: false,
            train,
            threads: 0,
            chain: String::new(),
        };
        cfg.sync_anneal();
        cfg
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key}: cannot parse {value:?} as {want}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

impl RunConfig {
    /// Parses a config file body: one `key=value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: Some(n + 1),
                msg: format!("expected key=value, found {line:?}"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, found {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "rbf_count" => self.features.rbf_count = num(key, value)?,
            "rbf_min" => self.features.rbf_min = num(key, value)?,
            "rbf_max" => self.features.rbf_max = num(key, value)?,
            "noise_sigma" => self.features.noise_sigma = num(key, value)?,
            "d_s" => self.graph.d_s = num(key, value)?,
            "d_r" => self.graph.d_r = num(key, value)?,
            "k" => self.graph.k = num(key, value)?,
            "k_hop" => self.graph.k_hop = num(key, value)?,
            "conjunction" => self.graph.conjunction = flag(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "sub_size" => self.sub_size = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "unconstrained" => self.unconstrained = flag(key, value)?,
            "tau_u" => self.vq.tau_u = num(key, value)?,
            "tau_v0" => self.vq.tau_v0 = num(key, value)?,
            "tau_v_min" => self.vq.tau_v_min = num(key, value)?,
            "anneal" => {
                self.linear_anneal = match value {
                    "exponential" => false,
                    "linear" => true,
                    _ => return Err(bad(key, value, "exponential or linear")),
                }
            }
            "alpha" => self.vq.alpha = num(key, value)?,
            "beta" => self.vq.beta = num(key, value)?,
            "vq_mode" => {
                self.vq.mode = match value {
                    "temperature_scaled" => VqMode::TemperatureScaled,
                    "vanilla_vq" => VqMode::VanillaVq,
                    _ => return Err(bad(key, value, "temperature_scaled or vanilla_vq")),
                }
            }
            "masked" => self.vq.masked = flag(key, value)?,
            "recon" => {
                self.train.recon = match value {
                    "node_features" => ReconTarget::NodeFeatures,
                    "embedding" => ReconTarget::Embedding,
                    _ => return Err(bad(key, value, "node_features or embedding")),
                }
            }
            "stage1_steps" => self.train.stage1_steps = num(key, value)?,
            "stage2_steps" => self.train.stage2_steps = num(key, value)?,
            "batch_proteins" => self.train.batch_proteins = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "joint_finetune" => self.train.joint_finetune = flag(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "chain" => self.chain = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.sync_anneal();
        Ok(())
    }

    fn sync_anneal(&mut self) {
        self.vq.anneal = if self.linear_anneal {
            Anneal::Linear {
                total_steps: self.train.stage1_steps.max(1),
            }
        } else {
            Anneal::exponential_for(self.train.stage1_steps, self.vq.tau_v0, self.vq.tau_v_min)
        };
        self.train.vq = self.vq.clone();
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| v.to_string();
        Some(match key {
            "rbf_count" => self.features.rbf_count.to_string(),
            "rbf_min" => self.features.rbf_min.to_string(),
            "rbf_max" => self.features.rbf_max.to_string(),
            "noise_sigma" => self.features.noise_sigma.to_string(),
            "d_s" => self.graph.d_s.to_string(),
            "d_r" => self.graph.d_r.to_string(),
            "k" => self.graph.k.to_string(),
            "k_hop" => self.graph.k_hop.to_string(),
            "conjunction" => b(self.graph.conjunction),
            "d_h" => self.d_h.to_string(),
            "d" => self.d.to_string(),
            "sub_size" => self.sub_size.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "unconstrained" => b(self.unconstrained),
            "tau_u" => self.vq.tau_u.to_string(),
            "tau_v0" => self.vq.tau_v0.to_string(),
            "tau_v_min" => self.vq.tau_v_min.to_string(),
            "anneal" => if self.linear_anneal { "linear" } else { "exponential" }.into(),
            "alpha" => self.vq.alpha.to_string(),
            "beta" => self.vq.beta.to_string(),
            "vq_mode" => match self.vq.mode {
                VqMode::TemperatureScaled => "temperature_scaled",
                VqMode::VanillaVq => "vanilla_vq",
            }
            .into(),
            "masked" => b(self.vq.masked),
            "recon" => match self.train.recon {
                ReconTarget::NodeFeatures => "node_features",
                ReconTarget::Embedding => "embedding",
            }
            .into(),
            "stage1_steps" => self.train.stage1_steps.to_string(),
            "stage2_steps" => self.train.stage2_steps.to_string(),
            "batch_proteins" => self.train.batch_proteins.to_string(),
            "lr" => self.train.lr.to_string(),
            "seed" => self.train.seed.to_string(),
            "joint_finetune" => b(self.train.joint_finetune),
            "threads" => self.threads.to_string(),
            "chain" => self.chain.clone(),
            _ => return None,
        })
    }

    /// Canonical `key=value` listing of every key; parses back to `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("every listed key renders"));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::render`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.graph.validate()?;
        self.vq.validate()?;
        self.train.validate()?;
        if self.d_h == 0 || self.d == 0 || self.sub_size == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "d_h, d, sub_size and num_classes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }

    /// Help text listing every key with its default.
    pub fn key_help() -> String {
        let d = Self::default();
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::from("Config keys (file lines or --set key=value; flags win over the file):\n");
        for (k, help) in KEYS {
            let _ = writeln!(out, "  {k:<width$}  {help} [default: {}]", d.get(k).unwrap_or_default());
        }
        out
    }
}
