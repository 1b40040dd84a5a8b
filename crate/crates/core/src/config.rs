//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::numerics::{AdamConfig, Precision};
use crate::synthdata::DataDims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_z: usize,
    pub d_k: usize,
    /// Style slots of the attribute code.
    pub m: usize,
    pub d_w: usize,
    pub e_id_hidden: [usize; 2],
    pub e_attr_hidden: usize,
    pub mapping_hidden: usize,
    pub generator_hidden: usize,
    /// Multiplier on the identity code where it enters the mapping network.
    pub identity_gain: f64,
    /// Seed of every seed-initialized network (frozen stand-ins included).
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_z: 64,
            d_k: 64,
            m: 4,
            d_w: 64,
            e_id_hidden: [256, 256],
            e_attr_hidden: 256,
            mapping_hidden: 128,
            generator_hidden: 256,
            identity_gain: 3.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_div: bool,
    pub no_img: bool,
    pub no_icl: bool,
    pub no_dpt: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "no_div" => a.no_div = true,
            "no_img" => a.no_img = true,
            "no_icl" => a.no_icl = true,
            "no_dpt" => a.no_dpt = true,
            "full" | "none" => {}
            other => return Err(Error::Config(format!("unknown ablation '{other}'"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_div {
            parts.push("no_div");
        }
        if self.no_img {
            parts.push("no_img");
        }
        if self.no_icl {
            parts.push("no_icl");
        }
        if self.no_dpt {
            parts.push("no_dpt");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Weights of the individual loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_vq: f64,
    /// `(L1, perceptual, pose, parse)` weights for correctly recovered images.
    pub img_recovered: [f64; 4],
    /// Same, for anonymized and falsely recovered images.
    pub img_other: [f64; 4],
    pub anon: f64,
    pub div: f64,
    pub deanon: f64,
    pub img: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.84,
            beta: 0.16,
            lambda_vq: 0.01,
            img_recovered: [10.0, 1.0, 0.1, 0.01],
            img_other: [0.01, 0.1, 0.1, 0.01],
            anon: 1.0,
            div: 2.0,
            deanon: 5.0,
            img: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase0_iters: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub batch: usize,
    pub phase0_batch: usize,
    /// Pretrain the identity encoder on newly rendered identities instead
    /// of the training split.
    pub phase0_fresh_identities: bool,
    pub keys_per_batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Emit a log record every this many steps (the first and last step are always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase0_iters: 3000,
            phase1_iters: 10_000,
            phase2_iters: 20_000,
            batch: 4,
            phase0_batch: 32,
            phase0_fresh_identities: true,
            keys_per_batch: 3,
            adam: AdamConfig::default(),
            seed: 1,
            weights: LossWeights::default(),
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_ids: usize,
    pub per_id: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_ids: 200, per_id: 10, seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataDims,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub training: TrainConfig,
    pub ablation: Ablation,
    pub precision: Precision,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let m = &self.model;
        if m.d_z == 0 || !m.d_z.is_multiple_of(2) {
            return bad("model.d_z must be even and positive");
        }
        if [m.d_k, m.m, m.d_w, m.e_attr_hidden, m.mapping_hidden, m.generator_hidden]
            .contains(&0)
            || m.e_id_hidden.contains(&0)
        {
            return bad("model dimensions must be positive");
        }
        if m.identity_gain <= 0.0 || !m.identity_gain.is_finite() {
            return bad("model.identity_gain must be positive");
        }
        let d = &self.data;
        if [d.d_id, d.d_attr, d.height, d.width].contains(&0) {
            return bad("data dimensions must be positive");
        }
        if d.height < crate::numerics::SSIM_WINDOW || d.width < crate::numerics::SSIM_WINDOW {
            return bad("images must be at least 7x7");
        }
        if self.flow.n_blocks == 0 || self.flow.clamp.is_nan() || self.flow.clamp <= 0.0 {
            return bad("flow needs n_blocks >= 1 and clamp > 0");
        }
        let t = &self.training;
        if t.batch < 2 || t.phase0_batch == 0 || t.keys_per_batch < 2 {
            return bad("batch >= 2 and keys_per_batch >= 2 are required");
        }
        if t.log_every == 0 {
            return bad("training.log_every must be positive");
        }
        if t.adam.lr.is_nan() || t.adam.lr <= 0.0 || !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) {
            return bad("invalid Adam hyperparameters");
        }
        let w = &t.weights;
        let all = [w.alpha, w.beta, w.lambda_vq, w.anon, w.div, w.deanon, w.img]
            .into_iter()
            .chain(w.img_recovered)
            .chain(w.img_other);
        for x in all {
            if x < 0.0 || !x.is_finite() {
                return bad("loss weights must be finite and non-negative");
            }
        }
        if self.dataset.n_ids < 2 || self.dataset.per_id == 0 {
            return bad("dataset needs >= 2 identities and >= 1 sample each");
        }
        Ok(())
    }
}
