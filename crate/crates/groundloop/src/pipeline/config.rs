//! Flat pipeline configuration. Every knob has a documented default; unknown
//! keys fail loudly at load time.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ScaleMode;
use crate::retrieval::{Bm25Params, RetrievalConfig};

/// One line per key, used by the CLI help output.
pub const CONFIG_KEYS_DOC: &str = "\
seed             master seed; every random choice derives from it (42)
alpha            hybrid fusion weight on normalized BM25 (0.6)
rrf_k            reciprocal-rank-fusion smoothing constant (60)
top_k            retrieval pool size (10)
rrf_enabled      fuse BM25/dense rankings over the pool (true)
bm25_k1          BM25 term-frequency saturation (1.2)
bm25_b           BM25 length normalization (0.75)
context_docs     retrieved docs placed in the decoding context (3)
vocab_cap        vocabulary cap by frequency (8192)
d_model          model width (32)
n_layers         transformer layers (2)
n_heads          attention heads (2)
ff_dim           feed-forward width (128)
max_seq          maximum sequence length (128)
lora_rank        adapter rank r (8)
lora_alpha       adapter scaling numerator (16)
scale_mode       'alpha_over_r' or 'alpha' (alpha_over_r)
dora             direction-normalized adapters (false)
quantize_base    block-quantize frozen weights (false)
quant_bits       quantization bits, 4 or 8 (4)
quant_block      quantization block size (64)
tau              hallucination gate threshold (0.7)
detector_epochs  detector training epochs (300)
detector_lr      detector learning rate (0.5)
detector_batch   detector batch size, even (32)
negatives        detection training-set size, even (120)
lambda1          KL loss weight (0.4)
lambda2          contrastive loss weight (0.6)
contrast_clamp   contrastive loss clamp (10)
p_plus_max       grounded-completion threshold (0.3)
p_minus_min      hallucinated-completion threshold (0.7)
lr               adapter learning rate (5e-5)
adam_beta1       Adam beta1 (0.9)
adam_beta2       Adam beta2 (0.999)
adam_eps         Adam epsilon (1e-8)
correct_epochs   passes over the correction set (3)
max_steps        update-step budget, 0 = unlimited (0)
checkpoint_every checkpoint every N updates (50)
neg_source       'corruption' or 'checkpoint' (corruption)
neg_checkpoint   adapter checkpoint for checkpoint-sourced negatives ('')
gen_max_len      greedy decoding budget (16)
policy_frozen    keep the retrieval policy head frozen (true)
policy_hidden    policy MLP hidden width (16)
policy_rank      policy low-rank residual rank (4)
policy_lr        policy learning rate (0.01)
policy_co_threshold  co-occurrence fraction marking a negative doc (0.5)";

macro_rules! defaults {
    ($($name:ident: $ty:ty = $value:expr;)*) => {
        $(fn $name() -> $ty { $value })*
    };
}

defaults! {
    d_seed: u64 = 42;
    d_alpha: f64 = 0.6;
    d_rrf_k: f64 = 60.0;
    d_top_k: usize = 10;
    d_true: bool = true;
    d_bm25_k1: f64 = 1.2;
    d_bm25_b: f64 = 0.75;
    d_context_docs: usize = 3;
    d_vocab_cap: usize = 8192;
    d_d_model: usize = 32;
    d_n_layers: usize = 2;
    d_n_heads: usize = 2;
    d_ff_dim: usize = 128;
    d_max_seq: usize = 128;
    d_lora_rank: usize = 8;
    d_lora_alpha: f64 = 16.0;
    d_scale_mode: String = "alpha_over_r".into();
    d_quant_bits: u8 = 4;
    d_quant_block: usize = 64;
    d_tau: f64 = 0.7;
    d_detector_epochs: usize = 300;
    d_detector_lr: f64 = 0.5;
    d_detector_batch: usize = 32;
    d_negatives: usize = 120;
    d_lambda1: f64 = 0.4;
    d_lambda2: f64 = 0.6;
    d_contrast_clamp: f64 = 10.0;
    d_p_plus_max: f64 = 0.3;
    d_p_minus_min: f64 = 0.7;
    d_lr: f64 = 5e-5;
    d_adam_beta1: f64 = 0.9;
    d_adam_beta2: f64 = 0.999;
    d_adam_eps: f64 = 1e-8;
    d_correct_epochs: usize = 3;
    d_checkpoint_every: u64 = 50;
    d_neg_source: String = "corruption".into();
    d_gen_max_len: usize = 16;
    d_policy_hidden: usize = 16;
    d_policy_rank: usize = 4;
    d_policy_lr: f64 = 0.01;
    d_policy_co_threshold: f64 = 0.5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub alpha: f64,
    pub rrf_k: f64,
    pub top_k: usize,
    pub rrf_enabled: bool,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub context_docs: usize,
    pub vocab_cap: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub scale_mode: String,
    pub dora: bool,
    pub quantize_base: bool,
    pub quant_bits: u8,
    pub quant_block: usize,
    pub tau: f64,
    pub detector_epochs: usize,
    pub detector_lr: f64,
    pub detector_batch: usize,
    pub negatives: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub contrast_clamp: f64,
    pub p_plus_max: f64,
    pub p_minus_min: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub correct_epochs: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub neg_source: String,
    pub neg_checkpoint: String,
    pub gen_max_len: usize,
    pub policy_frozen: bool,
    pub policy_hidden: usize,
    pub policy_rank: usize,
    pub policy_lr: f64,
    pub policy_co_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: d_seed(),
            alpha: d_alpha(),
            rrf_k: d_rrf_k(),
            top_k: d_top_k(),
            rrf_enabled: d_true(),
            bm25_k1: d_bm25_k1(),
            bm25_b: d_bm25_b(),
            context_docs: d_context_docs(),
            vocab_cap: d_vocab_cap(),
            d_model: d_d_model(),
            n_layers: d_n_layers(),
            n_heads: d_n_heads(),
            ff_dim: d_ff_dim(),
            max_seq: d_max_seq(),
            lora_rank: d_lora_rank(),
            lora_alpha: d_lora_alpha(),
            scale_mode: d_scale_mode(),
            dora: false,
            quantize_base: false,
            quant_bits: d_quant_bits(),
            quant_block: d_quant_block(),
            tau: d_tau(),
            detector_epochs: d_detector_epochs(),
            detector_lr: d_detector_lr(),
            detector_batch: d_detector_batch(),
            negatives: d_negatives(),
            lambda1: d_lambda1(),
            lambda2: d_lambda2(),
            contrast_clamp: d_contrast_clamp(),
            p_plus_max: d_p_plus_max(),
            p_minus_min: d_p_minus_min(),
            lr: d_lr(),
            adam_beta1: d_adam_beta1(),
            adam_beta2: d_adam_beta2(),
            adam_eps: d_adam_eps(),
            correct_epochs: d_correct_epochs(),
            max_steps: 0,
            checkpoint_every: d_checkpoint_every(),
            neg_source: d_neg_source(),
            neg_checkpoint: String::new(),
            gen_max_len: d_gen_max_len(),
            policy_frozen: d_true(),
            policy_hidden: d_policy_hidden(),
            policy_rank: d_policy_rank(),
            policy_lr: d_policy_lr(),
            policy_co_threshold: d_policy_co_threshold(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bail(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.rrf_k <= 0.0 {
            return bail(format!("rrf_k must be > 0, got {}", self.rrf_k));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bail(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.top_k == 0 || self.context_docs == 0 || self.gen_max_len == 0 {
            return bail("top_k, context_docs, and gen_max_len must be >= 1".into());
        }
        if self.context_docs > self.top_k {
            return bail(format!(
                "context_docs {} cannot exceed top_k {}",
                self.context_docs, self.top_k
            ));
        }
        if self.dora && self.quantize_base {
            return bail("dora and quantize_base are mutually exclusive".into());
        }
        if !matches!(self.quant_bits, 4 | 8) {
            return bail(format!("quant_bits must be 4 or 8, got {}", self.quant_bits));
        }
        if self.negatives % 2 != 0 {
            return bail(format!("negatives must be even, got {}", self.negatives));
        }
        if self.detector_batch < 2 || self.detector_batch % 2 != 0 {
            return bail(format!(
                "detector_batch must be even and >= 2, got {}",
                self.detector_batch
            ));
        }
        self.parsed_scale_mode()?;
        if !matches!(self.neg_source.as_str(), "corruption" | "checkpoint") {
            return bail(format!(
                "neg_source must be 'corruption' or 'checkpoint', got '{}'",
                self.neg_source
            ));
        }
        if self.neg_source == "checkpoint" && self.neg_checkpoint.is_empty() {
            return bail("neg_source 'checkpoint' requires neg_checkpoint".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lr", self.lr),
            ("contrast_clamp", self.contrast_clamp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn parsed_scale_mode(&self) -> Result<ScaleMode> {
        match self.scale_mode.as_str() {
            "alpha_over_r" => Ok(ScaleMode::AlphaOverR),
            "alpha" => Ok(ScaleMode::Alpha),
            other => Err(Error::Config(format!(
                "scale_mode must be 'alpha_over_r' or 'alpha', got '{other}'"
            ))),
        }
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            alpha: self.alpha,
            top_k: self.top_k,
            rrf_enabled: self.rrf_enabled,
            rrf_k: self.rrf_k,
            bm25: Bm25Params {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&json)
    }

    /// Loads a config (or the defaults) and applies `key=value` overrides.
    /// Unknown keys are rejected in both the file and the overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let json = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                serde_json::from_str::<serde_json::Value>(&json)?
            }
            None => serde_json::to_value(PipelineConfig::default())?,
        };
        let mut object = match base {
            serde_json::Value::Object(map) => map,
            _ => return Err(Error::Config("config file must be a JSON object".into())),
        };
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{entry}' is not of the form key=value"))
            })?;
            let parsed = serde_json::from_str::<serde_json::Value>(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            object.insert(key.to_string(), parsed);
        }
        let config: PipelineConfig =
            serde_json::from_value(serde_json::Value::Object(object))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Short content fingerprint; recorded on every run record so reported
    /// numbers are traceable to their configuration.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes").as_bytes());
        format!("{:x}", h.finalize())[..16].to_string()
    }
}
