//! Toy decoder-only transformer with a low-rank adapter stack on the Q and V
//! attention projections.
//!
//! The base weights are frozen at construction: only adapter parameters ever
//! receive gradients, and [`ToyTransformer::base_hash`] witnesses that the
//! frozen weights never change. Supported adapter variants: plain low-rank
//! residuals (`W' = W + scale * BA`), column-normalized composition with a
//! learned per-column magnitude, and a 4/8-bit block-quantized frozen base
//! with full-precision adapters.

mod adapters;
mod decode;
mod forward;
mod quant;

pub use adapters::{
    adapter_gate, dora_compose, lora_apply, AdapterCheckpoint, AdapterConfig, AdapterGrads,
    AdapterUnit, LayerAdapters, LoraAdapterStack, ScaleMode, TrainProgress, UnitGrads,
    ADAPTER_FORMAT_VERSION,
};
pub use decode::{
    build_context, decode_greedy, decode_greedy_from_context, teacher_forced, DecodeOutput,
};
pub use forward::{backward, forward, forward_with_tape, ForwardTrace, Tape};
pub use quant::{quantize_roundtrip, QuantizedWeights};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 128,
            max_seq: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.ff_dim == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Frozen per-layer weights; each projection is stored as (out x in).
#[derive(Debug, Clone)]
pub struct LayerWeights<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub w1: Matrix<S>, // ff x d
    pub w2: Matrix<S>, // d x ff
}

#[derive(Debug, Clone)]
pub struct ToyTransformer<S> {
    cfg: ModelConfig,
    embed: EmbeddingTable<S>,
    pos: Matrix<S>,
    layers: Vec<LayerWeights<S>>,
    w_out: Matrix<S>, // V x d
    quantized: bool,
}

impl<S: Scalar> ToyTransformer<S> {
    pub fn seeded(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut gauss = |rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cast::<S>(z * std)
            })
        };
        let embed_mat = gauss(cfg.vocab_size, cfg.d_model);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: gauss(cfg.d_model, cfg.d_model),
                wk: gauss(cfg.d_model, cfg.d_model),
                wv: gauss(cfg.d_model, cfg.d_model),
                wo: gauss(cfg.d_model, cfg.d_model),
                w1: gauss(cfg.ff_dim, cfg.d_model),
                w2: gauss(cfg.d_model, cfg.ff_dim),
            })
            .collect();
        let w_out = gauss(cfg.vocab_size, cfg.d_model);
        let pos = sinusoidal_positions(cfg.max_seq, cfg.d_model);
        Ok(ToyTransformer {
            cfg,
            embed: EmbeddingTable::from_matrix(embed_mat),
            pos,
            layers,
            w_out,
            quantized: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> &EmbeddingTable<S> {
        &self.embed
    }

    pub fn layers(&self) -> &[LayerWeights<S>] {
        &self.layers
    }

    pub fn positions(&self) -> &Matrix<S> {
        &self.pos
    }

    pub fn output_head(&self) -> &Matrix<S> {
        &self.w_out
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    /// Content hash of every frozen matrix; unchanged across adapter
    /// training by construction.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for dim in [
            self.cfg.vocab_size,
            self.cfg.d_model,
            self.cfg.n_layers,
            self.cfg.n_heads,
            self.cfg.ff_dim,
            self.cfg.max_seq,
        ] {
            h.update((dim as u64).to_le_bytes());
        }
        h.update(self.cfg.seed.to_le_bytes());
        let mut feed = |m: &Matrix<S>| {
            for &v in m.data() {
                h.update(to_f64(v).to_bits().to_le_bytes());
            }
        };
        feed(self.embed.matrix());
        feed(&self.pos);
        for layer in &self.layers {
            for m in [&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2] {
                feed(m);
            }
        }
        feed(&self.w_out);
        format!("{:x}", h.finalize())
    }

    /// Short identifier binding checkpoints to this base model.
    pub fn fingerprint(&self) -> String {
        self.base_hash()[..16].to_string()
    }

    /// Replaces every frozen weight matrix with its block-quantized
    /// round-trip; adapters stay full precision. Returns the quantization
    /// metadata per matrix in a fixed order (embeddings, per-layer
    /// q/k/v/o/ff1/ff2, output head).
    pub fn quantize_base(&mut self, bits: u8, block_size: usize) -> Result<Vec<QuantizedWeights<S>>> {
        let mut reports = Vec::new();
        let mut run = |m: &mut Matrix<S>| -> Result<()> {
            let (qw, dequant) = quantize_roundtrip(m, bits, block_size)?;
            *m = dequant;
            reports.push(qw);
            Ok(())
        };
        let mut embed_mat = self.embed.matrix().clone();
        run(&mut embed_mat)?;
        self.embed = EmbeddingTable::from_matrix(embed_mat);
        for layer in &mut self.layers {
            for m in [
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.w1,
                &mut layer.w2,
            ] {
                run(m)?;
            }
        }
        run(&mut self.w_out)?;
        self.quantized = true;
        Ok(reports)
    }
}

fn sinusoidal_positions<S: Scalar>(max_seq: usize, d_model: usize) -> Matrix<S> {
    Matrix::from_fn(max_seq, d_model, |t, i| {
        let rate = (10_000f64).powf((2 * (i / 2)) as f64 / d_model as f64);
        let angle = t as f64 / rate;
        cast(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
