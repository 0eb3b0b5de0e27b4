//! Low-rank adapter stack: the only trainable generation parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{cast, Scalar};

use super::{ModelConfig, ToyTransformer};

pub const ADAPTER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Conventional `alpha / r` scaling (default).
    AlphaOverR,
    /// Literal `alpha` scaling.
    Alpha,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub lora_alpha: f64,
    pub scale_mode: ScaleMode,
    pub dora: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            lora_alpha: 16.0,
            scale_mode: ScaleMode::AlphaOverR,
            dora: false,
        }
    }
}

/// One adapted target matrix. `a` is (r x k), `b` is (d x r); `b` starts at
/// zero so the composed weight equals the frozen weight exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterUnit<S> {
    pub a: Matrix<S>,
    pub b: Matrix<S>,
    pub rank: usize,
    pub lora_alpha: f64,
    pub scale_mode: ScaleMode,
    /// Per-column magnitudes; present iff this unit composes in
    /// direction-normalized mode.
    pub magnitude: Option<Vec<S>>,
}

impl<S: Scalar> AdapterUnit<S> {
    pub fn scale(&self) -> S {
        match self.scale_mode {
            ScaleMode::AlphaOverR => cast(self.lora_alpha / self.rank as f64),
            ScaleMode::Alpha => cast(self.lora_alpha),
        }
    }

    pub fn is_dora(&self) -> bool {
        self.magnitude.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAdapters<S> {
    pub q: AdapterUnit<S>,
    pub v: AdapterUnit<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraAdapterStack<S> {
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapters<S>>,
}

impl<S: Scalar> LoraAdapterStack<S> {
    /// Fresh stack: `A ~ N(0, 0.01^2)`, `B = 0`; in direction-normalized
    /// mode each magnitude starts at the column norms of the frozen target,
    /// so the composed weight reproduces it exactly.
    pub fn seeded(model: &ToyTransformer<S>, config: AdapterConfig, seed: u64) -> Result<Self> {
        let d = model.config().d_model;
        if config.rank == 0 || config.rank >= d {
            return Err(Error::Config(format!(
                "adapter rank {} must be in 1..{d}",
                config.rank
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut unit = |w: &Matrix<S>| {
            let a = Matrix::from_fn(config.rank, d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cast::<S>(z * 0.01)
            });
            let magnitude = config
                .dora
                .then(|| (0..w.cols()).map(|c| w.col_norm(c)).collect());
            AdapterUnit {
                a,
                b: Matrix::zeros(d, config.rank),
                rank: config.rank,
                lora_alpha: config.lora_alpha,
                scale_mode: config.scale_mode,
                magnitude,
            }
        };
        let layers = model
            .layers()
            .iter()
            .map(|lw| LayerAdapters {
                q: unit(&lw.wq),
                v: unit(&lw.wv),
            })
            .collect();
        Ok(LoraAdapterStack { config, layers })
    }

    pub fn units(&self) -> impl Iterator<Item = &AdapterUnit<S>> {
        self.layers.iter().flat_map(|l| [&l.q, &l.v])
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut AdapterUnit<S>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.q, &mut l.v])
    }

    pub fn n_units(&self) -> usize {
        self.layers.len() * 2
    }

    /// Total trainable parameter count.
    pub fn n_params(&self) -> usize {
        self.units()
            .map(|u| {
                u.a.rows() * u.a.cols()
                    + u.b.rows() * u.b.cols()
                    + u.magnitude.as_ref().map_or(0, Vec::len)
            })
            .sum()
    }
}

/// Per-unit gradients, shaped exactly like the unit parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitGrads<S> {
    pub da: Matrix<S>,
    pub db: Matrix<S>,
    pub dmag: Option<Vec<S>>,
}

impl<S: Scalar> UnitGrads<S> {
    pub fn zeros_like(unit: &AdapterUnit<S>) -> Self {
        UnitGrads {
            da: Matrix::zeros(unit.a.rows(), unit.a.cols()),
            db: Matrix::zeros(unit.b.rows(), unit.b.cols()),
            dmag: unit.magnitude.as_ref().map(|m| vec![S::zero(); m.len()]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterGrads<S> {
    pub units: Vec<UnitGrads<S>>,
}

impl<S: Scalar> AdapterGrads<S> {
    pub fn zeros_like(stack: &LoraAdapterStack<S>) -> Self {
        AdapterGrads {
            units: stack.units().map(UnitGrads::zeros_like).collect(),
        }
    }
}

/// `W h + scale * B (A h)`; the low-rank product `BA` is never materialized.
pub fn lora_apply<S: Scalar>(
    h: &[S],
    w: &Matrix<S>,
    a: &Matrix<S>,
    b: &Matrix<S>,
    scale: S,
) -> Result<Vec<S>> {
    let (d, k, r) = (w.rows(), w.cols(), a.rows());
    if h.len() != k || a.cols() != k || b.rows() != d || b.cols() != r {
        return Err(Error::DimMismatch(format!(
            "lora_apply: W {d}x{k}, A {}x{}, B {}x{}, h {}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            h.len()
        )));
    }
    let mut out = vec![S::zero(); d];
    for row in 0..d {
        out[row] = crate::linalg::dot(w.row(row), h);
    }
    if scale != S::zero() {
        let mut ah = vec![S::zero(); r];
        for row in 0..r {
            ah[row] = crate::linalg::dot(a.row(row), h);
        }
        for row in 0..d {
            out[row] += scale * crate::linalg::dot(b.row(row), &ah);
        }
    }
    Ok(out)
}

/// Composition internals shared with the backward pass: returns
/// `(W + BA, column norms, composed)`.
pub(crate) fn dora_parts<S: Scalar>(
    w: &Matrix<S>,
    a: &Matrix<S>,
    b: &Matrix<S>,
    magnitude: &[S],
) -> Result<(Matrix<S>, Vec<S>, Matrix<S>)> {
    let (d, k) = (w.rows(), w.cols());
    if a.cols() != k || b.rows() != d || b.cols() != a.rows() || magnitude.len() != k {
        return Err(Error::DimMismatch(format!(
            "dora_compose: W {d}x{k}, A {}x{}, B {}x{}, magnitude {}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            magnitude.len()
        )));
    }
    if magnitude.iter().any(|&m| m <= S::zero()) {
        return Err(Error::InvalidArgument(
            "dora magnitudes must be strictly positive".into(),
        ));
    }
    let mut v = w.clone();
    if !b.is_zero() {
        let ba = b.matmul(a);
        v.add_scaled(&ba, S::one());
    }
    let mut norms = Vec::with_capacity(k);
    let mut composed = Matrix::zeros(d, k);
    for c in 0..k {
        let norm = v.col_norm(c);
        if norm == S::zero() {
            return Err(Error::InvalidArgument(format!(
                "zero column {c} in W + BA: direction undefined"
            )));
        }
        let factor = magnitude[c] / norm;
        for r in 0..d {
            composed.set(r, c, v.get(r, c) * factor);
        }
        norms.push(norm);
    }
    Ok((v, norms, composed))
}

/// `magnitude (col-wise) * column_normalize(W + BA)`; errors on a zero column
/// (undefined direction) or a non-positive magnitude.
pub fn dora_compose<S: Scalar>(
    w: &Matrix<S>,
    a: &Matrix<S>,
    b: &Matrix<S>,
    magnitude: &[S],
) -> Result<Matrix<S>> {
    dora_parts(w, a, b, magnitude).map(|(_, _, composed)| composed)
}

/// Adapters activate iff `p_hall` strictly exceeds the threshold.
pub fn adapter_gate(p_hall: f64, tau: f64) -> bool {
    p_hall > tau
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: usize,
    pub example_idx: usize,
    pub update_steps: u64,
    pub examples_seen: u64,
}

/// Versioned adapter checkpoint bound to a base-model fingerprint. The
/// optional optimizer section makes interrupted training resumable with an
/// identical subsequent trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterCheckpoint<S> {
    pub format_version: u32,
    pub model_fingerprint: String,
    pub config: AdapterConfig,
    pub targets: Vec<String>,
    pub layers: Vec<LayerAdapters<S>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<TrainProgress>,
}

impl<S: Scalar> AdapterCheckpoint<S> {
    pub fn new(stack: &LoraAdapterStack<S>, model_fingerprint: String) -> Self {
        let targets = (0..stack.layers.len())
            .flat_map(|l| [format!("layer{l}.q"), format!("layer{l}.v")])
            .collect();
        AdapterCheckpoint {
            format_version: ADAPTER_FORMAT_VERSION,
            model_fingerprint,
            config: stack.config.clone(),
            targets,
            layers: stack.layers.clone(),
            optimizer: None,
            progress: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: AdapterCheckpoint<S> = serde_json::from_str(&json)?;
        if ckpt.format_version != ADAPTER_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: ADAPTER_FORMAT_VERSION,
                found: ckpt.format_version,
            });
        }
        Ok(ckpt)
    }

    /// Rebuilds the stack, refusing a checkpoint written against a different
    /// base model.
    pub fn into_stack(self, expected_fingerprint: &str) -> Result<LoraAdapterStack<S>> {
        if self.model_fingerprint != expected_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: expected_fingerprint.to_string(),
                found: self.model_fingerprint,
            });
        }
        Ok(LoraAdapterStack {
            config: self.config,
            layers: self.layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_apply_zero_cases() {
        let w = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = Matrix::from_rows(vec![vec![1.0, 0.0]]);
        let b_zero = Matrix::zeros(2, 1);
        let h = [1.0, 0.0];
        assert_eq!(lora_apply(&h, &w, &a, &b_zero, 2.0).unwrap(), vec![1.0, 0.0]);

        let b = Matrix::from_rows(vec![vec![0.0], vec![1.0]]);
        assert_eq!(lora_apply(&h, &w, &a, &b, 0.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn lora_apply_hand_example() {
        // d=k=2, r=1, W=I, A=[1 0], B=[0;1], scale=2, h=(1,0):
        // Wh = (1,0); Ah = 1; BAh = (0,1); out = (1, 2)
        let w = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = Matrix::from_rows(vec![vec![1.0, 0.0]]);
        let b = Matrix::from_rows(vec![vec![0.0], vec![1.0]]);
        let out = lora_apply(&[1.0, 0.0], &w, &a, &b, 2.0).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn lora_apply_shape_mismatch() {
        let w = Matrix::<f64>::zeros(2, 2);
        let a = Matrix::<f64>::zeros(1, 3);
        let b = Matrix::<f64>::zeros(2, 1);
        assert!(lora_apply(&[1.0, 0.0], &w, &a, &b, 1.0).is_err());
    }

    #[test]
    fn lora_apply_matches_materialized_product() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (d, k, r) = (
                rng.random_range(2..6),
                rng.random_range(2..6),
                rng.random_range(1..2),
            );
            let mut rnd = |rows, cols| {
                Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
            };
            let w = rnd(d, k);
            let a = rnd(r, k);
            let b = rnd(d, r);
            let h: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale = 1.5;
            let fast = lora_apply(&h, &w, &a, &b, scale).unwrap();
            // explicit (W + scale BA) h
            let mut full = w.clone();
            full.add_scaled(&b.matmul(&a), scale);
            let slow = lora_apply(&h, &full, &a, &Matrix::zeros(d, r), 0.0).unwrap();
            for (x, y) in fast.iter().zip(&slow) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_is_strict() {
        assert!(adapter_gate(0.71, 0.7));
        assert!(!adapter_gate(0.70, 0.7));
        assert!(!adapter_gate(0.2, 0.7));
    }

    #[test]
    fn dora_identity_configuration_reproduces_w() {
        let w = Matrix::from_rows(vec![vec![3.0, 0.0], vec![4.0, 2.0]]);
        let a = Matrix::from_rows(vec![vec![0.1, 0.2]]);
        let b = Matrix::zeros(2, 1);
        let mags = vec![w.col_norm(0), w.col_norm(1)];
        let composed = dora_compose(&w, &a, &b, &mags).unwrap();
        for (x, y) in composed.data().iter().zip(w.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn dora_column_norms_equal_magnitudes() {
        let w = Matrix::from_rows(vec![vec![1.0, -2.0], vec![0.5, 1.0]]);
        let a = Matrix::from_rows(vec![vec![0.3, -0.4]]);
        let b = Matrix::from_rows(vec![vec![0.7], vec![-0.2]]);
        let mags = vec![2.5, 0.75];
        let composed = dora_compose(&w, &a, &b, &mags).unwrap();
        for (c, &m) in mags.iter().enumerate() {
            assert!((composed.col_norm(c) - m).abs() < 1e-6);
        }
    }

    #[test]
    fn dora_hand_example() {
        // W + BA = [[1,0],[0,1]] + [1;1][1 1] = [[2,1],[1,2]]
        // col norms sqrt(5); magnitudes (1, 2)
        let w = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = Matrix::from_rows(vec![vec![1.0, 1.0]]);
        let b = Matrix::from_rows(vec![vec![1.0], vec![1.0]]);
        let composed = dora_compose(&w, &a, &b, &[1.0, 2.0]).unwrap();
        let s5 = 5f64.sqrt();
        let want = [2.0 / s5, 2.0 / s5, 1.0 / s5, 4.0 / s5];
        for (x, y) in composed.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dora_rejects_degenerate_inputs() {
        let w = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let a = Matrix::from_rows(vec![vec![0.0, 0.0]]);
        let b = Matrix::zeros(2, 1);
        assert!(dora_compose(&w, &a, &b, &[1.0, 1.0]).is_err()); // zero column
        let w_ok = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(dora_compose(&w_ok, &a, &b, &[1.0, 0.0]).is_err()); // magnitude <= 0
    }

    #[test]
    fn checkpoint_roundtrip_and_fingerprint_guard() {
        let model: ToyTransformer<f64> =
            ToyTransformer::seeded(ModelConfig::default()).unwrap();
        let stack = LoraAdapterStack::seeded(&model, AdapterConfig::default(), 9).unwrap();
        let ckpt = AdapterCheckpoint::new(&stack, model.fingerprint());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.json");
        ckpt.save(&path).unwrap();

        let loaded = AdapterCheckpoint::<f64>::load(&path).unwrap();
        assert_eq!(loaded.targets.len(), stack.n_units());
        let restored = loaded.into_stack(&model.fingerprint()).unwrap();
        assert_eq!(restored.n_params(), stack.n_params());

        let loaded = AdapterCheckpoint::<f64>::load(&path).unwrap();
        assert!(matches!(
            loaded.into_stack("deadbeef"),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
