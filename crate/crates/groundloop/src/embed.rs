//! Seed-initialized Gaussian token embeddings, shared between the language
//! model, dense retrieval, and the detection features.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, mean_rows, Matrix};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone)]
pub struct EmbeddingTable<S> {
    table: Matrix<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Gaussian init with standard deviation `1/sqrt(dim)`.
    pub fn seeded(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let table = Matrix::from_fn(vocab, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cast(z * std)
        });
        EmbeddingTable { table }
    }

    pub fn from_matrix(table: Matrix<S>) -> Self {
        EmbeddingTable { table }
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, token: u32) -> &[S] {
        self.table.row(token as usize)
    }

    pub fn matrix(&self) -> &Matrix<S> {
        &self.table
    }

    /// L2-normalized mean of the token rows; order-invariant by construction.
    pub fn pooled_unit(&self, tokens: &[u32]) -> Result<Vec<S>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("tokens to embed"));
        }
        for &t in tokens {
            if t as usize >= self.vocab() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.vocab(),
                });
            }
        }
        let rows: Vec<&[S]> = tokens.iter().map(|&t| self.row(t)).collect();
        let mut mean = mean_rows(&rows);
        let norm = l2_norm(&mean);
        if norm == S::zero() {
            return Err(Error::InvalidArgument("zero-norm pooled embedding".into()));
        }
        for v in &mut mean {
            *v /= norm;
        }
        Ok(mean)
    }

    /// Mean of token rows without normalization (detection features).
    pub fn pooled_mean(&self, tokens: &[u32]) -> Result<Vec<S>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("tokens to embed"));
        }
        let rows: Vec<&[S]> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.vocab() {
                    Ok(self.row(t))
                } else {
                    Err(Error::TokenOutOfRange {
                        id: t,
                        vocab: self.vocab(),
                    })
                }
            })
            .collect::<Result<_>>()?;
        Ok(mean_rows(&rows))
    }
}
