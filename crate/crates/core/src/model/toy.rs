//! A deterministic toy language model: a desk-scale stand-in for a real
//! transformer with the same layerwise shape.
//!
//! Each layer is a residual two-matrix MLP, a^(l+1) = a^(l) + g·W2·tanh(W1·a^(l)),
//! with the gain g chosen so the residual branch has an estimated Lipschitz
//! constant of at most 0.9. tanh saturation then bounds how much any single
//! layer can move an activation, which keeps steering from blowing norms up.
//! Token embeddings are derived on the fly from a keyed hash, so identical
//! (seed, n_layers, hidden_dim) always reproduce bit-identical outputs.

use super::{LayerwiseModel, ModelError, ModelInfo};
use crate::hash::fnv1a;
use crate::numerics::Vector;
use crate::rng::SplitMix64;

/// Weight decay per step backwards from the final token, so the last token
/// dominates the summary the way a last-token readout would.
const POSITION_DECAY: f64 = 0.9;

#[derive(Debug, Clone)]
struct ToyLayer {
    w1: Vec<f64>, // row-major D×D
    w2: Vec<f64>,
    gain: f64,
}

impl ToyLayer {
    fn apply(&self, a: &[f64], dim: usize) -> Vec<f64> {
        let mut hidden = vec![0.0; dim];
        matvec(&self.w1, a, &mut hidden, dim);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut out = vec![0.0; dim];
        matvec(&self.w2, &hidden, &mut out, dim);
        let mut result = a.to_vec();
        for (r, o) in result.iter_mut().zip(&out) {
            *r += self.gain * o;
        }
        result
    }
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64], dim: usize) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * dim..(i + 1) * dim];
        *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
    }
}

/// Power-iteration estimate of the spectral norm of a D×D matrix.
fn spectral_norm(m: &[f64], dim: usize) -> f64 {
    // Deterministic, slightly perturbed start vector.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + i as f64 * 1e-3).collect();
    let mut mv = vec![0.0; dim];
    let mut mtmv = vec![0.0; dim];
    for _ in 0..60 {
        matvec(m, &v, &mut mv, dim);
        // multiply by transpose
        for x in mtmv.iter_mut() {
            *x = 0.0;
        }
        for i in 0..dim {
            let row = &m[i * dim..(i + 1) * dim];
            for (j, x) in mtmv.iter_mut().enumerate() {
                *x += row[j] * mv[i];
            }
        }
        let norm = mtmv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for (a, b) in v.iter_mut().zip(&mtmv) {
            *a = b / norm;
        }
    }
    matvec(m, &v, &mut mv, dim);
    mv.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deterministic seeded toy model.
pub struct ToyLm {
    seed: u64,
    info: ModelInfo,
    layers: Vec<ToyLayer>,
}

impl ToyLm {
    /// Build a model with `n_layers >= 1` layers and `hidden_dim >= 2`.
    pub fn new(seed: u64, n_layers: usize, hidden_dim: usize) -> Result<Self, ModelError> {
        if n_layers < 1 {
            return Err(ModelError::InvalidShape("n_layers must be >= 1".into()));
        }
        if hidden_dim < 2 {
            return Err(ModelError::InvalidShape("hidden_dim must be >= 2".into()));
        }
        let info = ModelInfo::new(
            n_layers,
            hidden_dim,
            format!("toy-s{seed}-l{n_layers}-d{hidden_dim}"),
        )?;
        let mut master = SplitMix64::new(seed);
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let layers = (0..n_layers)
            .map(|i| {
                let mut rng = master.fork(i as u64);
                let w1: Vec<f64> = (0..hidden_dim * hidden_dim)
                    .map(|_| rng.next_normal() * scale)
                    .collect();
                let w2: Vec<f64> = (0..hidden_dim * hidden_dim)
                    .map(|_| rng.next_normal() * scale)
                    .collect();
                let s1 = spectral_norm(&w1, hidden_dim).max(1e-6);
                let s2 = spectral_norm(&w2, hidden_dim).max(1e-6);
                ToyLayer {
                    w1,
                    w2,
                    gain: 0.9 / (s1 * s2),
                }
            })
            .collect();
        Ok(Self { seed, info, layers })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Embedding row for one token, derived from a keyed hash of its bytes.
    fn token_embedding(&self, token: &str) -> Vec<f64> {
        let key = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ fnv1a(token.as_bytes());
        let mut rng = SplitMix64::new(key);
        let scale = 1.0 / (self.info.hidden_dim as f64).sqrt();
        (0..self.info.hidden_dim)
            .map(|_| rng.next_normal() * scale)
            .collect()
    }
}

impl LayerwiseModel for ToyLm {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn encode(&self, text: &str) -> Result<Vector, ModelError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let dim = self.info.hidden_dim;
        let n = tokens.len();
        let mut summed = vec![0.0; dim];
        for (i, token) in tokens.iter().enumerate() {
            let weight = POSITION_DECAY.powi((n - 1 - i) as i32);
            let emb = self.token_embedding(token);
            for (s, e) in summed.iter_mut().zip(&emb) {
                *s += weight * e;
            }
        }
        // The layer-1 block maps the raw embedding to a^(1).
        let a1 = self.layers[0].apply(&summed, dim);
        Ok(Vector::new(a1).expect("toy activations are finite"))
    }

    fn layer_forward(&self, layer: usize, activation: &Vector) -> Result<Vector, ModelError> {
        let max = self.info.n_layers - 1;
        if layer < 1 || layer > max {
            return Err(ModelError::LayerOutOfRange { layer, max });
        }
        if activation.dim() != self.info.hidden_dim {
            return Err(ModelError::DimensionMismatch {
                got: activation.dim(),
                want: self.info.hidden_dim,
            });
        }
        let out = self.layers[layer].apply(activation.as_slice(), self.info.hidden_dim);
        Ok(Vector::new(out).expect("toy activations are finite"))
    }
}
