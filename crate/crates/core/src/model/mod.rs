//! The layerwise-model abstraction that activations are extracted from and
//! steering is performed on.
//!
//! A [`LayerwiseModel`] exposes the last-token activation after layer 1
//! (`encode`) and the per-layer transition maps (`layer_forward`); chaining
//! them yields one activation per layer. Two implementations ship here: a
//! deterministic in-process [`toy::ToyLm`] for desk-scale work, and
//! [`bridge::BridgeModel`], which speaks a newline-delimited JSON protocol to
//! an external model host over child-process stdio or TCP.

pub mod bridge;
pub mod toy;

use crate::numerics::Vector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("empty input text")]
    EmptyText,
    #[error("layer index {layer} out of range (transitions 1..={max})")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("activation has dimension {got}, model expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("model does not support {0}")]
    Unsupported(&'static str),
    #[error("bridge connection failed: {0}")]
    Connection(String),
    #[error("bridge protocol violation: {0}")]
    Protocol(String),
    #[error("bridge peer reported error: {0}")]
    Peer(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Static description of a layerwise model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub name: String,
}

impl ModelInfo {
    pub fn new(
        n_layers: usize,
        hidden_dim: usize,
        name: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if n_layers == 0 {
            return Err(ModelError::InvalidShape("n_layers must be >= 1".into()));
        }
        if hidden_dim == 0 {
            return Err(ModelError::InvalidShape("hidden_dim must be >= 1".into()));
        }
        Ok(Self {
            n_layers,
            hidden_dim,
            name: name.into(),
        })
    }
}

/// A model seen as a chain of per-layer maps over the last-token activation.
///
/// `encode` produces the layer-1 activation for a text; `layer_forward(l, a)`
/// maps the layer-l activation to layer l+1 (valid l: 1..=n_layers−1,
/// 1-based). Implementations must be deterministic for a fixed instance.
pub trait LayerwiseModel: Send + Sync {
    fn info(&self) -> &ModelInfo;

    /// Last-token activation after layer 1.
    fn encode(&self, text: &str) -> Result<Vector, ModelError>;

    /// Activation transition from layer `layer` to `layer + 1` (1-based).
    fn layer_forward(&self, layer: usize, activation: &Vector) -> Result<Vector, ModelError>;

    /// Per-token log probabilities of `continuation` given `prompt`.
    /// Optional capability; only the perplexity test needs it.
    fn token_logprobs(&self, _prompt: &str, _continuation: &str) -> Result<Vec<f64>, ModelError> {
        Err(ModelError::Unsupported("token_logprobs"))
    }

    /// One activation per layer: element 0 is `encode(text)`, element l is
    /// obtained by chaining `layer_forward`.
    fn forward_all(&self, text: &str) -> Result<Vec<Vector>, ModelError> {
        let info = self.info();
        let mut activations = Vec::with_capacity(info.n_layers);
        let mut current = self.encode(text)?;
        for layer in 1..info.n_layers {
            let next = self.layer_forward(layer, &current)?;
            activations.push(std::mem::replace(&mut current, next));
        }
        activations.push(current);
        Ok(activations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_info_validates_shape() {
        assert!(ModelInfo::new(0, 16, "m").is_err());
        assert!(ModelInfo::new(4, 0, "m").is_err());
        let info = ModelInfo::new(4, 16, "m").unwrap();
        assert_eq!(info.n_layers, 4);
        assert_eq!(info.hidden_dim, 16);
    }
}
