//! BiasLens: representation-based bias evaluation for layerwise language models.
//!
//! The library measures bias as asymmetric alignment in a model's concept space.
//! For a target concept (say, an occupation) and a pair of reference concepts
//! (say, two genders), it derives a concept activation vector (CAV) per layer
//! from a probing corpus, steers the model's activations along those CAVs,
//! projects the paired (unsteered, steered) final-layer activations into a
//! sparse autoencoder feature space, and scores bias as the absolute difference
//! between the target's cosine alignment with each reference.
//!
//! Alongside the representation pipeline, [`behavioral`] implements the usual
//! behavioral baselines (F1 gap, equal-opportunity difference, individual and
//! group fairness, SEAT, perplexity test) and a Spearman correlation harness
//! for comparing any two bias metrics over a shared concept set.
//!
//! Modules:
//! - [`numerics`]: vector algebra and statistics shared by everything else
//! - [`model`]: the layerwise-model abstraction, a deterministic toy model,
//!   and a newline-delimited JSON bridge to external model hosts
//! - [`probe`]: probe-corpus construction and activation extraction
//! - [`cav`]: per-layer logistic probes and CAV derivation
//! - [`steering`]: iterative per-layer activation shifts along CAVs
//! - [`sae`]: sparse-autoencoder encoding and concept-vector extraction
//! - [`bias`]: the cosine-asymmetry bias score and grid assembly
//! - [`pipeline`]: end-to-end orchestration with persisted, hash-tracked stages
//! - [`behavioral`]: baseline bias metrics and the correlation harness


pub mod behavioral;
pub mod bias;
pub mod cav;
pub mod hash;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sae;
pub mod steering;
