//! Sparse-autoencoder encoding and concept-vector extraction.
//!
//! Only the encoder side of an SAE is used: z = φ(W·a + b) with a JumpReLU φ
//! that passes pre-activations above a per-feature threshold unchanged and
//! zeroes the rest. A concept is represented by the difference of the
//! L2-normalized codes of the steered and unsteered final-layer activations;
//! normalizing first makes the representation invariant to how far steering
//! moved the activation, which the cosine comparison downstream relies on.

use crate::hash::fnv1a;
use crate::io::{self, FormatError};
use crate::numerics::{self, NumericsError, Vector};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const SAE_MAGIC: &[u8; 4] = b"BLSA";
const SAE_VERSION: u16 = 1;

/// Default thresholds used by the synthetic generator: planted rows answer
/// strongly to the concept direction, so they get a high bar; background rows
/// keep a small positive bar so exact-zero pre-activations stay silent.
const SYNTH_RELEVANT_THETA: f32 = 0.5;
const SYNTH_BACKGROUND_THETA: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("invalid SAE: {0}")]
    Invalid(String),
    #[error("input has dimension {got}, encoder expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("SAE produced an all-zero code for {side}")]
    ZeroCode { side: &'static str },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Overcomplete linear encoder with per-feature JumpReLU thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeEncoder {
    k: usize,
    d: usize,
    w: Vec<f32>, // row-major k×d
    b: Vec<f32>,
    theta: Vec<f32>,
}

impl SaeEncoder {
    pub fn new(
        k: usize,
        d: usize,
        w: Vec<f32>,
        b: Vec<f32>,
        theta: Vec<f32>,
    ) -> Result<Self, SaeError> {
        if d == 0 || k <= d {
            return Err(SaeError::Invalid(format!(
                "encoder must be overcomplete: k={k}, d={d}"
            )));
        }
        if w.len() != k * d {
            return Err(SaeError::Invalid(format!(
                "weight matrix has {} entries, expected {}",
                w.len(),
                k * d
            )));
        }
        if b.len() != k || theta.len() != k {
            return Err(SaeError::Invalid(format!(
                "bias/threshold lengths {}/{} do not match k={k}",
                b.len(),
                theta.len()
            )));
        }
        if let Some(i) = w
            .iter()
            .chain(&b)
            .chain(&theta)
            .position(|v| !v.is_finite())
        {
            return Err(SaeError::Invalid(format!("non-finite entry at {i}")));
        }
        if let Some(i) = theta.iter().position(|&t| t < 0.0) {
            return Err(SaeError::Invalid(format!(
                "threshold {i} is negative ({})",
                theta[i]
            )));
        }
        Ok(Self { k, d, w, b, theta })
    }

    pub fn feature_count(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    /// z_i = h_i if h_i > θ_i else 0, with h = W·a + b accumulated in f64.
    pub fn encode(&self, a: &Vector) -> Result<Vector, SaeError> {
        if a.dim() != self.d {
            return Err(SaeError::DimensionMismatch {
                got: a.dim(),
                want: self.d,
            });
        }
        let x = a.as_slice();
        let mut z = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let row = &self.w[i * self.d..(i + 1) * self.d];
            let mut h = f64::from(self.b[i]);
            for (w, v) in row.iter().zip(x) {
                h += f64::from(*w) * v;
            }
            z.push(if h > f64::from(self.theta[i]) { h } else { 0.0 });
        }
        Ok(Vector::new(z)?)
    }

    /// Serialize to the SAE weight format (magic `BLSA`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(14 + 4 * (self.k * self.d + 2 * self.k) + 8);
        bytes.extend_from_slice(SAE_MAGIC);
        bytes.extend_from_slice(&SAE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.k as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in self.w.iter().chain(&self.b).chain(&self.theta) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        io::seal(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SaeError> {
        let payload = io::open_frame(bytes, SAE_MAGIC, SAE_VERSION, |p| {
            let k = u64::from(io::peek_u32(p, 0, "k")?);
            let d = u64::from(io::peek_u32(p, 4, "d")?);
            Ok(8 + 4 * (k * d + 2 * k))
        })?;
        let mut c = io::Cursor::new(payload);
        let k = c.u32("k")? as usize;
        let d = c.u32("d")? as usize;
        let w = c.f32_vec(k * d, "weights")?;
        let b = c.f32_vec(k, "biases")?;
        let theta = c.f32_vec(k, "thresholds")?;
        Self::new(k, d, w, b, theta)
    }

    pub fn save(&self, path: &Path) -> Result<(), SaeError> {
        std::fs::write(path, self.to_bytes()).map_err(FormatError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SaeError> {
        let bytes = std::fs::read(path).map_err(FormatError::Io)?;
        Self::from_bytes(&bytes)
    }

    /// Content hash of the serialized encoder, used as provenance.
    pub fn content_hash(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

/// Identifies the model, prompt, CAV stack and SAE a concept vector came
/// from. Vectors are comparable when model, prompt and SAE agree; the CAV
/// hash identifies the concept itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptProvenance {
    pub model: String,
    pub prompt_hash: u64,
    pub cav_hash: u64,
    pub sae_hash: u64,
}

impl ConceptProvenance {
    pub fn comparable(&self, other: &Self) -> bool {
        self.model == other.model
            && self.prompt_hash == other.prompt_hash
            && self.sae_hash == other.sae_hash
    }
}

/// Normalized-difference concept representation in SAE feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub concept: String,
    values: Vector,
    pub provenance: ConceptProvenance,
}

impl ConceptVector {
    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }
}

/// C = Norm(z_steer) − Norm(z_ori). Errors name the side whose code is zero.
pub fn concept_vector(
    concept: impl Into<String>,
    z_ori: &Vector,
    z_steer: &Vector,
    provenance: ConceptProvenance,
) -> Result<ConceptVector, SaeError> {
    if z_ori.dim() != z_steer.dim() {
        return Err(SaeError::DimensionMismatch {
            got: z_steer.dim(),
            want: z_ori.dim(),
        });
    }
    let norm_ori = match numerics::l2_normalize(z_ori) {
        Ok(v) => v,
        Err(NumericsError::ZeroNorm) => return Err(SaeError::ZeroCode { side: "z_ori" }),
        Err(e) => return Err(e.into()),
    };
    let norm_steer = match numerics::l2_normalize(z_steer) {
        Ok(v) => v,
        Err(NumericsError::ZeroNorm) => return Err(SaeError::ZeroCode { side: "z_steer" }),
        Err(e) => return Err(e.into()),
    };
    Ok(ConceptVector {
        concept: concept.into(),
        values: norm_steer.sub(&norm_ori)?,
        provenance,
    })
}

/// Salience AUCs for the four encoding variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SalienceVariants {
    /// (i) unsteered code z_ori
    pub original: f64,
    /// (ii) steered code z_steer
    pub steered: f64,
    /// (iii) z_steer − z_ori
    pub difference: f64,
    /// (iv) Norm(z_steer) − Norm(z_ori)
    pub normalized_difference: f64,
}

/// How prominently the `relevant` dimensions rank in each encoding variant.
pub fn salience_variants(
    z_ori: &Vector,
    z_steer: &Vector,
    relevant: &[bool],
) -> Result<SalienceVariants, SaeError> {
    if z_ori.dim() != z_steer.dim() {
        return Err(SaeError::DimensionMismatch {
            got: z_steer.dim(),
            want: z_ori.dim(),
        });
    }
    let difference = z_steer.sub(z_ori)?;
    let normalized_difference = concept_vector(
        "",
        z_ori,
        z_steer,
        ConceptProvenance::default(),
    )?;
    Ok(SalienceVariants {
        original: numerics::salience_auc(z_ori, relevant)?,
        steered: numerics::salience_auc(z_steer, relevant)?,
        difference: numerics::salience_auc(&difference, relevant)?,
        normalized_difference: numerics::salience_auc(
            normalized_difference.values(),
            relevant,
        )?,
    })
}

/// Build a synthetic SAE with `n_relevant` feature rows planted nearly
/// parallel to a hidden concept direction; background rows are orthogonalized
/// against it. Returns the encoder, the ground-truth relevance mask, and the
/// concept direction itself (unit norm, in input space).
pub fn generate_synthetic_sae(
    seed: u64,
    k: usize,
    d: usize,
    n_relevant: usize,
) -> Result<(SaeEncoder, Vec<bool>, Vector), SaeError> {
    if d < 2 || k <= d {
        return Err(SaeError::Invalid(format!(
            "need k > d >= 2, got k={k}, d={d}"
        )));
    }
    if n_relevant == 0 {
        return Err(SaeError::Invalid(
            "n_relevant must be >= 1 (the relevance mask may not be empty)".into(),
        ));
    }
    if n_relevant > k {
        return Err(SaeError::Invalid(format!(
            "n_relevant {n_relevant} exceeds feature count {k}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let concept = random_unit(&mut rng.fork(1), d);

    let mut positions: Vec<usize> = (0..k).collect();
    rng.fork(2).shuffle(&mut positions);
    let mut mask = vec![false; k];
    for &p in positions.iter().take(n_relevant) {
        mask[p] = true;
    }

    let mut row_rng = rng.fork(3);
    let mut w = vec![0.0f32; k * d];
    let mut theta = vec![0.0f32; k];
    for i in 0..k {
        let row = if mask[i] {
            // Nearly parallel to the concept direction.
            let mut r: Vec<f64> = concept
                .iter()
                .map(|&u| u + 0.05 * row_rng.next_normal())
                .collect();
            normalize_in_place(&mut r);
            r
        } else {
            // Exactly orthogonalized against the concept direction.
            let mut r: Vec<f64> = (0..d).map(|_| row_rng.next_normal()).collect();
            let proj: f64 = r.iter().zip(&concept).map(|(a, u)| a * u).sum();
            for (a, u) in r.iter_mut().zip(&concept) {
                *a -= proj * u;
            }
            normalize_in_place(&mut r);
            r
        };
        for (j, v) in row.iter().enumerate() {
            w[i * d + j] = *v as f32;
        }
        theta[i] = if mask[i] {
            SYNTH_RELEVANT_THETA
        } else {
            SYNTH_BACKGROUND_THETA
        };
    }
    let encoder = SaeEncoder::new(k, d, w, vec![0.0; k], theta)?;
    let concept_vec = Vector::new(concept)?;
    Ok((encoder, mask, concept_vec))
}

fn random_unit(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
    normalize_in_place(&mut v);
    v
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
