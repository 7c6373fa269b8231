//! Per-layer logistic probes and CAV derivation.
//!
//! A concept activation vector is the unit-normalized weight direction of a
//! logistic regression classifier separating concept-bearing activations from
//! unrelated ones. Training minimizes mean cross-entropy plus a ridge term
//! ‖w‖²/(2N) by full-batch gradient descent with Armijo backtracking — a
//! deterministic, dependency-free stand-in for a library solver's defaults.

use crate::hash::fnv1a;
use crate::io::{self, FormatError};
use crate::model::ModelInfo;
use crate::numerics::{NumericsError, Vector};
use crate::probe::ActivationSet;
use crate::rng::SplitMix64;
use std::path::Path;
use thiserror::Error;

const CAV_MAGIC: &[u8; 4] = b"BLCV";
const CAV_VERSION: u16 = 1;

/// Optimizer constants: ridge weight, gradient tolerance, iteration cap,
/// Armijo constant.
const RIDGE_LAMBDA: f64 = 1.0;
const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 2000;
const ARMIJO_C: f64 = 1e-4;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum CavError {
    #[error("all labels identical; classifier undefined")]
    SingleClass,
    #[error("need at least {need} samples per class, got {got}")]
    TooFewPerClass { need: usize, got: usize },
    #[error("activation {index} has dimension {got}, expected {want}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("labels length {labels} does not match activations length {activations}")]
    LengthMismatch { labels: usize, activations: usize },
    #[error("training produced a zero weight vector; no direction")]
    DegenerateDirection,
    #[error("layer {layer}: {source}")]
    Layer {
        layer: u32,
        #[source]
        source: Box<CavError>,
    },
    #[error("invalid CAV stack: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One layer's concept activation vector together with its classifier.
///
/// The full affine classifier is σ(s·(v·a) + b) with unit direction v,
/// scale s = ‖w‖ and bias b, so w = s·v.
#[derive(Debug, Clone, PartialEq)]
pub struct Cav {
    pub layer: u32,
    direction: Vector,
    scale: f64,
    bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

impl Cav {
    /// Build from a raw weight vector; fails on zero weights.
    pub fn new(
        layer: u32,
        weights: &Vector,
        bias: f64,
        train_accuracy: f64,
        test_accuracy: f64,
    ) -> Result<Self, CavError> {
        let scale = weights.norm();
        if scale <= 0.0 {
            return Err(CavError::DegenerateDirection);
        }
        Ok(Self {
            layer,
            direction: weights.scaled(1.0 / scale),
            scale,
            bias,
            train_accuracy,
            test_accuracy,
        })
    }

    /// Rebuild from stored parts; the direction must already be unit-norm.
    pub fn from_parts(
        layer: u32,
        direction: Vector,
        scale: f64,
        bias: f64,
        train_accuracy: f64,
        test_accuracy: f64,
    ) -> Result<Self, CavError> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(CavError::Invalid(format!(
                "layer {layer} direction has norm {}, expected 1",
                direction.norm()
            )));
        }
        if scale <= 0.0 {
            return Err(CavError::Invalid(format!(
                "layer {layer} scale {scale} must be positive"
            )));
        }
        Ok(Self {
            layer,
            direction,
            scale,
            bias,
            train_accuracy,
            test_accuracy,
        })
    }

    pub fn direction(&self) -> &Vector {
        &self.direction
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Classifier logit s·(v·a) + b.
    pub fn logit(&self, activation: &Vector) -> Result<f64, NumericsError> {
        Ok(self.scale * self.direction.dot(activation)? + self.bias)
    }

    /// Positive-class probability σ(s·(v·a) + b).
    pub fn confidence(&self, activation: &Vector) -> Result<f64, NumericsError> {
        Ok(sigmoid(self.logit(activation)?))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One CAV per layer for a single concept, ascending layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct CavStack {
    pub concept: String,
    pub model_info: ModelInfo,
    cavs: Vec<Cav>,
}

impl CavStack {
    pub fn new(
        concept: impl Into<String>,
        model_info: ModelInfo,
        cavs: Vec<Cav>,
    ) -> Result<Self, CavError> {
        if cavs.len() != model_info.n_layers {
            return Err(CavError::Invalid(format!(
                "{} CAVs for a {}-layer model",
                cavs.len(),
                model_info.n_layers
            )));
        }
        for (i, cav) in cavs.iter().enumerate() {
            if cav.layer as usize != i + 1 {
                return Err(CavError::Invalid(format!(
                    "position {i} holds layer {}, expected {}",
                    cav.layer,
                    i + 1
                )));
            }
            if cav.direction.dim() != model_info.hidden_dim {
                return Err(CavError::Invalid(format!(
                    "layer {} direction has dimension {}, expected {}",
                    cav.layer,
                    cav.direction.dim(),
                    model_info.hidden_dim
                )));
            }
        }
        Ok(Self {
            concept: concept.into(),
            model_info,
            cavs,
        })
    }

    /// CAV for a 1-based layer.
    pub fn cav(&self, layer: usize) -> &Cav {
        &self.cavs[layer - 1]
    }

    pub fn cavs(&self) -> &[Cav] {
        &self.cavs
    }

    pub fn mean_test_accuracy(&self) -> f64 {
        self.cavs.iter().map(|c| c.test_accuracy).sum::<f64>() / self.cavs.len() as f64
    }

    /// Serialize to the CAV file format (magic `BLCV`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.model_info.hidden_dim;
        let mut bytes = Vec::with_capacity(14 + self.cavs.len() * (36 + 8 * dim) + 8);
        bytes.extend_from_slice(CAV_MAGIC);
        bytes.extend_from_slice(&CAV_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.model_info.n_layers as u32).to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        for cav in &self.cavs {
            bytes.extend_from_slice(&cav.layer.to_le_bytes());
            bytes.extend_from_slice(&cav.scale.to_le_bytes());
            bytes.extend_from_slice(&cav.bias.to_le_bytes());
            bytes.extend_from_slice(&cav.train_accuracy.to_le_bytes());
            bytes.extend_from_slice(&cav.test_accuracy.to_le_bytes());
            for v in cav.direction.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::seal(bytes)
    }

    /// Content hash of the serialized stack, used as provenance.
    pub fn stack_hash(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    /// Parse the CAV file format. Concept and model name are external
    /// metadata and come back empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CavError> {
        let payload = io::open_frame(bytes, CAV_MAGIC, CAV_VERSION, |p| {
            let n_layers = io::peek_u32(p, 0, "n_layers")?;
            let dim = io::peek_u32(p, 4, "hidden_dim")?;
            Ok(8 + u64::from(n_layers) * (36 + 8 * u64::from(dim)))
        })?;
        let mut c = io::Cursor::new(payload);
        let n_layers = c.u32("n_layers")? as usize;
        let dim = c.u32("hidden_dim")? as usize;
        if n_layers == 0 || dim == 0 {
            return Err(FormatError::Inconsistent {
                what: "header",
                detail: format!("n_layers {n_layers}, hidden_dim {dim}"),
            }
            .into());
        }
        let mut cavs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let layer = c.u32("layer")?;
            let scale = c.f64("scale")?;
            let bias = c.f64("bias")?;
            let train_accuracy = c.f64("train_acc")?;
            let test_accuracy = c.f64("test_acc")?;
            let direction = Vector::new(c.f64_vec(dim, "direction")?)?;
            cavs.push(Cav::from_parts(
                layer,
                direction,
                scale,
                bias,
                train_accuracy,
                test_accuracy,
            )?);
        }
        let model_info =
            ModelInfo::new(n_layers, dim, "").map_err(|e| CavError::Invalid(e.to_string()))?;
        CavStack::new("", model_info, cavs)
    }

    pub fn save(&self, path: &Path) -> Result<(), CavError> {
        std::fs::write(path, self.to_bytes()).map_err(FormatError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CavError> {
        let bytes = std::fs::read(path).map_err(FormatError::Io)?;
        Self::from_bytes(&bytes)
    }
}

/// Output of one layer's probe training.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub weights: Vector,
    pub bias: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Loss after each accepted line-search step, for monotonicity checks.
    pub loss_trace: Vec<f64>,
}

/// Train one logistic probe on labeled activations.
///
/// The 80/20 train-test split is stratified by label and seeded; accuracies
/// use decision threshold 0.5 (predict 1 when the logit is positive).
pub fn train_layer_classifier(
    activations: &[Vector],
    labels: &[u8],
    split_seed: u64,
) -> Result<TrainedClassifier, CavError> {
    if activations.len() != labels.len() {
        return Err(CavError::LengthMismatch {
            labels: labels.len(),
            activations: activations.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CavError::SingleClass);
    }
    if n_pos.min(n_neg) < 10 {
        return Err(CavError::TooFewPerClass {
            need: 10,
            got: n_pos.min(n_neg),
        });
    }
    let dim = activations[0].dim();
    for (i, a) in activations.iter().enumerate() {
        if a.dim() != dim {
            return Err(CavError::DimensionMismatch {
                index: i,
                got: a.dim(),
                want: dim,
            });
        }
    }

    // Stratified seeded split: one shuffle of all indices, then walk it
    // filling each class's train quota. The assignment of a given sample
    // depends only on the shuffle and its class's size, not on which label
    // the class carries.
    let mut rng = SplitMix64::new(split_seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    rng.shuffle(&mut order);
    let quota = |count: usize| (count as f64 * TRAIN_FRACTION).floor() as usize;
    let mut remaining = [quota(n_neg), quota(n_pos)];
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for &i in &order {
        let class = labels[i] as usize;
        if remaining[class] > 0 {
            remaining[class] -= 1;
            train_idx.push(i);
        } else {
            test_idx.push(i);
        }
    }

    // Flatten training data for the optimizer.
    let n_train = train_idx.len();
    let mut data = Vec::with_capacity(n_train * dim);
    let mut y = Vec::with_capacity(n_train);
    for &i in &train_idx {
        data.extend_from_slice(activations[i].as_slice());
        y.push(f64::from(labels[i]));
    }

    let (w, b, loss_trace) = minimize_logistic(&data, &y, n_train, dim);

    let weights = Vector::new(w).map_err(CavError::Numerics)?;
    let accuracy = |idx: &[usize]| -> f64 {
        let correct = idx
            .iter()
            .filter(|&&i| {
                let z = weights
                    .dot(&activations[i])
                    .expect("dims validated")
                    + b;
                let predicted = u8::from(z > 0.0);
                predicted == labels[i]
            })
            .count();
        correct as f64 / idx.len() as f64
    };
    Ok(TrainedClassifier {
        train_accuracy: accuracy(&train_idx),
        test_accuracy: accuracy(&test_idx),
        weights,
        bias: b,
        loss_trace,
    })
}

/// Mean cross-entropy + ridge, full-batch gradient descent with Armijo
/// backtracking. Returns (w, b, accepted-step losses).
fn minimize_logistic(
    data: &[f64],
    y: &[f64],
    n: usize,
    dim: usize,
) -> (Vec<f64>, f64, Vec<f64>) {
    let nf = n as f64;
    let loss_at = |w: &[f64], b: f64| -> f64 {
        let mut total = 0.0;
        for (row, &yk) in data.chunks_exact(dim).zip(y) {
            let z: f64 = row.iter().zip(w).map(|(a, wi)| a * wi).sum::<f64>() + b;
            // Stable cross-entropy: max(z,0) − z·y + ln(1 + e^{−|z|})
            total += z.max(0.0) - z * yk + (-z.abs()).exp().ln_1p();
        }
        let ridge = RIDGE_LAMBDA / (2.0 * nf) * w.iter().map(|v| v * v).sum::<f64>();
        total / nf + ridge
    };

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut losses = vec![loss_at(&w, b)];
    let mut step = 1.0;

    let mut grad_w = vec![0.0; dim];
    for _ in 0..MAX_ITERS {
        for g in grad_w.iter_mut() {
            *g = 0.0;
        }
        let mut grad_b = 0.0;
        for (row, &yk) in data.chunks_exact(dim).zip(y) {
            let z: f64 = row.iter().zip(&w).map(|(a, wi)| a * wi).sum::<f64>() + b;
            let residual = sigmoid(z) - yk;
            for (g, a) in grad_w.iter_mut().zip(row) {
                *g += residual * a;
            }
            grad_b += residual;
        }
        for (g, wi) in grad_w.iter_mut().zip(&w) {
            *g = (*g + RIDGE_LAMBDA * wi) / nf;
        }
        grad_b /= nf;

        let grad_inf = grad_w
            .iter()
            .chain(std::iter::once(&grad_b))
            .fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < GRAD_TOL {
            break;
        }
        let grad_sq =
            grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b;

        let current = *losses.last().expect("seeded with initial loss");
        let mut t = step;
        let mut accepted = false;
        while t >= 1e-14 {
            let cand_w: Vec<f64> = w.iter().zip(&grad_w).map(|(wi, g)| wi - t * g).collect();
            let cand_b = b - t * grad_b;
            let cand_loss = loss_at(&cand_w, cand_b);
            if cand_loss <= current - ARMIJO_C * t * grad_sq {
                w = cand_w;
                b = cand_b;
                losses.push(cand_loss);
                accepted = true;
                break;
            }
            t /= 2.0;
        }
        if !accepted {
            break; // no descent step representable; numerically converged
        }
        step = (t * 2.0).min(1.0);
    }
    (w, b, losses)
}

/// Train one classifier per layer of an activation set and assemble the
/// concept's CAV stack.
pub fn derive_cav_stack(set: &ActivationSet, split_seed: u64) -> Result<CavStack, CavError> {
    derive_cav_stack_parallel(set, split_seed, 1)
}

/// As [`derive_cav_stack`] with `jobs` worker threads; results are identical
/// for any job count because each layer's training job is self-contained.
pub fn derive_cav_stack_parallel(
    set: &ActivationSet,
    split_seed: u64,
    jobs: usize,
) -> Result<CavStack, CavError> {
    let n_layers = set.model_info.n_layers;
    let jobs = jobs.max(1).min(n_layers);

    let train_one = |layer: u32| -> Result<Cav, CavError> {
        let mut activations = Vec::new();
        let mut labels = Vec::new();
        for r in set.layer_records(layer) {
            activations.push(Vector::from_f32(&r.activation).map_err(CavError::Numerics)?);
            labels.push(r.label);
        }
        let seed = SplitMix64::new(split_seed).fork(u64::from(layer)).next_u64();
        let trained = train_layer_classifier(&activations, &labels, seed)?;
        Cav::new(
            layer,
            &trained.weights,
            trained.bias,
            trained.train_accuracy,
            trained.test_accuracy,
        )
    };
    let annotate = |layer: u32, r: Result<Cav, CavError>| {
        r.map_err(|source| CavError::Layer {
            layer,
            source: Box::new(source),
        })
    };

    let cavs: Vec<Result<Cav, CavError>> = if jobs == 1 {
        (1..=n_layers as u32)
            .map(|layer| annotate(layer, train_one(layer)))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<Cav, CavError>>> = (0..n_layers).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunks = slots.chunks_mut(n_layers.div_ceil(jobs));
            for (chunk_idx, chunk) in chunks.enumerate() {
                let start_layer = chunk_idx * n_layers.div_ceil(jobs) + 1;
                let train_one = &train_one;
                let annotate = &annotate;
                scope.spawn(move || {
                    for (offset, slot) in chunk.iter_mut().enumerate() {
                        let layer = (start_layer + offset) as u32;
                        *slot = Some(annotate(layer, train_one(layer)));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("slot filled")).collect()
    };

    let cavs: Vec<Cav> = cavs.into_iter().collect::<Result<_, _>>()?;
    CavStack::new(
        set.provenance
            .as_ref()
            .map(|p| p.concept.clone())
            .unwrap_or_default(),
        set.model_info.clone(),
        cavs,
    )
}
