//! Vector algebra and statistical primitives shared by every other module.
//!
//! Everything here is a pure function of its inputs; the two domain types
//! ([`Vector`], [`EmpiricalDistribution`]) validate their invariants at
//! construction (finite entries, non-empty), so the operations can assume
//! well-formed data.

pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("mask selects no relevant dimension")]
    NoRelevantDimension,
}

/// Dense vector of finite reals, dimension ≥ 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector {
    values: Vec<f64>,
}

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::Empty("vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, NumericsError> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, NumericsError> {
        check_dims(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Vector {
        Vector {
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }

    /// self ← self + k·other
    pub fn add_scaled(&mut self, other: &Vector, k: f64) -> Result<(), NumericsError> {
        check_dims(self, other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector, NumericsError> {
        check_dims(self, other)?;
        Ok(Vector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = NumericsError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Vec<f64> {
        v.values
    }
}

fn check_dims(a: &Vector, b: &Vector) -> Result<(), NumericsError> {
    if a.dim() != b.dim() {
        return Err(NumericsError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Non-empty list of finite scalar samples (e.g. sentiment scores).
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(samples: Vec<f64>) -> Result<Self, NumericsError> {
        if samples.is_empty() {
            return Err(NumericsError::Empty("distribution"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// Cosine similarity, clamped to [-1, 1] against round-off.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64, NumericsError> {
    let dot = u.dot(v)?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Rescale to unit L2 norm. The result points the same way as the input.
pub fn l2_normalize(v: &Vector) -> Result<Vector, NumericsError> {
    let n = v.norm();
    if n == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok(v.scaled(1.0 / n))
}

/// Wasserstein-1 distance between two 1-D empirical distributions.
///
/// Equal sample counts reduce to the mean absolute difference of the sorted
/// samples; unequal counts integrate |CDF_a − CDF_b| over the merged support.
pub fn wasserstein1(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> f64 {
    let mut sa = a.samples.clone();
    let mut sb = b.samples.clone();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("finite"));

    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        return sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
    }

    let na = sa.len() as f64;
    let nb = sb.len() as f64;
    let mut events: Vec<f64> = Vec::with_capacity(sa.len() + sb.len());
    events.extend_from_slice(&sa);
    events.extend_from_slice(&sb);
    events.sort_by(|x, y| x.partial_cmp(y).expect("finite"));

    let (mut ia, mut ib) = (0usize, 0usize);
    let mut area = 0.0;
    for w in events.windows(2) {
        let (x, x_next) = (w[0], w[1]);
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        area += (ia as f64 / na - ib as f64 / nb).abs() * (x_next - x);
    }
    area
}

/// Average (fractional) ranks, 1-based; ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        // positions start..=end (0-based) share rank mean of (start+1)..=(end+1)
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = rank;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks, which
/// reduces to 1 − 6·Σd²/(n(n²−1)) when all values are distinct.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, NumericsError> {
    if xs.len() != ys.len() {
        return Err(NumericsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(NumericsError::TooFewSamples {
            need: 2,
            got: xs.len(),
        });
    }
    for (i, v) in xs.iter().chain(ys.iter()).enumerate() {
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(i % xs.len()));
        }
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, NumericsError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(NumericsError::ZeroVariance("first argument ranks"));
    }
    if syy == 0.0 {
        return Err(NumericsError::ZeroVariance("second argument ranks"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Result of a pooled-variance two-sample t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSampleT {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Pooled-variance two-sample Student t-test with df = n_a + n_b − 2.
/// The p-value is the two-sided tail probability.
pub fn student_t_two_sample(a: &[f64], b: &[f64]) -> Result<TwoSampleT, NumericsError> {
    if a.len() < 2 {
        return Err(NumericsError::TooFewSamples {
            need: 2,
            got: a.len(),
        });
    }
    if b.len() < 2 {
        return Err(NumericsError::TooFewSamples {
            need: 2,
            got: b.len(),
        });
    }
    for (i, v) in a.iter().chain(b.iter()).enumerate() {
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(i));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>();
    let ssb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>();
    let df = na + nb - 2.0;
    let pooled = (ssa + ssb) / df;
    if pooled <= 0.0 {
        return Err(NumericsError::ZeroVariance("pooled"));
    }
    let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let p = special::student_t_two_sided_p(t, df);
    Ok(TwoSampleT { t, p, df })
}

/// Cumulative capture curve of the `relevant` dimensions when all dimensions
/// are ranked by descending value (ties rank by ascending index). Points are
/// (fraction of dimensions scanned, fraction of relevant captured), starting
/// at (0, 0), evaluated after each scanned dimension.
pub fn salience_curve(
    values: &Vector,
    relevant: &[bool],
) -> Result<Vec<(f64, f64)>, NumericsError> {
    if relevant.len() != values.dim() {
        return Err(NumericsError::LengthMismatch {
            left: relevant.len(),
            right: values.dim(),
        });
    }
    if relevant.is_empty() {
        return Err(NumericsError::Empty("mask"));
    }
    let n_relevant = relevant.iter().filter(|&&m| m).count();
    if n_relevant == 0 {
        return Err(NumericsError::NoRelevantDimension);
    }

    let vals = values.as_slice();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| {
        vals[j]
            .partial_cmp(&vals[i])
            .expect("finite")
            .then(i.cmp(&j))
    });

    let n = vals.len() as f64;
    let mut curve = Vec::with_capacity(vals.len() + 1);
    curve.push((0.0, 0.0));
    let mut captured = 0usize;
    for (m, &idx) in order.iter().enumerate() {
        if relevant[idx] {
            captured += 1;
        }
        curve.push(((m + 1) as f64 / n, captured as f64 / n_relevant as f64));
    }
    Ok(curve)
}

/// Trapezoidal area under [`salience_curve`]: 1 when relevant dimensions
/// dominate the top of the ranking, 0 when they sink to the bottom.
pub fn salience_auc(values: &Vector, relevant: &[bool]) -> Result<f64, NumericsError> {
    let curve = salience_curve(values, relevant)?;
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(area)
}
