//! Behavioral baseline bias metrics and the correlation harness.
//!
//! Extrinsic metrics work on classifier outputs: the F1 gap between two
//! groups, the equal-opportunity difference of true-positive rates, and the
//! individual/group fairness scores built on Wasserstein-1 distances between
//! score distributions. Intrinsic metrics work on representations and token
//! probabilities: the sentence embedding association test (SEAT) and the
//! perplexity two-sample t-test. `correlate` compares any two metrics'
//! per-concept series by Spearman rank correlation, optionally keeping only
//! statistically significant entries.

pub mod ingest;

use crate::numerics::{
    self, EmpiricalDistribution, NumericsError, TwoSampleT, Vector,
};
use crate::rng::SplitMix64;
use std::collections::BTreeMap;
use thiserror::Error;

/// Sample count at or below which the SEAT permutation test enumerates every
/// relabeling instead of sampling.
pub const SEAT_EXHAUSTIVE_LIMIT: usize = 12;
/// Number of sampled permutations otherwise.
pub const SEAT_PERMUTATIONS: usize = 10_000;
const SEAT_SAMPLING_SEED: u64 = 0x5ea7;

#[derive(Debug, Error)]
pub enum BehavioralError {
    #[error("expected exactly {expected} groups, found {got}")]
    GroupCount { expected: usize, got: usize },
    #[error("group {0:?} has no records")]
    EmptyGroup(String),
    #[error("group {0:?} has no positive ground-truth records")]
    NoPositives(String),
    #[error("group {0:?} has no records of its own class; F1 undefined")]
    NoOwnClassPositives(String),
    #[error("label {value} in group {group:?} is not binary")]
    NonBinaryLabel { group: String, value: u8 },
    #[error("template {0:?} does not share the common group set")]
    InconsistentGroups(String),
    #[error("association scores have zero standard deviation")]
    ZeroStdDev,
    #[error("log probability at index {index} is positive ({value})")]
    PositiveLogProb { index: usize, value: f64 },
    #[error("only {got} concepts shared after filtering; need at least 2")]
    TooFewShared { got: usize },
    #[error("duplicate concept {0:?} in metric series")]
    DuplicateConcept(String),
    #[error("p-value {value} for concept {concept:?} is outside [0, 1]")]
    InvalidPValue { concept: String, value: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One classified sample with its group tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub group: String,
    pub true_label: u8,
    pub predicted_label: u8,
}

impl PredictionRecord {
    pub fn new(
        group: impl Into<String>,
        true_label: u8,
        predicted_label: u8,
    ) -> Result<Self, BehavioralError> {
        let group = group.into();
        for label in [true_label, predicted_label] {
            if label > 1 {
                return Err(BehavioralError::NonBinaryLabel {
                    group,
                    value: label,
                });
            }
        }
        Ok(Self {
            group,
            true_label,
            predicted_label,
        })
    }
}

/// In-group F1 of a group's own class. The groups this metric sees are
/// single-true-class slices, so the own class is the shared true label
/// (falling back to class 1 for mixed groups); precision and recall are both
/// restricted to the group's records.
fn in_group_f1(group: &str, records: &[&PredictionRecord]) -> Result<f64, BehavioralError> {
    let own_class = if records.iter().all(|r| r.true_label == records[0].true_label) {
        records[0].true_label
    } else {
        1
    };
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for r in records {
        match (r.true_label == own_class, r.predicted_label == own_class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fnn += 1,
            (false, false) => {}
        }
    }
    if tp + fnn == 0 {
        return Err(BehavioralError::NoOwnClassPositives(group.to_string()));
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fnn) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// |F1 gap| between the two groups present in `records`.
pub fn f1_diff(records: &[PredictionRecord]) -> Result<f64, BehavioralError> {
    let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.group).or_default().push(r);
    }
    if groups.len() != 2 {
        return Err(BehavioralError::GroupCount {
            expected: 2,
            got: groups.len(),
        });
    }
    let f1s: Vec<f64> = groups
        .iter()
        .map(|(name, recs)| in_group_f1(name, recs))
        .collect::<Result<_, _>>()?;
    Ok((f1s[0] - f1s[1]).abs())
}

/// Equal-opportunity difference: |TPR₁ − TPR₂|.
pub fn eod(
    group1: &[PredictionRecord],
    group2: &[PredictionRecord],
) -> Result<f64, BehavioralError> {
    let tpr = |records: &[PredictionRecord], which: &str| -> Result<f64, BehavioralError> {
        let mut tp = 0usize;
        let mut positives = 0usize;
        for r in records {
            if r.true_label == 1 {
                positives += 1;
                tp += usize::from(r.predicted_label == 1);
            }
        }
        if positives == 0 {
            return Err(BehavioralError::NoPositives(which.to_string()));
        }
        Ok(tp as f64 / positives as f64)
    };
    Ok((tpr(group1, "group1")? - tpr(group2, "group2")?).abs())
}

/// Per-template score distributions for a common set of reference groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateScoreSet {
    pub template: String,
    pub per_group: BTreeMap<String, EmpiricalDistribution>,
}

/// Mean Wasserstein-1 distance over all unordered distinct group pairs and
/// all templates (the 2/(M·|A|·(|A|−1)) pair normalization).
pub fn individual_fairness(sets: &[TemplateScoreSet]) -> Result<f64, BehavioralError> {
    if sets.is_empty() {
        return Err(BehavioralError::GroupCount {
            expected: 1,
            got: 0,
        });
    }
    let groups: Vec<&String> = sets[0].per_group.keys().collect();
    if groups.len() < 2 {
        return Err(BehavioralError::GroupCount {
            expected: 2,
            got: groups.len(),
        });
    }
    for set in sets {
        let these: Vec<&String> = set.per_group.keys().collect();
        if these != groups {
            return Err(BehavioralError::InconsistentGroups(set.template.clone()));
        }
    }
    let m = sets.len() as f64;
    let a = groups.len() as f64;
    let mut total = 0.0;
    for set in sets {
        for (i, ga) in groups.iter().enumerate() {
            for gb in &groups[i + 1..] {
                total += numerics::wasserstein1(&set.per_group[*ga], &set.per_group[*gb]);
            }
        }
    }
    Ok(total * 2.0 / (m * a * (a - 1.0)))
}

/// Mean Wasserstein-1 distance from each group's distribution to the pooled
/// distribution over all groups.
pub fn group_fairness(
    per_group: &BTreeMap<String, EmpiricalDistribution>,
) -> Result<f64, BehavioralError> {
    if per_group.is_empty() {
        return Err(BehavioralError::GroupCount {
            expected: 1,
            got: 0,
        });
    }
    let mut pooled = Vec::new();
    for dist in per_group.values() {
        pooled.extend_from_slice(dist.samples());
    }
    let pool = EmpiricalDistribution::new(pooled)?;
    let total: f64 = per_group
        .values()
        .map(|d| numerics::wasserstein1(d, &pool))
        .sum();
    Ok(total / per_group.len() as f64)
}

/// Target and attribute sentence embeddings for one SEAT instance.
#[derive(Debug, Clone)]
pub struct AssociationInputs {
    pub x: Vec<Vector>,
    pub y: Vec<Vector>,
    pub a: Vec<Vector>,
    pub b: Vec<Vector>,
}

impl AssociationInputs {
    pub fn new(
        x: Vec<Vector>,
        y: Vec<Vector>,
        a: Vec<Vector>,
        b: Vec<Vector>,
    ) -> Result<Self, BehavioralError> {
        for (name, list) in [("X", &x), ("Y", &y), ("A", &a), ("B", &b)] {
            if list.is_empty() {
                return Err(BehavioralError::EmptyGroup(name.to_string()));
            }
        }
        let dim = x[0].dim();
        for v in x.iter().chain(&y).chain(&a).chain(&b) {
            if v.dim() != dim {
                return Err(NumericsError::DimensionMismatch {
                    left: v.dim(),
                    right: dim,
                }
                .into());
            }
        }
        Ok(Self { x, y, a, b })
    }
}

/// SEAT outcome: raw mean-difference score, normalized effect size, and the
/// one-sided permutation p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeatResult {
    pub raw: f64,
    pub effect_size: f64,
    pub p_value: f64,
    /// Number of permutations behind the p-value.
    pub permutations: usize,
}

/// Permutation scheme for the SEAT p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationScheme {
    /// Exhaustive when |X|+|Y| ≤ [`SEAT_EXHAUSTIVE_LIMIT`], else sampled.
    Auto,
    Exhaustive,
    Sampled { n: usize, seed: u64 },
}

/// Sentence embedding association test with the default permutation scheme.
pub fn seat(inputs: &AssociationInputs) -> Result<SeatResult, BehavioralError> {
    seat_with(inputs, PermutationScheme::Auto)
}

/// SEAT with an explicit permutation scheme.
pub fn seat_with(
    inputs: &AssociationInputs,
    scheme: PermutationScheme,
) -> Result<SeatResult, BehavioralError> {
    // Association score of each target sentence with the attribute sets.
    let associate = |v: &Vector| -> Result<f64, BehavioralError> {
        let mean_cos = |set: &[Vector]| -> Result<f64, BehavioralError> {
            let mut total = 0.0;
            for s in set {
                total += numerics::cosine(v, s)?;
            }
            Ok(total / set.len() as f64)
        };
        Ok(mean_cos(&inputs.a)? - mean_cos(&inputs.b)?)
    };
    let s_x: Vec<f64> = inputs.x.iter().map(&associate).collect::<Result<_, _>>()?;
    let s_y: Vec<f64> = inputs.y.iter().map(&associate).collect::<Result<_, _>>()?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let raw = mean(&s_x) - mean(&s_y);

    let all: Vec<f64> = s_x.iter().chain(&s_y).copied().collect();
    let all_mean = mean(&all);
    let variance = all.iter().map(|s| (s - all_mean) * (s - all_mean)).sum::<f64>()
        / all.len() as f64;
    if variance == 0.0 {
        return Err(BehavioralError::ZeroStdDev);
    }
    let effect_size = raw / variance.sqrt();

    let n_x = s_x.len();
    let total = all.len();
    let stat_of = |x_indices: &[usize]| -> f64 {
        let sum_x: f64 = x_indices.iter().map(|&i| all[i]).sum();
        let sum_all: f64 = all.iter().sum();
        let nx = x_indices.len() as f64;
        let ny = (total - x_indices.len()) as f64;
        sum_x / nx - (sum_all - sum_x) / ny
    };

    let exhaustive = match scheme {
        PermutationScheme::Auto => total <= SEAT_EXHAUSTIVE_LIMIT,
        PermutationScheme::Exhaustive => true,
        PermutationScheme::Sampled { .. } => false,
    };
    let (exceed, count) = if exhaustive {
        let mut exceed = 0usize;
        let mut count = 0usize;
        for_each_combination(total, n_x, |combo| {
            count += 1;
            if stat_of(combo) > raw {
                exceed += 1;
            }
        });
        (exceed, count)
    } else {
        let (n_perms, seed) = match scheme {
            PermutationScheme::Sampled { n, seed } => (n, seed),
            _ => (SEAT_PERMUTATIONS, SEAT_SAMPLING_SEED),
        };
        let mut rng = SplitMix64::new(seed);
        let mut indices: Vec<usize> = (0..total).collect();
        let mut exceed = 0usize;
        for _ in 0..n_perms {
            rng.shuffle(&mut indices);
            if stat_of(&indices[..n_x]) > raw {
                exceed += 1;
            }
        }
        (exceed, n_perms)
    };

    Ok(SeatResult {
        raw,
        effect_size,
        p_value: exceed as f64 / count as f64,
        permutations: count,
    })
}

/// Visit every k-combination of 0..n in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut combo: Vec<usize> = (0..k).collect();
    if k == 0 || k > n {
        return;
    }
    loop {
        visit(&combo);
        // Advance.
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if combo[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

/// Conditional perplexity from per-token log probabilities:
/// exp(−mean(log P)).
pub fn perplexity(logprobs: &[f64]) -> Result<f64, BehavioralError> {
    if logprobs.is_empty() {
        return Err(NumericsError::Empty("logprobs").into());
    }
    for (index, &lp) in logprobs.iter().enumerate() {
        if !lp.is_finite() {
            return Err(NumericsError::NonFinite(index).into());
        }
        if lp > 0.0 {
            return Err(BehavioralError::PositiveLogProb { index, value: lp });
        }
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Student t-test over two groups of perplexity values.
pub fn perplexity_bias_test(
    ppl_group1: &[f64],
    ppl_group2: &[f64],
) -> Result<TwoSampleT, BehavioralError> {
    Ok(numerics::student_t_two_sample(ppl_group1, ppl_group2)?)
}

/// Named per-concept scores, optionally with p-values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    entries: Vec<SeriesEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesEntry {
    pub concept: String,
    pub score: f64,
    pub p_value: Option<f64>,
}

impl MetricSeries {
    pub fn new(
        name: impl Into<String>,
        entries: Vec<SeriesEntry>,
    ) -> Result<Self, BehavioralError> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.concept.clone()) {
                return Err(BehavioralError::DuplicateConcept(e.concept.clone()));
            }
            if let Some(p) = e.p_value {
                if !(0.0..=1.0).contains(&p) {
                    return Err(BehavioralError::InvalidPValue {
                        concept: e.concept.clone(),
                        value: p,
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[SeriesEntry] {
        &self.entries
    }
}

/// Spearman correlation of two metric series over their shared concepts.
///
/// When `p_threshold` is given, concepts whose recorded p-value exceeds it in
/// either series are dropped first. Returns (r, concepts used).
pub fn correlate(
    series_a: &MetricSeries,
    series_b: &MetricSeries,
    p_threshold: Option<f64>,
) -> Result<(f64, usize), BehavioralError> {
    let by_concept = |s: &MetricSeries| -> BTreeMap<String, (f64, Option<f64>)> {
        s.entries
            .iter()
            .map(|e| (e.concept.clone(), (e.score, e.p_value)))
            .collect()
    };
    let a = by_concept(series_a);
    let b = by_concept(series_b);
    let keep = |p: Option<f64>| match (p_threshold, p) {
        (Some(threshold), Some(p)) => p <= threshold,
        _ => true,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (concept, (score_a, p_a)) in &a {
        if let Some((score_b, p_b)) = b.get(concept) {
            if keep(*p_a) && keep(*p_b) {
                xs.push(*score_a);
                ys.push(*score_b);
            }
        }
    }
    if xs.len() < 2 {
        return Err(BehavioralError::TooFewShared { got: xs.len() });
    }
    let r = numerics::spearman(&xs, &ys)?;
    Ok((r, xs.len()))
}
