//! Probe-corpus construction and activation-set extraction — the data that
//! CAV training consumes.
//!
//! Positive sentences come from concept templates expanded against a lexicon;
//! negatives come from a packaged pool of concept-free distractor templates.
//! Sampling is seeded and without replacement, so a (templates, lexicon, seed)
//! triple always reproduces the same corpus.

use crate::io::{self, FormatError};
use crate::hash::{Fnv1a, fnv1a_str};
use crate::model::{LayerwiseModel, ModelError, ModelInfo};
use crate::rng::SplitMix64;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use thiserror::Error;

/// Whitespace-token cap applied to every generated sentence.
pub const MAX_PROBE_TOKENS: usize = 25;

/// Default probe size per class.
pub const DEFAULT_N_PER_CLASS: usize = 150;

/// Hard cap on how many distinct expansions are enumerated per pool.
const EXPANSION_CAP: usize = 500_000;

const ACTIVATION_MAGIC: &[u8; 4] = b"BLAC";
const ACTIVATION_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("{0} class is empty")]
    EmptyClass(&'static str),
    #[error("sentence appears in both classes: {0:?}")]
    OverlappingClasses(String),
    #[error("template {template:?} references slot {slot:?} with no lexicon entry")]
    UnknownSlot { template: String, slot: String },
    #[error("lexicon slot {0:?} is empty")]
    EmptySlot(String),
    #[error("unclosed slot brace in template {0:?}")]
    UnclosedSlot(String),
    #[error(
        "not enough distinct {class} sentences: need {needed}, only {available} \
         template-lexicon combinations available"
    )]
    InsufficientCombinations {
        class: &'static str,
        available: usize,
        needed: usize,
    },
    #[error("model failed on sentence {sentence:?}: {source}")]
    Extraction {
        sentence: String,
        source: ModelError,
    },
    #[error("invalid activation set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Balanced positive/negative sentence sets for one concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeCorpus {
    pub concept: String,
    positives: Vec<String>,
    negatives: Vec<String>,
}

impl ProbeCorpus {
    pub fn new(
        concept: impl Into<String>,
        positives: Vec<String>,
        negatives: Vec<String>,
    ) -> Result<Self, ProbeError> {
        if positives.is_empty() {
            return Err(ProbeError::EmptyClass("positive"));
        }
        if negatives.is_empty() {
            return Err(ProbeError::EmptyClass("negative"));
        }
        let pos_set: HashSet<&String> = positives.iter().collect();
        if let Some(dup) = negatives.iter().find(|s| pos_set.contains(s)) {
            return Err(ProbeError::OverlappingClasses(dup.clone()));
        }
        Ok(Self {
            concept: concept.into(),
            positives,
            negatives,
        })
    }

    pub fn positives(&self) -> &[String] {
        &self.positives
    }

    pub fn negatives(&self) -> &[String] {
        &self.negatives
    }

    /// Content hash over both classes, order-sensitive.
    pub fn corpus_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        fnv1a_str(&mut h, &self.concept);
        h.update(&(self.positives.len() as u64).to_le_bytes());
        for s in &self.positives {
            fnv1a_str(&mut h, s);
        }
        h.update(&(self.negatives.len() as u64).to_le_bytes());
        for s in &self.negatives {
            fnv1a_str(&mut h, s);
        }
        h.finish()
    }

    /// Write `<concept>.pos.txt` / `<concept>.neg.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ProbeError> {
        std::fs::create_dir_all(dir).map_err(FormatError::Io)?;
        let write = |suffix: &str, lines: &[String]| -> Result<(), ProbeError> {
            let mut body = lines.join("\n");
            body.push('\n');
            std::fs::write(dir.join(format!("{}.{suffix}.txt", self.concept)), body)
                .map_err(FormatError::Io)?;
            Ok(())
        };
        write("pos", &self.positives)?;
        write("neg", &self.negatives)
    }

    pub fn load(dir: &Path, concept: &str) -> Result<Self, ProbeError> {
        let read = |suffix: &str| -> Result<Vec<String>, ProbeError> {
            let path = dir.join(format!("{concept}.{suffix}.txt"));
            let body = std::fs::read_to_string(path).map_err(FormatError::Io)?;
            Ok(body.lines().map(str::to_string).collect())
        };
        Self::new(concept, read("pos")?, read("neg")?)
    }
}

/// Expand `{slot}` templates against a lexicon; returns all distinct
/// expansions of at most [`MAX_PROBE_TOKENS`] whitespace tokens, in template
/// and lexicon order, up to an internal cap.
pub fn expand_templates(
    templates: &[String],
    lexicon: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<String>, ProbeError> {
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for template in templates {
        let parts = parse_template(template)?;
        // Collect the word lists for each slot occurrence.
        let mut slot_words: Vec<&[String]> = Vec::new();
        for part in &parts {
            if let TemplatePart::Slot(name) = part {
                let words = lexicon
                    .get(name)
                    .ok_or_else(|| ProbeError::UnknownSlot {
                        template: template.clone(),
                        slot: name.clone(),
                    })?;
                if words.is_empty() {
                    return Err(ProbeError::EmptySlot(name.clone()));
                }
                slot_words.push(words);
            }
        }
        // Odometer over slot choices.
        let mut counters = vec![0usize; slot_words.len()];
        'expansion: loop {
            let mut sentence = String::new();
            let mut slot_idx = 0;
            for part in &parts {
                match part {
                    TemplatePart::Literal(s) => sentence.push_str(s),
                    TemplatePart::Slot(_) => {
                        sentence.push_str(&slot_words[slot_idx][counters[slot_idx]]);
                        slot_idx += 1;
                    }
                }
            }
            if sentence.split_whitespace().count() <= MAX_PROBE_TOKENS
                && seen.insert(sentence.clone())
            {
                out.push(sentence);
                if out.len() >= EXPANSION_CAP {
                    return Ok(out);
                }
            }
            // Advance the odometer.
            for i in (0..counters.len()).rev() {
                counters[i] += 1;
                if counters[i] < slot_words[i].len() {
                    continue 'expansion;
                }
                counters[i] = 0;
            }
            break;
        }
    }
    Ok(out)
}

enum TemplatePart {
    Literal(String),
    Slot(String),
}

fn parse_template(template: &str) -> Result<Vec<TemplatePart>, ProbeError> {
    let mut parts = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            parts.push(TemplatePart::Literal(rest[..open].to_string()));
        }
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| ProbeError::UnclosedSlot(template.to_string()))?;
        parts.push(TemplatePart::Slot(after[..close].to_string()));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        parts.push(TemplatePart::Literal(rest.to_string()));
    }
    Ok(parts)
}

/// The packaged concept-free distractor pool used for negative samples.
pub fn builtin_distractors() -> (Vec<String>, BTreeMap<String, Vec<String>>) {
    let templates = [
        "The {color} {object} rested on the {surface} all {daytime}.",
        "A {color} {object} was left near the {surface} yesterday.",
        "During the {daytime} the {weather} settled over the {place}.",
        "Someone counted {number} {object}s beside the {place}.",
        "The {weather} made the {place} feel quiet that {daytime}.",
        "An old {object} leaned against the {surface} in the {place}.",
        "By {daytime} the {place} was covered in {weather}.",
        "They stored {number} {color} boxes under the {surface}.",
        "The {object} near the {place} turned {color} with age.",
        "It took {number} tries to move the {object} off the {surface}.",
    ]
    .into_iter()
    .map(str::to_string)
    .collect();
    let lexicon = [
        (
            "color",
            vec!["red", "blue", "green", "gray", "yellow", "brown", "pale", "dark"],
        ),
        (
            "object",
            vec![
                "chair", "ladder", "bucket", "lantern", "bicycle", "crate", "kettle", "bench",
                "rope", "umbrella",
            ],
        ),
        (
            "surface",
            vec!["table", "shelf", "floor", "windowsill", "counter", "porch"],
        ),
        (
            "daytime",
            vec!["morning", "afternoon", "evening", "night", "weekend"],
        ),
        (
            "weather",
            vec!["fog", "rain", "dust", "frost", "sunlight", "wind"],
        ),
        (
            "place",
            vec![
                "garden", "hallway", "station", "courtyard", "attic", "harbor", "meadow",
                "workshop",
            ],
        ),
        ("number", vec!["two", "three", "four", "five", "seven", "nine"]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.into_iter().map(str::to_string).collect()))
    .collect();
    (templates, lexicon)
}

/// Build a probe corpus: positives from the concept templates, negatives from
/// the packaged distractor pool, both sampled without replacement.
pub fn generate_probe(
    concept: &str,
    templates: &[String],
    lexicon: &BTreeMap<String, Vec<String>>,
    seed: u64,
    n_per_class: usize,
) -> Result<ProbeCorpus, ProbeError> {
    let (neg_templates, neg_lexicon) = builtin_distractors();
    generate_probe_with_negatives(
        concept,
        templates,
        lexicon,
        &neg_templates,
        &neg_lexicon,
        seed,
        n_per_class,
    )
}

/// As [`generate_probe`], with a caller-supplied negative pool.
pub fn generate_probe_with_negatives(
    concept: &str,
    templates: &[String],
    lexicon: &BTreeMap<String, Vec<String>>,
    neg_templates: &[String],
    neg_lexicon: &BTreeMap<String, Vec<String>>,
    seed: u64,
    n_per_class: usize,
) -> Result<ProbeCorpus, ProbeError> {
    let mut positives = expand_templates(templates, lexicon)?;
    let mut negatives = expand_templates(neg_templates, neg_lexicon)?;
    let pos_set: HashSet<String> = positives.iter().cloned().collect();
    negatives.retain(|s| !pos_set.contains(s));

    if positives.len() < n_per_class {
        return Err(ProbeError::InsufficientCombinations {
            class: "positive",
            available: positives.len(),
            needed: n_per_class,
        });
    }
    if negatives.len() < n_per_class {
        return Err(ProbeError::InsufficientCombinations {
            class: "negative",
            available: negatives.len(),
            needed: n_per_class,
        });
    }

    let mut rng = SplitMix64::new(seed);
    let mut pos_rng = rng.fork(1);
    let mut neg_rng = rng.fork(2);
    pos_rng.shuffle(&mut positives);
    neg_rng.shuffle(&mut negatives);
    positives.truncate(n_per_class);
    negatives.truncate(n_per_class);
    ProbeCorpus::new(concept, positives, negatives)
}

/// One extracted last-token activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    /// 1-based layer index.
    pub layer: u32,
    /// 1 for concept-bearing sentences, 0 for distractors.
    pub label: u8,
    pub activation: Vec<f32>,
}

/// Where an activation set came from. Not carried by the binary format; the
/// pipeline stores it in its run manifest instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub concept: String,
    pub corpus_hash: u64,
}

/// Labeled per-layer, per-sentence activations extracted from a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub model_info: ModelInfo,
    pub records: Vec<ActivationRecord>,
    pub provenance: Option<Provenance>,
}

impl ActivationSet {
    pub fn new(
        model_info: ModelInfo,
        records: Vec<ActivationRecord>,
        provenance: Option<Provenance>,
    ) -> Result<Self, ProbeError> {
        let mut labels_by_layer: BTreeMap<u32, [bool; 2]> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.activation.len() != model_info.hidden_dim {
                return Err(ProbeError::Invalid(format!(
                    "record {i} has dimension {}, expected {}",
                    r.activation.len(),
                    model_info.hidden_dim
                )));
            }
            if r.layer == 0 || r.layer as usize > model_info.n_layers {
                return Err(ProbeError::Invalid(format!(
                    "record {i} has layer {} outside 1..={}",
                    r.layer, model_info.n_layers
                )));
            }
            if r.label > 1 {
                return Err(ProbeError::Invalid(format!(
                    "record {i} has non-binary label {}",
                    r.label
                )));
            }
            labels_by_layer.entry(r.layer).or_default()[r.label as usize] = true;
        }
        for (layer, seen) in &labels_by_layer {
            if !(seen[0] && seen[1]) {
                return Err(ProbeError::Invalid(format!(
                    "layer {layer} is missing one label class"
                )));
            }
        }
        Ok(Self {
            model_info,
            records,
            provenance,
        })
    }

    /// Records for one 1-based layer, in insertion order.
    pub fn layer_records(&self, layer: u32) -> impl Iterator<Item = &ActivationRecord> {
        self.records.iter().filter(move |r| r.layer == layer)
    }

    /// Serialize to the activation dump format (magic `BLAC`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.model_info.hidden_dim;
        let mut bytes =
            Vec::with_capacity(22 + self.records.len() * (8 + 4 * dim) + 8);
        bytes.extend_from_slice(ACTIVATION_MAGIC);
        bytes.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.model_info.n_layers as u32).to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            bytes.extend_from_slice(&r.layer.to_le_bytes());
            bytes.push(r.label);
            bytes.extend_from_slice(&[0u8; 3]);
            for v in &r.activation {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::seal(bytes)
    }

    /// Parse the activation dump format. Provenance is external metadata and
    /// comes back as `None`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let payload = io::open_frame(bytes, ACTIVATION_MAGIC, ACTIVATION_VERSION, |p| {
            let dim = io::peek_u32(p, 4, "hidden_dim")?;
            let n_records = io::peek_u64(p, 8, "n_records")?;
            let record_size = 8 + 4 * u64::from(dim);
            Ok(16 + n_records * record_size)
        })?;
        let mut c = io::Cursor::new(payload);
        let n_layers = c.u32("n_layers")? as usize;
        let dim = c.u32("hidden_dim")? as usize;
        let n_records = c.u64("n_records")? as usize;
        if n_layers == 0 || dim == 0 {
            return Err(FormatError::Inconsistent {
                what: "header",
                detail: format!("n_layers {n_layers}, hidden_dim {dim}"),
            }
            .into());
        }
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let layer = c.u32("record layer")?;
            let label = c.u8("record label")?;
            c.skip(3, "record padding")?;
            let activation = c.f32_vec(dim, "record activation")?;
            records.push(ActivationRecord {
                layer,
                label,
                activation,
            });
        }
        let model_info = ModelInfo::new(n_layers, dim, "")
            .map_err(|e| ProbeError::Invalid(e.to_string()))?;
        Self::new(model_info, records, None)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        std::fs::write(path, self.to_bytes()).map_err(FormatError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let bytes = std::fs::read(path).map_err(FormatError::Io)?;
        Self::from_bytes(&bytes)
    }
}

/// Run every corpus sentence through the model and collect one record per
/// (sentence, layer), grouped by layer, positives before negatives.
pub fn extract_activation_set(
    model: &dyn LayerwiseModel,
    corpus: &ProbeCorpus,
) -> Result<ActivationSet, ProbeError> {
    let info = model.info().clone();
    let mut per_sentence: Vec<(u8, Vec<Vec<f32>>)> = Vec::new();
    for (label, sentences) in [(1u8, corpus.positives()), (0u8, corpus.negatives())] {
        for sentence in sentences {
            let activations =
                model
                    .forward_all(sentence)
                    .map_err(|source| ProbeError::Extraction {
                        sentence: sentence.clone(),
                        source,
                    })?;
            per_sentence.push((label, activations.iter().map(|a| a.to_f32()).collect()));
        }
    }
    let mut records = Vec::with_capacity(per_sentence.len() * info.n_layers);
    for layer in 1..=info.n_layers {
        for (label, acts) in &per_sentence {
            records.push(ActivationRecord {
                layer: layer as u32,
                label: *label,
                activation: acts[layer - 1].clone(),
            });
        }
    }
    ActivationSet::new(
        info,
        records,
        Some(Provenance {
            concept: corpus.concept.clone(),
            corpus_hash: corpus.corpus_hash(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::ToyLm;

    fn doctor_templates() -> (Vec<String>, BTreeMap<String, Vec<String>>) {
        let templates = vec![
            "The {role} examined the patient {adverb}.".to_string(),
            "A {role} reviewed the chart {adverb}.".to_string(),
            "Every {role} spoke with the nurse {adverb}.".to_string(),
        ];
        let lexicon: BTreeMap<String, Vec<String>> = [
            (
                "role".to_string(),
                vec!["doctor", "physician", "surgeon", "clinician", "resident"]
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
            ),
            (
                "adverb".to_string(),
                vec!["carefully", "quickly", "today", "twice", "at dawn", "last week"]
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
            ),
        ]
        .into_iter()
        .collect();
        (templates, lexicon)
    }

    #[test]
    fn expansion_is_deterministic_and_filtered() {
        let (templates, lexicon) = doctor_templates();
        let a = expand_templates(&templates, &lexicon).unwrap();
        let b = expand_templates(&templates, &lexicon).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 5 * 6);
        assert!(a
            .iter()
            .all(|s| s.split_whitespace().count() <= MAX_PROBE_TOKENS));
    }

    #[test]
    fn expansion_errors() {
        let lexicon: BTreeMap<String, Vec<String>> =
            [("known".to_string(), vec!["word".to_string()])]
                .into_iter()
                .collect();
        let err =
            expand_templates(&["The {missing} thing.".to_string()], &lexicon).unwrap_err();
        assert!(matches!(err, ProbeError::UnknownSlot { .. }));

        let empty: BTreeMap<String, Vec<String>> =
            [("known".to_string(), Vec::new())].into_iter().collect();
        let err = expand_templates(&["A {known} thing.".to_string()], &empty).unwrap_err();
        assert!(matches!(err, ProbeError::EmptySlot(_)));

        let err = expand_templates(&["Broken {slot".to_string()], &lexicon).unwrap_err();
        assert!(matches!(err, ProbeError::UnclosedSlot(_)));
    }

    #[test]
    fn overlong_expansions_are_dropped() {
        let long_tail = "very ".repeat(30);
        let templates = vec![format!("{{w}} {long_tail}end."), "{w} fits.".to_string()];
        let lexicon: BTreeMap<String, Vec<String>> =
            [("w".to_string(), vec!["it".to_string()])].into_iter().collect();
        let out = expand_templates(&templates, &lexicon).unwrap();
        assert_eq!(out, vec!["it fits.".to_string()]);
    }

    #[test]
    fn generate_probe_sizes_and_determinism() {
        let (templates, lexicon) = doctor_templates();
        let a = generate_probe("doctor", &templates, &lexicon, 9, 30).unwrap();
        assert_eq!(a.positives().len(), 30);
        assert_eq!(a.negatives().len(), 30);
        let b = generate_probe("doctor", &templates, &lexicon, 9, 30).unwrap();
        assert_eq!(a, b);
        let c = generate_probe("doctor", &templates, &lexicon, 10, 30).unwrap();
        assert_ne!(a.positives(), c.positives());
        // Classes are disjoint as string sets.
        let pos: HashSet<_> = a.positives().iter().collect();
        assert!(a.negatives().iter().all(|s| !pos.contains(s)));
    }

    #[test]
    fn generate_probe_insufficient_combinations() {
        let (templates, lexicon) = doctor_templates();
        let err = generate_probe("doctor", &templates, &lexicon, 9, 1000).unwrap_err();
        match err {
            ProbeError::InsufficientCombinations {
                class,
                available,
                needed,
            } => {
                assert_eq!(class, "positive");
                assert_eq!(available, 90);
                assert_eq!(needed, 1000);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn default_probe_size_is_satisfiable() {
        let (templates, lexicon) = doctor_templates();
        let corpus =
            generate_probe("doctor", &templates, &lexicon, 1, DEFAULT_N_PER_CLASS);
        // 90 positives available < 150: the doctor fixture is too small, which
        // is itself worth asserting...
        assert!(corpus.is_err());
        // ...but the packaged distractor pool easily covers 150 negatives.
        let (neg_t, neg_l) = builtin_distractors();
        let pool = expand_templates(&neg_t, &neg_l).unwrap();
        assert!(pool.len() >= 2 * DEFAULT_N_PER_CLASS);
    }

    #[test]
    fn corpus_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("biaslens-probe-{}", std::process::id()));
        let (templates, lexicon) = doctor_templates();
        let corpus = generate_probe("doctor", &templates, &lexicon, 9, 20).unwrap();
        corpus.save(&dir).unwrap();
        let loaded = ProbeCorpus::load(&dir, "doctor").unwrap();
        assert_eq!(corpus, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn extraction_counts_and_determinism() {
        let model = ToyLm::new(42, 4, 16).unwrap();
        let (templates, lexicon) = doctor_templates();
        let corpus = generate_probe("doctor", &templates, &lexicon, 9, 15).unwrap();
        let set = extract_activation_set(&model, &corpus).unwrap();
        assert_eq!(set.records.len(), 2 * 15 * 4);
        assert!(set.records.iter().all(|r| r.activation.len() == 16));
        let again = extract_activation_set(&model, &corpus).unwrap();
        assert_eq!(set, again);
        // Per-layer slices hold every sentence once, positives first.
        let layer1: Vec<_> = set.layer_records(1).collect();
        assert_eq!(layer1.len(), 30);
        assert!(layer1[..15].iter().all(|r| r.label == 1));
        assert!(layer1[15..].iter().all(|r| r.label == 0));
    }

    #[test]
    fn extraction_matches_forward_all() {
        let model = ToyLm::new(42, 3, 8).unwrap();
        let (templates, lexicon) = doctor_templates();
        let corpus = generate_probe("doctor", &templates, &lexicon, 9, 5).unwrap();
        let set = extract_activation_set(&model, &corpus).unwrap();
        for (i, sentence) in corpus.positives().iter().enumerate() {
            let independent = model.forward_all(sentence).unwrap();
            for layer in 1..=3u32 {
                let rec: Vec<_> = set.layer_records(layer).collect();
                assert_eq!(
                    rec[i].activation,
                    independent[(layer - 1) as usize].to_f32(),
                    "sentence {i} layer {layer}"
                );
            }
        }
    }

    #[test]
    fn extraction_error_names_the_sentence() {
        let model = ToyLm::new(7, 2, 4).unwrap();
        // Whitespace-only sentences survive corpus construction but fail
        // tokenization inside the model.
        let corpus = ProbeCorpus::new(
            "broken",
            vec!["a fine sentence".into(), "   ".into()],
            vec!["a distractor".into()],
        )
        .unwrap();
        match extract_activation_set(&model, &corpus) {
            Err(ProbeError::Extraction { sentence, .. }) => assert_eq!(sentence, "   "),
            other => panic!("expected extraction error, got {other:?}"),
        }
    }

    #[test]
    fn activation_file_round_trip() {
        let model = ToyLm::new(7, 2, 4).unwrap();
        let (templates, lexicon) = doctor_templates();
        let corpus = generate_probe("doctor", &templates, &lexicon, 9, 5).unwrap();
        let set = extract_activation_set(&model, &corpus).unwrap();
        let bytes = set.to_bytes();
        let loaded = ActivationSet::from_bytes(&bytes).unwrap();
        // The format carries dims and records; name/provenance are external.
        assert_eq!(loaded.records, set.records);
        assert_eq!(loaded.model_info.n_layers, set.model_info.n_layers);
        assert_eq!(loaded.model_info.hidden_dim, set.model_info.hidden_dim);
        assert_eq!(loaded.provenance, None);
        // Byte-exact re-serialization.
        assert_eq!(loaded.to_bytes()[..bytes.len() - 8], bytes[..bytes.len() - 8]);
    }

    #[test]
    fn activation_file_errors() {
        let model = ToyLm::new(7, 2, 4).unwrap();
        let (templates, lexicon) = doctor_templates();
        let corpus = generate_probe("doctor", &templates, &lexicon, 9, 4).unwrap();
        let set = extract_activation_set(&model, &corpus).unwrap();
        let bytes = set.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            ActivationSet::from_bytes(&bad_magic),
            Err(ProbeError::Format(FormatError::BadMagic { .. }))
        ));

        // Truncate mid-record: the error carries the byte offset.
        let cut = &bytes[..bytes.len() - 20];
        match ActivationSet::from_bytes(cut) {
            Err(ProbeError::Format(FormatError::Truncated { offset, .. })) => {
                assert_eq!(offset, cut.len() as u64);
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut flipped = bytes.clone();
        let idx = 30; // inside the first record's activation payload
        flipped[idx] ^= 0x01;
        assert!(matches!(
            ActivationSet::from_bytes(&flipped),
            Err(ProbeError::Format(FormatError::Checksum { .. }))
        ));
    }

    #[test]
    fn arbitrary_activation_sets_round_trip_exactly() {
        use proptest::prelude::*;
        proptest!(|(seed in 0u64..500, n_layers in 1usize..4, dim in 1usize..6)| {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let mut records = Vec::new();
            for layer in 1..=n_layers as u32 {
                for label in [1u8, 0u8] {
                    for _ in 0..1 + rng.next_below(3) {
                        records.push(ActivationRecord {
                            layer,
                            label,
                            activation: (0..dim)
                                .map(|_| rng.next_normal() as f32)
                                .collect(),
                        });
                    }
                }
            }
            let set = ActivationSet::new(
                ModelInfo::new(n_layers, dim, "").unwrap(),
                records,
                None,
            )
            .unwrap();
            let bytes = set.to_bytes();
            let loaded = ActivationSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&loaded, &set);
            prop_assert_eq!(loaded.to_bytes(), bytes);
        });
    }

    #[test]
    fn activation_set_validation() {
        let info = ModelInfo::new(2, 3, "m").unwrap();
        let rec = |layer, label| ActivationRecord {
            layer,
            label,
            activation: vec![0.0; 3],
        };
        // Missing negative class on layer 1.
        assert!(matches!(
            ActivationSet::new(info.clone(), vec![rec(1, 1)], None),
            Err(ProbeError::Invalid(_))
        ));
        // Layer out of range.
        assert!(matches!(
            ActivationSet::new(info.clone(), vec![rec(3, 1), rec(3, 0)], None),
            Err(ProbeError::Invalid(_))
        ));
        // Well-formed.
        assert!(ActivationSet::new(info, vec![rec(1, 1), rec(1, 0)], None).is_ok());
    }
}
