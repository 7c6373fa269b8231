//! End-to-end orchestration: probe → activations → CAVs → steering → SAE
//! codes → concept vectors → bias grid, with every intermediate persisted
//! under a run directory and tracked by content hash in a manifest.
//!
//! Each stage is callable on its own (the CLI fronts them one command per
//! stage) and is idempotent: identical inputs rewrite byte-identical outputs.
//! Stages read their inputs back from the run directory rather than passing
//! values in memory, so a full run and a stage-by-stage run produce the same
//! bytes. The manifest records a config hash plus the hash and named inputs
//! of every artifact; the report stage refuses to render a run directory
//! whose files no longer match it.

use crate::bias::{bias_grid, BiasGrid, GridMetadata};
use crate::cav::{derive_cav_stack_parallel, CavStack};
use crate::hash::{fnv1a, Fnv1a, fnv1a_str};
use crate::model::LayerwiseModel;
use crate::numerics;
use crate::probe::{extract_activation_set, generate_probe, ActivationSet, ProbeCorpus, Provenance};
use crate::sae::{concept_vector, ConceptProvenance, ConceptVector, SaeEncoder};
use crate::steering::{steer, SteerConfig, SteerTrace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
    #[error("stage {stage} ({subject}): {message}")]
    Stage {
        stage: &'static str,
        subject: String,
        message: String,
    },
    #[error("provenance: {0}")]
    Provenance(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_err(
    stage: &'static str,
    subject: impl Into<String>,
    message: impl std::fmt::Display,
) -> PipelineError {
    PipelineError::Stage {
        stage,
        subject: subject.into(),
        message: message.to_string(),
    }
}

/// Templates and lexicon for one concept's probe corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub templates: Vec<String>,
    pub lexicon: BTreeMap<String, Vec<String>>,
}

/// Everything the pipeline stages need besides the model and the SAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub seed: u64,
    pub n_per_class: usize,
    pub concepts: Vec<ConceptSpec>,
    pub targets: Vec<String>,
    pub ref_pairs: Vec<(String, String)>,
    /// (prompt id, prompt text); a grid uses one prompt, several average.
    pub prompts: Vec<(String, String)>,
    pub steer: SteerConfig,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.concepts.is_empty() {
            return Err(PipelineError::InvalidSpec("no concepts".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.concepts {
            if c.name.is_empty() {
                return Err(PipelineError::InvalidSpec("empty concept name".into()));
            }
            if !names.insert(&c.name) {
                return Err(PipelineError::InvalidSpec(format!(
                    "duplicate concept {:?}",
                    c.name
                )));
            }
        }
        let known = |n: &String| names.contains(n);
        if self.targets.is_empty() {
            return Err(PipelineError::InvalidSpec("no targets".into()));
        }
        for t in &self.targets {
            if !known(t) {
                return Err(PipelineError::InvalidSpec(format!(
                    "target {t:?} has no concept definition"
                )));
            }
        }
        if self.ref_pairs.is_empty() {
            return Err(PipelineError::InvalidSpec("no reference pairs".into()));
        }
        for (a, b) in &self.ref_pairs {
            for r in [a, b] {
                if !known(r) {
                    return Err(PipelineError::InvalidSpec(format!(
                        "reference {r:?} has no concept definition"
                    )));
                }
            }
        }
        if self.prompts.is_empty() {
            return Err(PipelineError::InvalidSpec("no steering prompts".into()));
        }
        let mut prompt_ids = std::collections::HashSet::new();
        for (id, text) in &self.prompts {
            if !prompt_ids.insert(id) {
                return Err(PipelineError::InvalidSpec(format!(
                    "duplicate prompt id {id:?}"
                )));
            }
            if text.trim().is_empty() {
                return Err(PipelineError::InvalidSpec(format!(
                    "prompt {id:?} is empty"
                )));
            }
        }
        if self.n_per_class < 10 {
            return Err(PipelineError::InvalidSpec(
                "n_per_class must be at least 10 (classifier training minimum)".into(),
            ));
        }
        self.steer
            .validate()
            .map_err(|e| PipelineError::InvalidSpec(e.to_string()))
    }

    pub fn concept(&self, name: &str) -> Option<&ConceptSpec> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// Content hash of the spec, used as the default run config hash.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        hex64(fnv1a(canonical.as_bytes()))
    }

    /// Seeds derive from the concept's template/lexicon content, so two
    /// concept names with identical definitions get identical corpora, CAVs
    /// and concept vectors.
    fn concept_seed(&self, concept: &ConceptSpec) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&(concept.templates.len() as u64).to_le_bytes());
        for t in &concept.templates {
            fnv1a_str(&mut h, t);
        }
        for (slot, words) in &concept.lexicon {
            fnv1a_str(&mut h, slot);
            h.update(&(words.len() as u64).to_le_bytes());
            for w in words {
                fnv1a_str(&mut h, w);
            }
        }
        self.seed ^ h.finish()
    }
}

pub fn hex64(h: u64) -> String {
    format!("{h:016x}")
}

/// Run-directory layout and path helpers.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn probes_dir(&self) -> PathBuf {
        self.root.join("probes")
    }

    pub fn activation_rel(concept: &str) -> String {
        format!("activations/{concept}.blac")
    }

    pub fn cav_rel(concept: &str) -> String {
        format!("cavs/{concept}.blcv")
    }

    pub fn sae_rel() -> String {
        "sae/encoder.blsa".to_string()
    }

    pub fn steer_rel(concept: &str, prompt_id: &str) -> String {
        format!("steer/{concept}.{prompt_id}.json")
    }

    pub fn concept_rel(concept: &str, prompt_id: &str) -> String {
        format!("concepts/{concept}.{prompt_id}.json")
    }

    pub fn grid_json_rel() -> String {
        "grid.json".to_string()
    }

    pub fn grid_csv_rel() -> String {
        "grid.csv".to_string()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<u64, PipelineError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        Ok(fnv1a(bytes))
    }

    fn read(&self, rel: &str, stage: &'static str) -> Result<Vec<u8>, PipelineError> {
        std::fs::read(self.path(rel)).map_err(|e| {
            stage_err(
                stage,
                rel,
                format!("{e}; run the earlier pipeline stages first"),
            )
        })
    }
}

/// Hash bookkeeping for a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub hash: String,
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(run: &RunDir) -> Result<Option<Manifest>, PipelineError> {
        let path = run.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Provenance(format!("manifest unreadable: {e}")))
    }

    /// Load and require the recorded config hash to match.
    pub fn load_matching(run: &RunDir, config_hash: &str) -> Result<Manifest, PipelineError> {
        match Manifest::load(run)? {
            None => Err(PipelineError::Provenance(
                "run directory has no manifest; run probe-gen first".into(),
            )),
            Some(m) if m.config_hash != config_hash => Err(PipelineError::Provenance(format!(
                "run directory was produced with config {} but the current config hashes to {}",
                m.config_hash, config_hash
            ))),
            Some(m) => Ok(m),
        }
    }

    pub fn save(&self, run: &RunDir) -> Result<(), PipelineError> {
        std::fs::create_dir_all(run.root())?;
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(run.manifest_path(), text)?;
        Ok(())
    }

    pub fn record(&mut self, rel: &str, hash: u64, inputs: BTreeMap<String, String>) {
        self.files.insert(
            rel.to_string(),
            FileEntry {
                hash: hex64(hash),
                inputs,
            },
        );
    }

    /// Check a loaded artifact's bytes against the recorded hash.
    pub fn verify(&self, rel: &str, bytes: &[u8]) -> Result<&FileEntry, PipelineError> {
        let entry = self.files.get(rel).ok_or_else(|| {
            PipelineError::Provenance(format!("{rel} is not recorded in the manifest"))
        })?;
        let actual = hex64(fnv1a(bytes));
        if actual != entry.hash {
            return Err(PipelineError::Provenance(format!(
                "{rel} hashes to {actual} but the manifest records {}",
                entry.hash
            )));
        }
        Ok(entry)
    }
}

/// Persisted output of one steer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerArtifact {
    pub model: String,
    pub concept: String,
    pub prompt_id: String,
    pub cav_hash: String,
    pub trace: SteerTrace,
}

const STAGE_PROBE: &str = "probe-gen";
const STAGE_EXTRACT: &str = "extract";
const STAGE_CAV: &str = "cav-train";
const STAGE_STEER: &str = "steer";
const STAGE_CONCEPT: &str = "concept";
const STAGE_GRID: &str = "bias-grid";
const STAGE_REPORT: &str = "report";

/// Generate and persist every concept's probe corpus. Starts (or resets) the
/// manifest for `config_hash`.
pub fn stage_probe_gen(
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
) -> Result<Vec<ProbeCorpus>, PipelineError> {
    spec.validate()?;
    let mut manifest = match Manifest::load(run)? {
        Some(m) if m.config_hash == config_hash => m,
        _ => Manifest {
            config_hash: config_hash.to_string(),
            files: BTreeMap::new(),
        },
    };
    let mut corpora = Vec::with_capacity(spec.concepts.len());
    for concept in &spec.concepts {
        let corpus = generate_probe(
            &concept.name,
            &concept.templates,
            &concept.lexicon,
            spec.concept_seed(concept),
            spec.n_per_class,
        )
        .map_err(|e| stage_err(STAGE_PROBE, &concept.name, e))?;
        corpus
            .save(&run.probes_dir())
            .map_err(|e| stage_err(STAGE_PROBE, &concept.name, e))?;
        let inputs: BTreeMap<String, String> =
            [("config".to_string(), config_hash.to_string())].into();
        for suffix in ["pos", "neg"] {
            let rel = format!("probes/{}.{suffix}.txt", concept.name);
            let bytes = std::fs::read(run.path(&rel))?;
            manifest.record(&rel, fnv1a(&bytes), inputs.clone());
        }
        corpora.push(corpus);
    }
    manifest.save(run)?;
    Ok(corpora)
}

/// Extract per-layer activations for every concept's corpus.
pub fn stage_extract(
    model: &dyn LayerwiseModel,
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
) -> Result<(), PipelineError> {
    spec.validate()?;
    let mut manifest = Manifest::load_matching(run, config_hash)?;
    for concept in &spec.concepts {
        let corpus = ProbeCorpus::load(&run.probes_dir(), &concept.name)
            .map_err(|e| stage_err(STAGE_EXTRACT, &concept.name, e))?;
        let set = extract_activation_set(model, &corpus)
            .map_err(|e| stage_err(STAGE_EXTRACT, &concept.name, e))?;
        let rel = RunDir::activation_rel(&concept.name);
        let hash = run.write(&rel, &set.to_bytes())?;
        let inputs: BTreeMap<String, String> = [
            ("config".to_string(), config_hash.to_string()),
            ("model".to_string(), model.info().name.clone()),
            (
                "corpus_hash".to_string(),
                hex64(corpus.corpus_hash()),
            ),
            (
                "probes".to_string(),
                manifest
                    .files
                    .get(&format!("probes/{}.pos.txt", concept.name))
                    .map(|e| e.hash.clone())
                    .unwrap_or_default(),
            ),
        ]
        .into();
        manifest.record(&rel, hash, inputs);
    }
    manifest.save(run)?;
    Ok(())
}

/// Load an activation set back and rebind the external metadata the binary
/// format does not carry.
fn load_activations(
    run: &RunDir,
    manifest: &Manifest,
    concept: &str,
    stage: &'static str,
) -> Result<(ActivationSet, String), PipelineError> {
    let rel = RunDir::activation_rel(concept);
    let bytes = run.read(&rel, stage)?;
    let entry = manifest.verify(&rel, &bytes)?;
    let model_name = entry.inputs.get("model").cloned().unwrap_or_default();
    let corpus_hash = entry
        .inputs
        .get("corpus_hash")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .unwrap_or_default();
    let mut set =
        ActivationSet::from_bytes(&bytes).map_err(|e| stage_err(stage, concept, e))?;
    set.model_info.name = model_name.clone();
    set.provenance = Some(Provenance {
        concept: concept.to_string(),
        corpus_hash,
    });
    Ok((set, model_name))
}

/// Train per-layer classifiers and persist each concept's CAV stack.
pub fn stage_cav_train(
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
    jobs: usize,
) -> Result<(), PipelineError> {
    spec.validate()?;
    let mut manifest = Manifest::load_matching(run, config_hash)?;
    for concept in &spec.concepts {
        let (set, model_name) = load_activations(run, &manifest, &concept.name, STAGE_CAV)?;
        let split_seed = spec.concept_seed(concept) ^ 0x517a_17ee;
        let stack = derive_cav_stack_parallel(&set, split_seed, jobs)
            .map_err(|e| stage_err(STAGE_CAV, &concept.name, e))?;
        let rel = RunDir::cav_rel(&concept.name);
        let hash = run.write(&rel, &stack.to_bytes())?;
        let activation_rel = RunDir::activation_rel(&concept.name);
        let inputs: BTreeMap<String, String> = [
            ("config".to_string(), config_hash.to_string()),
            ("model".to_string(), model_name),
            (
                "activations".to_string(),
                manifest.files[&activation_rel].hash.clone(),
            ),
        ]
        .into();
        manifest.record(&rel, hash, inputs);
    }
    manifest.save(run)?;
    Ok(())
}

/// Materialize the SAE encoder inside the run directory.
pub fn stage_sae(
    encoder: &SaeEncoder,
    run: &RunDir,
    config_hash: &str,
) -> Result<(), PipelineError> {
    let mut manifest = Manifest::load_matching(run, config_hash)?;
    let rel = RunDir::sae_rel();
    let hash = run.write(&rel, &encoder.to_bytes())?;
    let inputs: BTreeMap<String, String> =
        [("config".to_string(), config_hash.to_string())].into();
    manifest.record(&rel, hash, inputs);
    manifest.save(run)?;
    Ok(())
}

fn load_cav_stack(
    run: &RunDir,
    manifest: &Manifest,
    concept: &str,
    stage: &'static str,
) -> Result<(CavStack, String), PipelineError> {
    let rel = RunDir::cav_rel(concept);
    let bytes = run.read(&rel, stage)?;
    let entry = manifest.verify(&rel, &bytes)?;
    let model_name = entry.inputs.get("model").cloned().unwrap_or_default();
    let mut stack = CavStack::from_bytes(&bytes).map_err(|e| stage_err(stage, concept, e))?;
    stack.concept = concept.to_string();
    stack.model_info.name = model_name.clone();
    Ok((stack, model_name))
}

/// Steer every concept for the selected prompt (or all configured prompts).
pub fn stage_steer(
    model: &dyn LayerwiseModel,
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
    prompt_id: Option<&str>,
    dump_trace: bool,
) -> Result<(), PipelineError> {
    spec.validate()?;
    let mut manifest = Manifest::load_matching(run, config_hash)?;
    let prompts: Vec<&(String, String)> = match prompt_id {
        Some(id) => {
            let found = spec
                .prompts
                .iter()
                .find(|(pid, _)| pid == id)
                .ok_or_else(|| {
                    PipelineError::InvalidSpec(format!("prompt id {id:?} is not configured"))
                })?;
            vec![found]
        }
        None => spec.prompts.iter().collect(),
    };
    for concept in &spec.concepts {
        let (stack, _) = load_cav_stack(run, &manifest, &concept.name, STAGE_STEER)?;
        if stack.model_info != *model.info() {
            return Err(PipelineError::Provenance(format!(
                "CAVs for {:?} were trained on {:?} but steering runs on {:?}",
                concept.name, stack.model_info, model.info()
            )));
        }
        let cav_hash = hex64(stack.stack_hash());
        for (pid, text) in &prompts {
            let trace = steer(model, &stack, text, &spec.steer)
                .map_err(|e| stage_err(STAGE_STEER, &concept.name, e))?;
            let artifact = SteerArtifact {
                model: model.info().name.clone(),
                concept: concept.name.clone(),
                prompt_id: pid.clone(),
                cav_hash: cav_hash.clone(),
                trace,
            };
            let mut json =
                serde_json::to_string_pretty(&artifact).expect("steer trace serializes");
            json.push('\n');
            let rel = RunDir::steer_rel(&concept.name, pid);
            let hash = run.write(&rel, json.as_bytes())?;
            if dump_trace {
                let text_rel = format!("steer/{}.{pid}.trace.txt", concept.name);
                run.write(&text_rel, artifact.trace.render_text().as_bytes())?;
            }
            let inputs: BTreeMap<String, String> = [
                ("config".to_string(), config_hash.to_string()),
                ("cavs".to_string(), cav_hash.clone()),
                ("prompt".to_string(), hex64(fnv1a(text.as_bytes()))),
            ]
            .into();
            manifest.record(&rel, hash, inputs);
        }
    }
    manifest.save(run)?;
    Ok(())
}

fn load_sae(
    run: &RunDir,
    manifest: &Manifest,
    stage: &'static str,
) -> Result<(SaeEncoder, u64), PipelineError> {
    let rel = RunDir::sae_rel();
    let bytes = run.read(&rel, stage)?;
    manifest.verify(&rel, &bytes)?;
    let encoder = SaeEncoder::from_bytes(&bytes).map_err(|e| stage_err(stage, &rel, e))?;
    let hash = fnv1a(&bytes);
    Ok((encoder, hash))
}

fn load_steer_artifact(
    run: &RunDir,
    manifest: &Manifest,
    concept: &str,
    prompt_id: &str,
    stage: &'static str,
) -> Result<SteerArtifact, PipelineError> {
    let rel = RunDir::steer_rel(concept, prompt_id);
    let bytes = run.read(&rel, stage)?;
    manifest.verify(&rel, &bytes)?;
    serde_json::from_slice(&bytes).map_err(|e| stage_err(stage, rel, e))
}

/// Encode each concept's paired activations and persist the concept vectors.
pub fn stage_concepts(
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
) -> Result<(), PipelineError> {
    spec.validate()?;
    let mut manifest = Manifest::load_matching(run, config_hash)?;
    let (encoder, sae_hash) = load_sae(run, &manifest, STAGE_CONCEPT)?;
    for concept in &spec.concepts {
        for (pid, text) in &spec.prompts {
            let artifact =
                load_steer_artifact(run, &manifest, &concept.name, pid, STAGE_CONCEPT)?;
            let (a_ori, a_steer) = artifact.trace.paired_last_activations();
            if a_ori.dim() != encoder.input_dim() {
                return Err(PipelineError::Provenance(format!(
                    "SAE expects {}-dim inputs but the model activations are {}-dim",
                    encoder.input_dim(),
                    a_ori.dim()
                )));
            }
            let encode = |side: &str, a: &numerics::Vector| {
                encoder.encode(a).map_err(|e| {
                    stage_err(STAGE_CONCEPT, format!("{} ({side})", concept.name), e)
                })
            };
            let z_ori = encode("unsteered", a_ori)?;
            let z_steer = encode("steered", a_steer)?;
            let provenance = ConceptProvenance {
                model: artifact.model.clone(),
                prompt_hash: fnv1a(text.as_bytes()),
                cav_hash: u64::from_str_radix(&artifact.cav_hash, 16).unwrap_or_default(),
                sae_hash,
            };
            let vector = concept_vector(&concept.name, &z_ori, &z_steer, provenance)
                .map_err(|e| stage_err(STAGE_CONCEPT, &concept.name, e))?;
            let mut json =
                serde_json::to_string_pretty(&vector).expect("concept vector serializes");
            json.push('\n');
            let rel = RunDir::concept_rel(&concept.name, pid);
            let hash = run.write(&rel, json.as_bytes())?;
            let steer_rel = RunDir::steer_rel(&concept.name, pid);
            let inputs: BTreeMap<String, String> = [
                ("config".to_string(), config_hash.to_string()),
                ("steer".to_string(), manifest.files[&steer_rel].hash.clone()),
                ("sae".to_string(), hex64(sae_hash)),
            ]
            .into();
            manifest.record(&rel, hash, inputs);
        }
    }
    manifest.save(run)?;
    Ok(())
}

fn load_concept_vector(
    run: &RunDir,
    manifest: &Manifest,
    concept: &str,
    prompt_id: &str,
    stage: &'static str,
) -> Result<ConceptVector, PipelineError> {
    let rel = RunDir::concept_rel(concept, prompt_id);
    let bytes = run.read(&rel, stage)?;
    manifest.verify(&rel, &bytes)?;
    serde_json::from_slice(&bytes).map_err(|e| stage_err(stage, rel, e))
}

/// Assemble the bias grid from persisted concept vectors; with several
/// prompts the final grid is the mean of the per-prompt grids.
pub fn stage_grid(
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
) -> Result<BiasGrid, PipelineError> {
    spec.validate()?;
    let mut manifest = Manifest::load_matching(run, config_hash)?;
    let mut per_prompt = Vec::with_capacity(spec.prompts.len());
    let mut grid_inputs: BTreeMap<String, String> =
        [("config".to_string(), config_hash.to_string())].into();
    for (pid, text) in &spec.prompts {
        let mut vectors = BTreeMap::new();
        let mut hashes = BTreeMap::new();
        hashes.insert("config".to_string(), config_hash.to_string());
        let mut model_name = String::new();
        for concept in &spec.concepts {
            let vector = load_concept_vector(run, &manifest, &concept.name, pid, STAGE_GRID)?;
            hashes.insert(
                format!("cav:{}", concept.name),
                hex64(vector.provenance.cav_hash),
            );
            hashes.insert("sae".to_string(), hex64(vector.provenance.sae_hash));
            model_name = vector.provenance.model.clone();
            let rel = RunDir::concept_rel(&concept.name, pid);
            grid_inputs.insert(rel.clone(), manifest.files[&rel].hash.clone());
            vectors.insert(concept.name.clone(), vector);
        }
        let metadata = GridMetadata {
            model: model_name,
            prompt: text.clone(),
            hashes,
        };
        let grid = bias_grid(&vectors, &spec.targets, &spec.ref_pairs, metadata)
            .map_err(|e| stage_err(STAGE_GRID, pid, e))?;
        per_prompt.push(grid);
    }
    let grid = if per_prompt.len() == 1 {
        per_prompt.into_iter().next().expect("one grid")
    } else {
        BiasGrid::mean_of(&per_prompt).map_err(|e| stage_err(STAGE_GRID, "mean", e))?
    };
    let json_hash = run.write(&RunDir::grid_json_rel(), grid.render_report().as_bytes())?;
    let csv_hash = run.write(&RunDir::grid_csv_rel(), grid.render_csv().as_bytes())?;
    manifest.record(&RunDir::grid_json_rel(), json_hash, grid_inputs.clone());
    manifest.record(&RunDir::grid_csv_rel(), csv_hash, grid_inputs);
    manifest.save(run)?;
    Ok(grid)
}

/// Verify every recorded artifact and render the report directory: a plain
/// text grid table, the grid CSV, and per-concept salience curve points when
/// a relevance mask is available.
pub fn stage_report(
    spec: &PipelineSpec,
    run: &RunDir,
    config_hash: &str,
    relevance_mask: Option<&[bool]>,
) -> Result<(), PipelineError> {
    spec.validate()?;
    let manifest = Manifest::load_matching(run, config_hash)?;
    // Refuse to render if anything drifted from the manifest.
    for (rel, entry) in &manifest.files {
        let bytes = run.read(rel, STAGE_REPORT)?;
        let actual = hex64(fnv1a(&bytes));
        if actual != entry.hash {
            return Err(PipelineError::Provenance(format!(
                "{rel} hashes to {actual} but the manifest records {}",
                entry.hash
            )));
        }
    }
    let report_dir = run.report_dir();
    std::fs::create_dir_all(&report_dir)?;

    let grid_json = run.read(&RunDir::grid_json_rel(), STAGE_REPORT)?;
    std::fs::write(report_dir.join("grid.json"), &grid_json)?;
    let grid_csv = run.read(&RunDir::grid_csv_rel(), STAGE_REPORT)?;
    std::fs::write(report_dir.join("grid.csv"), &grid_csv)?;
    let table = render_grid_table(&grid_json)
        .map_err(|e| stage_err(STAGE_REPORT, "grid.json", e))?;
    std::fs::write(report_dir.join("grid.txt"), table)?;

    if let Some(mask) = relevance_mask {
        let (encoder, _) = load_sae(run, &manifest, STAGE_REPORT)?;
        if mask.len() != encoder.feature_count() {
            return Err(PipelineError::Provenance(format!(
                "relevance mask has {} entries but the SAE has {} features",
                mask.len(),
                encoder.feature_count()
            )));
        }
        for concept in &spec.concepts {
            for (pid, _) in &spec.prompts {
                let artifact =
                    load_steer_artifact(run, &manifest, &concept.name, pid, STAGE_REPORT)?;
                let (a_ori, a_steer) = artifact.trace.paired_last_activations();
                let encode = |a: &numerics::Vector| {
                    encoder
                        .encode(a)
                        .map_err(|e| stage_err(STAGE_REPORT, &concept.name, e))
                };
                let z_ori = encode(a_ori)?;
                let z_steer = encode(a_steer)?;
                let csv = salience_curves_csv(&z_ori, &z_steer, mask)
                    .map_err(|e| stage_err(STAGE_REPORT, &concept.name, e))?;
                std::fs::write(
                    report_dir.join(format!("salience_{}.{pid}.csv", concept.name)),
                    csv,
                )?;
            }
        }
    }
    Ok(())
}

/// Plain text rendering of the grid document: rows are reference pairs,
/// columns targets; `**` marks the highest score in a column, `*` the second.
fn render_grid_table(grid_json: &[u8]) -> Result<String, String> {
    let doc: serde_json::Value =
        serde_json::from_slice(grid_json).map_err(|e| e.to_string())?;
    let targets: Vec<String> = doc["targets"]
        .as_array()
        .ok_or("missing targets")?
        .iter()
        .map(|t| t.as_str().unwrap_or_default().to_string())
        .collect();
    let rows = doc["rows"].as_array().ok_or("missing rows")?;
    let mut label_width = "ref pair \\ target".len();
    let mut row_labels = Vec::new();
    for row in rows {
        let label = format!(
            "{} vs {}",
            row["ref1"].as_str().unwrap_or_default(),
            row["ref2"].as_str().unwrap_or_default()
        );
        label_width = label_width.max(label.len());
        row_labels.push(label);
    }
    let col_width = targets.iter().map(|t| t.len()).max().unwrap_or(0).max(10);

    let mut out = String::new();
    out.push_str(&format!(
        "model:  {}\nprompt: {}\n\n",
        doc["metadata"]["model"].as_str().unwrap_or_default(),
        doc["metadata"]["prompt"].as_str().unwrap_or_default()
    ));
    out.push_str(&format!("{:<label_width$}", "ref pair \\ target"));
    for t in &targets {
        out.push_str(&format!("  {t:>col_width$}"));
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&format!("{:<label_width$}", row_labels[i]));
        for cell in row["scores"].as_array().ok_or("missing scores")? {
            let marker = match cell["rank"].as_u64() {
                Some(1) => "**",
                Some(2) => "*",
                _ => "",
            };
            let text = format!("{}{marker}", cell["score"].as_str().unwrap_or_default());
            out.push_str(&format!("  {text:>col_width$}"));
        }
        out.push('\n');
    }
    out.push_str("\n** highest score per target column, * second highest\n");
    Ok(out)
}

/// Curve points (fraction scanned, fraction of relevant captured) for the
/// four salience variants, as a flat CSV.
fn salience_curves_csv(
    z_ori: &numerics::Vector,
    z_steer: &numerics::Vector,
    mask: &[bool],
) -> Result<String, crate::sae::SaeError> {
    let diff = z_steer.sub(z_ori).map_err(crate::sae::SaeError::from)?;
    let norm_diff = concept_vector("", z_ori, z_steer, ConceptProvenance::default())?;
    let mut out = String::from("variant,x,y\n");
    for (name, values) in [
        ("original", z_ori),
        ("steered", z_steer),
        ("difference", &diff),
        ("normalized_difference", norm_diff.values()),
    ] {
        for (x, y) in numerics::salience_curve(values, mask)? {
            out.push_str(&format!("{name},{x:.6},{y:.6}\n"));
        }
    }
    Ok(out)
}

/// Run every stage in order and return the final grid.
pub fn run_pipeline(
    model: &dyn LayerwiseModel,
    encoder: &SaeEncoder,
    spec: &PipelineSpec,
    run: &RunDir,
) -> Result<BiasGrid, PipelineError> {
    let config_hash = spec.digest();
    stage_probe_gen(spec, run, &config_hash)?;
    stage_extract(model, spec, run, &config_hash)?;
    stage_cav_train(spec, run, &config_hash, 1)?;
    stage_sae(encoder, run, &config_hash)?;
    stage_steer(model, spec, run, &config_hash, None, false)?;
    stage_concepts(spec, run, &config_hash)?;
    stage_grid(spec, run, &config_hash)
}
