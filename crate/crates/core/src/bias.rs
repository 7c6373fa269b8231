//! The cosine-asymmetry bias score and its grid/report assembly.
//!
//! For a target concept and a reference pair, the score is
//! |cos(target, ref1) − cos(target, ref2)| in SAE feature space: zero when
//! the target sits symmetrically between the references, larger the more its
//! alignment skews toward one of them. Scores are only meaningful between
//! concept vectors from the same model, prompt and SAE, which the provenance
//! check enforces.

use crate::numerics::{self, NumericsError};
use crate::sae::ConceptVector;

pub use crate::pipeline::run_pipeline;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("concept {0:?} has no concept vector")]
    MissingConcept(String),
    #[error("concept vectors {a:?} and {b:?} come from different runs and are not comparable")]
    ProvenanceMismatch { a: String, b: String },
    #[error("concept vector {0:?} is all-zero; cosine undefined")]
    ZeroVector(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One target-versus-reference-pair bias measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasScore {
    pub target: String,
    pub ref1: String,
    pub ref2: String,
    pub score: f64,
    pub cos1: f64,
    pub cos2: f64,
}

/// score = |cos(target, ref1) − cos(target, ref2)|.
pub fn bias_score(
    target: &ConceptVector,
    ref1: &ConceptVector,
    ref2: &ConceptVector,
) -> Result<BiasScore, BiasError> {
    for (a, b) in [(target, ref1), (target, ref2), (ref1, ref2)] {
        if !a.provenance.comparable(&b.provenance) {
            return Err(BiasError::ProvenanceMismatch {
                a: a.concept.clone(),
                b: b.concept.clone(),
            });
        }
    }
    let cos_against = |other: &ConceptVector| -> Result<f64, BiasError> {
        numerics::cosine(target.values(), other.values()).map_err(|e| match e {
            NumericsError::ZeroNorm => {
                let zero = if target.values().norm() == 0.0 {
                    &target.concept
                } else {
                    &other.concept
                };
                BiasError::ZeroVector(zero.clone())
            }
            other => BiasError::Numerics(other),
        })
    };
    let cos1 = cos_against(ref1)?;
    let cos2 = cos_against(ref2)?;
    Ok(BiasScore {
        target: target.concept.clone(),
        ref1: ref1.concept.clone(),
        ref2: ref2.concept.clone(),
        score: (cos1 - cos2).abs(),
        cos1,
        cos2,
    })
}

/// Run identity attached to a grid document.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GridMetadata {
    pub model: String,
    pub prompt: String,
    /// Named content hashes (config, SAE, per-concept CAV stacks, ...).
    pub hashes: BTreeMap<String, String>,
}

/// Score matrix over reference pairs (rows) × targets (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasGrid {
    pub targets: Vec<String>,
    pub ref_pairs: Vec<(String, String)>,
    /// `cells[pair_index][target_index]`
    pub cells: Vec<Vec<BiasScore>>,
    pub metadata: GridMetadata,
}

/// Fill the score matrix from named concept vectors.
pub fn bias_grid(
    vectors: &BTreeMap<String, ConceptVector>,
    targets: &[String],
    ref_pairs: &[(String, String)],
    metadata: GridMetadata,
) -> Result<BiasGrid, BiasError> {
    let lookup = |name: &str| -> Result<&ConceptVector, BiasError> {
        vectors
            .get(name)
            .ok_or_else(|| BiasError::MissingConcept(name.to_string()))
    };
    let mut cells = Vec::with_capacity(ref_pairs.len());
    for (ref1, ref2) in ref_pairs {
        let r1 = lookup(ref1)?;
        let r2 = lookup(ref2)?;
        let mut row = Vec::with_capacity(targets.len());
        for target in targets {
            row.push(bias_score(lookup(target)?, r1, r2)?);
        }
        cells.push(row);
    }
    Ok(BiasGrid {
        targets: targets.to_vec(),
        ref_pairs: ref_pairs.to_vec(),
        cells,
        metadata,
    })
}

impl BiasGrid {
    /// Per-column ranks: `Some(1)` marks the highest score in the column,
    /// `Some(2)` the second highest. Ties resolve to the earlier row.
    #[allow(clippy::needless_range_loop)] // `col` indexes across rows, not into one
    pub fn column_ranks(&self) -> Vec<Vec<Option<u8>>> {
        let n_rows = self.ref_pairs.len();
        let n_cols = self.targets.len();
        let mut ranks = vec![vec![None; n_cols]; n_rows];
        for col in 0..n_cols {
            let mut order: Vec<usize> = (0..n_rows).collect();
            order.sort_by(|&a, &b| {
                self.cells[b][col]
                    .score
                    .partial_cmp(&self.cells[a][col].score)
                    .expect("scores are finite")
                    .then(a.cmp(&b))
            });
            if let Some(&first) = order.first() {
                ranks[first][col] = Some(1);
            }
            if let Some(&second) = order.get(1) {
                ranks[second][col] = Some(2);
            }
        }
        ranks
    }

    /// Structured grid document: metadata block, labels, 6-decimal cell
    /// values, and top-1/top-2 markers per target column.
    pub fn render_report(&self) -> String {
        #[derive(Serialize)]
        struct CellDoc<'a> {
            target: &'a str,
            score: String,
            cos1: String,
            cos2: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            rank: Option<u8>,
        }
        #[derive(Serialize)]
        struct RowDoc<'a> {
            ref1: &'a str,
            ref2: &'a str,
            scores: Vec<CellDoc<'a>>,
        }
        #[derive(Serialize)]
        struct GridDoc<'a> {
            metadata: &'a GridMetadata,
            targets: &'a [String],
            rows: Vec<RowDoc<'a>>,
        }
        let ranks = self.column_ranks();
        let rows = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, row)| RowDoc {
                ref1: &self.ref_pairs[i].0,
                ref2: &self.ref_pairs[i].1,
                scores: row
                    .iter()
                    .enumerate()
                    .map(|(j, cell)| CellDoc {
                        target: &cell.target,
                        score: format!("{:.6}", cell.score),
                        cos1: format!("{:.6}", cell.cos1),
                        cos2: format!("{:.6}", cell.cos2),
                        rank: ranks[i][j],
                    })
                    .collect(),
            })
            .collect();
        let doc = GridDoc {
            metadata: &self.metadata,
            targets: &self.targets,
            rows,
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("grid serializes");
        out.push('\n');
        out
    }

    /// Flat CSV: `ref_pair,target,score,cos1,cos2`.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("ref_pair,target,score,cos1,cos2\n");
        for (i, row) in self.cells.iter().enumerate() {
            let (ref1, ref2) = &self.ref_pairs[i];
            for cell in row {
                out.push_str(&format!(
                    "{ref1}|{ref2},{},{:.6},{:.6},{:.6}\n",
                    cell.target, cell.score, cell.cos1, cell.cos2
                ));
            }
        }
        out
    }

    /// Mean of several grids with identical shape, used when averaging over
    /// steering prompts. Metadata comes from the first grid; the prompt field
    /// lists all prompts.
    pub fn mean_of(grids: &[BiasGrid]) -> Result<BiasGrid, BiasError> {
        assert!(!grids.is_empty(), "mean_of requires at least one grid");
        let first = &grids[0];
        let mut out = first.clone();
        if grids.len() == 1 {
            return Ok(out);
        }
        for grid in &grids[1..] {
            assert_eq!(grid.targets, first.targets, "grid shapes must match");
            assert_eq!(grid.ref_pairs, first.ref_pairs, "grid shapes must match");
        }
        let n = grids.len() as f64;
        for (i, row) in out.cells.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                cell.score = grids.iter().map(|g| g.cells[i][j].score).sum::<f64>() / n;
                cell.cos1 = grids.iter().map(|g| g.cells[i][j].cos1).sum::<f64>() / n;
                cell.cos2 = grids.iter().map(|g| g.cells[i][j].cos2).sum::<f64>() / n;
            }
        }
        out.metadata.prompt = grids
            .iter()
            .map(|g| g.metadata.prompt.as_str())
            .collect::<Vec<_>>()
            .join(" | ");
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;
    use crate::rng::SplitMix64;
    use crate::sae::{concept_vector, ConceptProvenance};

    /// Concept vector with arbitrary values, built through the serde surface.
    fn cv(name: &str, values: &[f64]) -> ConceptVector {
        serde_json::from_value(serde_json::json!({
            "concept": name,
            "values": values,
            "provenance": ConceptProvenance::default(),
        }))
        .unwrap()
    }

    #[test]
    fn identical_references_give_zero() {
        let t = cv("t", &[1.0, 0.5, 0.0]);
        let r = cv("r1", &[0.3, 0.4, 0.1]);
        let r2 = cv("r2", &[0.3, 0.4, 0.1]);
        let s = bias_score(&t, &r, &r2).unwrap();
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn parallel_and_orthogonal_references() {
        let t = cv("t", &[1.0, 0.0]);
        let r1 = cv("r1", &[2.0, 0.0]); // parallel → cos 1
        let r2 = cv("r2", &[0.0, 3.0]); // orthogonal → cos 0
        let s = bias_score(&t, &r1, &r2).unwrap();
        assert!((s.score - 1.0).abs() < 1e-12);
        assert!((s.cos1 - 1.0).abs() < 1e-12);
        assert!(s.cos2.abs() < 1e-12);
    }

    #[test]
    fn hand_cosine_example() {
        let t = cv("t", &[1.0, 0.0, 0.0]);
        let r1 = cv("r1", &[1.0, 1.0, 0.0]);
        let r2 = cv("r2", &[0.0, 1.0, 1.0]);
        let s = bias_score(&t, &r1, &r2).unwrap();
        assert!((s.score - 1.0 / 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn reference_swap_symmetry_and_rescaling_invariance() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..50 {
            let rand_cv = |name: &str, rng: &mut SplitMix64| {
                let vals: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
                cv(name, &vals)
            };
            let t = rand_cv("t", &mut rng);
            let r1 = rand_cv("r1", &mut rng);
            let r2 = rand_cv("r2", &mut rng);
            let ab = bias_score(&t, &r1, &r2).unwrap();
            let ba = bias_score(&t, &r2, &r1).unwrap();
            assert!((ab.score - ba.score).abs() < 1e-15);
            assert!((0.0..=2.0).contains(&ab.score));
            // Positive rescaling of any vector leaves the score unchanged.
            let t_scaled = cv("t", t.values().scaled(3.7).as_slice());
            let scaled = bias_score(&t_scaled, &r1, &r2).unwrap();
            assert!((scaled.score - ab.score).abs() < 1e-12);
        }
    }

    #[test]
    fn provenance_gates_comparability() {
        let t = cv("t", &[1.0, 0.0]);
        let r1 = cv("r1", &[0.5, 0.5]);
        let mut r2 = cv("r2", &[0.0, 1.0]);
        r2.provenance = ConceptProvenance {
            sae_hash: 1234,
            ..Default::default()
        };
        assert!(matches!(
            bias_score(&t, &r1, &r2),
            Err(BiasError::ProvenanceMismatch { .. })
        ));
    }

    #[test]
    fn zero_vector_rejected_by_name() {
        let t = cv("t", &[0.0, 0.0]);
        let r1 = cv("r1", &[0.5, 0.5]);
        let r2 = cv("r2", &[0.0, 1.0]);
        match bias_score(&t, &r1, &r2) {
            Err(BiasError::ZeroVector(name)) => assert_eq!(name, "t"),
            other => panic!("expected zero-vector error, got {other:?}"),
        }
    }

    #[test]
    fn concept_vector_route_matches_direct_construction() {
        // End-to-end check that the serde-based test constructor above agrees
        // with the real construction path.
        let z_ori = Vector::new(vec![3.0, 4.0, 0.0]).unwrap();
        let z_steer = Vector::new(vec![0.0, 3.0, 4.0]).unwrap();
        let built =
            concept_vector("c", &z_ori, &z_steer, ConceptProvenance::default()).unwrap();
        let expected = cv("c", &[-0.6, -0.2, 0.8]);
        for (a, b) in built
            .values()
            .as_slice()
            .iter()
            .zip(expected.values().as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn sample_grid() -> BiasGrid {
        let mut vectors = BTreeMap::new();
        vectors.insert("doctor".to_string(), cv("doctor", &[1.0, 0.2, 0.0]));
        vectors.insert("nurse".to_string(), cv("nurse", &[0.1, 1.0, 0.3]));
        vectors.insert("male".to_string(), cv("male", &[0.9, 0.0, 0.1]));
        vectors.insert("female".to_string(), cv("female", &[0.0, 0.8, 0.4]));
        vectors.insert("rich".to_string(), cv("rich", &[0.4, 0.4, 0.2]));
        vectors.insert("poor".to_string(), cv("poor", &[0.2, 0.5, 0.9]));
        bias_grid(
            &vectors,
            &["doctor".to_string(), "nurse".to_string()],
            &[
                ("male".to_string(), "female".to_string()),
                ("rich".to_string(), "poor".to_string()),
            ],
            GridMetadata {
                model: "toy".into(),
                prompt: "a prompt".into(),
                hashes: BTreeMap::new(),
            },
        )
        .unwrap()
    }

    #[test]
    fn grid_matches_elementwise_recomputation() {
        let grid = sample_grid();
        assert_eq!(grid.cells.len(), 2);
        assert_eq!(grid.cells[0].len(), 2);
        let vectors: BTreeMap<String, ConceptVector> = [
            ("doctor", vec![1.0, 0.2, 0.0]),
            ("nurse", vec![0.1, 1.0, 0.3]),
            ("male", vec![0.9, 0.0, 0.1]),
            ("female", vec![0.0, 0.8, 0.4]),
            ("rich", vec![0.4, 0.4, 0.2]),
            ("poor", vec![0.2, 0.5, 0.9]),
        ]
        .into_iter()
        .map(|(n, v)| (n.to_string(), cv(n, &v)))
        .collect();
        for (i, (r1, r2)) in grid.ref_pairs.iter().enumerate() {
            for (j, target) in grid.targets.iter().enumerate() {
                let direct =
                    bias_score(&vectors[target], &vectors[r1], &vectors[r2]).unwrap();
                assert_eq!(grid.cells[i][j], direct);
            }
        }
    }

    #[test]
    fn grid_column_permutation_only_permutes() {
        let grid = sample_grid();
        let vectors: BTreeMap<String, ConceptVector> = [
            ("doctor", vec![1.0, 0.2, 0.0]),
            ("nurse", vec![0.1, 1.0, 0.3]),
            ("male", vec![0.9, 0.0, 0.1]),
            ("female", vec![0.0, 0.8, 0.4]),
            ("rich", vec![0.4, 0.4, 0.2]),
            ("poor", vec![0.2, 0.5, 0.9]),
        ]
        .into_iter()
        .map(|(n, v)| (n.to_string(), cv(n, &v)))
        .collect();
        let swapped = bias_grid(
            &vectors,
            &["nurse".to_string(), "doctor".to_string()],
            &grid.ref_pairs,
            grid.metadata.clone(),
        )
        .unwrap();
        for i in 0..grid.ref_pairs.len() {
            assert_eq!(grid.cells[i][0], swapped.cells[i][1]);
            assert_eq!(grid.cells[i][1], swapped.cells[i][0]);
        }
    }

    #[test]
    fn grid_missing_concept() {
        let vectors = BTreeMap::new();
        assert!(matches!(
            bias_grid(
                &vectors,
                &["doctor".to_string()],
                &[("male".to_string(), "female".to_string())],
                GridMetadata::default(),
            ),
            Err(BiasError::MissingConcept(_))
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn column_ranks_mark_top_two() {
        let grid = sample_grid();
        let ranks = grid.column_ranks();
        for col in 0..grid.targets.len() {
            let marked: Vec<Option<u8>> = (0..grid.ref_pairs.len())
                .map(|row| ranks[row][col])
                .collect();
            assert!(marked.contains(&Some(1)));
            assert!(marked.contains(&Some(2)));
            // Rank 1 row really has the larger score.
            let top = (0..grid.ref_pairs.len())
                .find(|&r| ranks[r][col] == Some(1))
                .unwrap();
            for r in 0..grid.ref_pairs.len() {
                assert!(grid.cells[top][col].score >= grid.cells[r][col].score);
            }
        }
    }

    #[test]
    fn report_and_csv_are_deterministic() {
        let grid = sample_grid();
        assert_eq!(grid.render_report(), sample_grid().render_report());
        let csv = grid.render_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "ref_pair,target,score,cos1,cos2");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[1].starts_with("male|female,doctor,"));
        // 1×1 grid equals the lone bias score.
        let report = grid.render_report();
        assert!(report.contains("\"rank\": 1"));
    }

    #[test]
    fn mean_of_grids_averages_cells() {
        let a = sample_grid();
        let mut b = sample_grid();
        for row in b.cells.iter_mut() {
            for cell in row.iter_mut() {
                cell.score += 0.1;
            }
        }
        let mean = BiasGrid::mean_of(&[a.clone(), b]).unwrap();
        for (i, row) in mean.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                assert!((cell.score - (a.cells[i][j].score + 0.05)).abs() < 1e-12);
            }
        }
    }
}
