//! CSV ingestion for the behavioral metrics.
//!
//! All files are UTF-8 with a required header row. Fields never contain
//! commas; the perplexity format packs per-token log probabilities into one
//! semicolon-separated field.
//!
//! Schemas:
//! - predictions: `group,true_label,predicted_label`
//! - template scores: `template,group,score`
//! - association vectors: `set,index,v0,v1,...` with set in {X,Y,A,B}
//! - perplexity samples: `group,ppl` or `group,logprobs`
//! - metric series: `concept,score[,p_value]`

use super::{
    perplexity, AssociationInputs, BehavioralError, MetricSeries, PredictionRecord,
    SeriesEntry, TemplateScoreSet,
};
use crate::numerics::{EmpiricalDistribution, Vector};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("expected header {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("no data rows")]
    Empty,
    #[error(transparent)]
    Behavioral(#[from] BehavioralError),
}

fn line_err(line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Line {
        line,
        message: message.into(),
    }
}

/// Split into non-empty trimmed lines with their 1-based numbers.
fn rows(text: &str) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect()
}

fn check_header(rows: &[(usize, &str)], expected: &str) -> Result<(), IngestError> {
    match rows.first() {
        Some((_, found)) if found.eq_ignore_ascii_case(expected) => Ok(()),
        Some((_, found)) => Err(IngestError::Header {
            expected: expected.to_string(),
            found: found.to_string(),
        }),
        None => Err(IngestError::Empty),
    }
}

fn parse_binary(field: &str, line: usize, what: &str) -> Result<u8, IngestError> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(line_err(line, format!("{what} must be 0 or 1, got {other:?}"))),
    }
}

fn parse_float(field: &str, line: usize, what: &str) -> Result<f64, IngestError> {
    field
        .parse::<f64>()
        .map_err(|_| line_err(line, format!("{what} is not a number: {field:?}")))
}

/// `group,true_label,predicted_label`
pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRecord>, IngestError> {
    let rows = rows(text);
    check_header(&rows, "group,true_label,predicted_label")?;
    let mut out = Vec::new();
    for &(line, row) in &rows[1..] {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(line_err(line, format!("expected 3 fields, got {}", fields.len())));
        }
        let record = PredictionRecord::new(
            fields[0],
            parse_binary(fields[1], line, "true_label")?,
            parse_binary(fields[2], line, "predicted_label")?,
        )?;
        out.push(record);
    }
    if out.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(out)
}

/// `template,group,score`; rows aggregate into per-template, per-group
/// distributions.
pub fn parse_template_scores_csv(text: &str) -> Result<Vec<TemplateScoreSet>, IngestError> {
    let rows = rows(text);
    check_header(&rows, "template,group,score")?;
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for &(line, row) in &rows[1..] {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(line_err(line, format!("expected 3 fields, got {}", fields.len())));
        }
        grouped
            .entry(fields[0].to_string())
            .or_default()
            .entry(fields[1].to_string())
            .or_default()
            .push(parse_float(fields[2], line, "score")?);
    }
    if grouped.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut out = Vec::new();
    for (template, groups) in grouped {
        let mut per_group = BTreeMap::new();
        for (group, samples) in groups {
            per_group.insert(
                group,
                EmpiricalDistribution::new(samples).map_err(BehavioralError::from)?,
            );
        }
        out.push(TemplateScoreSet {
            template,
            per_group,
        });
    }
    Ok(out)
}

/// `set,index,v0,v1,...` with set in {X,Y,A,B}; rows sort by index per set.
pub fn parse_association_csv(text: &str) -> Result<AssociationInputs, IngestError> {
    let rows = rows(text);
    match rows.first() {
        Some((_, h)) if h.to_ascii_lowercase().starts_with("set,index,") => {}
        Some((_, h)) => {
            return Err(IngestError::Header {
                expected: "set,index,v0,v1,...".to_string(),
                found: h.to_string(),
            })
        }
        None => return Err(IngestError::Empty),
    }
    let mut sets: BTreeMap<&str, Vec<(u64, Vector)>> = BTreeMap::new();
    for &(line, row) in &rows[1..] {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(line_err(line, "expected set,index and at least one component"));
        }
        let set = match fields[0].to_ascii_uppercase().as_str() {
            "X" => "X",
            "Y" => "Y",
            "A" => "A",
            "B" => "B",
            other => {
                return Err(line_err(
                    line,
                    format!("set must be one of X,Y,A,B, got {other:?}"),
                ))
            }
        };
        let index: u64 = fields[1]
            .parse()
            .map_err(|_| line_err(line, format!("index is not an integer: {:?}", fields[1])))?;
        let values: Vec<f64> = fields[2..]
            .iter()
            .map(|f| parse_float(f, line, "component"))
            .collect::<Result<_, _>>()?;
        let vector = Vector::new(values)
            .map_err(|e| line_err(line, format!("bad vector: {e}")))?;
        sets.entry(set).or_default().push((index, vector));
    }
    let mut take = |name: &str| -> Result<Vec<Vector>, IngestError> {
        let mut list = sets.remove(name).unwrap_or_default();
        list.sort_by_key(|(i, _)| *i);
        Ok(list.into_iter().map(|(_, v)| v).collect())
    };
    Ok(AssociationInputs::new(
        take("X")?,
        take("Y")?,
        take("A")?,
        take("B")?,
    )?)
}

/// `group,ppl` (ready-made perplexities) or `group,logprobs` with
/// semicolon-separated per-token log probabilities, converted per row.
pub fn parse_perplexity_csv(text: &str) -> Result<BTreeMap<String, Vec<f64>>, IngestError> {
    let rows = rows(text);
    let header = match rows.first() {
        Some((_, h)) => h.to_ascii_lowercase(),
        None => return Err(IngestError::Empty),
    };
    let logprob_mode = match header.as_str() {
        "group,ppl" => false,
        "group,logprobs" => true,
        other => {
            return Err(IngestError::Header {
                expected: "group,ppl or group,logprobs".to_string(),
                found: other.to_string(),
            })
        }
    };
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &(line, row) in &rows[1..] {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(line_err(line, format!("expected 2 fields, got {}", fields.len())));
        }
        let value = if logprob_mode {
            let logprobs: Vec<f64> = fields[1]
                .split(';')
                .map(|f| parse_float(f.trim(), line, "log probability"))
                .collect::<Result<_, _>>()?;
            perplexity(&logprobs).map_err(|e| line_err(line, e.to_string()))?
        } else {
            let ppl = parse_float(fields[1], line, "ppl")?;
            if ppl <= 0.0 {
                return Err(line_err(line, format!("perplexity must be positive, got {ppl}")));
            }
            ppl
        };
        out.entry(fields[0].to_string()).or_default().push(value);
    }
    if out.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(out)
}

/// `concept,score[,p_value]`
pub fn parse_series_csv(text: &str, name: &str) -> Result<MetricSeries, IngestError> {
    let rows = rows(text);
    let with_p = match rows.first() {
        Some((_, h)) if h.eq_ignore_ascii_case("concept,score,p_value") => true,
        Some((_, h)) if h.eq_ignore_ascii_case("concept,score") => false,
        Some((_, h)) => {
            return Err(IngestError::Header {
                expected: "concept,score[,p_value]".to_string(),
                found: h.to_string(),
            })
        }
        None => return Err(IngestError::Empty),
    };
    let mut entries = Vec::new();
    for &(line, row) in &rows[1..] {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        let expected = if with_p { 3 } else { 2 };
        if fields.len() != expected {
            return Err(line_err(
                line,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let p_value = if with_p && !fields[2].is_empty() {
            Some(parse_float(fields[2], line, "p_value")?)
        } else {
            None
        };
        entries.push(SeriesEntry {
            concept: fields[0].to_string(),
            score: parse_float(fields[1], line, "score")?,
            p_value,
        });
    }
    if entries.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(MetricSeries::new(name, entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_round_trip() {
        let csv = "group,true_label,predicted_label\npos,1,1\npos,1,0\nneg,0,0\n";
        let records = parse_predictions_csv(csv).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].group, "pos");
        assert_eq!(records[1].predicted_label, 0);
        assert!(matches!(
            parse_predictions_csv("group,true_label,predicted_label\npos,2,1\n"),
            Err(IngestError::Line { line: 2, .. })
        ));
        assert!(matches!(
            parse_predictions_csv("wrong,header,row\n"),
            Err(IngestError::Header { .. })
        ));
    }

    #[test]
    fn template_scores_grouping() {
        let csv = "template,group,score\nt1,a,0.5\nt1,b,0.7\nt1,a,0.6\nt2,a,0.1\nt2,b,0.2\n";
        let sets = parse_template_scores_csv(csv).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].template, "t1");
        assert_eq!(sets[0].per_group["a"].samples(), &[0.5, 0.6]);
        assert_eq!(sets[1].per_group.len(), 2);
    }

    #[test]
    fn association_sets_sorted_by_index() {
        let csv = "set,index,v0,v1\nX,1,0.0,1.0\nX,0,1.0,0.0\nY,0,0.5,0.5\nA,0,1.0,1.0\nB,0,-1.0,0.0\n";
        let inputs = parse_association_csv(csv).unwrap();
        assert_eq!(inputs.x.len(), 2);
        assert_eq!(inputs.x[0].as_slice(), &[1.0, 0.0]); // index 0 first
        assert_eq!(inputs.y.len(), 1);
        // Missing a whole set → empty-group error.
        let csv = "set,index,v0\nX,0,1.0\nY,0,0.5\nA,0,1.0\n";
        assert!(parse_association_csv(csv).is_err());
    }

    #[test]
    fn perplexity_both_modes() {
        let ready = "group,ppl\nmale,3.2\nmale,2.8\nfemale,4.0\n";
        let by_group = parse_perplexity_csv(ready).unwrap();
        assert_eq!(by_group["male"], vec![3.2, 2.8]);
        let raw = "group,logprobs\nmale,-1;-2;-3\nfemale,-0.5;-0.5\n";
        let by_group = parse_perplexity_csv(raw).unwrap();
        assert!((by_group["male"][0] - 2.0f64.exp()).abs() < 1e-12);
        assert!((by_group["female"][0] - 0.5f64.exp()).abs() < 1e-12);
        assert!(matches!(
            parse_perplexity_csv("group,logprobs\nmale,1;2\n"),
            Err(IngestError::Line { .. })
        ));
    }

    #[test]
    fn series_with_and_without_p() {
        let csv = "concept,score\ndoctor,0.3\nnurse,0.5\n";
        let series = parse_series_csv(csv, "m").unwrap();
        assert_eq!(series.entries().len(), 2);
        assert_eq!(series.entries()[0].p_value, None);
        let csv = "concept,score,p_value\ndoctor,0.3,0.01\nnurse,0.5,\n";
        let series = parse_series_csv(csv, "m").unwrap();
        assert_eq!(series.entries()[0].p_value, Some(0.01));
        assert_eq!(series.entries()[1].p_value, None);
        assert!(matches!(
            parse_series_csv("concept,score\ndoctor,0.3\ndoctor,0.4\n", "m"),
            Err(IngestError::Behavioral(BehavioralError::DuplicateConcept(_)))
        ));
    }
}
