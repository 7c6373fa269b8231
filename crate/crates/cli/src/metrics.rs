//! The `metrics` and `correlate` subcommands: CSV in, JSON out.

use crate::{CliError, MetricKind};
use biaslens_core::behavioral::{
    self, ingest, BehavioralError, PredictionRecord,
};
use biaslens_core::numerics::EmpiricalDistribution;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Stage(format!("cannot read {}: {e}", path.display())))
}

fn stage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Stage(e.to_string())
}

/// Split prediction records into exactly two groups, ordered by group name.
fn two_groups(
    records: Vec<PredictionRecord>,
) -> Result<(String, Vec<PredictionRecord>, String, Vec<PredictionRecord>), CliError> {
    let mut by_group: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_group.entry(r.group.clone()).or_default().push(r);
    }
    if by_group.len() != 2 {
        return Err(stage(BehavioralError::GroupCount {
            expected: 2,
            got: by_group.len(),
        }));
    }
    let mut it = by_group.into_iter();
    let (name1, g1) = it.next().expect("two groups");
    let (name2, g2) = it.next().expect("two groups");
    Ok((name1, g1, name2, g2))
}

pub fn run_metric(metric: MetricKind, input: &Path, out: &Path) -> Result<(), CliError> {
    let text = read(input)?;
    let json = match metric {
        MetricKind::F1diff => {
            let records = ingest::parse_predictions_csv(&text).map_err(stage)?;
            let value = behavioral::f1_diff(&records).map_err(stage)?;
            render(&MetricDoc {
                metric: "f1_diff",
                value,
                detail: Detail::None,
            })
        }
        MetricKind::Eod => {
            let records = ingest::parse_predictions_csv(&text).map_err(stage)?;
            let (name1, g1, name2, g2) = two_groups(records)?;
            let value = behavioral::eod(&g1, &g2).map_err(stage)?;
            render(&MetricDoc {
                metric: "eod",
                value,
                detail: Detail::Groups(vec![name1, name2]),
            })
        }
        MetricKind::If => {
            let sets = ingest::parse_template_scores_csv(&text).map_err(stage)?;
            let value = behavioral::individual_fairness(&sets).map_err(stage)?;
            render(&MetricDoc {
                metric: "individual_fairness",
                value,
                detail: Detail::Templates(sets.len()),
            })
        }
        MetricKind::Gf => {
            // Pool scores per group across all templates.
            let sets = ingest::parse_template_scores_csv(&text).map_err(stage)?;
            let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for set in &sets {
                for (group, dist) in &set.per_group {
                    pooled
                        .entry(group.clone())
                        .or_default()
                        .extend_from_slice(dist.samples());
                }
            }
            let per_group: BTreeMap<String, EmpiricalDistribution> = pooled
                .into_iter()
                .map(|(g, v)| EmpiricalDistribution::new(v).map(|d| (g, d)))
                .collect::<Result<_, _>>()
                .map_err(stage)?;
            let value = behavioral::group_fairness(&per_group).map_err(stage)?;
            render(&MetricDoc {
                metric: "group_fairness",
                value,
                detail: Detail::Groups(per_group.keys().cloned().collect()),
            })
        }
        MetricKind::Seat => {
            let inputs = ingest::parse_association_csv(&text).map_err(stage)?;
            let result = behavioral::seat(&inputs).map_err(stage)?;
            render(&SeatDoc {
                metric: "seat",
                raw: result.raw,
                effect_size: result.effect_size,
                p_value: result.p_value,
                permutations: result.permutations,
            })
        }
        MetricKind::Ppl => {
            let by_group = ingest::parse_perplexity_csv(&text).map_err(stage)?;
            if by_group.len() != 2 {
                return Err(stage(BehavioralError::GroupCount {
                    expected: 2,
                    got: by_group.len(),
                }));
            }
            let groups: Vec<&String> = by_group.keys().collect();
            let result = behavioral::perplexity_bias_test(
                &by_group[groups[0]],
                &by_group[groups[1]],
            )
            .map_err(stage)?;
            render(&PplDoc {
                metric: "perplexity_t_test",
                t: result.t,
                p_value: result.p,
                df: result.df,
                groups: vec![groups[0].clone(), groups[1].clone()],
            })
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(stage)?;
        }
    }
    std::fs::write(out, json).map_err(stage)?;
    println!("metrics: wrote {}", out.display());
    Ok(())
}

pub fn run_correlate(a: &Path, b: &Path, p_threshold: Option<f64>) -> Result<(), CliError> {
    let name_of = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "series".to_string())
    };
    let series_a = ingest::parse_series_csv(&read(a)?, &name_of(a)).map_err(stage)?;
    let series_b = ingest::parse_series_csv(&read(b)?, &name_of(b)).map_err(stage)?;
    let (r, n_used) =
        behavioral::correlate(&series_a, &series_b, p_threshold).map_err(stage)?;
    let doc = CorrelateDoc {
        a: series_a.name.clone(),
        b: series_b.name.clone(),
        spearman_r: r,
        n_used,
        p_threshold,
    };
    println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
    Ok(())
}

#[derive(Serialize)]
#[serde(untagged)]
enum Detail {
    None,
    Groups(Vec<String>),
    Templates(usize),
}

#[derive(Serialize)]
struct MetricDoc {
    metric: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "detail_is_none")]
    detail: Detail,
}

fn detail_is_none(d: &Detail) -> bool {
    matches!(d, Detail::None)
}

#[derive(Serialize)]
struct SeatDoc {
    metric: &'static str,
    raw: f64,
    effect_size: f64,
    p_value: f64,
    permutations: usize,
}

#[derive(Serialize)]
struct PplDoc {
    metric: &'static str,
    t: f64,
    p_value: f64,
    df: f64,
    groups: Vec<String>,
}

#[derive(Serialize)]
struct CorrelateDoc {
    a: String,
    b: String,
    spearman_r: f64,
    n_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_threshold: Option<f64>,
}

fn render<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("metric doc serializes");
    s.push('\n');
    s
}
