//! Report files: a flat `metric,value` CSV and the embedding table CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use oppo_core::{Error, Result};

use crate::embedding::EmbeddingRow;
use crate::scores::ScoreSummary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_step: usize,
    pub dataset_ref: String,
    pub seeds: Vec<u64>,
    pub n_episodes: usize,
    /// `(context name, scores)` in evaluation order.
    pub contexts: Vec<(String, ScoreSummary)>,
    pub preference_accuracy: Option<f64>,
    pub distance_return_spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MetricRow {
    metric: String,
    value: String,
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| parse_f64(x)).collect()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("`{s}` is not a number")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

impl EvalReport {
    fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        let mut push = |m: &str, v: String| {
            rows.push(MetricRow {
                metric: m.to_string(),
                value: v,
            })
        };
        push("config_hash", self.config_hash.clone());
        push("checkpoint_step", self.checkpoint_step.to_string());
        push("dataset_ref", self.dataset_ref.clone());
        push(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        );
        push("n_episodes", self.n_episodes.to_string());
        for (name, s) in &self.contexts {
            push(&format!("score.{name}.mean"), format!("{:?}", s.mean));
            push(&format!("score.{name}.std"), format!("{:?}", s.std));
            push(&format!("score.{name}.per_seed"), join_f64(&s.per_seed));
        }
        if let Some(a) = self.preference_accuracy {
            push("preference_accuracy", format!("{a:?}"));
        }
        if let Some(r) = self.distance_return_spearman {
            push("distance_return_spearman", format!("{r:?}"));
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut report = EvalReport {
            config_hash: String::new(),
            checkpoint_step: 0,
            dataset_ref: String::new(),
            seeds: Vec::new(),
            n_episodes: 0,
            contexts: Vec::new(),
            preference_accuracy: None,
            distance_return_spearman: None,
        };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        for row in r.deserialize::<MetricRow>() {
            let MetricRow { metric, value } = row.map_err(csv_err)?;
            let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Data(format!("`{v}` is not a count")));
            match metric.as_str() {
                "config_hash" => report.config_hash = value,
                "checkpoint_step" => report.checkpoint_step = int(&value)?,
                "dataset_ref" => report.dataset_ref = value,
                "seeds" => {
                    report.seeds = value
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| Error::Data(format!("bad seed `{s}`"))))
                        .collect::<Result<_>>()?
                }
                "n_episodes" => report.n_episodes = int(&value)?,
                "preference_accuracy" => report.preference_accuracy = Some(parse_f64(&value)?),
                "distance_return_spearman" => report.distance_return_spearman = Some(parse_f64(&value)?),
                m => {
                    let parts: Vec<&str> = m.split('.').collect();
                    let [head, name, field] = parts[..] else {
                        return Err(Error::Data(format!("unknown metric `{m}`")));
                    };
                    if head != "score" {
                        return Err(Error::Data(format!("unknown metric `{m}`")));
                    }
                    if report.contexts.last().is_none_or(|(n, _)| n != name) {
                        report.contexts.push((
                            name.to_string(),
                            ScoreSummary {
                                mean: 0.0,
                                std: 0.0,
                                seeds: Vec::new(),
                                per_seed: Vec::new(),
                                n_episodes: 0,
                            },
                        ));
                    }
                    let s = &mut report.contexts.last_mut().expect("pushed above").1;
                    match field {
                        "mean" => s.mean = parse_f64(&value)?,
                        "std" => s.std = parse_f64(&value)?,
                        "per_seed" => s.per_seed = split_f64(&value)?,
                        _ => return Err(Error::Data(format!("unknown metric `{m}`"))),
                    }
                }
            }
        }
        for (_, s) in &mut report.contexts {
            s.seeds = report.seeds.clone();
            s.n_episodes = report.n_episodes;
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_csv(&text)
    }
}

/// Embedding table: `id,true_return,proj_0,proj_1,z_0..z_{d-1}`. A missing
/// return is an empty field.
pub fn embedding_table_csv(rows: &[EmbeddingRow]) -> Result<String> {
    let d = rows.first().map_or(0, |r| r.z.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "true_return".into(), "proj_0".into(), "proj_1".into()];
    header.extend((0..d).map(|i| format!("z_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.z.len() != d {
            return Err(Error::Input("embedding rows have different widths".into()));
        }
        let mut rec = vec![
            r.id.clone(),
            r.true_return.map(|v| format!("{v:?}")).unwrap_or_default(),
            format!("{:?}", r.proj[0]),
            format!("{:?}", r.proj[1]),
        ];
        rec.extend(r.z.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_embedding_table(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let d = r.headers().map_err(csv_err)?.len().saturating_sub(4);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != d + 4 {
            return Err(Error::Data(format!("embedding row has {} fields, expected {}", rec.len(), d + 4)));
        }
        out.push(EmbeddingRow {
            id: rec[0].to_string(),
            true_return: if rec[1].is_empty() { None } else { Some(parse_f64(&rec[1])?) },
            proj: [parse_f64(&rec[2])?, parse_f64(&rec[3])?],
            z: (4..d + 4).map(|i| parse_f64(&rec[i])).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
