use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::QaRecord;

/// Per-record features, all measured in characters.
pub const FEATURES: [&str; 4] = ["context_len", "question_len", "answer_len", "answer_start"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub mean: f64,
    /// Sample standard deviation (divisor `n − 1`).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRow {
    pub id: String,
    pub lang: String,
    pub features: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_records: usize,
    pub counts: BTreeMap<String, usize>,
    pub summary: BTreeMap<String, FeatureSummary>,
    /// Pearson correlations over [`FEATURES`] for all records.
    pub correlation: [[f64; 4]; 4],
    /// Same, per language with at least two records.
    pub correlation_by_lang: BTreeMap<String, [[f64; 4]; 4]>,
    #[serde(skip)]
    pub rows: Vec<StatRow>,
}

/// Pearson correlation. A zero-variance input correlates 0 with anything else.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn corr_matrix(rows: &[&StatRow]) -> [[f64; 4]; 4] {
    let cols: Vec<Vec<f64>> = (0..4).map(|k| rows.iter().map(|r| r.features[k]).collect()).collect();
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = 1.0;
        for j in i + 1..4 {
            let c = pearson(&cols[i], &cols[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

fn summarize(values: &[f64]) -> FeatureSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    FeatureSummary {
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn compute_stats(records: &[QaRecord]) -> Result<DatasetStats> {
    if records.len() < 2 {
        return Err(Error::invalid(format!(
            "statistics need at least 2 records, got {}",
            records.len()
        )));
    }
    let rows: Vec<StatRow> = records
        .iter()
        .map(|r| StatRow {
            id: r.id.clone(),
            lang: r.lang.to_string(),
            features: [
                r.context.chars().count() as f64,
                r.question.chars().count() as f64,
                r.answer.chars().count() as f64,
                r.answer_start as f64,
            ],
        })
        .collect();
    let mut counts = BTreeMap::new();
    let mut by_lang: BTreeMap<String, Vec<&StatRow>> = BTreeMap::new();
    for row in &rows {
        *counts.entry(row.lang.clone()).or_insert(0) += 1;
        by_lang.entry(row.lang.clone()).or_default().push(row);
    }
    let summary = FEATURES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let col: Vec<f64> = rows.iter().map(|r| r.features[k]).collect();
            (name.to_string(), summarize(&col))
        })
        .collect();
    let all: Vec<&StatRow> = rows.iter().collect();
    let correlation = corr_matrix(&all);
    let correlation_by_lang = by_lang
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, v)| (k.clone(), corr_matrix(v)))
        .collect();
    Ok(DatasetStats {
        n_records: rows.len(),
        counts,
        summary,
        correlation,
        correlation_by_lang,
        rows,
    })
}

fn write_matrix(path: &Path, m: &[[f64; 4]; 4]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["feature"];
    header.extend(FEATURES);
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in FEATURES.iter().zip(m) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

impl DatasetStats {
    /// Writes `summary.json`, `lengths.csv` (one row per record, the scatter
    /// data) and one `correlation_<scope>.csv` per matrix into `dir`.
    pub fn write_reports(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
        let mut written = Vec::new();
        let summary = dir.join("summary.json");
        std::fs::write(&summary, serde_json::to_string_pretty(self)?).map_err(|e| Error::at_path(&summary, e))?;
        written.push(summary);

        let lengths = dir.join("lengths.csv");
        let mut w = csv::Writer::from_path(&lengths).map_err(csv_err)?;
        let mut header = vec!["id", "lang"];
        header.extend(FEATURES);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.lang.clone()];
            rec.extend(r.features.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        written.push(lengths);

        let all = dir.join("correlation_all.csv");
        write_matrix(&all, &self.correlation)?;
        written.push(all);
        for (lang, m) in &self.correlation_by_lang {
            let p = dir.join(format!("correlation_{lang}.csv"));
            write_matrix(&p, m)?;
            written.push(p);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_correlation_and_degenerate() {
        let x = [1.0, 2.0, 4.0];
        assert!((pearson(&x, &x) - 1.0).abs() < 1e-15);
        assert_eq!(pearson(&x, &[3.0, 3.0, 3.0]), 0.0);
    }

    #[test]
    fn needs_two_records() {
        assert!(compute_stats(&[]).is_err());
    }
}
