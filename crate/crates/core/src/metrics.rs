//! AUC, threshold metrics, per-domain evaluation and ROC export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("AUC undefined: {0}")]
    AucUndefined(&'static str),
    #[error("no records")]
    Empty,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("record {id}: {what}")]
    Record { id: String, what: &'static str },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub domain_id: usize,
    pub score: f64,
    pub label: u8,
}

fn validate(records: &[EvalRecord]) -> Result<(), MetricsError> {
    for r in records {
        if !r.score.is_finite() {
            return Err(MetricsError::Record { id: r.sample_id.clone(), what: "score is not finite" });
        }
        if r.label > 1 {
            return Err(MetricsError::Record { id: r.sample_id.clone(), what: "label is not binary" });
        }
    }
    Ok(())
}

fn class_counts(records: &[EvalRecord]) -> (usize, usize) {
    let pos = records.iter().filter(|r| r.label == 1).count();
    (pos, records.len() - pos)
}

/// Indices sorted by score, descending. Stable, so equal scores keep input order.
fn by_score_desc(records: &[EvalRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].score.total_cmp(&records[a].score));
    idx
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn auc(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    validate(records)?;
    let (pos, neg) = class_counts(records);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::AucUndefined("needs at least one positive and one negative"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && records[idx[j + 1]].score == records[idx[i]].score {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| records[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    /// `None` when there are no positives.
    pub tpr: Option<f64>,
    /// `None` when there are no negatives.
    pub tnr: Option<f64>,
    pub acc: f64,
}

/// Scores at or above `threshold` count as positive.
pub fn threshold_metrics(records: &[EvalRecord], threshold: f64) -> Result<ThresholdMetrics, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::Threshold(threshold));
    }
    validate(records)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for r in records {
        let predicted = r.score >= threshold;
        match (r.label == 1, predicted) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let (pos, neg) = class_counts(records);
    Ok(ThresholdMetrics {
        tpr: (pos > 0).then(|| tp as f64 / pos as f64),
        tnr: (neg > 0).then(|| tn as f64 / neg as f64),
        acc: (tp + tn) as f64 / records.len() as f64,
    })
}

/// Threshold maximising TPR + TNR − 1 over the distinct scores, scanned from
/// the highest down; the first maximum wins. Needs both classes.
pub fn youden_threshold(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    validate(records)?;
    let (pos, neg) = class_counts(records);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::AucUndefined("threshold selection needs both classes"));
    }
    let idx = by_score_desc(records);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, records[idx[0]].score);
    let mut i = 0;
    while i < idx.len() {
        let s = records[idx[i]].score;
        while i < idx.len() && records[idx[i]].score == s {
            if records[idx[i]].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp as f64 / pos as f64 + (neg - fp) as f64 / neg as f64 - 1.0;
        if j > best.0 {
            best = (j, s);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub auc: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub acc: Option<f64>,
    pub threshold: Option<f64>,
}

impl MetricBlock {
    const ABSENT: MetricBlock = MetricBlock { auc: None, tpr: None, tnr: None, acc: None, threshold: None };

    /// Block for one partition with its own Youden threshold. Single-class
    /// partitions come back empty.
    pub fn compute(records: &[EvalRecord]) -> Result<Self, MetricsError> {
        let (pos, neg) = class_counts(records);
        if pos == 0 || neg == 0 {
            validate(records)?;
            return Ok(Self::ABSENT);
        }
        let threshold = youden_threshold(records)?;
        let m = threshold_metrics(records, threshold.clamp(0.0, 1.0))?;
        Ok(MetricBlock { auc: Some(auc(records)?), tpr: m.tpr, tnr: m.tnr, acc: Some(m.acc), threshold: Some(threshold) })
    }
}

/// Per-domain blocks keyed by domain id, their unweighted mean, and the
/// pooled block with one shared threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub domains: BTreeMap<String, MetricBlock>,
    pub average: MetricBlock,
    pub overall: MetricBlock,
}

impl MetricsReport {
    pub fn domain(&self, id: usize) -> Option<&MetricBlock> {
        self.domains.get(&id.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(records: &[EvalRecord]) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    validate(records)?;
    let mut parts: BTreeMap<usize, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        parts.entry(r.domain_id).or_default().push(r.clone());
    }
    let mut blocks = BTreeMap::new();
    let mut valid = Vec::new();
    for (d, part) in &parts {
        let b = MetricBlock::compute(part)?;
        if b.auc.is_some() {
            valid.push(b);
        }
        blocks.insert(d.to_string(), b);
    }
    let average = MetricBlock {
        auc: mean(valid.iter().map(|b| b.auc)),
        tpr: mean(valid.iter().map(|b| b.tpr)),
        tnr: mean(valid.iter().map(|b| b.tnr)),
        acc: mean(valid.iter().map(|b| b.acc)),
        threshold: mean(valid.iter().map(|b| b.threshold)),
    };
    Ok(MetricsReport { domains: blocks, average, overall: MetricBlock::compute(records)? })
}

/// ROC points from (0, 0) at an infinite threshold down to (1, 1) at zero,
/// one point per distinct score.
pub fn roc_points(records: &[EvalRecord]) -> Result<Vec<(f64, f64, f64)>, MetricsError> {
    validate(records)?;
    let (pos, neg) = class_counts(records);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::AucUndefined("ROC needs both classes"));
    }
    let idx = by_score_desc(records);
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = records[idx[i]].score;
        while i < idx.len() && records[idx[i]].score == s {
            if records[idx[i]].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64, s));
    }
    pts.push((1.0, 1.0, 0.0));
    Ok(pts)
}

pub fn export_roc(records: &[EvalRecord], out: &Path) -> Result<(), MetricsError> {
    let pts = roc_points(records)?;
    let io = |source| MetricsError::Io { path: out.display().to_string(), source };
    let mut w = csv::Writer::from_path(out).map_err(|e| io(e.into()))?;
    w.write_record(["fpr", "tpr", "threshold"]).map_err(|e| io(e.into()))?;
    for (f, t, th) in pts {
        w.write_record([f.to_string(), t.to_string(), th.to_string()]).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}
