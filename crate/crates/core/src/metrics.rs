//! Ranking metrics and the paired DeLong test.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

pub const SIGNIFICANCE: f64 = 0.05;

/// Held-out scores of one (node, outcome) stratum, aligned by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub node: String,
    pub outcome: String,
    #[serde(default)]
    pub record_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(node: &str, outcome: &str, scores: Vec<f64>, labels: Vec<u8>) -> Self {
        ScoredSet {
            node: node.into(),
            outcome: outcome.into(),
            record_ids: Vec::new(),
            scores,
            labels,
        }
    }

    pub fn stratum(&self) -> String {
        format!("{}/{}", self.node, self.outcome)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Metric {
            stratum: self.stratum(),
            msg: msg.into(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(self.err(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if !self.record_ids.is_empty() && self.record_ids.len() != self.scores.len() {
            return Err(self.err("record ids not aligned with scores"));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y > 1) {
            return Err(self.err(format!("label {y} is not binary")));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(self.err("non-finite score"));
        }
        Ok(())
    }

    fn check_two_class(&self) -> Result<(usize, usize)> {
        self.check()?;
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(self.err(format!("needs both classes, got {p} positive / {n} negative")));
        }
        Ok((p, n))
    }
}

/// 1-based midranks; tied values share the mean of their rank span.
fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Mann–Whitney AUC with ties counted as one half.
pub fn auc_roc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.check_two_class()?;
    let r = midranks(&s.scores);
    let rank_sum: f64 = r
        .iter()
        .zip(&s.labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Descending score order, grouped into tie blocks of (positives, negatives).
fn threshold_blocks(s: &ScoredSet) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).unwrap_or(Ordering::Equal));
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for i in idx {
        let (sc, y) = (s.scores[i], s.labels[i]);
        match blocks.last_mut() {
            Some(b) if b.0 == sc => {
                if y == 1 { b.1 += 1 } else { b.2 += 1 }
            }
            _ => blocks.push((sc, (y == 1) as usize, (y == 0) as usize)),
        }
    }
    blocks
}

/// Step-wise average precision; equal scores form a single threshold.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    s.check()?;
    let total = s.positives();
    if total == 0 {
        return Err(s.err("no positive labels"));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (_, pos, neg) in threshold_blocks(s) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / total as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// ROC points (fpr, tpr) from (0,0) to (1,1), one per distinct threshold.
pub fn roc_curve(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (p, n) = s.check_two_class()?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, pos, neg) in threshold_blocks(s) {
        tp += pos;
        fp += neg;
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub delta: f64,
    pub variance: f64,
    /// ±∞ when the variance vanishes but the AUCs differ.
    pub z: f64,
    pub p_value: f64,
}

// structural components (V10 over positives, V01 over negatives) of one model
fn components(scores: &[f64], labels: &[u8]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(s, _)| *s).collect();
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let tz = midranks(&all);
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let v10: Vec<f64> = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    let auc = tz[..m].iter().sum::<f64>() / (m * n) as f64 - (m as f64 + 1.0) / (2.0 * n as f64);
    (auc, v10, v01)
}

// sample variance of (a - b) over paired components; zero with fewer than two samples
fn diff_variance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64
}

/// Paired DeLong test of AUC(a) − AUC(b) on the same records.
pub fn delong_test(a: &ScoredSet, b: &ScoredSet) -> Result<DeLong> {
    let (m, n) = a.check_two_class()?;
    b.check()?;
    if a.labels != b.labels {
        return Err(a.err(format!("label vectors differ from {}", b.stratum())));
    }
    if !a.record_ids.is_empty() && !b.record_ids.is_empty() && a.record_ids != b.record_ids {
        return Err(a.err(format!("record ids differ from {}", b.stratum())));
    }
    let (auc_a, v10a, v01a) = components(&a.scores, &a.labels);
    let (auc_b, v10b, v01b) = components(&b.scores, &b.labels);
    let delta = auc_a - auc_b;
    // var(V_a − V_b) = var_a + var_b − 2 cov_ab
    let variance = diff_variance(&v10a, &v10b) / m as f64 + diff_variance(&v01a, &v01b) / n as f64;
    let (z, p_value) = if variance > 0.0 && variance.is_finite() {
        let z = delta / variance.sqrt();
        let phi = Normal::standard().cdf(-z.abs());
        (z, (2.0 * phi).clamp(0.0, 1.0))
    } else if delta == 0.0 {
        (0.0, 1.0)
    } else {
        (delta.signum() * f64::INFINITY, 0.0)
    };
    Ok(DeLong { auc_a, auc_b, delta, variance, z, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub node: String,
    pub outcome: String,
    pub n: usize,
    pub n_positive: usize,
    pub auc: Option<f64>,
    pub aps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub node: String,
    pub outcome: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub node: String,
    pub outcome: String,
    pub model_a: String,
    pub model_b: String,
    pub auc_a: f64,
    pub auc_b: f64,
    pub delta_auc: f64,
    /// `None` when the variance is zero and the AUCs differ (|z| = ∞).
    pub z: Option<f64>,
    pub p_value: f64,
    pub significant_at_05: bool,
}

impl Comparison {
    pub fn from_sets(model_a: &str, a: &ScoredSet, model_b: &str, b: &ScoredSet) -> Result<Self> {
        let d = delong_test(a, b)?;
        Ok(Comparison {
            node: a.node.clone(),
            outcome: a.outcome.clone(),
            model_a: model_a.into(),
            model_b: model_b.into(),
            auc_a: d.auc_a,
            auc_b: d.auc_b,
            delta_auc: d.delta,
            z: d.z.is_finite().then_some(d.z),
            p_value: d.p_value,
            significant_at_05: d.p_value < SIGNIFICANCE,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub strata: Vec<StratumMetrics>,
    #[serde(default)]
    pub roc: Vec<RocCurve>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    /// Metrics for every stratum; single-class strata are kept with a note
    /// instead of failing the whole report.
    pub fn from_scored(model: &str, sets: &[ScoredSet]) -> Result<Self> {
        let mut report = EvalReport {
            model: model.into(),
            ..Default::default()
        };
        for s in sets {
            s.check()?;
            let (auc, aps, note) = match (auc_roc(s), average_precision(s)) {
                (Ok(a), Ok(p)) => {
                    report.roc.push(RocCurve {
                        node: s.node.clone(),
                        outcome: s.outcome.clone(),
                        points: roc_curve(s)?,
                    });
                    (Some(a), Some(p), None)
                }
                (Err(e), aps) => (None, aps.ok(), Some(e.to_string())),
                (Ok(a), Err(e)) => (Some(a), None, Some(e.to_string())),
            };
            report.strata.push(StratumMetrics {
                node: s.node.clone(),
                outcome: s.outcome.clone(),
                n: s.len(),
                n_positive: s.positives(),
                auc,
                aps,
                note,
            });
        }
        Ok(report)
    }

    pub fn stratum(&self, node: &str, outcome: &str) -> Option<&StratumMetrics> {
        self.strata.iter().find(|s| s.node == node && s.outcome == outcome)
    }
}

/// DeLong comparisons for every stratum present in both score collections
/// with two classes.
pub fn compare_models(
    model_a: &str,
    a: &[ScoredSet],
    model_b: &str,
    b: &[ScoredSet],
) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for sa in a {
        let Some(sb) = b.iter().find(|s| s.node == sa.node && s.outcome == sa.outcome) else {
            continue;
        };
        if sa.positives() == 0 || sa.positives() == sa.len() {
            continue;
        }
        out.push(Comparison::from_sets(model_a, sa, model_b, sb)?);
    }
    Ok(out)
}
