//! Per-label AUC and F-measure, Hamming loss, and result tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::binarize;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Full-scale CTP global AUCs kept as documentation anchors in table footers.
pub const REFERENCE_ANCHORS: [(&str, f64); 2] = [("specific", 0.840), ("general", 0.819)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Auc {
    pub value: f64,
    /// No positives or no negatives; `value` is then 0.5.
    pub degenerate: bool,
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], truth: &[u8]) -> Result<Auc> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::invalid(format!(
            "auc needs equal non-empty inputs, got {} scores and {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let positives = truth.iter().filter(|&&t| t != 0).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(Auc {
            value: 0.5,
            degenerate: true,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares the average rank
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if truth[k] != 0 {
                positive_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(Auc {
        value: u / (p * n),
        degenerate: false,
    })
}

pub fn hamming_loss(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::invalid("hamming loss needs equal shapes"));
    }
    let cells: usize = truth.iter().map(Vec::len).sum();
    if cells == 0 {
        return Err(Error::invalid("hamming loss of an empty matrix"));
    }
    let wrong: usize = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| (**x != 0) != (**y != 0)).count())
        .sum();
    Ok(wrong as f64 / cells as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Kind {
    /// Mean of the positive-class and negative-class F1.
    #[default]
    Macro,
    Positive,
}

fn class_f1(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (u8::from(p != 0) == class, u8::from(t != 0) == class);
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn f1_label(pred: &[u8], truth: &[u8]) -> Result<f64> {
    f1_label_with(pred, truth, F1Kind::Macro)
}

pub fn f1_label_with(pred: &[u8], truth: &[u8], kind: F1Kind) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("f1 needs equal lengths"));
    }
    Ok(match kind {
        F1Kind::Macro => (class_f1(pred, truth, 1) + class_f1(pred, truth, 0)) / 2.0,
        F1Kind::Positive => class_f1(pred, truth, 1),
    })
}

/// Scores of one evaluated system, `N × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemScores {
    pub name: String,
    pub scores: Vec<Vec<f64>>,
    /// Scores are already 0/1 (PTC rules).
    pub binary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub name: String,
    pub auc: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub f1: Vec<f64>,
    pub global_auc: f64,
    pub global_f1: f64,
    pub hamming_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub labels: Vec<String>,
    pub support: Vec<usize>,
    pub systems: Vec<SystemResult>,
    /// Label view the table was built for, used to pick the footer anchor.
    pub view: Option<String>,
}

fn column(matrix: &[Vec<f64>], c: usize) -> Vec<f64> {
    matrix.iter().map(|row| row[c]).collect()
}

pub fn build_result_table(
    truth: &[Vec<u8>],
    labels: &[String],
    systems: &[SystemScores],
    threshold: f64,
    f1_kind: F1Kind,
) -> Result<ResultTable> {
    let n = truth.len();
    if n == 0 {
        return Err(Error::invalid("result table needs at least one sample"));
    }
    if truth.iter().any(|r| r.len() != labels.len()) {
        return Err(Error::invalid("truth rows do not match the label list"));
    }
    let support = (0..labels.len())
        .map(|c| truth.iter().filter(|r| r[c] != 0).count())
        .collect();
    let mut results = Vec::with_capacity(systems.len());
    for sys in systems {
        if sys.scores.len() != n || sys.scores.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::invalid(format!("system '{}' is not aligned with the truth matrix", sys.name)));
        }
        let bits = if sys.binary {
            sys.scores
                .iter()
                .map(|r| r.iter().map(|&v| u8::from(v >= 0.5)).collect())
                .collect()
        } else {
            binarize(&sys.scores, threshold)?
        };
        let mut auc_v = Vec::with_capacity(labels.len());
        let mut degenerate = Vec::with_capacity(labels.len());
        let mut f1 = Vec::with_capacity(labels.len());
        for c in 0..labels.len() {
            let t: Vec<u8> = truth.iter().map(|r| r[c]).collect();
            let a = auc(&column(&sys.scores, c), &t)?;
            auc_v.push(a.value);
            degenerate.push(a.degenerate);
            let p: Vec<u8> = bits.iter().map(|r: &Vec<u8>| r[c]).collect();
            f1.push(f1_label_with(&p, &t, f1_kind)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        results.push(SystemResult {
            name: sys.name.clone(),
            global_auc: mean(&auc_v),
            global_f1: mean(&f1),
            hamming_loss: hamming_loss(&bits, truth)?,
            auc: auc_v,
            degenerate,
            f1,
        });
    }
    Ok(ResultTable {
        labels: labels.to_vec(),
        support,
        systems: results,
        view: None,
    })
}

impl ResultTable {
    pub fn system(&self, name: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.name == name)
    }

    /// `label,support,<sys>_auc,<sys>_f1,...` rows, a `__global__` row and a comment footer.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string(), "support".to_string()];
        for s in &self.systems {
            header.push(format!("{}_auc", s.name));
            header.push(format!("{}_f1", s.name));
        }
        w.write_record(&header)?;
        for (c, label) in self.labels.iter().enumerate() {
            let mut row = vec![label.clone(), self.support[c].to_string()];
            for s in &self.systems {
                row.push(format!("{:.6}", s.auc[c]));
                row.push(format!("{:.6}", s.f1[c]));
            }
            w.write_record(&row)?;
        }
        let mut global = vec!["__global__".to_string(), self.support.iter().sum::<usize>().to_string()];
        for s in &self.systems {
            global.push(format!("{:.6}", s.global_auc));
            global.push(format!("{:.6}", s.global_f1));
        }
        w.write_record(&global)?;
        let mut out = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        let anchors: Vec<String> = REFERENCE_ANCHORS
            .iter()
            .filter(|(view, _)| self.view.as_deref().is_none_or(|v| v == *view))
            .map(|(view, v)| format!("{view} {v:.3}"))
            .collect();
        out.extend_from_slice(
            format!("# reference full-scale CTP global AUC (not reproduced here): {}\n", anchors.join("; ")).as_bytes(),
        );
        Ok(out)
    }

    /// `system,hamming_loss,global_auc,global_f1,degenerate_labels`.
    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system", "hamming_loss", "global_auc", "global_f1", "degenerate_labels"])?;
        for s in &self.systems {
            w.write_record([
                s.name.clone(),
                format!("{:.6}", s.hamming_loss),
                format!("{:.6}", s.global_auc),
                format!("{:.6}", s.global_f1),
                s.degenerate.iter().filter(|&&d| d).count().to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn save(&self, table_path: &Path, summary_path: &Path) -> Result<()> {
        write_atomic(table_path, &self.to_csv()?)?;
        write_atomic(summary_path, &self.summary_csv()?)
    }
}
