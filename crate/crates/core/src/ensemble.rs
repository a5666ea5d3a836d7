//! Aggregation of member probability matrices: CTP, PTC-lw and PTC-mode.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_bytes, write_atomic};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Probabilities of one member, `N × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub member: String,
    pub labels: Vec<String>,
    pub sample_ids: Vec<String>,
    pub probs: Vec<Vec<f64>>,
}

impl PredictionMatrix {
    pub fn new(member: impl Into<String>, labels: Vec<String>, sample_ids: Vec<String>, probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.len() != sample_ids.len() {
            return Err(Error::invalid(format!("{} rows for {} samples", probs.len(), sample_ids.len())));
        }
        for (i, row) in probs.iter().enumerate() {
            if row.len() != labels.len() {
                return Err(Error::invalid(format!("row {i} has {} values for {} labels", row.len(), labels.len())));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("row {i} has a probability outside [0,1]")));
            }
        }
        Ok(Self {
            member: member.into(),
            labels,
            sample_ids,
            probs,
        })
    }

    pub fn rows(&self) -> usize {
        self.probs.len()
    }

    /// Shortest round-trip decimals, so `load` restores the exact values.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        write_rows(&self.labels, &self.sample_ids, &self.probs, |v| v.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn load(path: &Path, member: impl Into<String>) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let source = path.display().to_string();
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("sample_id") {
            return Err(Error::Parse {
                source_name: source,
                line: 1,
                message: "first column must be sample_id".into(),
            });
        }
        let labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut sample_ids = Vec::new();
        let mut probs = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
            sample_ids.push(row.get(0).unwrap_or("").to_string());
            let values = row
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    source_name: source.clone(),
                    line,
                    message: e.to_string(),
                })?;
            probs.push(values);
        }
        Self::new(member, labels, sample_ids, probs)
    }
}

/// `sample_id,<labels>` with six decimals.
pub fn scores_csv(labels: &[String], sample_ids: &[String], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    write_rows(labels, sample_ids, rows, |v| format!("{v:.6}"))
}

fn write_rows(labels: &[String], sample_ids: &[String], rows: &[Vec<f64>], fmt: impl Fn(f64) -> String) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in sample_ids.iter().zip(rows) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CTP")]
    Ctp,
    #[serde(rename = "PTC-lw")]
    PtcLw,
    #[serde(rename = "PTC-mode")]
    PtcMode,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ctp, Method::PtcLw, Method::PtcMode];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ctp => "CTP",
            Method::PtcLw => "PTC-lw",
            Method::PtcMode => "PTC-mode",
        }
    }

    /// Lower-case identifier used in file names and column prefixes.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Ctp => "ctp",
            Method::PtcLw => "ptc_lw",
            Method::PtcMode => "ptc_mode",
        }
    }

    /// PTC rules emit binary scores.
    pub fn is_binary(self) -> bool {
        !matches!(self, Method::Ctp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s) || m.slug() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ensemble method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub method: Method,
    pub labels: Vec<String>,
    pub sample_ids: Vec<String>,
    /// Probabilities for CTP, 0/1 for the PTC rules.
    pub scores: Vec<Vec<f64>>,
    /// Members predicting each cell positive.
    pub agreement: Vec<Vec<u32>>,
    pub members: usize,
}

impl EnsembleOutput {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        scores_csv(&self.labels, &self.sample_ids, &self.scores)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("threshold {threshold} must lie in (0,1)")))
    }
}

pub fn binarize(probs: &[Vec<f64>], threshold: f64) -> Result<Vec<Vec<u8>>> {
    check_threshold(threshold)?;
    Ok(probs
        .iter()
        .map(|row| row.iter().map(|&p| u8::from(p >= threshold)).collect())
        .collect())
}

fn check_aligned(matrices: &[PredictionMatrix]) -> Result<(usize, usize)> {
    let first = matrices.first().ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
    for m in &matrices[1..] {
        if m.labels != first.labels || m.sample_ids != first.sample_ids {
            return Err(Error::invalid(format!(
                "member '{}' is not aligned with member '{}' (labels or samples differ)",
                m.member, first.member
            )));
        }
    }
    Ok((first.rows(), first.labels.len()))
}

/// Member votes per cell: `votes[m][i][c]`.
fn member_votes(matrices: &[PredictionMatrix], threshold: f64) -> Result<Vec<Vec<Vec<u8>>>> {
    matrices.iter().map(|m| binarize(&m.probs, threshold)).collect()
}

fn agreement(votes: &[Vec<Vec<u8>>], n: usize, l: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| (0..l).map(|c| votes.iter().map(|v| v[i][c] as u32).sum()).collect())
        .collect()
}

fn output(matrices: &[PredictionMatrix], method: Method, scores: Vec<Vec<f64>>, agreement: Vec<Vec<u32>>) -> EnsembleOutput {
    EnsembleOutput {
        method,
        labels: matrices[0].labels.clone(),
        sample_ids: matrices[0].sample_ids.clone(),
        scores,
        agreement,
        members: matrices.len(),
    }
}

/// Order-independent mean: values are summed in sorted order, and a cell on
/// which every member agrees returns that value exactly.
fn cell_mean(values: impl Iterator<Item = f64>, m: f64) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    if v.first() == v.last() {
        return v.first().copied().unwrap_or(0.0);
    }
    v.iter().sum::<f64>() / m
}

/// Combine then predict: element-wise mean of member probabilities.
pub fn ctp(matrices: &[PredictionMatrix], threshold: f64) -> Result<EnsembleOutput> {
    let (n, l) = check_aligned(matrices)?;
    let votes = member_votes(matrices, threshold)?;
    let m = matrices.len() as f64;
    let scores = (0..n)
        .map(|i| (0..l).map(|c| cell_mean(matrices.iter().map(|x| x.probs[i][c]), m)).collect())
        .collect();
    Ok(output(matrices, Method::Ctp, scores, agreement(&votes, n, l)))
}

/// Strict label-wise majority; an even split is negative.
pub fn majority_vote(votes: &[u8]) -> u8 {
    let yes = votes.iter().filter(|&&v| v != 0).count();
    u8::from(2 * yes > votes.len())
}

pub fn ptc_lw(matrices: &[PredictionMatrix], threshold: f64) -> Result<EnsembleOutput> {
    let (n, l) = check_aligned(matrices)?;
    let votes = member_votes(matrices, threshold)?;
    let scores = (0..n)
        .map(|i| {
            (0..l)
                .map(|c| {
                    let cell: Vec<u8> = votes.iter().map(|v| v[i][c]).collect();
                    majority_vote(&cell) as f64
                })
                .collect()
        })
        .collect();
    Ok(output(matrices, Method::PtcLw, scores, agreement(&votes, n, l)))
}

/// Most frequent predicted label set; ties go to the lexicographically
/// smallest sorted index sequence.
pub fn mode_set(sets: &[Vec<usize>]) -> Vec<usize> {
    let mut counts: BTreeMap<&Vec<usize>, usize> = BTreeMap::new();
    for s in sets {
        *counts.entry(s).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    // BTreeMap iterates in lexicographic order, so the first hit is the smallest
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(s, _)| s.clone())
        .unwrap_or_default()
}

pub fn ptc_mode(matrices: &[PredictionMatrix], threshold: f64) -> Result<EnsembleOutput> {
    let (n, l) = check_aligned(matrices)?;
    let votes = member_votes(matrices, threshold)?;
    let scores = (0..n)
        .map(|i| {
            let sets: Vec<Vec<usize>> = votes
                .iter()
                .map(|v| (0..l).filter(|&c| v[i][c] == 1).collect())
                .collect();
            let winner = mode_set(&sets);
            (0..l).map(|c| if winner.contains(&c) { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    Ok(output(matrices, Method::PtcMode, scores, agreement(&votes, n, l)))
}

pub fn aggregate(method: Method, matrices: &[PredictionMatrix], threshold: f64) -> Result<EnsembleOutput> {
    match method {
        Method::Ctp => ctp(matrices, threshold),
        Method::PtcLw => ptc_lw(matrices, threshold),
        Method::PtcMode => ptc_mode(matrices, threshold),
    }
}
