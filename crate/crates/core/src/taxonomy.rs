//! Term tree, label views and support-based label selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::nncore::LossConfig;

/// Single-parent label hierarchy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermTree {
    nodes: BTreeSet<String>,
    parent: BTreeMap<String, String>,
    children: BTreeMap<String, BTreeSet<String>>,
}

impl TermTree {
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains(name)
    }

    pub fn parent(&self, name: &str) -> Option<&str> {
        self.parent.get(name).map(String::as_str)
    }

    pub fn children(&self, name: &str) -> impl Iterator<Item = &str> {
        self.children
            .get(name)
            .into_iter()
            .flat_map(|c| c.iter().map(String::as_str))
    }

    pub fn roots(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| !self.parent.contains_key(*n))
            .map(String::as_str)
            .collect()
    }

    pub fn leaves(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| self.children.get(*n).is_none_or(|c| c.is_empty()))
            .map(String::as_str)
            .collect()
    }

    /// Path from `name` up to its root, starting with `name` itself.
    pub fn ancestry<'a>(&'a self, name: &'a str) -> Vec<&'a str> {
        let mut path = vec![name];
        let mut cur = name;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn root_of<'a>(&'a self, name: &'a str) -> &'a str {
        self.ancestry(name).last().expect("ancestry is never empty")
    }

    pub fn depth(&self, name: &str) -> usize {
        self.ancestry(name).len() - 1
    }

    fn is_ancestor_or_self(&self, candidate: &str, of: &str) -> bool {
        self.ancestry(of).contains(&candidate)
    }
}

/// Parses a taxonomy file: one `parent<TAB>child` pair per line, `#` comments,
/// and bare names (no tab) declaring isolated roots.
pub fn parse_term_tree(text: &str) -> Result<TermTree> {
    let mut tree = TermTree::default();
    let err = |line: usize, message: String| Error::Parse {
        source_name: "taxonomy".into(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        match line.split_once('\t') {
            None => {
                let name = line.trim();
                tree.nodes.insert(name.to_string());
            }
            Some((parent, child)) => {
                let (parent, child) = (parent.trim(), child.trim());
                if parent.is_empty() || child.is_empty() {
                    return Err(err(line_no, "empty label name".into()));
                }
                if child.contains('\t') {
                    return Err(err(line_no, "expected exactly one tab".into()));
                }
                if let Some(existing) = tree.parent.get(child) {
                    if existing == parent {
                        continue;
                    }
                    return Err(err(
                        line_no,
                        format!("'{child}' already has parent '{existing}', cannot add '{parent}'"),
                    ));
                }
                if parent == child || tree.is_ancestor_or_self(child, parent) {
                    return Err(err(line_no, format!("edge '{parent}' -> '{child}' creates a cycle")));
                }
                tree.nodes.insert(parent.to_string());
                tree.nodes.insert(child.to_string());
                tree.parent.insert(child.to_string(), parent.to_string());
                tree.children
                    .entry(parent.to_string())
                    .or_default()
                    .insert(child.to_string());
            }
        }
    }
    Ok(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Specific,
    General,
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewKind::Specific => "specific",
            ViewKind::General => "general",
        })
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "specific" => Ok(ViewKind::Specific),
            "general" => Ok(ViewKind::General),
            other => Err(Error::invalid(format!("unknown view '{other}' (specific|general)"))),
        }
    }
}

/// Projection from tree nodes onto an ordered label vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelView {
    kind: ViewKind,
    labels: Vec<String>,
    /// node name → index into `labels`; nodes whose label was dropped are absent.
    index: BTreeMap<String, usize>,
}

impl LabelView {
    /// Specific view: every node is its own label.
    /// General view: every node rolls up to its root ancestor.
    pub fn new(tree: &TermTree, kind: ViewKind) -> Self {
        match kind {
            ViewKind::Specific => Self::from_mapping(kind, tree.nodes().map(|n| (n, n))),
            ViewKind::General => Self::grouped(tree, 0),
        }
    }

    /// General view that groups at the ancestor of the given depth (0 = root).
    /// Nodes shallower than `depth` keep their own name.
    pub fn grouped(tree: &TermTree, depth: usize) -> Self {
        Self::from_mapping(
            ViewKind::General,
            tree.nodes().map(|n| {
                let path = tree.ancestry(n);
                let d = path.len() - 1;
                (n, path[d.saturating_sub(depth)])
            }),
        )
    }

    fn from_mapping<'a>(kind: ViewKind, pairs: impl Iterator<Item = (&'a str, &'a str)>) -> Self {
        let pairs: Vec<(&str, &str)> = pairs.collect();
        let labels: Vec<String> = pairs
            .iter()
            .map(|(_, l)| l.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let position: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let index = pairs
            .iter()
            .map(|(node, label)| (node.to_string(), position[label]))
            .collect();
        Self { kind, labels, index }
    }

    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Label index for a node, `None` when the node's label is not retained.
    pub fn index_of(&self, node: &str) -> Option<usize> {
        self.index.get(node).copied()
    }

    /// Keeps only the listed labels, preserving order.
    pub fn retain(&self, keep: &BTreeSet<String>) -> Self {
        let labels: Vec<String> = self.labels.iter().filter(|l| keep.contains(*l)).cloned().collect();
        let position: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let index = self
            .index
            .iter()
            .filter_map(|(node, &old)| position.get(self.labels[old].as_str()).map(|&i| (node.clone(), i)))
            .collect();
        Self {
            kind: self.kind,
            labels,
            index,
        }
    }
}

/// Maps a sample's leaf labels to a binary vector over `view`.
///
/// Nodes unknown to `tree` are rejected; known nodes outside the view are dropped.
pub fn project<'a>(
    leaves: impl IntoIterator<Item = &'a str>,
    view: &LabelView,
    tree: &TermTree,
) -> Result<Vec<u8>> {
    let mut bits = vec![0u8; view.len()];
    for leaf in leaves {
        if !tree.contains(leaf) {
            return Err(Error::invalid(format!("unknown label '{leaf}'")));
        }
        if let Some(i) = view.index_of(leaf) {
            bits[i] = 1;
        }
    }
    Ok(bits)
}

/// Positive counts per label over a set of samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl LabelStats {
    pub fn compute(records: &[SampleRecord], view: &LabelView, tree: &TermTree) -> Result<Self> {
        let mut counts = vec![0usize; view.len()];
        for r in records {
            for (c, bit) in counts.iter_mut().zip(project(r.labels.iter().map(String::as_str), view, tree)?) {
                *c += bit as usize;
            }
        }
        Ok(Self {
            counts,
            total: records.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SupportFilter {
    pub view: LabelView,
    pub records: Vec<SampleRecord>,
    pub stats: LabelStats,
}

/// Keeps labels with at least `threshold` positives (inclusive) and prunes samples.
///
/// A sample whose every label was removed is dropped; a sample with a mix
/// keeps only the retained leaves; a sample unlabeled from the start stays as
/// an all-negative sample.
pub fn filter_by_support(
    records: &[SampleRecord],
    view: &LabelView,
    tree: &TermTree,
    threshold: usize,
) -> Result<SupportFilter> {
    if threshold == 0 {
        return Err(Error::invalid("support threshold must be >= 1"));
    }
    let full = LabelStats::compute(records, view, tree)?;
    let keep: BTreeSet<String> = view
        .labels()
        .iter()
        .zip(&full.counts)
        .filter(|(_, &c)| c >= threshold)
        .map(|(l, _)| l.clone())
        .collect();
    let retained = view.retain(&keep);
    let mut pruned = Vec::with_capacity(records.len());
    for r in records {
        if r.labels.is_empty() {
            pruned.push(r.clone());
            continue;
        }
        let kept: BTreeSet<String> = r
            .labels
            .iter()
            .filter(|l| retained.index_of(l).is_some())
            .cloned()
            .collect();
        if kept.is_empty() {
            continue;
        }
        let mut r = r.clone();
        r.labels = kept;
        pruned.push(r);
    }
    let stats = LabelStats::compute(&pruned, &retained, tree)?;
    Ok(SupportFilter {
        view: retained,
        records: pruned,
        stats,
    })
}

/// Positive-class weights `clamp((N − n_c) / n_c, 1, 100)`; absent labels get 100.
pub fn label_weights(stats: &LabelStats) -> Result<LossConfig> {
    if stats.total == 0 {
        return Err(Error::invalid("cannot weight labels of an empty sample set"));
    }
    let n = stats.total as f64;
    let weights = stats
        .counts
        .iter()
        .map(|&c| {
            if c == 0 {
                100.0
            } else {
                ((n - c as f64) / c as f64).clamp(1.0, 100.0)
            }
        })
        .collect();
    LossConfig::new(weights)
}
