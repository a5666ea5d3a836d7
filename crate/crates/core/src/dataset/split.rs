//! Patient-grouped iterative stratification.
//!
//! Labels are processed rarest-first. Each unassigned patient carrying the
//! current label goes to the subset with the largest outstanding demand for
//! that label; ties go to the subset with the most remaining capacity, then
//! to a seeded draw. Patients without any label fill the remaining capacity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{project, LabelView, TermTree};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    patients: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn from_map(patients: BTreeMap<String, Split>) -> Self {
        Self { patients }
    }

    pub fn get(&self, patient_id: &str) -> Option<Split> {
        self.patients.get(patient_id).copied()
    }

    pub fn patients(&self) -> &BTreeMap<String, Split> {
        &self.patients
    }

    /// Copies of `records` with the split column filled in.
    pub fn apply(&self, records: &[SampleRecord]) -> Vec<SampleRecord> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.split = self.get(&r.patient_id);
                r
            })
            .collect()
    }

    /// Fraction of samples (not patients) per subset.
    pub fn sample_fractions(&self, records: &[SampleRecord]) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for r in records {
            if let Some(s) = self.get(&r.patient_id) {
                counts[s.index()] += 1;
            }
        }
        let total = records.len().max(1) as f64;
        counts.map(|c| c as f64 / total)
    }
}

struct Patient {
    id: String,
    samples: usize,
    label_counts: Vec<usize>,
}

pub fn stratified_group_split(
    records: &[SampleRecord],
    view: &LabelView,
    tree: &TermTree,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let labels = view.len();
    let mut grouped: BTreeMap<&str, Patient> = BTreeMap::new();
    for r in records {
        let bits = project(r.labels.iter().map(String::as_str), view, tree)?;
        let p = grouped.entry(r.patient_id.as_str()).or_insert_with(|| Patient {
            id: r.patient_id.clone(),
            samples: 0,
            label_counts: vec![0; labels],
        });
        p.samples += 1;
        for (c, b) in p.label_counts.iter_mut().zip(bits) {
            *c += b as usize;
        }
    }
    let active: Vec<usize> = (0..3).filter(|&k| fractions[k] > 0.0).collect();
    if grouped.len() < active.len() {
        return Err(Error::invalid(format!(
            "{} patients cannot fill {} subsets",
            grouped.len(),
            active.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patients: Vec<Patient> = grouped.into_values().collect();
    patients.shuffle(&mut rng);

    let total_samples: usize = patients.iter().map(|p| p.samples).sum();
    let mut label_totals = vec![0usize; labels];
    for p in &patients {
        for (t, c) in label_totals.iter_mut().zip(&p.label_counts) {
            *t += c;
        }
    }
    let desired_size: Vec<f64> = fractions.iter().map(|f| f * total_samples as f64).collect();
    let desired_label: Vec<Vec<f64>> = fractions
        .iter()
        .map(|f| label_totals.iter().map(|&t| f * t as f64).collect())
        .collect();
    let mut size = [0usize; 3];
    let mut label_count = vec![vec![0usize; labels]; 3];
    let mut assigned: Vec<Option<Split>> = vec![None; patients.len()];

    let mut order: Vec<usize> = (0..labels).filter(|&c| label_totals[c] > 0).collect();
    order.sort_by_key(|&c| (label_totals[c], c));

    let choose = |rng: &mut ChaCha8Rng, key: &dyn Fn(usize) -> (f64, f64)| -> usize {
        let mut best: Vec<usize> = Vec::new();
        let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &k in &active {
            let kk = key(k);
            let cmp_primary = kk.0 - best_key.0;
            let cmp_secondary = kk.1 - best_key.1;
            if cmp_primary > TIE_EPS || (cmp_primary.abs() <= TIE_EPS && cmp_secondary > TIE_EPS) {
                best.clear();
                best.push(k);
                best_key = kk;
            } else if cmp_primary.abs() <= TIE_EPS && cmp_secondary.abs() <= TIE_EPS {
                best.push(k);
            }
        }
        if best.len() == 1 {
            best[0]
        } else {
            best[rng.random_range(0..best.len())]
        }
    };

    for &c in &order {
        for (i, p) in patients.iter().enumerate() {
            if assigned[i].is_some() || p.label_counts[c] == 0 {
                continue;
            }
            let k = choose(&mut rng, &|k| {
                (
                    desired_label[k][c] - label_count[k][c] as f64,
                    desired_size[k] - size[k] as f64,
                )
            });
            assigned[i] = Some(Split::ALL[k]);
            size[k] += p.samples;
            for (acc, n) in label_count[k].iter_mut().zip(&p.label_counts) {
                *acc += n;
            }
        }
    }
    for (i, p) in patients.iter().enumerate() {
        if assigned[i].is_some() {
            continue;
        }
        let k = choose(&mut rng, &|k| (desired_size[k] - size[k] as f64, 0.0));
        assigned[i] = Some(Split::ALL[k]);
        size[k] += p.samples;
    }

    Ok(SplitAssignment {
        patients: patients
            .into_iter()
            .zip(assigned)
            .map(|(p, s)| (p.id, s.expect("every patient assigned")))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{parse_term_tree, ViewKind};

    fn rec(i: usize, patient: &str, labels: &[&str]) -> SampleRecord {
        SampleRecord {
            image_path: format!("img{i}.pgm"),
            patient_id: patient.to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            mask_path: None,
            split: None,
        }
    }

    fn single_label_cohort() -> (TermTree, LabelView, Vec<SampleRecord>) {
        let tree = parse_term_tree("finding\n").unwrap();
        let view = LabelView::new(&tree, ViewKind::Specific);
        let records = (0..100)
            .map(|i| rec(i, &format!("p{i}"), if i % 10 == 0 { &["finding"] } else { &[] }))
            .collect();
        (tree, view, records)
    }

    #[test]
    fn single_label_prevalence_preserved_in_every_subset() {
        let (tree, view, records) = single_label_cohort();
        for seed in 0..64 {
            let a = stratified_group_split(&records, &view, &tree, DEFAULT_FRACTIONS, seed).unwrap();
            let mut size = [0usize; 3];
            let mut pos = [0usize; 3];
            for r in &records {
                let k = a.get(&r.patient_id).unwrap().index();
                size[k] += 1;
                pos[k] += r.labels.len();
            }
            assert_eq!(size, [70, 10, 20], "seed {seed}");
            for k in 0..3 {
                let expected = size[k] as f64 * 0.1;
                assert!((pos[k] as f64 - expected).abs() <= 1.0, "seed {seed}: subset {k} has {} positives", pos[k]);
            }
        }
    }

    #[test]
    fn all_train_fraction() {
        let (tree, view, records) = single_label_cohort();
        let a = stratified_group_split(&records, &view, &tree, [1.0, 0.0, 0.0], 3).unwrap();
        assert!(a.patients().values().all(|&s| s == Split::Train));
    }

    #[test]
    fn too_few_patients_rejected() {
        let tree = parse_term_tree("x\n").unwrap();
        let view = LabelView::new(&tree, ViewKind::Specific);
        let records = vec![rec(0, "a", &["x"]), rec(1, "b", &[])];
        assert!(stratified_group_split(&records, &view, &tree, DEFAULT_FRACTIONS, 0).is_err());
        assert!(stratified_group_split(&records, &view, &tree, [0.5, 0.5, 0.0], 0).is_ok());
    }

    #[test]
    fn bad_fractions_rejected() {
        let (tree, view, records) = single_label_cohort();
        assert!(stratified_group_split(&records, &view, &tree, [0.7, 0.2, 0.2], 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn patients_partitioned_and_deterministic(
                rows in prop::collection::vec((0usize..40, prop::collection::vec(0usize..4, 0..3)), 10..120),
                seed in any::<u64>(),
            ) {
                let tree = parse_term_tree("a\nb\nc\nd\n").unwrap();
                let view = LabelView::new(&tree, ViewKind::Specific);
                let names = ["a", "b", "c", "d"];
                let records: Vec<SampleRecord> = rows.iter().enumerate().map(|(i, (p, ls))| {
                    let labels: Vec<&str> = ls.iter().map(|&l| names[l]).collect();
                    rec(i, &format!("p{p}"), &labels)
                }).collect();
                let patients: std::collections::BTreeSet<_> = records.iter().map(|r| r.patient_id.clone()).collect();
                prop_assume!(patients.len() >= 3);
                let a = stratified_group_split(&records, &view, &tree, DEFAULT_FRACTIONS, seed).unwrap();
                let b = stratified_group_split(&records, &view, &tree, DEFAULT_FRACTIONS, seed).unwrap();
                prop_assert_eq!(&a, &b);
                let assigned: std::collections::BTreeSet<_> = a.patients().keys().cloned().collect();
                prop_assert_eq!(assigned, patients);
            }
        }
    }
}
