use std::collections::{BTreeMap, BTreeSet};

use imlx::dataset::{stratified_group_split, synth_taxonomy, SampleRecord, Split, SynthConfig, DEFAULT_FRACTIONS, SYNTH_LEAVES};
use imlx::taxonomy::{parse_term_tree, LabelView, ViewKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 500 patients with 1–3 images each, labels drawn like the synthetic corpus.
fn cohort(seed: u64) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..500).map(|_| rng.random_range(1..=3)).collect();
    let total: usize = sizes.iter().sum();
    let labels = SynthConfig::imbalanced(total, 64, seed).sample_labels().unwrap();
    let mut out = Vec::with_capacity(total);
    let mut next = labels.iter();
    for (p, &k) in sizes.iter().enumerate() {
        for i in 0..k {
            let bits = next.next().unwrap();
            out.push(SampleRecord {
                image_path: format!("images/p{p}_{i}.png"),
                patient_id: format!("P{p:04}"),
                labels: SYNTH_LEAVES
                    .iter()
                    .zip(bits)
                    .filter(|(_, &b)| b)
                    .map(|((l, _, _), _)| l.to_string())
                    .collect(),
                mask_path: None,
                split: None,
            });
        }
    }
    out
}

#[test]
fn five_hundred_patients() {
    let tree = parse_term_tree(&synth_taxonomy()).unwrap();
    let view = LabelView::new(&tree, ViewKind::Specific);
    for seed in 0..8 {
        let records = cohort(seed);
        let assignment = stratified_group_split(&records, &view, &tree, DEFAULT_FRACTIONS, seed).unwrap();
        let split = assignment.apply(&records);

        let mut per_patient: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for r in &split {
            per_patient.entry(&r.patient_id).or_default().insert(r.split.unwrap());
        }
        assert_eq!(per_patient.len(), 500);
        assert!(per_patient.values().all(|s| s.len() == 1), "a patient spans subsets");

        let fractions = assignment.sample_fractions(&records);
        for (got, want) in fractions.iter().zip(DEFAULT_FRACTIONS) {
            assert!((got - want).abs() <= 0.02, "seed {seed}: {fractions:?}");
        }
        // every label with enough positives reaches every subset
        for leaf in ["nodule", "cavitation", "consolidation", "atelectasis"] {
            for s in Split::ALL {
                assert!(split.iter().any(|r| r.split == Some(s) && r.labels.contains(leaf)), "{leaf} missing from {s:?}");
            }
        }
    }
}
