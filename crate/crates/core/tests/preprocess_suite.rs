use imlx::dataset::{synth_generate, SynthConfig};
use imlx::preprocess::{fill_holes, filter_components, load_mask, postprocess_mask, roi_box, Mask, WORKSPACE_SIDE};
use proptest::prelude::*;

/// Independent 4-connected component count by union-find.
fn components(mask: &Mask) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            if r + 1 < h && mask.get(r + 1, c) {
                let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, (r + 1) * w + c));
                parent[a] = b;
            }
            if c + 1 < w && mask.get(r, c + 1) {
                let (a, b) = (find(&mut parent, r * w + c), find(&mut parent, r * w + c + 1));
                parent[a] = b;
            }
        }
    }
    let mut roots = std::collections::BTreeSet::new();
    for i in 0..h * w {
        if mask.data()[i] != 0 {
            roots.insert(find(&mut parent, i));
        }
    }
    roots.len()
}

fn rect(m: &mut Mask, r0: usize, c0: usize, r1: usize, c1: usize) {
    for r in r0..=r1 {
        for c in c0..=c1 {
            m.set(r, c, true);
        }
    }
}

#[test]
fn stuck_lungs_at_workspace_size() {
    let s = WORKSPACE_SIDE;
    let mut m = Mask::zeros(s, s);
    rect(&mut m, 60, 50, 440, 230);
    rect(&mut m, 60, 282, 440, 462);
    // bridge across the mediastinum, plus a hole in the left lung
    rect(&mut m, 250, 231, 262, 281);
    for r in 150..170 {
        for c in 120..140 {
            m.set(r, c, false);
        }
    }
    assert_eq!(components(&m), 1);
    let out = postprocess_mask(&m);
    assert!(out.separated);
    assert_eq!(components(&out.mask), 2);
    assert!(out.mask.get(160, 130), "hole filled");
    assert!(out.mask.get(300, 100) && out.mask.get(300, 400));
}

#[test]
fn generated_masks_clean_to_two_lungs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_generate(&SynthConfig::imbalanced(40, 128, 3), dir.path()).unwrap();
    for r in &corpus.records {
        let raw = load_mask(&dir.path().join(r.mask_path.as_ref().unwrap())).unwrap();
        let m = raw.resize_nearest(WORKSPACE_SIDE, WORKSPACE_SIDE);
        let out = postprocess_mask(&m);
        assert!(!out.empty_warning);
        assert_eq!(components(&out.mask), 2, "{}", r.image_path);
    }
}

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (8usize..40, 8usize..40).prop_flat_map(|(h, w)| {
        proptest::collection::vec(proptest::bool::weighted(0.45), h * w)
            .prop_map(move |bits| Mask::new(h, w, bits.into_iter().map(u8::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn flood_fill_is_superset(m in mask_strategy()) {
        let filled = fill_holes(&m);
        prop_assert!(filled.contains(&m));
        prop_assert_eq!(fill_holes(&filled), filled);
    }

    #[test]
    fn component_count_bound(m in mask_strategy()) {
        let n = components(&m);
        let f = filter_components(&m);
        prop_assert!(components(&f) <= n.min(2));
        prop_assert!(m.contains(&f));
        prop_assert!(components(&postprocess_mask(&m).mask) <= 2);
    }

    #[test]
    fn crop_contains_mask(m in mask_strategy()) {
        let (bx, warn) = roi_box(&m);
        prop_assert_eq!(warn, m.is_empty());
        for r in 0..m.height() {
            for c in 0..m.width() {
                if m.get(r, c) {
                    prop_assert!(bx.contains(r, c));
                }
            }
        }
        prop_assert!(bx.r1 < m.height() && bx.c1 < m.width());
    }
}
