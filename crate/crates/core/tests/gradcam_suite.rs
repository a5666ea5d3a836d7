use imlx::explain::{ensemble_heatmap, grad_cam_map, grad_cam_parts, heat_centroid, normalize_map, HeatMap};
use imlx::imaging::ImageTensor;
use imlx::nncore::{RefNetArch, RefNetParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> RefNetArch {
    RefNetArch {
        conv1: 6,
        conv2: 8,
        hidden: 12,
        labels: 3,
        dropout: 0.2,
        side: 32,
    }
}

fn random_image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(32, 32, |_, _| rng.random::<f32>())
}

#[test]
fn maps_in_unit_range_over_many_networks() {
    for seed in 0..20 {
        let params = RefNetParams::<f32>::init(arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let img = random_image(seed + 100);
        for label in 0..3 {
            let map = grad_cam_map(&params, &img, label).unwrap();
            assert_eq!((map.height(), map.width()), (32, 32));
            assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let small = normalize_map(&grad_cam_parts(&params, &img, label).unwrap().raw);
            let max = small.iter().cloned().fold(0.0f32, f32::max);
            assert!(max == 1.0 || small.iter().all(|&v| v == 0.0));
            assert!(small.contains(&0.0), "min-max scaling pins a zero");
        }
    }
}

#[test]
fn degenerate_maps_are_zero() {
    assert_eq!(normalize_map(&[0.3; 10]), vec![0.0; 10]);
    assert_eq!(normalize_map(&[0.0; 4]), vec![0.0; 4]);
    let mut params = RefNetParams::<f32>::init(arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    params.out_w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let map = grad_cam_map(&params, &random_image(2), 0).unwrap();
    assert!(map.data().iter().all(|&v| v == 0.0));
    assert_eq!(heat_centroid(&map), None);
}

#[test]
fn positive_output_scale_leaves_map_unchanged() {
    for seed in 0..10 {
        let params = RefNetParams::<f32>::init(arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let img = random_image(seed);
        for label in 0..3 {
            let base = grad_cam_map(&params, &img, label).unwrap();
            for scale in [0.125f32, 0.5, 4.0, 64.0] {
                let mut scaled = params.clone();
                scaled.out_w.data_mut().iter_mut().for_each(|v| *v *= scale);
                scaled.out_b.data_mut().iter_mut().for_each(|v| *v *= scale);
                assert_eq!(grad_cam_map(&scaled, &img, label).unwrap(), base);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ensemble_average_stays_in_range(maps in proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 16), 1..6)) {
        let heat: Vec<HeatMap> = maps
            .iter()
            .map(|v| HeatMap { label: "x".into(), source: "m".into(), values: ImageTensor::new(4, 4, v.clone()).unwrap() })
            .collect();
        let avg = ensemble_heatmap(&heat).unwrap();
        prop_assert!(avg.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut rev = heat.clone();
        rev.reverse();
        prop_assert_eq!(ensemble_heatmap(&rev).unwrap().values, avg.values);
    }
}
