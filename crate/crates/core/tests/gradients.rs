use imlx::nncore::{
    check_gradient, finite_difference_check, finite_difference_check_with, weighted_bce_logits, Kinks, LossConfig, RefNetArch, RefNetParams, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> RefNetArch {
    RefNetArch {
        conv1: 4,
        conv2: 6,
        hidden: 8,
        labels: 3,
        dropout: 0.2,
        side: 16,
    }
}

fn batch(rng: &mut ChaCha8Rng, n: usize, side: usize, labels: usize) -> (Tensor, Tensor) {
    let x = (0..n * side * side).map(|_| rng.random::<f32>()).collect();
    let y = (0..n * labels).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (
        Tensor::new(vec![n, 1, side, side], x).unwrap(),
        Tensor::new(vec![n, labels], y).unwrap(),
    )
}

#[test]
fn full_network_single_precision_five_seeds() {
    let cfg = LossConfig::new(vec![1.0, 3.0, 12.0]).unwrap();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = RefNetParams::<f32>::init(arch(), &mut rng).unwrap();
        let (x, y) = batch(&mut rng, 4, 16, 3);
        let report = finite_difference_check(&params, &x, &y, &cfg, 1e-3, seed).unwrap();
        assert!(report.coordinates >= 200);
        assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        let live = finite_difference_check_with(&params, &x, &y, &cfg, 1e-6, seed, Kinks::Live).unwrap();
        assert!(live.max_rel_error < 1e-3, "seed {seed}: {live:?}");
    }
}

#[test]
fn full_network_double_precision_is_tighter() {
    let cfg = LossConfig::new(vec![1.0, 3.0, 12.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = RefNetParams::<f32>::init(arch(), &mut rng).unwrap().cast::<f64>();
    let (x, y) = batch(&mut rng, 4, 16, 3);
    let report = finite_difference_check(&params, &x.cast(), &y.cast(), &cfg, 1e-4, 11).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn scalar_loss_gradient() {
    for &w in &[1.0, 7.5] {
        let cfg = LossConfig::new(vec![w]).unwrap();
        for &t in &[0.0, 1.0] {
            let target = Tensor::<f64>::new(vec![1, 1], vec![t]).unwrap();
            let loss = |z: &[f64]| weighted_bce_logits(&Tensor::new(vec![1, 1], vec![z[0]]).unwrap(), &target, &cfg).unwrap();
            for i in -20..=20 {
                let z = [i as f64 * 0.4];
                let analytic = [loss(&z).1.data()[0]];
                let err = check_gradient(|p| loss(p).0, &z, &analytic, &[0], 1e-5).unwrap();
                assert!(err < 1e-6, "w={w} t={t} z={}: {err}", z[0]);
            }
        }
    }
}
