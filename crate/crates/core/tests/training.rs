use imlx::dataset::AugmentConfig;
use imlx::imaging::ImageTensor;
use imlx::nncore::LossConfig;
use imlx::trainer::{predict_probs, train_model, EnsembleSpec, LabeledImages, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

/// Label 0 lights the top-left quadrant, label 1 a bar along the bottom edge.
fn separable(count: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..count {
        let t = vec![rng.random_bool(0.5) as u8, rng.random_bool(0.5) as u8];
        let noise: Vec<f32> = (0..SIDE * SIDE).map(|_| rng.random_range(0.0..0.1)).collect();
        images.push(ImageTensor::from_fn(SIDE, SIDE, |r, c| {
            let mut v = noise[r * SIDE + c];
            if t[0] == 1 && r < 6 && c < 6 {
                v += 0.8;
            }
            if t[1] == 1 && r >= 12 && (3..13).contains(&c) {
                v += 0.8;
            }
            v.min(1.0)
        }));
        targets.push(t);
    }
    LabeledImages::new(vec!["a".into(), "b".into()], images, targets).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        max_epochs: 50,
        batch_size: 16,
        lr: 1e-2,
        patience: 49,
        side: SIDE,
        hidden: 16,
        augment: AugmentConfig::identity(),
        ..TrainConfig::default()
    }
}

#[test]
fn separable_set_is_learned() {
    let train = separable(200, 1);
    let val = separable(50, 2);
    let member = &EnsembleSpec::standard(5).members[0];
    let ck = train_model(&config(), member, &train, &val, &LossConfig::uniform(2)).unwrap();
    let best = ck.history.iter().map(|h| h.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "best train loss {best}");
    let probs = predict_probs(&ck.params, &val.images, 32).unwrap();
    let correct = probs
        .iter()
        .zip(&val.targets)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(&p, &t)| (p >= 0.5) == (t == 1)))
        .filter(|&ok| ok)
        .count();
    assert!(correct >= 95, "{correct}/100 validation cells correct");
}

#[test]
fn history_and_best_epoch_are_consistent() {
    let train = separable(64, 3);
    let val = separable(32, 4);
    let cfg = TrainConfig {
        max_epochs: 8,
        patience: 3,
        ..config()
    };
    let ck = train_model(&cfg, &EnsembleSpec::standard(1).members[2], &train, &val, &LossConfig::uniform(2)).unwrap();
    let min = ck.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(ck.best_val_loss, min);
    assert_eq!(ck.history[ck.best_epoch - 1].val_loss, min);
    assert!(ck.history.len() <= 8);
    assert_eq!(ck.stopped_early, ck.history.len() < 8);
}
