//! Training loop, early stopping, ensemble orchestration and prediction.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig};
use crate::ensemble::PredictionMatrix;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nncore::{adam_step, backward, forward, sigmoid, weighted_bce_logits, AdamState, LossConfig, Mode, RefNetArch, RefNetParams, Tensor};

/// Odd 64-bit golden-ratio constant used to derive member seeds.
pub const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// `(F1, F2)` of the five ensemble members.
pub const MEMBER_WIDTHS: [(usize, usize); 5] = [(8, 16), (12, 16), (8, 24), (16, 16), (12, 24)];

/// Probabilities are kept this far from 0 and 1.
const PROB_EPS: f64 = 1e-9;

pub const THREADS_ENV: &str = "IMLX_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub side: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 350,
            batch_size: 32,
            lr: 1e-4,
            patience: 25,
            min_delta: 0.001,
            side: 224,
            hidden: 512,
            dropout: 0.2,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small inputs and a narrow head so a full ensemble trains on one core in
    /// minutes. Geometric augmentation is off: at 64 px with this little data
    /// it costs more than it gives; flips and intensity jitter stay.
    pub fn desk() -> Self {
        Self {
            max_epochs: 60,
            lr: 5e-3,
            patience: 15,
            side: 64,
            hidden: 32,
            augment: AugmentConfig {
                rotation_deg: 0.0,
                shear_rad: 0.0,
                zoom: (1.0, 1.0),
                width_shift: 0.0,
                height_shift: 0.0,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and min delta non-negative"));
        }
        self.augment.validate()?;
        self.arch(1, 1, 1).validate()
    }

    pub fn arch(&self, conv1: usize, conv2: usize, labels: usize) -> RefNetArch {
        RefNetArch {
            conv1,
            conv2,
            hidden: self.hidden,
            labels,
            dropout: self.dropout,
            side: self.side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub index: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub seed: u64,
}

impl MemberSpec {
    pub fn name(&self) -> String {
        format!("member{}", self.index)
    }
}

/// `master XOR (SEED_MIX * (index + 1))`, wrapping.
pub fn member_seed(master: u64, index: usize) -> u64 {
    master ^ SEED_MIX.wrapping_mul(index as u64 + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
}

impl EnsembleSpec {
    pub fn standard(master_seed: u64) -> Self {
        Self {
            members: MEMBER_WIDTHS
                .iter()
                .enumerate()
                .map(|(index, &(conv1, conv2))| MemberSpec {
                    index,
                    conv1,
                    conv2,
                    seed: member_seed(master_seed, index),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() != MEMBER_WIDTHS.len() {
            return Err(Error::invalid(format!("ensemble needs exactly 5 members, got {}", self.members.len())));
        }
        for (i, a) in self.members.iter().enumerate() {
            if a.conv1 == 0 || a.conv2 == 0 {
                return Err(Error::invalid(format!("member {} has a zero-width layer", a.index)));
            }
            if self.members[..i].iter().any(|b| b.seed == a.seed || b.index == a.index) {
                return Err(Error::invalid(format!("member {} repeats a seed or index", a.index)));
            }
        }
        Ok(())
    }
}

/// Images at the training side plus their binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub labels: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub targets: Vec<Vec<u8>>,
}

impl LabeledImages {
    pub fn new(labels: Vec<String>, images: Vec<ImageTensor>, targets: Vec<Vec<u8>>) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(Error::invalid(format!("{} images but {} target rows", images.len(), targets.len())));
        }
        if let Some(row) = targets.iter().find(|r| r.len() != labels.len() || r.iter().any(|&b| b > 1)) {
            return Err(Error::invalid(format!("target row {row:?} does not match {} binary labels", labels.len())));
        }
        Ok(Self { labels, images, targets })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn check_side(&self, side: usize, what: &str) -> Result<()> {
        if let Some(img) = self.images.iter().find(|i| i.height() != side || i.width() != side) {
            return Err(Error::invalid(format!(
                "{what} image is {}x{}, model side is {side}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

/// One early-stopping step.
///
/// Improvement means `best - current > min_delta`; it resets the counter and
/// moves `best`. Otherwise the counter grows; `stop` is set once it reaches `patience`.
pub fn early_stop_update(best: f64, current: f64, counter: usize, min_delta: f64, patience: usize) -> (f64, usize, bool) {
    if best - current > min_delta {
        (current, 0, false)
    } else {
        let counter = counter + 1;
        (best, counter, counter >= patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn stack(images: &[&ImageTensor], side: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, side, side], data)
}

fn target_tensor(rows: &[&Vec<u8>], labels: usize) -> Result<Tensor<f32>> {
    let data = rows.iter().flat_map(|r| r.iter().map(|&b| b as f32)).collect();
    Tensor::new(vec![rows.len(), labels], data)
}

/// Mean weighted loss over every cell of `set`, eval mode.
pub fn evaluate_loss(params: &RefNetParams<f32>, set: &LabeledImages, loss: &LossConfig, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..set.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(set.len());
        let imgs: Vec<&ImageTensor> = set.images[start..end].iter().collect();
        let rows: Vec<&Vec<u8>> = set.targets[start..end].iter().collect();
        let (logits, _) = forward(params, &stack(&imgs, params.arch.side)?, Mode::Eval)?;
        let (l, _) = weighted_bce_logits(&logits, &target_tensor(&rows, set.labels.len())?, loss)?;
        total += l * (end - start) as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains one member; the returned checkpoint holds the best-validation parameters.
pub fn train_model(
    config: &TrainConfig,
    member: &MemberSpec,
    train: &LabeledImages,
    val: &LabeledImages,
    loss: &LossConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if train.labels != val.labels {
        return Err(Error::invalid("training and validation label lists differ"));
    }
    if loss.pos_weights.len() != train.labels.len() {
        return Err(Error::invalid("loss weights do not match the label count"));
    }
    train.check_side(config.side, "training")?;
    val.check_side(config.side, "validation")?;

    let labels = train.labels.len();
    let arch = config.arch(member.conv1, member.conv2, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(member.seed);
    let mut params = RefNetParams::<f32>::init(arch, &mut rng)?;
    let mut adam = AdamState::new(&params, config.lr)?;

    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stop_best = f64::INFINITY;
    let mut counter = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<ImageTensor> = chunk
                .iter()
                .map(|&i| augment(&train.images[i], &config.augment, &mut rng))
                .collect();
            let refs: Vec<&ImageTensor> = augmented.iter().collect();
            let rows: Vec<&Vec<u8>> = chunk.iter().map(|&i| &train.targets[i]).collect();
            let input = stack(&refs, config.side)?;
            let (logits, cache) = forward(&params, &input, Mode::Train(&mut rng))?;
            let (l, grad) = weighted_bce_logits(&logits, &target_tensor(&rows, labels)?, loss)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            let grads = backward(&params, &cache, &grad)?;
            (params, adam) = adam_step(params, &grads, adam)?;
            batch_losses.push(l);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_loss = evaluate_loss(&params, val, loss, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}", member.name());
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        let stop;
        (stop_best, counter, stop) = early_stop_update(stop_best, val_loss, counter, config.min_delta, config.patience);
        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok(Checkpoint {
        member: member.clone(),
        config: config.clone(),
        labels: train.labels.clone(),
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        params: best_params,
    })
}

/// Reads `IMLX_THREADS`: unset means no cap, 0 means serial.
pub fn thread_cap_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a non-negative integer, got '{v}'"))),
    }
}

/// Trains every member. `threads`: `Some(0)` or `Some(1)` runs serially,
/// `None` uses all cores. Results do not depend on the thread count.
pub fn train_ensemble(
    spec: &EnsembleSpec,
    config: &TrainConfig,
    train: &LabeledImages,
    val: &LabeledImages,
    loss: &LossConfig,
    threads: Option<usize>,
) -> Result<Vec<Checkpoint>> {
    spec.validate()?;
    let run = |m: &MemberSpec| {
        train_model(config, m, train, val, loss).map_err(|e| Error::Member {
            member: m.index,
            source: Box::new(e),
        })
    };
    match threads {
        Some(0) | Some(1) => spec.members.iter().map(run).collect(),
        cap => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cap.unwrap_or(0))
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?;
            pool.install(|| spec.members.par_iter().map(run).collect())
        }
    }
}

/// Sigmoid of eval-mode logits, `N × L`.
pub fn predict_probs(params: &RefNetParams<f32>, images: &[ImageTensor], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let side = params.arch.side;
    if let Some(img) = images.iter().find(|i| i.height() != side || i.width() != side) {
        return Err(Error::invalid(format!(
            "image is {}x{} but the checkpoint expects {side}x{side}",
            img.height(),
            img.width()
        )));
    }
    let labels = params.arch.labels;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let (logits, _) = forward(params, &stack(&refs, side)?, Mode::Eval)?;
        for row in logits.data().chunks(labels) {
            out.push(row.iter().map(|&z| sigmoid(z as f64).clamp(PROB_EPS, 1.0 - PROB_EPS)).collect());
        }
    }
    Ok(out)
}

pub fn predict(checkpoint: &Checkpoint, images: &[ImageTensor], sample_ids: Vec<String>) -> Result<PredictionMatrix> {
    let probs = predict_probs(&checkpoint.params, images, checkpoint.config.batch_size)?;
    PredictionMatrix::new(checkpoint.member.name(), checkpoint.labels.clone(), sample_ids, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 6,
            batch_size: 8,
            lr: 3e-3,
            patience: 3,
            side: 16,
            hidden: 8,
            augment: AugmentConfig::identity(),
            ..TrainConfig::default()
        }
    }

    /// Label 0: bright top half; label 1: bright left half.
    fn separable(n: usize, side: usize, offset: usize) -> LabeledImages {
        let mut images = Vec::new();
        let mut targets = Vec::new();
        for i in offset..offset + n {
            let (a, b) = (i % 2 == 0, (i / 2) % 2 == 0);
            images.push(ImageTensor::from_fn(side, side, |r, c| {
                let mut v = 0.1;
                if a && r < side / 2 {
                    v += 0.4;
                }
                if b && c < side / 2 {
                    v += 0.4;
                }
                v
            }));
            targets.push(vec![u8::from(a), u8::from(b)]);
        }
        LabeledImages::new(vec!["a".into(), "b".into()], images, targets).unwrap()
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop_update(1.0, 0.9989, 4, 0.001, 25), (0.9989, 0, false));
        assert_eq!(early_stop_update(1.0, 0.9992, 4, 0.001, 25), (1.0, 5, false));
        assert_eq!(early_stop_update(1.0, 1.0, 24, 0.001, 25), (1.0, 25, true));
    }

    #[test]
    fn steady_improvement_never_stops() {
        let (mut best, mut counter) = (f64::INFINITY, 0);
        for epoch in 0..350 {
            let stop;
            (best, counter, stop) = early_stop_update(best, 10.0 - 0.01 * epoch as f64, counter, 0.001, 25);
            assert!(!stop);
        }
    }

    #[test]
    fn member_seeds_distinct() {
        let spec = EnsembleSpec::standard(7);
        spec.validate().unwrap();
        assert_eq!(spec.members[0].seed, 7 ^ SEED_MIX);
        let mut bad = spec.clone();
        bad.members.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        let cfg = TrainConfig {
            patience: 350,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let cfg = tiny_config();
        let train = separable(24, 16, 0);
        let val = separable(8, 16, 24);
        let loss = LossConfig::uniform(2);
        let member = &EnsembleSpec::standard(3).members[0];
        let a = train_model(&cfg, member, &train, &val, &loss).unwrap();
        let b = train_model(&cfg, member, &train, &val, &loss).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(a.history.iter().all(|h| a.best_val_loss <= h.val_loss));
        assert!(a.best_epoch >= 1 && a.best_epoch <= a.epochs_run());
        assert!(a.epochs_run() <= a.best_epoch + cfg.patience + 1);
        let reloaded = evaluate_loss(&a.params, &val, &loss, 8).unwrap();
        assert_eq!(reloaded, a.best_val_loss);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let member = &EnsembleSpec::standard(1).members[2];
        let ck = train_model(&cfg, member, &separable(16, 16, 0), &separable(4, 16, 16), &LossConfig::uniform(2)).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"IMLX");
        let back = Checkpoint::from_bytes(&bytes, "t").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "t").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, "t").is_err());
    }

    #[test]
    fn zero_logits_predict_one_half() {
        let arch = tiny_config().arch(2, 2, 3);
        let params = RefNetParams::<f32>::zeros(arch).unwrap();
        let images = vec![ImageTensor::filled(16, 16, 0.3); 3];
        let p = predict_probs(&params, &images, 2).unwrap();
        assert!(p.iter().flatten().all(|&v| v == 0.5));
        assert!(predict_probs(&params, &[ImageTensor::filled(8, 8, 0.0)], 2).is_err());
    }

    #[test]
    fn probabilities_strictly_inside_unit_interval() {
        let arch = tiny_config().arch(2, 2, 1);
        let mut params = RefNetParams::<f32>::zeros(arch).unwrap();
        params.out_b.data_mut()[0] = 80.0;
        let p = predict_probs(&params, &[ImageTensor::filled(16, 16, 0.3)], 1).unwrap();
        assert!(p[0][0] < 1.0 && p[0][0] > 0.0);
    }

    #[test]
    fn serial_and_parallel_ensembles_match() {
        let cfg = TrainConfig {
            max_epochs: 2,
            patience: 1,
            ..tiny_config()
        };
        let train = separable(12, 16, 0);
        let val = separable(4, 16, 12);
        let loss = LossConfig::uniform(2);
        let spec = EnsembleSpec::standard(11);
        let serial = train_ensemble(&spec, &cfg, &train, &val, &loss, Some(0)).unwrap();
        let parallel = train_ensemble(&spec, &cfg, &train, &val, &loss, Some(3)).unwrap();
        assert_eq!(serial, parallel);
        let mut reversed = spec.clone();
        reversed.members.reverse();
        let mut rev = train_ensemble(&reversed, &cfg, &train, &val, &loss, Some(0)).unwrap();
        rev.reverse();
        assert_eq!(rev, serial);
        let shapes: std::collections::BTreeSet<_> = serial.iter().map(|c| (c.params.arch.conv1, c.params.arch.conv2)).collect();
        assert_eq!(shapes.len(), 5);
        assert!(serial.iter().all(|c| c.best_epoch <= c.epochs_run()));
    }
}
