//! Loss, optimisers and the train / evaluate loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch, resize_bilinear, stitch_predictions, tile_image, Scene, TileLogits};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::model::{argmax_masks, AblationConfig, Gdgt, GdgtConfig, LabelMask};
use crate::tensor::{Module, NoGradGuard, Tensor};

/// Mean pixel-wise cross-entropy of `B×K×H×W` logits.
pub fn loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    logits.cross_entropy(labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` towards zero over the run, stepped per epoch.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 6e-4,
            epochs: 12,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second-moment adaptive optimiser or plain gradient descent.
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &dyn Module) -> Optimizer {
        let mut sizes = Vec::new();
        model.visit_params(&mut |p| sizes.push(p.numel()));
        let zeros = |sizes: &[usize]| sizes.iter().map(|&n| vec![0.0; n]).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(&sizes), zeros(&sizes)),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { kind, step: 0, m, v }
    }

    /// Applies the accumulated gradients and replaces every parameter leaf,
    /// which also clears its gradient.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        let mut index = 0;
        let mut result = Ok(());
        model.visit_params_mut(&mut |p| {
            let i = index;
            index += 1;
            if result.is_err() {
                return;
            }
            let Some(grad) = p.grad() else { return };
            let mut data = p.tensor().to_vec();
            match self.kind {
                OptimizerKind::Sgd => data.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        let g = grad[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        data[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
            result = p.set_data(data);
        });
        result
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Metrics,
}

impl EpochRecord {
    /// `epoch loss miou f1 oa fwiou`, tab separated, floats round-trippable.
    pub fn log_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.loss, m.miou, m.f1, m.oa, m.fwiou
        )
    }
}

pub fn log_header(tag: &str) -> String {
    format!("# {tag}\n# epoch\tloss\tmiou\tf1\toa\tfwiou")
}

pub fn format_log(tag: &str, records: &[EpochRecord]) -> String {
    let mut s = log_header(tag);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.log_line());
    }
    s
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the highest validation mIoU.
    pub best: Gdgt,
    pub best_epoch: usize,
    pub best_metrics: Metrics,
    pub records: Vec<EpochRecord>,
}

/// Scores `model` on `scenes`, which must already match the input size.
pub fn evaluate(model: &Gdgt, scenes: &[Scene], batch_size: usize) -> Result<(ConfusionMatrix, Metrics)> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let _guard = NoGradGuard::new();
    let mut cm = ConfusionMatrix::new(model.config().num_categories);
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let (images, _) = batch(&refs)?;
        let preds = argmax_masks(&model.forward(&images)?)?;
        for (pred, scene) in preds.iter().zip(chunk) {
            cm.accumulate(pred, &scene.mask)?;
        }
    }
    let metrics = compute_metrics(&cm)?;
    Ok((cm, metrics))
}

/// Whole-image prediction for a `3×H×W` image of any size. An image at the
/// model's input size is predicted directly. Otherwise it is cut into
/// overlapping tiles (one tile when it fits), each tile is resized to the
/// input, and the logits are resized back and stitched.
pub fn predict_image(model: &Gdgt, image: &Tensor, tile_size: usize, overlap: usize) -> Result<LabelMask> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let side = model.config().input_size;
    let _guard = NoGradGuard::new();
    if (h, w) == (side, side) {
        return Ok(model.predict(&image.reshape(&[1, 3, h, w])?)?.remove(0));
    }
    let (tile, overlap) = if h <= tile_size && w <= tile_size {
        (h.max(w), 0)
    } else {
        (tile_size, overlap)
    };
    let k = model.config().num_categories;
    let mut tiles = Vec::new();
    for (t, row, col) in tile_image(image, tile, overlap)? {
        let input = Tensor::from_vec(
            &[1, 3, side, side],
            resize_bilinear(t.data(), 3, tile, tile, side, side),
        )?;
        let logits = model.forward(&input)?;
        let back = resize_bilinear(logits.data(), k, side, side, tile, tile);
        tiles.push(TileLogits {
            logits: Tensor::from_vec(&[k, tile, tile], back)?,
            row,
            col,
        });
    }
    stitch_predictions(&tiles, h, w)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

/// Trains in place. Each epoch shuffles with a seed-derived order, steps the
/// optimiser per batch and then scores the validation set (the training set
/// when `val` is `None`). `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Gdgt,
    train_set: &[Scene],
    val: Option<&[Scene]>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let val = val.unwrap_or(train_set);
    let mut opt = Optimizer::new(config.optimizer, model);
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(Gdgt, usize, Metrics)> = None;
    model.zero_grad();

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch - 1);
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut total = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Scene> = idx.iter().map(|&i| &train_set[i]).collect();
            let (images, labels) = batch(&refs)?;
            let l = loss(&model.forward(&images)?, &labels)?;
            let value = l.item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            total += value * refs.len() as f64;
            l.backward()?;
            opt.step(model, lr)?;
        }
        let (_, metrics) = evaluate(model, val, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            loss: total / train_set.len() as f64,
            metrics,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(_, _, m)| record.metrics.miou > m.miou) {
            best = Some((model.clone(), epoch, record.metrics.clone()));
        }
        records.push(record);
    }
    let (best, best_epoch, best_metrics) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metrics,
        records,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub ablation: AblationConfig,
    pub metrics: Metrics,
    pub records: Vec<EpochRecord>,
}

/// Trains and scores every configuration of the ablation ladder from the
/// same seed, in ladder order.
pub fn ablation_sweep(
    base: &GdgtConfig,
    train_set: &[Scene],
    val: Option<&[Scene]>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(AblationConfig, &EpochRecord),
) -> Result<Vec<SweepRow>> {
    AblationConfig::LADDER
        .iter()
        .map(|&ablation| {
            let mut model = Gdgt::new(
                GdgtConfig {
                    ablation,
                    ..base.clone()
                },
                config.seed,
            )?;
            let outcome = train(&mut model, train_set, val, config, &mut |r| on_epoch(ablation, r))?;
            let (_, metrics) = evaluate(&outcome.best, val.unwrap_or(train_set), config.batch_size)?;
            Ok(SweepRow {
                ablation,
                metrics,
                records: outcome.records,
            })
        })
        .collect()
}
