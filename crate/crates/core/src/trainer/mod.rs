//! Supervised training and source-free domain adaptation.
//!
//! Adaptation fine-tunes the student on target-domain batches under one of
//! four strategies (plain, Hinton, method 1, method 2) with a fresh Adam
//! state and a per-batch optimizer step. The adapt loop never touches
//! source-domain data; every manifest it reads is recorded for the audit.

mod adam;

pub use adam::Adam;

use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::losses::{
    cosine_loss_and_grad, hard_loss_batch, hard_loss_logit_grad, soft_loss_batch,
    soft_loss_logit_grad, stack_internals, tempered_softmax_batch, CosineTarget, DistillConfig,
    LossBreakdown, Strategy,
};
use crate::scalar::Scalar;
use crate::teachers::{TeacherHandle, TeacherKind};
use crate::vit::{ImageBatch, Parameters, TinyViT};

/// Fine-tuning hyperparameters. Defaults mirror the experimental protocol:
/// 50 epochs, Adam at 2e-5, batch size 32, random crop and horizontal flip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub random_crop: bool,
    #[serde(default = "default_true")]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    50
}
fn default_learning_rate() -> f64 {
    2e-5
}
fn default_batch_size() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            random_crop: true,
            horizontal_flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub soft: f64,
    pub hard: f64,
    pub cosine: f64,
    pub schedule_weight: f64,
    pub total: f64,
}

impl EpochRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            soft: self.soft,
            hard: self.hard,
            cosine: self.cosine,
            schedule_weight: self.schedule_weight,
            total: self.total,
        }
    }
}

/// One manifest read by a training loop; the source-free audit checks that
/// adaptation runs list no source-domain entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestAccess {
    pub domain: String,
    pub records: usize,
}

/// Outcome of one training or adaptation run. Domain accuracies are filled
/// by the caller (the adapt loop itself never evaluates on source data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub teacher: Option<String>,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub source_before: Option<f64>,
    pub target_before: Option<f64>,
    pub source_after: Option<f64>,
    pub target_after: Option<f64>,
    pub manifests_read: Vec<ManifestAccess>,
    pub wall_clock_secs: f64,
}

/// Top-1 accuracy of the model on a manifest. No augmentation; batches are
/// processed in manifest order, so the result is deterministic.
pub fn evaluate<F: Scalar>(model: &TinyViT<F>, data: &DatasetManifest) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let (pixels, labels) = data.load_images::<F>(model.config().image_size)?;
    let n = labels.len();
    let mut correct = 0usize;
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let sub = pixels.slice(s![start..end, .., .., ..]).to_owned();
        let logits = model.logits(&sub)?;
        for (row, &label) in logits.rows().into_iter().zip(&labels[start..end]) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Seeded augmentation toggles. `pad` is the crop padding, patch_size/2 by
/// convention, applied with edge replication before cropping back to the
/// model resolution.
#[derive(Debug, Clone, Copy)]
pub struct AugmentSettings {
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub pad: usize,
}

/// Horizontal mirror of a `channels x H x W` image. Applying it twice
/// returns the original image.
pub fn hflip<F: Scalar>(image: &Array3<F>) -> Array3<F> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = image[[ci, y, w - 1 - x]];
            }
        }
    }
    out
}

/// Random pad-and-crop plus per-sample horizontal flip with probability
/// one half. All draws come from the caller's seeded stream.
pub fn augment<F: Scalar>(
    batch: &ImageBatch<F>,
    settings: &AugmentSettings,
    rng: &mut ChaCha8Rng,
) -> ImageBatch<F> {
    if !settings.random_crop && !settings.horizontal_flip {
        return batch.clone();
    }
    let (b, c, s, _) = batch.pixels.dim();
    let pad = settings.pad;
    let mut out = Array4::zeros((b, c, s, s));
    for bi in 0..b {
        let (dy, dx) = if settings.random_crop && pad > 0 {
            (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
        } else {
            (pad, pad)
        };
        let flip = settings.horizontal_flip && rng.gen_bool(0.5);
        for ci in 0..c {
            for y in 0..s {
                let sy = (y + dy).saturating_sub(pad).min(s - 1);
                for x in 0..s {
                    let xx = if flip { s - 1 - x } else { x };
                    let sx = (xx + dx).saturating_sub(pad).min(s - 1);
                    out[[bi, ci, y, x]] = batch.pixels[[bi, ci, sy, sx]];
                }
            }
        }
    }
    ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
    }
}

/// Loss value, components and parameter gradients of one batch under the
/// configured strategy. This is the exact code path the training loops
/// take; gradient checks call it directly.
pub fn batch_objective<F: Scalar>(
    student: &TinyViT<F>,
    teacher: Option<&TeacherHandle<F>>,
    batch: &ImageBatch<F>,
    distill: &DistillConfig,
    epoch: usize,
) -> Result<(LossBreakdown, Parameters<F>)> {
    distill.validate()?;
    let strategy = distill.strategy;
    if strategy.uses_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "strategy '{}' requires a teacher",
            strategy.label()
        )));
    }
    if strategy == Strategy::Method2 {
        if let Some(t) = teacher {
            if t.kind() == TeacherKind::Ensemble {
                return Err(Error::Unsupported(
                    "method 2 needs a prior-copy teacher; the ensemble has no internal embedding"
                        .into(),
                ));
            }
        }
    }

    let c = student.config().num_classes;
    let weights = distill.weights_for::<F>(c)?;
    let (logits, cache) = student.forward_cached(&batch.pixels)?;
    let hard = hard_loss_batch(logits.view(), &batch.labels, &weights)?;
    let mut d_logits = hard_loss_logit_grad(logits.view(), &batch.labels, &weights)?;

    let mut soft = F::zero();
    let mut cosine = F::zero();
    let mut cosine_grad: Option<Array2<F>> = None;
    let mut schedule = 1.0f64;

    if strategy.uses_teacher() {
        let teacher = teacher.expect("checked above");
        let t = F::cast(distill.temperature);
        let want_internals = strategy == Strategy::Method2;
        let (teacher_probs, teacher_emb) = teacher.targets(batch, t, want_internals)?;
        let student_probs = tempered_softmax_batch(logits.view(), t)?;
        soft = soft_loss_batch(teacher_probs.view(), student_probs.view())?;
        let d_soft = soft_loss_logit_grad(teacher_probs.view(), student_probs.view(), t);

        if strategy == Strategy::Method2 {
            let ws = stack_internals(&student.extract_internal_parameters())?;
            let wt = teacher_emb.expect("prior copy supplies internals");
            let (l_c, d_ws) = cosine_loss_and_grad(&ws, &wt, CosineTarget::Similar)?;
            cosine = l_c;
            cosine_grad = Some(d_ws);
        }
        if matches!(strategy, Strategy::Method1 | Strategy::Method2) {
            schedule = crate::losses::schedule_weight(epoch, distill.total_epochs)?;
        }
        let soft_scale = F::cast(schedule) * t * t;
        d_logits.zip_mut_with(&d_soft, |d, &g| *d += soft_scale * g);
    }

    let (mut grads, _) = student.backward(&cache, &d_logits, &[]);

    // the cosine term acts on four parameter groups directly
    if let Some(d_ws) = cosine_grad {
        let w = F::cast(schedule);
        let pen = student.config().penultimate_block();
        let i_cols = F::cast(student.config().intermediate_size as f64);
        grads
            .final_norm
            .bias
            .zip_mut_with(&d_ws.row(0), |g, &d| *g += w * d);
        grads
            .final_norm
            .weight
            .zip_mut_with(&d_ws.row(1), |g, &d| *g += w * d);
        let block = &mut grads.blocks[pen];
        block
            .mlp_out
            .bias
            .zip_mut_with(&d_ws.row(2), |g, &d| *g += w * d);
        let row3 = d_ws.row(3);
        for (h, mut row) in block.mlp_out.weight.rows_mut().into_iter().enumerate() {
            let per_col = w * row3[h] / i_cols;
            for g in row.iter_mut() {
                *g += per_col;
            }
        }
    }

    let breakdown = LossBreakdown::for_strategy(
        strategy,
        soft.as_f64(),
        cosine.as_f64(),
        hard.as_f64(),
        distill.temperature,
        epoch,
        distill.total_epochs,
    )?;
    debug_assert!(
        (breakdown.total - breakdown.recombine(strategy, distill.temperature)).abs() <= 1e-6,
        "loss accounting drift"
    );
    Ok((breakdown, grads))
}

/// Supervised fine-tuning on one manifest: hard loss only, one Adam step
/// per batch, deterministic given the config seed.
pub fn train_supervised<F: Scalar>(
    model: &mut TinyViT<F>,
    data: &DatasetManifest,
    config: &TrainConfig,
) -> Result<RunResult> {
    let distill = DistillConfig {
        temperature: 1.0,
        total_epochs: config.epochs,
        strategy: Strategy::None,
        teacher_kind: TeacherKind::PriorCopy,
        class_weights: None,
    };
    let mut result = run_loop(model, None, data, &distill, config)?;
    result.strategy = "supervised".into();
    Ok(result)
}

/// Source-free adaptation on target-domain data under the configured
/// strategy. The operation reads only `target`; callers evaluate source
/// accuracy separately and fill the accuracy fields of the result.
pub fn adapt<F: Scalar>(
    student: &mut TinyViT<F>,
    teacher: Option<&TeacherHandle<F>>,
    target: &DatasetManifest,
    distill: &DistillConfig,
    train: &TrainConfig,
) -> Result<RunResult> {
    distill.validate()?;
    train.validate()?;
    if distill.strategy.uses_teacher() {
        let teacher = teacher.ok_or_else(|| {
            Error::Config(format!(
                "strategy '{}' requires a teacher",
                distill.strategy.label()
            ))
        })?;
        if distill.strategy == Strategy::Method2 && teacher.kind() == TeacherKind::Ensemble {
            return Err(Error::Unsupported(
                "method 2 needs a prior-copy teacher; the ensemble has no internal embedding"
                    .into(),
            ));
        }
        if teacher.num_classes() != student.config().num_classes
            || teacher.image_size() != student.config().image_size
        {
            return Err(Error::Config(
                "teacher does not match the student's class count or input size".into(),
            ));
        }
    }
    if distill.total_epochs != train.epochs {
        return Err(Error::Config(format!(
            "schedule total_epochs {} must equal the training epoch budget {}",
            distill.total_epochs, train.epochs
        )));
    }
    let mut result = run_loop(student, teacher, target, distill, train)?;
    result.strategy = distill.strategy.label().into();
    result.teacher = teacher.map(|t| t.kind().as_str().to_string());
    debug_assert!(teacher.is_none_or(|t| t.is_frozen()), "teacher changed during adapt");
    Ok(result)
}

fn run_loop<F: Scalar>(
    model: &mut TinyViT<F>,
    teacher: Option<&TeacherHandle<F>>,
    data: &DatasetManifest,
    distill: &DistillConfig,
    config: &TrainConfig,
) -> Result<RunResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input(format!("dataset '{}' is empty", data.domain())));
    }
    if data.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes(),
            model.config().num_classes
        )));
    }
    let started = Instant::now();
    let (pixels, labels) = data.load_images::<F>(model.config().image_size)?;
    let n = labels.len();
    let settings = AugmentSettings {
        random_crop: config.random_crop,
        horizontal_flip: config.horizontal_flip,
        pad: model.config().patch_size / 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.config(), config.learning_rate);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut rng);
        let mut sums = LossBreakdown::none(0.0);
        sums.schedule_weight = 0.0;
        sums.total = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let raw = ImageBatch {
                pixels: pixels.select(Axis(0), chunk),
                labels: chunk.iter().map(|&i| labels[i]).collect(),
            };
            let batch = augment(&raw, &settings, &mut rng);
            let (breakdown, grads) = batch_objective(model, teacher, &batch, distill, epoch)?;
            adam.step(model.params_mut(), &grads);
            let w = chunk.len() as f64;
            sums.soft += breakdown.soft * w;
            sums.hard += breakdown.hard * w;
            sums.cosine += breakdown.cosine * w;
            sums.total += breakdown.total * w;
            sums.schedule_weight = breakdown.schedule_weight;
            seen += chunk.len();
        }
        let inv = 1.0 / seen as f64;
        epochs.push(EpochRecord {
            epoch,
            soft: sums.soft * inv,
            hard: sums.hard * inv,
            cosine: sums.cosine * inv,
            schedule_weight: sums.schedule_weight,
            total: sums.total * inv,
        });
    }

    Ok(RunResult {
        strategy: distill.strategy.label().into(),
        teacher: None,
        seed: config.seed,
        epochs,
        source_before: None,
        target_before: None,
        source_after: None,
        target_after: None,
        manifests_read: vec![ManifestAccess {
            domain: data.domain().to_string(),
            records: data.len(),
        }],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
