//! Training procedures: recognizer pretraining, plain processing, the
//! three recognition-aware variants, and the ablation modes.
//!
//! Every run is a pure function of `(config, data, seed)`: shuffles come
//! from derived ChaCha streams, kernels are bitwise stable under any
//! worker count, and optimizer state follows the fixed parameter visit
//! order. Frozen recognizers pass through `Pass::Loss`, which
//! backpropagates *through* them without accumulating parameter
//! gradients or touching normalization statistics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairedSample};
use crate::degrade;
use crate::error::{Error, Result};
use crate::losses::{self, RecognitionLossMode, RecognitionLossSpec};
use crate::metrics;
use crate::models::{build_processor, build_recognizer, build_transformer, Recognizer, SrResNet};
use crate::models::{ProcessorSpec, RecognizerSpec, TransformerSpec};
use crate::nn::{self, Adam, Pass, SgdMomentum};
use crate::rng;
use crate::tensor::{Image, Mat, Tensor};

/// Which objective drives the processor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Reconstruction loss only.
    Plain,
    /// Reconstruction + lambda * supervised recognition loss.
    Ra,
    /// Reconstruction + lambda * distance to the recognizer's response
    /// on the target image (no labels needed).
    RaUnsupervised,
    /// Reconstruction on P; the recognition loss is absorbed by a
    /// transformer T behind a stop-gradient, leaving P untouched.
    RaTransformer,
    /// Recognition loss only (ablation).
    RecogOnly,
    /// As `Ra`, but the recognizer fine-tunes jointly on its own
    /// SGD-momentum optimizer (ablation).
    JointFinetuneR,
}

impl TrainMode {
    pub fn needs_recognizer(self) -> bool {
        !matches!(self, TrainMode::Plain)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::Ra => "ra",
            TrainMode::RaUnsupervised => "ra_unsupervised",
            TrainMode::RaTransformer => "ra_transformer",
            TrainMode::RecogOnly => "recog_only",
            TrainMode::JointFinetuneR => "joint_finetune_r",
        }
    }

    /// Default loss weight per mode (supervised 1e-3, transformer 1e-2,
    /// unsupervised 10).
    pub fn default_lambda(self) -> f64 {
        match self {
            TrainMode::RaTransformer => 1e-2,
            TrainMode::RaUnsupervised => 10.0,
            _ => 1e-3,
        }
    }
}

/// Step-size schedule: `lr0 / decay_factor^k` where `k` counts the decay
/// epochs that have arrived. Epochs are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSchedule {
    pub lr0: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        OptimizerSchedule {
            lr0: 1e-4,
            epochs: 6,
            decay_epochs: vec![5, 6],
            decay_factor: 10.0,
            batch_size: 20,
        }
    }
}

pub fn lr_at(schedule: &OptimizerSchedule, epoch: usize) -> f64 {
    let k = schedule.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    schedule.lr0 / schedule.decay_factor.powi(k as i32)
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub l_proc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_recog: Option<f64>,
    pub lr: f64,
    /// Norm of the recognition-loss gradient on P's weights, recorded at
    /// probe steps in transformer mode. Exactly zero by construction.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recog_grad_norm_p: Option<f64>,
}

pub fn write_log_jsonl(path: &std::path::Path, log: &[TrainLogEntry]) -> Result<()> {
    let mut body = String::new();
    for entry in log {
        body.push_str(&serde_json::to_string(entry)?);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Processor training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProcessorTrainConfig {
    pub proc_spec: ProcessorSpec,
    pub trans_spec: TransformerSpec,
    pub schedule: OptimizerSchedule,
    pub mode: TrainMode,
    pub loss: RecognitionLossSpec,
    pub seed: u64,
    /// Learning rate / momentum of the recognizer's own optimizer in
    /// `JointFinetuneR` mode.
    pub finetune_r_lr: f64,
    pub finetune_r_momentum: f64,
    /// Global steps at which transformer mode measures the recognition
    /// gradient reaching P.
    pub probe_steps: Vec<usize>,
}

impl ProcessorTrainConfig {
    pub fn new(proc_spec: ProcessorSpec, mode: TrainMode, lambda: f64, seed: u64) -> Self {
        let loss = match mode {
            TrainMode::RaUnsupervised => {
                RecognitionLossSpec::unsupervised(lambda, losses::Distance::L2Probs)
            }
            _ => RecognitionLossSpec::supervised(lambda),
        };
        ProcessorTrainConfig {
            proc_spec,
            trans_spec: TransformerSpec::default(),
            schedule: OptimizerSchedule::default(),
            mode,
            loss,
            seed,
            finetune_r_lr: 1e-3,
            finetune_r_momentum: 0.9,
            probe_steps: (1..=10).collect(),
        }
    }
}

pub struct ProcessorTrainOutcome {
    pub processor: SrResNet,
    pub transformer: Option<SrResNet>,
    pub log: Vec<TrainLogEntry>,
    pub metrics: BTreeMap<String, f64>,
}

struct BatchView {
    inputs: Tensor,
    targets: Tensor,
    labels: Vec<usize>,
}

fn assemble_batch(pairs: &[PairedSample], indices: &[usize]) -> Result<BatchView> {
    let inputs: Vec<&Image> = indices.iter().map(|&i| &pairs[i].input).collect();
    let targets: Vec<&Image> = indices.iter().map(|&i| &pairs[i].target).collect();
    Ok(BatchView {
        inputs: Tensor::from_images(&inputs)?,
        targets: Tensor::from_images(&targets)?,
        labels: indices.iter().map(|&i| pairs[i].label).collect(),
    })
}

fn epoch_order(seed: u64, tag: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive_indexed(seed, tag, epoch as u64), 0);
    order.shuffle(&mut r);
    order
}

/// Train the processing model (and transformer, in transformer mode)
/// under the configured objective. The recognizer, when present, is
/// mutated only in `JointFinetuneR` mode.
pub fn train_processor(
    cfg: &ProcessorTrainConfig,
    pairs: &[PairedSample],
    mut recognizer: Option<&mut dyn Recognizer>,
) -> Result<ProcessorTrainOutcome> {
    cfg.loss.validate()?;
    if pairs.is_empty() {
        return Err(Error::ConfigError("no training pairs".into()));
    }
    if cfg.mode.needs_recognizer() && recognizer.is_none() {
        return Err(Error::ConfigError(format!(
            "mode {} needs a recognizer checkpoint",
            cfg.mode.name()
        )));
    }
    match (cfg.mode, cfg.loss.mode) {
        (TrainMode::RaUnsupervised, RecognitionLossMode::SupervisedCe) => {
            return Err(Error::ConfigError(
                "ra_unsupervised requires an unsupervised loss spec".into(),
            ))
        }
        (
            TrainMode::Ra | TrainMode::RecogOnly | TrainMode::JointFinetuneR,
            RecognitionLossMode::Unsupervised,
        ) => {
            return Err(Error::ConfigError(format!(
                "mode {} uses the supervised recognition loss",
                cfg.mode.name()
            )))
        }
        _ => {}
    }

    let mut processor = build_processor(&cfg.proc_spec, cfg.seed)?;
    let mut transformer = if cfg.mode == TrainMode::RaTransformer {
        Some(build_transformer(&cfg.trans_spec, cfg.seed)?)
    } else {
        None
    };

    let mut adam_p = Adam::new(cfg.schedule.lr0);
    let mut adam_t = Adam::new(cfg.schedule.lr0);
    let mut sgd_r = SgdMomentum::new(cfg.finetune_r_lr, cfg.finetune_r_momentum);

    let lambda = cfg.loss.lambda;
    let mut log = Vec::new();
    let mut global_step = 0usize;
    let mut last_epoch_proc = 0.0;
    let mut last_epoch_recog = 0.0;
    let mut last_epoch_steps = 0usize;

    for epoch in 1..=cfg.schedule.epochs {
        let lr = lr_at(&cfg.schedule, epoch);
        adam_p.lr = lr;
        adam_t.lr = lr;
        let order = epoch_order(cfg.seed, "shuffle_proc", epoch, pairs.len());
        last_epoch_proc = 0.0;
        last_epoch_recog = 0.0;
        last_epoch_steps = 0;

        for batch_idx in order.chunks(cfg.schedule.batch_size) {
            global_step += 1;
            let batch = assemble_batch(pairs, batch_idx)?;
            nn::zero_grads(&mut processor);

            let out = processor.forward(&batch.inputs, Pass::Train);
            let (l_proc, d_proc) = losses::proc_loss(&out, &batch.targets)?;
            let mut l_recog = None;
            let mut probe_norm = None;

            match cfg.mode {
                TrainMode::Plain => {
                    processor.backward(&d_proc);
                    adam_p.step(&mut processor);
                }
                TrainMode::Ra | TrainMode::RaUnsupervised if lambda == 0.0 => {
                    // The recognition term vanishes identically; the
                    // objective degenerates to plain processing.
                    processor.backward(&d_proc);
                    adam_p.step(&mut processor);
                }
                TrainMode::Ra => {
                    let recog = recognizer.as_deref_mut().unwrap();
                    let logits = recog.forward(&out, Pass::Loss);
                    let (lr_val, mut dl) = losses::recog_loss_supervised(&logits, &batch.labels)?;
                    for g in dl.data.iter_mut() {
                        *g *= lambda;
                    }
                    let mut d_total = recog.backward(&dl);
                    d_total.add_assign(&d_proc);
                    processor.backward(&d_total);
                    adam_p.step(&mut processor);
                    l_recog = Some(lr_val);
                }
                TrainMode::RaUnsupervised => {
                    let recog = recognizer.as_deref_mut().unwrap();
                    let target_repr = recog.forward(&batch.targets, Pass::Infer);
                    let logits = recog.forward(&out, Pass::Loss);
                    let distance = cfg.loss.distance.expect("validated above");
                    let (lr_val, mut dl) =
                        losses::recog_loss_unsupervised(&logits, &target_repr, distance)?;
                    for g in dl.data.iter_mut() {
                        *g *= lambda;
                    }
                    let mut d_total = recog.backward(&dl);
                    d_total.add_assign(&d_proc);
                    processor.backward(&d_total);
                    adam_p.step(&mut processor);
                    l_recog = Some(lr_val);
                }
                TrainMode::RaTransformer => {
                    // P sees only the reconstruction loss.
                    processor.backward(&d_proc);
                    adam_p.step(&mut processor);
                    if lambda != 0.0 {
                        let t = transformer.as_mut().unwrap();
                        let recog = recognizer.as_deref_mut().unwrap();
                        nn::zero_grads(t);
                        let t_in = losses::stop_gradient(&out);
                        let z = t.forward(&t_in, Pass::Train);
                        let logits = recog.forward(&z, Pass::Loss);
                        let (lr_val, mut dl) =
                            losses::recog_loss_supervised(&logits, &batch.labels)?;
                        for g in dl.data.iter_mut() {
                            *g *= lambda;
                        }
                        let dz = recog.backward(&dl);
                        let d_tin = t.backward(&dz);
                        adam_t.step(t);
                        l_recog = Some(lr_val);

                        if cfg.probe_steps.contains(&global_step) {
                            // Measure the recognition gradient actually
                            // reaching P's weights: propagate the blocked
                            // stop-gradient output back through P.
                            let blocked = losses::stop_gradient_backward(&d_tin);
                            nn::zero_grads(&mut processor);
                            processor.backward(&blocked);
                            probe_norm = Some(nn::grad_norm(&mut processor));
                        }
                    }
                }
                TrainMode::RecogOnly => {
                    let recog = recognizer.as_deref_mut().unwrap();
                    let logits = recog.forward(&out, Pass::Loss);
                    let (lr_val, mut dl) = losses::recog_loss_supervised(&logits, &batch.labels)?;
                    for g in dl.data.iter_mut() {
                        *g *= lambda;
                    }
                    let d_rec = recog.backward(&dl);
                    processor.backward(&d_rec);
                    adam_p.step(&mut processor);
                    l_recog = Some(lr_val);
                }
                TrainMode::JointFinetuneR => {
                    let recog = recognizer.as_deref_mut().unwrap();
                    let hp: &mut dyn nn::HasParams = recog;
                    nn::zero_grads(hp);
                    let logits = recog.forward(&out, Pass::Train);
                    // R optimizes the plain cross-entropy on its own
                    // optimizer; P's objective keeps the lambda weight.
                    let (lr_val, dl) = losses::recog_loss_supervised(&logits, &batch.labels)?;
                    let mut d_rec = recog.backward(&dl);
                    sgd_r.step(recog);
                    d_rec.scale(lambda);
                    d_rec.add_assign(&d_proc);
                    processor.backward(&d_rec);
                    adam_p.step(&mut processor);
                    l_recog = Some(lr_val);
                }
            }

            let total = losses::total_loss(l_proc, l_recog.unwrap_or(0.0), lambda);
            if !total.is_finite() {
                return Err(Error::Diverged { step: global_step });
            }
            last_epoch_proc += l_proc;
            last_epoch_recog += l_recog.unwrap_or(0.0);
            last_epoch_steps += 1;
            log.push(TrainLogEntry {
                epoch,
                step: global_step,
                l_proc,
                l_recog,
                lr,
                recog_grad_norm_p: probe_norm,
            });
        }
    }

    let mut metrics_map = BTreeMap::new();
    if last_epoch_steps > 0 {
        metrics_map.insert(
            "train_l_proc".into(),
            last_epoch_proc / last_epoch_steps as f64,
        );
        metrics_map.insert(
            "train_l_recog".into(),
            last_epoch_recog / last_epoch_steps as f64,
        );
    }
    metrics_map.insert("steps".into(), global_step as f64);

    Ok(ProcessorTrainOutcome {
        processor,
        transformer,
        log,
        metrics: metrics_map,
    })
}

// ---------------------------------------------------------------------------
// Recognizer training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RecognizerTrainConfig {
    pub spec: RecognizerSpec,
    pub schedule: OptimizerSchedule,
    pub seed: u64,
}

pub struct RecognizerTrainOutcome {
    pub model: Box<dyn Recognizer>,
    pub log: Vec<TrainLogEntry>,
    pub metrics: BTreeMap<String, f64>,
}

/// Top-1 accuracy of a frozen classifier over a labeled image list.
pub fn classifier_accuracy(
    model: &mut dyn Recognizer,
    images: &[&Image],
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::ConfigError("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (chunk_imgs, chunk_labels) in images.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let x = Tensor::from_images(chunk_imgs)?;
        let logits = model.forward(&x, Pass::Infer);
        correct += (metrics::top1_accuracy(&logits, chunk_labels)? * chunk_labels.len() as f64)
            .round() as usize;
    }
    Ok(correct as f64 / images.len() as f64)
}

fn train_classifier(
    cfg: &RecognizerTrainConfig,
    train_images: &[Image],
    train_labels: &[usize],
) -> Result<(Box<dyn Recognizer>, Vec<TrainLogEntry>)> {
    let mut model = build_recognizer(&cfg.spec, cfg.seed)?;
    let mut adam = Adam::new(cfg.schedule.lr0);
    let mut log = Vec::new();
    let mut global_step = 0usize;
    for epoch in 1..=cfg.schedule.epochs {
        adam.lr = lr_at(&cfg.schedule, epoch);
        let order = epoch_order(cfg.seed, "shuffle_recog", epoch, train_images.len());
        for batch_idx in order.chunks(cfg.schedule.batch_size) {
            global_step += 1;
            let imgs: Vec<&Image> = batch_idx.iter().map(|&i| &train_images[i]).collect();
            let labels: Vec<usize> = batch_idx.iter().map(|&i| train_labels[i]).collect();
            let x = Tensor::from_images(&imgs)?;
            let hp: &mut dyn nn::HasParams = model.as_mut();
            nn::zero_grads(hp);
            let logits = model.forward(&x, Pass::Train);
            let (loss, dl) = losses::recog_loss_supervised(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: global_step });
            }
            let _ = model.backward(&dl);
            adam.step(model.as_mut());
            log.push(TrainLogEntry {
                epoch,
                step: global_step,
                l_proc: 0.0,
                l_recog: Some(loss),
                lr: adam.lr,
                recog_grad_norm_p: None,
            });
        }
    }
    Ok((model, log))
}

/// Train a recognizer on clean target images with cross-entropy and
/// record its clean-validation accuracy. Zero epochs returns the
/// initialized weights with `epochs_trained = 0` in the metrics.
pub fn pretrain_recognizer(
    cfg: &RecognizerTrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<RecognizerTrainOutcome> {
    if cfg.spec.num_classes != train.num_classes() {
        return Err(Error::ConfigError(format!(
            "recognizer expects {} classes, dataset has {}",
            cfg.spec.num_classes,
            train.num_classes()
        )));
    }
    let images: Vec<Image> = train.samples.iter().map(|s| s.image.clone()).collect();
    let labels = train.labels();
    let (mut model, log) = train_classifier(cfg, &images, &labels)?;
    let val_imgs: Vec<&Image> = val.samples.iter().map(|s| &s.image).collect();
    let val_acc = classifier_accuracy(
        model.as_mut(),
        &val_imgs,
        &val.labels(),
        cfg.schedule.batch_size,
    )?;
    let mut metrics_map = BTreeMap::new();
    metrics_map.insert("val_acc_clean".into(), val_acc);
    metrics_map.insert("epochs_trained".into(), cfg.schedule.epochs as f64);
    Ok(RecognizerTrainOutcome {
        model,
        log,
        metrics: metrics_map,
    })
}

/// What produces the images a from-scratch recognizer trains on.
pub enum ProcessedSource<'a> {
    /// A frozen processing model's (clipped) outputs.
    Processor(&'a mut SrResNet),
    /// Bicubic interpolation of the degraded input back to target size.
    Interpolated,
    /// The degraded input as-is (requires matching sizes).
    Identity,
}

impl ProcessedSource<'_> {
    fn apply(&mut self, input: &Image, target_h: usize, target_w: usize) -> Result<Image> {
        match self {
            ProcessedSource::Processor(p) => {
                let x = Tensor::from_images(&[input])?;
                let y = p.forward(&x, Pass::Infer);
                Ok(y.image(0).clipped())
            }
            ProcessedSource::Interpolated => {
                if input.h == target_h && input.w == target_w {
                    Ok(input.clone())
                } else {
                    degrade::upsample_bicubic(input, target_h / input.h)
                }
            }
            ProcessedSource::Identity => {
                if input.h != target_h || input.w != target_w {
                    return Err(Error::ShapeError(
                        "identity source requires input size == target size".into(),
                    ));
                }
                Ok(input.clone())
            }
        }
    }
}

/// Train a fresh recognizer on processed (or interpolated) images and
/// report accuracy on processed validation inputs *and* on clean
/// validation images — the clean-vs-processed gap is the phenomenon
/// under test.
pub fn train_recognizer_on_processed(
    cfg: &RecognizerTrainConfig,
    mut source: ProcessedSource<'_>,
    train_pairs: &[PairedSample],
    val_pairs: &[PairedSample],
) -> Result<RecognizerTrainOutcome> {
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::ConfigError("empty pair set".into()));
    }
    let images: Vec<Image> = train_pairs
        .iter()
        .map(|p| source.apply(&p.input, p.target.h, p.target.w))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train_pairs.iter().map(|p| p.label).collect();
    let (mut model, log) = train_classifier(cfg, &images, &labels)?;

    let val_processed: Vec<Image> = val_pairs
        .iter()
        .map(|p| source.apply(&p.input, p.target.h, p.target.w))
        .collect::<Result<_>>()?;
    let val_labels: Vec<usize> = val_pairs.iter().map(|p| p.label).collect();
    let processed_refs: Vec<&Image> = val_processed.iter().collect();
    let acc_processed = classifier_accuracy(
        model.as_mut(),
        &processed_refs,
        &val_labels,
        cfg.schedule.batch_size,
    )?;
    let clean_refs: Vec<&Image> = val_pairs.iter().map(|p| &p.target).collect();
    let acc_clean = classifier_accuracy(
        model.as_mut(),
        &clean_refs,
        &val_labels,
        cfg.schedule.batch_size,
    )?;

    let mut metrics_map = BTreeMap::new();
    metrics_map.insert("val_acc_processed".into(), acc_processed);
    metrics_map.insert("val_acc_clean".into(), acc_clean);
    metrics_map.insert("epochs_trained".into(), cfg.schedule.epochs as f64);
    Ok(RecognizerTrainOutcome {
        model,
        log,
        metrics: metrics_map,
    })
}

/// Logits of a frozen recognizer on the clean targets of a pair set;
/// convenience for tests and the harness.
pub fn logits_on_targets(model: &mut dyn Recognizer, pairs: &[PairedSample]) -> Result<Mat> {
    let imgs: Vec<&Image> = pairs.iter().map(|p| &p.target).collect();
    let x = Tensor::from_images(&imgs)?;
    Ok(model.forward(&x, Pass::Infer))
}
