//! Evaluation protocols: same-model evaluation records, architecture
//! transfer matrices, the category-split experiment, and lambda sweeps.
//!
//! Evaluation is read-only with respect to every model involved
//! (inference passes only), and repeated evaluation of frozen
//! checkpoints is bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::data::{make_pairs, split_classes, ClassSplit, Dataset, PairedSample};
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::losses::RecognitionLossSpec;
use crate::metrics::{self, SsimParams};
use crate::models::{ProcessorSpec, Recognizer, RecognizerSpec, SrResNet};
use crate::nn::Pass;
use crate::tensor::{Image, Tensor};
use crate::train::{
    self, train_processor, OptimizerSchedule, ProcessorTrainConfig, RecognizerTrainConfig,
    TrainMode,
};

/// One row of the PSNR/SSIM/Accuracy reporting format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub processor_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transformer_id: Option<String>,
    pub recognizer_id: String,
    pub task: String,
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvalIds {
    pub processor: String,
    pub transformer: Option<String>,
    pub recognizer: String,
    pub task: String,
}

/// Run the frozen pipeline over a paired validation set.
///
/// PSNR/SSIM are always measured between P's clipped output and the
/// target; accuracy is measured on R's view — `T(P(x))` when a
/// transformer is attached, `P(x)` otherwise.
pub fn evaluate_pipeline(
    processor: &mut SrResNet,
    mut transformer: Option<&mut SrResNet>,
    recognizer: &mut dyn Recognizer,
    pairs: &[PairedSample],
    batch_size: usize,
    ids: &EvalIds,
) -> Result<EvalRecord> {
    if pairs.is_empty() {
        return Err(Error::ConfigError("empty evaluation set".into()));
    }
    let ssim_params = SsimParams::default();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut correct = 0usize;

    for chunk in pairs.chunks(batch_size.max(1)) {
        let inputs: Vec<&Image> = chunk.iter().map(|p| &p.input).collect();
        let x = Tensor::from_images(&inputs)?;
        let out = processor.forward(&x, Pass::Infer);
        let mut clipped_images = Vec::with_capacity(chunk.len());
        for (i, pair) in chunk.iter().enumerate() {
            let img = out.image(i).clipped();
            psnr_sum += metrics::psnr(&img, &pair.target, 1.0)?;
            ssim_sum += metrics::ssim(&img, &pair.target, &ssim_params)?;
            clipped_images.push(img);
        }
        let refs: Vec<&Image> = clipped_images.iter().collect();
        let clipped = Tensor::from_images(&refs)?;
        let recog_in = match transformer.as_deref_mut() {
            Some(t) => t.forward(&clipped, Pass::Infer),
            None => clipped,
        };
        let logits = recognizer.forward(&recog_in, Pass::Infer);
        let labels: Vec<usize> = chunk.iter().map(|p| p.label).collect();
        correct += (metrics::top1_accuracy(&logits, &labels)? * labels.len() as f64).round()
            as usize;
    }

    let n = pairs.len();
    Ok(EvalRecord {
        processor_id: ids.processor.clone(),
        transformer_id: ids.transformer.clone(),
        recognizer_id: ids.recognizer.clone(),
        task: ids.task.clone(),
        psnr: psnr_sum / n as f64,
        ssim: ssim_sum / n as f64,
        accuracy: correct as f64 / n as f64,
        n_samples: n,
    })
}

/// A grid of accuracies: rows are the recognizers used as training loss
/// (via their processors), columns are the recognizers used at
/// evaluation. The baseline row holds plain processing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    /// `cells[row][col]` = accuracy.
    pub cells: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
    /// `diagonal[row][col]` marks the same-model case.
    pub diagonal: Vec<Vec<bool>>,
    pub task: String,
}

/// One trained row: the processor (and optional transformer) obtained
/// with `loss_id`'s recognizer as training loss.
pub struct TransferRow {
    pub loss_id: String,
    pub processor: SrResNet,
    pub transformer: Option<SrResNet>,
}

/// Evaluate every (loss model, eval model) combination plus the plain
/// baseline row. Every cell is filled or the call errors.
pub fn transfer_matrix(
    rows: &mut [TransferRow],
    baseline: Option<&mut SrResNet>,
    recognizers: &mut [(String, Box<dyn Recognizer>)],
    pairs: &[PairedSample],
    batch_size: usize,
    task: &str,
) -> Result<TransferMatrix> {
    let baseline = baseline.ok_or_else(|| {
        Error::ConfigError("transfer matrix needs the plain baseline processor".into())
    })?;
    if recognizers.is_empty() {
        return Err(Error::ConfigError("no evaluation recognizers".into()));
    }
    let col_ids: Vec<String> = recognizers.iter().map(|(id, _)| id.clone()).collect();

    let mut baseline_row = Vec::new();
    for (col_id, recog) in recognizers.iter_mut() {
        let ids = EvalIds {
            processor: "plain".into(),
            transformer: None,
            recognizer: col_id.clone(),
            task: task.into(),
        };
        let record =
            evaluate_pipeline(baseline, None, recog.as_mut(), pairs, batch_size, &ids)?;
        baseline_row.push(record.accuracy);
    }

    let mut cells = Vec::new();
    let mut diagonal = Vec::new();
    let mut row_ids = Vec::new();
    for row in rows.iter_mut() {
        let mut row_vals = Vec::new();
        let mut row_diag = Vec::new();
        for (col_id, recog) in recognizers.iter_mut() {
            let ids = EvalIds {
                processor: format!("ra_w_{}", row.loss_id),
                transformer: row.transformer.as_ref().map(|_| format!("t_w_{}", row.loss_id)),
                recognizer: col_id.clone(),
                task: task.into(),
            };
            let record = evaluate_pipeline(
                &mut row.processor,
                row.transformer.as_mut(),
                recog.as_mut(),
                pairs,
                batch_size,
                &ids,
            )?;
            row_vals.push(record.accuracy);
            row_diag.push(&row.loss_id == col_id);
        }
        cells.push(row_vals);
        diagonal.push(row_diag);
        row_ids.push(row.loss_id.clone());
    }

    Ok(TransferMatrix {
        row_ids,
        col_ids,
        cells,
        baseline: baseline_row,
        diagonal,
        task: task.into(),
    })
}

// ---------------------------------------------------------------------------
// Category-split transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CategorySplitConfig {
    pub task: DegradationSpec,
    pub proc_spec: ProcessorSpec,
    /// Template for both split recognizers; `num_classes` is replaced by
    /// the split size.
    pub recog_spec: RecognizerSpec,
    pub proc_schedule: OptimizerSchedule,
    pub recog_schedule: OptimizerSchedule,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategorySplitResult {
    pub split: ClassSplit,
    /// Rows: A-plain, A-RA, B-plain, B-RA. Columns: eval on split A
    /// (with R_A), eval on split B (with R_B).
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub table: Vec<Vec<f64>>,
    pub records: Vec<EvalRecord>,
}

/// Train per-split recognizers and processors (plain and RA) and
/// evaluate every train/eval combination, mirroring the category
/// transfer protocol.
pub fn category_split_experiment(
    cfg: &CategorySplitConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<CategorySplitResult> {
    if train.num_classes() < 4 || train.num_classes() % 2 != 0 {
        return Err(Error::ConfigError(format!(
            "category split wants an even class count >= 4, got {}",
            train.num_classes()
        )));
    }
    let split = split_classes(train, cfg.seed)?;
    let halves = [split.split_a.clone(), split.split_b.clone()];
    let mut processors: Vec<(String, SrResNet)> = Vec::new();
    let mut recognizers: Vec<Box<dyn Recognizer>> = Vec::new();
    let mut val_pairs_by_split: Vec<Vec<PairedSample>> = Vec::new();

    for (half_idx, classes) in halves.iter().enumerate() {
        let tag = if half_idx == 0 { "a" } else { "b" };
        let sub_train = train.subset(classes);
        let sub_val = val.subset(classes);
        let recog_cfg = RecognizerTrainConfig {
            spec: RecognizerSpec {
                num_classes: classes.len(),
                ..cfg.recog_spec.clone()
            },
            schedule: cfg.recog_schedule.clone(),
            seed: crate::rng::derive(cfg.seed, &format!("recog_{tag}")),
        };
        let mut recog_out = train::pretrain_recognizer(&recog_cfg, &sub_train, &sub_val)?;

        let train_pairs = make_pairs(&sub_train, &cfg.task, cfg.seed)?;
        let val_pairs = make_pairs(&sub_val, &cfg.task, cfg.seed)?;

        let plain_cfg = ProcessorTrainConfig {
            schedule: cfg.proc_schedule.clone(),
            ..ProcessorTrainConfig::new(
                cfg.proc_spec.clone(),
                TrainMode::Plain,
                0.0,
                crate::rng::derive(cfg.seed, &format!("plain_{tag}")),
            )
        };
        let plain = train_processor(&plain_cfg, &train_pairs, None)?;

        let ra_cfg = ProcessorTrainConfig {
            schedule: cfg.proc_schedule.clone(),
            loss: RecognitionLossSpec::supervised(cfg.lambda),
            ..ProcessorTrainConfig::new(
                cfg.proc_spec.clone(),
                TrainMode::Ra,
                cfg.lambda,
                crate::rng::derive(cfg.seed, &format!("ra_{tag}")),
            )
        };
        let ra = train_processor(&ra_cfg, &train_pairs, Some(recog_out.model.as_mut()))?;

        processors.push((format!("cat_{tag}_plain"), plain.processor));
        processors.push((format!("cat_{tag}_ra"), ra.processor));
        recognizers.push(recog_out.model);
        val_pairs_by_split.push(val_pairs);
    }

    let col_ids = vec!["eval_a".to_string(), "eval_b".to_string()];
    let mut table = Vec::new();
    let mut records = Vec::new();
    let mut row_ids = Vec::new();
    for (proc_id, processor) in processors.iter_mut() {
        let mut row = Vec::new();
        for (col, recog) in recognizers.iter_mut().enumerate() {
            let ids = EvalIds {
                processor: proc_id.clone(),
                transformer: None,
                recognizer: if col == 0 { "r_a".into() } else { "r_b".into() },
                task: cfg.task.kind_name().into(),
            };
            let record = evaluate_pipeline(
                processor,
                None,
                recog.as_mut(),
                &val_pairs_by_split[col],
                cfg.proc_schedule.batch_size,
                &ids,
            )?;
            row.push(record.accuracy);
            records.push(record);
        }
        table.push(row);
        row_ids.push(proc_id.clone());
    }

    Ok(CategorySplitResult {
        split,
        row_ids,
        col_ids,
        table,
        records,
    })
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LambdaSweepConfig {
    pub task: DegradationSpec,
    pub proc_spec: ProcessorSpec,
    pub schedule: OptimizerSchedule,
    pub seed: u64,
}

/// One full recognition-aware training per lambda (0 degenerates to
/// plain), each evaluated on the same held-out pairs with the same
/// frozen recognizer. Rows come back sorted by lambda.
pub fn lambda_sweep(
    cfg: &LambdaSweepConfig,
    lambdas: &[f64],
    train_pairs: &[PairedSample],
    val_pairs: &[PairedSample],
    recognizer: &mut dyn Recognizer,
) -> Result<Vec<(f64, EvalRecord)>> {
    if !lambdas.contains(&0.0) {
        return Err(Error::ConfigError(
            "lambda sweep must include 0 (the plain baseline)".into(),
        ));
    }
    let mut sorted: Vec<f64> = lambdas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();

    let mut rows = Vec::new();
    for &lambda in &sorted {
        let train_cfg = ProcessorTrainConfig {
            schedule: cfg.schedule.clone(),
            ..ProcessorTrainConfig::new(cfg.proc_spec.clone(), TrainMode::Ra, lambda, cfg.seed)
        };
        let mut out = train_processor(&train_cfg, train_pairs, Some(recognizer))?;
        let ids = EvalIds {
            processor: format!("ra_lambda_{lambda}"),
            transformer: None,
            recognizer: "loss_model".into(),
            task: cfg.task.kind_name().into(),
        };
        let record = evaluate_pipeline(
            &mut out.processor,
            None,
            recognizer,
            val_pairs,
            cfg.schedule.batch_size,
            &ids,
        )?;
        rows.push((lambda, record));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_processor, build_recognizer};
    use crate::nn;
    use crate::rng;
    use crate::synth;

    fn toy_pairs(classes: usize, n_per_class: usize, seed: u64) -> Vec<PairedSample> {
        let mut pairs = Vec::new();
        for class in 0..classes {
            for i in 0..n_per_class {
                let mut stream = rng::stream(seed, (class * n_per_class + i) as u64);
                let target = synth::render_sample(class, classes, 16, &mut stream);
                let input =
                    crate::degrade::add_gaussian_noise(&target, 0.1, &mut stream).unwrap();
                pairs.push(PairedSample {
                    input,
                    target,
                    label: class,
                });
            }
        }
        pairs
    }

    fn identity_pairs(classes: usize, n_per_class: usize, seed: u64) -> Vec<PairedSample> {
        toy_pairs(classes, n_per_class, seed)
            .into_iter()
            .map(|p| PairedSample {
                input: p.target.clone(),
                target: p.target,
                label: p.label,
            })
            .collect()
    }

    fn tiny_processor(seed: u64) -> SrResNet {
        build_processor(
            &ProcessorSpec {
                upscale: 1,
                n_resblocks: 1,
                base_channels: 4,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_rejects_empty_set() {
        let mut p = tiny_processor(1);
        let mut r = build_recognizer(&RecognizerSpec::resnet(2), 2).unwrap();
        let ids = EvalIds {
            processor: "p".into(),
            transformer: None,
            recognizer: "r".into(),
            task: "gaussian_noise".into(),
        };
        assert!(matches!(
            evaluate_pipeline(&mut p, None, r.as_mut(), &[], 4, &ids),
            Err(Error::ConfigError(_))
        ));
    }

    #[test]
    fn evaluate_accuracy_is_definitionally_top1() {
        let pairs = identity_pairs(2, 3, 5);
        let mut p = tiny_processor(1);
        let mut r = build_recognizer(&RecognizerSpec::resnet(2), 2).unwrap();
        let ids = EvalIds {
            processor: "p".into(),
            transformer: None,
            recognizer: "r".into(),
            task: "gaussian_noise".into(),
        };
        let record = evaluate_pipeline(&mut p, None, r.as_mut(), &pairs, 4, &ids).unwrap();
        // Recompute accuracy by hand on the clipped outputs.
        let mut correct = 0;
        for pair in &pairs {
            let x = Tensor::from_images(&[&pair.input]).unwrap();
            let out = p.forward(&x, Pass::Infer).image(0).clipped();
            let logits = r.forward(&Tensor::from_images(&[&out]).unwrap(), Pass::Infer);
            if metrics::argmax(logits.row(0)) == pair.label {
                correct += 1;
            }
        }
        assert!((record.accuracy - correct as f64 / pairs.len() as f64).abs() < 1e-12);
        assert_eq!(record.n_samples, pairs.len());
    }

    #[test]
    fn evaluation_mutates_nothing_and_reproduces() {
        let pairs = toy_pairs(2, 3, 9);
        let mut p = tiny_processor(3);
        let mut t = tiny_processor(4);
        let mut r = build_recognizer(&RecognizerSpec::resnet(2), 5).unwrap();
        let ids = EvalIds {
            processor: "p".into(),
            transformer: Some("t".into()),
            recognizer: "r".into(),
            task: "gaussian_noise".into(),
        };
        let p_before = nn::params_to_bytes(&mut p);
        let t_before = nn::params_to_bytes(&mut t);
        let r_before = nn::params_to_bytes(r.as_mut());
        let rec1 =
            evaluate_pipeline(&mut p, Some(&mut t), r.as_mut(), &pairs, 4, &ids).unwrap();
        let rec2 =
            evaluate_pipeline(&mut p, Some(&mut t), r.as_mut(), &pairs, 4, &ids).unwrap();
        assert_eq!(rec1, rec2);
        assert_eq!(nn::params_to_bytes(&mut p), p_before);
        assert_eq!(nn::params_to_bytes(&mut t), t_before);
        assert_eq!(nn::params_to_bytes(r.as_mut()), r_before);
    }

    #[test]
    fn identity_on_clean_pairs_gives_infinite_psnr_and_ssim_one() {
        // Build a processor then overwrite nothing: instead evaluate the
        // degenerate case through metrics directly by using pairs whose
        // input == target and a processor we cannot make identity.
        // The invariant that matters: psnr/ssim compare P's output to
        // the target, so feeding (target, target) pairs through an
        // identity mapping must give +inf / 1.0. We emulate identity by
        // checking the metric path on equal images.
        let img = synth::render_sample(0, 2, 16, &mut rng::stream(1, 0));
        assert!(metrics::psnr(&img, &img, 1.0).unwrap().is_infinite());
        assert_eq!(
            metrics::ssim(&img, &img, &SsimParams::default()).unwrap(),
            1.0
        );
    }

    #[test]
    fn transfer_matrix_shape_baseline_and_diagonal() {
        let pairs = toy_pairs(2, 2, 11);
        let mut rows = vec![
            TransferRow {
                loss_id: "r_a".into(),
                processor: tiny_processor(1),
                transformer: None,
            },
            TransferRow {
                loss_id: "r_b".into(),
                processor: tiny_processor(2),
                transformer: None,
            },
        ];
        let mut baseline = tiny_processor(3);
        let mut recognizers: Vec<(String, Box<dyn Recognizer>)> = vec![
            (
                "r_a".into(),
                build_recognizer(&RecognizerSpec::resnet(2), 4).unwrap(),
            ),
            (
                "r_b".into(),
                build_recognizer(&RecognizerSpec::vgg(2), 5).unwrap(),
            ),
        ];
        let m = transfer_matrix(
            &mut rows,
            Some(&mut baseline),
            &mut recognizers,
            &pairs,
            4,
            "gaussian_noise",
        )
        .unwrap();
        assert_eq!(m.cells.len(), 2);
        assert_eq!(m.cells[0].len(), 2);
        assert_eq!(m.baseline.len(), 2);
        assert!(m.diagonal[0][0] && !m.diagonal[0][1]);
        assert!(!m.diagonal[1][0] && m.diagonal[1][1]);

        // Missing baseline is a config error.
        assert!(matches!(
            transfer_matrix(&mut rows, None, &mut recognizers, &pairs, 4, "x"),
            Err(Error::ConfigError(_))
        ));
    }

    #[test]
    fn one_by_one_matrix_degenerates_to_evaluate_pipeline() {
        let pairs = toy_pairs(2, 2, 13);
        let mut rows = vec![TransferRow {
            loss_id: "r_a".into(),
            processor: tiny_processor(7),
            transformer: None,
        }];
        let mut baseline = tiny_processor(7);
        let mut recognizers: Vec<(String, Box<dyn Recognizer>)> = vec![(
            "r_a".into(),
            build_recognizer(&RecognizerSpec::resnet(2), 8).unwrap(),
        )];
        let m = transfer_matrix(
            &mut rows,
            Some(&mut baseline),
            &mut recognizers,
            &pairs,
            4,
            "gaussian_noise",
        )
        .unwrap();
        let ids = EvalIds {
            processor: "p".into(),
            transformer: None,
            recognizer: "r_a".into(),
            task: "gaussian_noise".into(),
        };
        let direct = evaluate_pipeline(
            &mut rows[0].processor,
            None,
            recognizers[0].1.as_mut(),
            &pairs,
            4,
            &ids,
        )
        .unwrap();
        assert_eq!(m.cells[0][0], direct.accuracy);
        // Baseline used the same processor weights here, so the row
        // reproduces the baseline exactly.
        assert_eq!(m.baseline[0], m.cells[0][0]);
    }

    #[test]
    fn lambda_sweep_requires_zero() {
        let cfg = LambdaSweepConfig {
            task: DegradationSpec::gaussian_noise(),
            proc_spec: ProcessorSpec {
                upscale: 1,
                n_resblocks: 1,
                base_channels: 4,
            },
            schedule: OptimizerSchedule {
                epochs: 1,
                batch_size: 4,
                lr0: 1e-3,
                decay_epochs: vec![],
                decay_factor: 10.0,
            },
            seed: 1,
        };
        let pairs = toy_pairs(2, 2, 1);
        let mut r = build_recognizer(&RecognizerSpec::resnet(2), 2).unwrap();
        assert!(matches!(
            lambda_sweep(&cfg, &[1e-3], &pairs, &pairs, r.as_mut()),
            Err(Error::ConfigError(_))
        ));
        let rows = lambda_sweep(&cfg, &[1e-3, 0.0], &pairs, &pairs, r.as_mut()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, 0.0);
        assert!(rows[1].0 > 0.0);
    }
}
