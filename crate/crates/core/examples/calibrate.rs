//! Desk-scale calibration runs used while tuning dataset difficulty and
//! schedules. Not part of the test suite; invoke with
//! `cargo run -p recoproc-core --example calibrate --release -- <stage>`.

use std::time::Instant;

use recoproc_core::data::{load_dataset, make_pairs, Split};
use recoproc_core::degrade::DegradationSpec;
use recoproc_core::harness::{evaluate_pipeline, EvalIds};
use recoproc_core::models::RecognizerSpec;
use recoproc_core::synth::{self, SynthSpec};
use recoproc_core::train::{
    pretrain_recognizer, train_processor, OptimizerSchedule, ProcessorTrainConfig,
    RecognizerTrainConfig, TrainMode,
};
use recoproc_core::models::ProcessorSpec;

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "quick".into());
    let seeds: Vec<u64> = std::env::args()
        .nth(2)
        .map(|s| s.split(',').map(|t| t.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0]);

    let root = std::env::temp_dir().join("recoproc_calibrate");
    let synth_spec = SynthSpec {
        classes: 10,
        train_per_class: 40,
        val_per_class: 16,
        size: 32,
        seed: 7,
    };
    if !root.join("classes.json").exists() {
        let t = Instant::now();
        synth::generate(&root, &synth_spec).unwrap();
        eprintln!("dataset generated in {:.1}s", t.elapsed().as_secs_f64());
    }
    let train = load_dataset(&root, Split::Train).unwrap();
    let val = load_dataset(&root, Split::Val).unwrap();
    eprintln!("train {} val {}", train.len(), val.len());

    let recog_schedule = OptimizerSchedule {
        lr0: 2e-3,
        epochs: 12,
        decay_epochs: vec![9, 11],
        decay_factor: 10.0,
        batch_size: 20,
    };
    let proc_schedule = OptimizerSchedule {
        lr0: 1e-3,
        epochs: 6,
        decay_epochs: vec![5, 6],
        decay_factor: 10.0,
        batch_size: 20,
    };

    for &seed in &seeds {
        let t = Instant::now();
        let rc = RecognizerTrainConfig {
            spec: RecognizerSpec::resnet(10),
            schedule: recog_schedule.clone(),
            seed: 100 + seed,
        };
        let mut recog = pretrain_recognizer(&rc, &train, &val).unwrap();
        eprintln!(
            "seed {seed}: R clean val acc {:.3} ({:.0}s)",
            recog.metrics["val_acc_clean"],
            t.elapsed().as_secs_f64()
        );

        let tasks: Vec<DegradationSpec> = match stage.as_str() {
            "sr" => vec![DegradationSpec::super_resolution()],
            "noise" => vec![DegradationSpec::gaussian_noise()],
            "jpeg" => vec![DegradationSpec::jpeg()],
            _ => vec![
                DegradationSpec::super_resolution(),
                DegradationSpec::gaussian_noise(),
                DegradationSpec::jpeg(),
            ],
        };

        for task in tasks {
            let train_pairs = make_pairs(&train, &task, seed).unwrap();
            let val_pairs = make_pairs(&val, &task, seed).unwrap();

            // No-processing baseline: degraded input (bicubic-upsampled
            // for SR) straight into R.
            {
                let scale = task.input_scale();
                let imgs: Vec<recoproc_core::Image> = val_pairs
                    .iter()
                    .map(|p| {
                        if scale > 1 {
                            recoproc_core::degrade::upsample_bicubic(&p.input, scale).unwrap()
                        } else {
                            p.input.clone()
                        }
                    })
                    .collect();
                let refs: Vec<&recoproc_core::Image> = imgs.iter().collect();
                let labels: Vec<usize> = val_pairs.iter().map(|p| p.label).collect();
                let acc = recoproc_core::train::classifier_accuracy(
                    recog.model.as_mut(),
                    &refs,
                    &labels,
                    20,
                )
                .unwrap();
                eprintln!("  {} no_processing: acc {:.3}", task.kind_name(), acc);
            }
            let proc_spec = ProcessorSpec {
                upscale: task.input_scale() as u32,
                n_resblocks: 3,
                base_channels: 16,
            };
            for (label, mode, lambda) in [
                ("plain", TrainMode::Plain, 0.0),
                ("ra1e-3", TrainMode::Ra, 1e-3),
                ("ra1e-4", TrainMode::Ra, 1e-4),
            ] {
                let t = Instant::now();
                let cfg = ProcessorTrainConfig {
                    schedule: proc_schedule.clone(),
                    ..ProcessorTrainConfig::new(proc_spec.clone(), mode, lambda, 200 + seed)
                };
                let mut out =
                    train_processor(&cfg, &train_pairs, Some(recog.model.as_mut())).unwrap();
                let ids = EvalIds {
                    processor: label.into(),
                    transformer: None,
                    recognizer: "r".into(),
                    task: task.kind_name().into(),
                };
                let rec = evaluate_pipeline(
                    &mut out.processor,
                    None,
                    recog.model.as_mut(),
                    &val_pairs,
                    20,
                    &ids,
                )
                .unwrap();
                eprintln!(
                    "  {} {}: psnr {:.3} ssim {:.3} acc {:.3} ({:.0}s, final l_proc {:.5})",
                    task.kind_name(),
                    label,
                    rec.psnr,
                    rec.ssim,
                    rec.accuracy,
                    t.elapsed().as_secs_f64(),
                    out.metrics["train_l_proc"],
                );
            }
        }
    }
}
