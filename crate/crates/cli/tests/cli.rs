//! End-to-end checks of the command layer: file outputs, labels, exit
//! codes and report aggregation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use vitkd_cli::commands::{cmd_adapt, cmd_explain, cmd_report, cmd_train, Summary};
use vitkd_cli::config::{
    AdaptData, AdaptJob, DataSpec, DistillSection, ExplainJob, ManifestSpec, ReportJob,
    SynthDomain, SynthSpec, TeacherSpec, TrainJob,
};
use vitkd_core::trainer::TrainConfig;
use vitkd_core::{Strategy, TinyViT, ViTConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vitkd")
}

fn tiny_model(seed: u64) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        hidden_size: 8,
        intermediate_size: 16,
        num_layers: 2,
        num_heads: 2,
        num_classes: 3,
        seed,
    }
}

fn quick_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-3,
        batch_size: 8,
        random_crop: false,
        horizontal_flip: false,
        seed,
    }
}

fn synth_spec(which: SynthDomain) -> DataSpec {
    DataSpec {
        manifest: None,
        synth: Some(SynthSpec {
            num_subjects: 3,
            images_per_subject: 4,
            image_size: 16,
            seed: 5,
            which,
        }),
        filter: None,
        split: Some(vitkd_core::SplitSpec {
            n_train: 3,
            n_test: 1,
            repeats: 1,
            seed: 0,
        }),
    }
}

fn train_job(repeats: usize) -> TrainJob {
    TrainJob {
        format_version: 1,
        label: Some("synth source".into()),
        model: tiny_model(1),
        train: quick_train(2, 10),
        data: synth_spec(SynthDomain::Source),
        repeats,
    }
}

fn read_summary(path: &Path) -> Summary {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let job = train_job(1);
    let ckpts = cmd_train(&job, dir.path(), &out, None).unwrap();
    assert_eq!(ckpts.len(), 1);
    assert!(out.join("checkpoint_s10.json").exists());
    let history = fs::read_to_string(out.join("history_s10.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2); // one record per epoch
    let summary = read_summary(&out.join("summary_s10.json"));
    assert_eq!(summary.kind, "train");
    assert_eq!(summary.epochs, 2);
    assert!(summary.accuracy.train.is_some());
    assert!(summary.accuracy.test.is_some());
}

#[test]
fn train_repeats_write_seed_suffixed_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let ckpts = cmd_train(&train_job(3), dir.path(), &out, None).unwrap();
    assert_eq!(ckpts.len(), 3);
    for seed in [10, 11, 12] {
        assert!(out.join(format!("checkpoint_s{seed}.json")).exists());
        assert!(out.join(format!("summary_s{seed}.json")).exists());
    }
}

#[test]
fn missing_manifest_fails_validation_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.json");
    let mut job = train_job(1);
    job.data = DataSpec {
        manifest: Some(ManifestSpec {
            path: PathBuf::from("does_not_exist.csv"),
            domain: "missing".into(),
        }),
        synth: None,
        filter: None,
        split: None,
    };
    fs::write(&config, serde_json::to_string(&job).unwrap()).unwrap();
    let out = dir.path().join("out");
    let result = Command::new(bin())
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_slice(&result.stderr).expect("machine-readable error record");
    assert_eq!(err["kind"], "validation");
    assert!(!out.join("checkpoint_s10.json").exists());
}

fn adapt_job(dir: &Path, strategy: Strategy, teacher: Option<TeacherSpec>) -> AdaptJob {
    // train a small student on the synth source first
    let out = dir.join("pretrain");
    let ckpts = cmd_train(&train_job(1), dir, &out, None).unwrap();
    AdaptJob {
        format_version: 1,
        label: None,
        student_checkpoint: ckpts[0].clone(),
        teacher,
        strategy,
        distill: DistillSection {
            temperature: 2.0,
            class_weights: None,
        },
        train: quick_train(2, 3),
        data: AdaptData {
            source_eval: synth_spec(SynthDomain::Source),
            target: synth_spec(SynthDomain::Target),
        },
        repeats: 1,
    }
}

#[test]
fn adapt_none_emits_no_distillation_label_and_headline_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let job = adapt_job(dir.path(), Strategy::None, None);
    let out = dir.path().join("adapt");
    cmd_adapt(&job, dir.path(), &out, None).unwrap();
    let summary = read_summary(&out.join("summary_s3.json"));
    assert_eq!(summary.kind, "adapt");
    assert_eq!(summary.strategy, "no distillation");
    assert!(summary.label.contains("no distillation"));
    for v in [
        summary.accuracy.source_before,
        summary.accuracy.target_before,
        summary.accuracy.source_after,
        summary.accuracy.target_after,
    ] {
        let v = v.expect("headline accuracy present");
        assert!((0.0..=1.0).contains(&v));
    }
    // audit: the adaptation loop read only target-domain data
    assert!(!summary.manifests_read.is_empty());
    assert!(summary
        .manifests_read
        .iter()
        .all(|m| m.domain == "synth-target"));
}

#[test]
fn adapt_method2_with_ensemble_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let job = adapt_job(
        dir.path(),
        Strategy::Method2,
        Some(TeacherSpec::Ensemble {
            checkpoints: vec![PathBuf::from("a.json"), PathBuf::from("b.json")],
        }),
    );
    let config = dir.path().join("adapt.json");
    fs::write(&config, serde_json::to_string(&job).unwrap()).unwrap();
    let result = Command::new(bin())
        .args(["adapt", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&result.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
}

#[test]
fn adapt_rerun_with_same_seed_is_byte_identical_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let job = adapt_job(dir.path(), Strategy::Hinton, Some(TeacherSpec::PriorCopy));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    cmd_adapt(&job, dir.path(), &out_a, Some(42)).unwrap();
    cmd_adapt(&job, dir.path(), &out_b, Some(42)).unwrap();
    let a = vitkd_cli::commands::summary_without_timing(&out_a.join("summary_s42.json")).unwrap();
    let b = vitkd_cli::commands::summary_without_timing(&out_b.join("summary_s42.json")).unwrap();
    assert_eq!(a, b);
    // histories are deterministic in full
    assert_eq!(
        fs::read_to_string(out_a.join("history_s42.jsonl")).unwrap(),
        fs::read_to_string(out_b.join("history_s42.jsonl")).unwrap()
    );
}

fn export_images(dir: &Path, n: usize) -> Vec<PathBuf> {
    let (src, _) = vitkd_core::data::synth_two_domain(3, 4, 16, 5).unwrap();
    let sub = src.subset(&(0..n).collect::<Vec<_>>()).unwrap();
    let manifest = sub.export(&dir.join("imgs")).unwrap();
    let text = fs::read_to_string(manifest).unwrap();
    text.lines()
        .skip(1)
        .map(|l| dir.join("imgs").join(l.split(',').next().unwrap()))
        .collect()
}

#[test]
fn explain_writes_cam_and_concept_maps() {
    let dir = tempfile::tempdir().unwrap();
    let images = export_images(dir.path(), 2);
    let ckpt = dir.path().join("model.json");
    TinyViT::<f32>::init(&tiny_model(4))
        .unwrap()
        .save_checkpoint(&ckpt)
        .unwrap();
    let job = ExplainJob {
        format_version: 1,
        checkpoint: ckpt,
        images,
        classes: vec![0, 2],
        site: vitkd_core::CaptureSite::FinalNorm,
        dff_k: 2,
        nmf_seed: 0,
    };
    let out = dir.path().join("explain");
    let written = cmd_explain(&job, dir.path(), &out, None).unwrap();
    let cams: Vec<_> = written
        .iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("cam_"))
        .collect();
    let dffs: Vec<_> = written
        .iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("dff_"))
        .collect();
    assert_eq!(cams.len(), 4); // 2 images x 2 classes
    assert_eq!(dffs.len(), 4); // 2 images x k=2
    for p in &written {
        assert!(p.exists());
        assert!(p.with_extension("json").exists(), "sidecar for {}", p.display());
    }
}

#[test]
fn explain_zero_gradient_writes_black_cam() {
    let dir = tempfile::tempdir().unwrap();
    let images = export_images(dir.path(), 1);
    let mut model = TinyViT::<f32>::init(&tiny_model(4)).unwrap();
    model.params_mut().head.weight.fill(0.0);
    model.params_mut().head.bias.fill(0.0);
    let ckpt = dir.path().join("zero.json");
    model.save_checkpoint(&ckpt).unwrap();
    let job = ExplainJob {
        format_version: 1,
        checkpoint: ckpt,
        images,
        classes: vec![0],
        site: vitkd_core::CaptureSite::FinalNorm,
        dff_k: 1,
        nmf_seed: 0,
    };
    let out = dir.path().join("explain");
    let written = cmd_explain(&job, dir.path(), &out, None).unwrap();
    let cam = written
        .iter()
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("cam_"))
        .unwrap();
    let img = image::open(cam).unwrap().to_luma8();
    assert!(img.pixels().all(|p| p.0[0] == 0), "CAM image is not black");
}

#[test]
fn explain_rejects_out_of_range_class() {
    let dir = tempfile::tempdir().unwrap();
    let images = export_images(dir.path(), 1);
    let ckpt = dir.path().join("model.json");
    TinyViT::<f32>::init(&tiny_model(4))
        .unwrap()
        .save_checkpoint(&ckpt)
        .unwrap();
    let job = ExplainJob {
        format_version: 1,
        checkpoint: ckpt,
        images,
        classes: vec![7],
        site: vitkd_core::CaptureSite::FinalNorm,
        dff_k: 1,
        nmf_seed: 0,
    };
    let err = cmd_explain(&job, dir.path(), &dir.path().join("out"), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

fn fake_summary(dir: &Path, seed: u64, label: &str, test: f64) {
    let summary = serde_json::json!({
        "format_version": 1,
        "kind": "train",
        "label": label,
        "strategy": "supervised",
        "teacher": null,
        "seed": seed,
        "epochs": 1,
        "accuracy": {"train": 1.0, "test": test},
        "manifests_read": [{"domain": "synth-source", "records": 9}],
        "timing": {"wall_clock_secs": 0.1}
    });
    fs::write(
        dir.join(format!("summary_s{seed}.json")),
        serde_json::to_string_pretty(&summary).unwrap(),
    )
    .unwrap();
}

#[test]
fn report_aggregates_mean_and_population_std() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    fake_summary(&runs, 1, "exp", 0.9);
    fake_summary(&runs, 2, "exp", 0.92);
    fake_summary(&runs, 3, "exp", 0.94);
    let job = ReportJob {
        format_version: 1,
        runs: vec![runs],
    };
    let out = dir.path().join("report");
    let written = cmd_report(&job, dir.path(), &out).unwrap();
    assert!(written.iter().any(|p| p.ends_with("table.csv")));
    assert!(written.iter().any(|p| p.ends_with("loss_curves.png")));
    assert!(written.iter().any(|p| p.ends_with("accuracy_bars.png")));

    let csv = fs::read_to_string(out.join("table.csv")).unwrap();
    let row = csv
        .lines()
        .find(|l| l.starts_with("exp,test"))
        .expect("test metric row");
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[2], "0.920000");
    assert!((cells[3].parse::<f64>().unwrap() - 0.0163).abs() < 1e-4);
    assert_eq!(cells[4], "3");
    let txt = fs::read_to_string(out.join("table.txt")).unwrap();
    assert!(txt.contains("population standard deviation"));
}

#[test]
fn report_single_repeat_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    fake_summary(&runs, 1, "solo", 0.8);
    let out = dir.path().join("report");
    cmd_report(
        &ReportJob {
            format_version: 1,
            runs: vec![runs],
        },
        dir.path(),
        &out,
    )
    .unwrap();
    let csv = fs::read_to_string(out.join("table.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("solo,test")).unwrap();
    assert_eq!(row.split(',').nth(3).unwrap(), "0.000000");
}

#[test]
fn report_errors_on_empty_directory_and_mixed_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let err = cmd_report(
        &ReportJob {
            format_version: 1,
            runs: vec![empty],
        },
        dir.path(),
        &dir.path().join("out"),
    )
    .unwrap_err();
    assert!(err.message().contains("aggregation"));

    let mixed = dir.path().join("mixed");
    fs::create_dir_all(&mixed).unwrap();
    fake_summary(&mixed, 1, "exp", 0.9);
    let mut adapt_summary = serde_json::json!({
        "format_version": 1, "kind": "adapt", "label": "exp2",
        "strategy": "hinton", "teacher": "prior_copy", "seed": 2, "epochs": 1,
        "accuracy": {"source_before": 1.0, "target_before": 0.1,
                      "source_after": 0.8, "target_after": 0.9},
        "manifests_read": [], "timing": {"wall_clock_secs": 0.1}
    });
    fs::write(
        mixed.join("summary_s2.json"),
        serde_json::to_string_pretty(&mut adapt_summary).unwrap(),
    )
    .unwrap();
    let err = cmd_report(
        &ReportJob {
            format_version: 1,
            runs: vec![mixed],
        },
        dir.path(),
        &dir.path().join("out2"),
    )
    .unwrap_err();
    assert!(err.message().contains("mixed"));
}

#[test]
fn binary_reports_success_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.json");
    fs::write(&config, serde_json::to_string(&train_job(1)).unwrap()).unwrap();
    let out = dir.path().join("out");
    let result = Command::new(bin())
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    assert!(out.join("summary_s10.json").exists());
}
