//! The four commands. Each takes a parsed job config, an output directory
//! and an optional seed override, writes files and returns quietly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitkd_core::data::DatasetManifest;
use vitkd_core::explain::{dff, export_concept_maps, export_heatmap, grad_cam};
use vitkd_core::losses::DistillConfig;
use vitkd_core::teachers::{TeacherHandle, TeacherKind};
use vitkd_core::trainer::{adapt, evaluate, train_supervised, RunResult};
use vitkd_core::vit::TinyViT;
use vitkd_core::ManifestAccess;

use crate::config::{AdaptJob, ExplainJob, ReportJob, TeacherSpec, TrainJob};
use crate::{report, CliError, CliResult};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;

/// Final record of one run; `timing` is the only non-deterministic field
/// and is excluded from byte-level comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub kind: String,
    pub label: String,
    pub strategy: String,
    pub teacher: Option<String>,
    pub seed: u64,
    pub epochs: usize,
    pub accuracy: AccuracyBlock,
    pub manifests_read: Vec<ManifestAccess>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_after: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
}

#[derive(Serialize)]
struct HistoryLine {
    format_version: u32,
    epoch: usize,
    soft: f64,
    hard: f64,
    cosine: f64,
    schedule_weight: f64,
    total: f64,
}

fn write_history(result: &RunResult, path: &Path) -> CliResult<()> {
    let mut out = String::new();
    for e in &result.epochs {
        let line = HistoryLine {
            format_version: SUMMARY_FORMAT_VERSION,
            epoch: e.epoch,
            soft: e.soft,
            hard: e.hard,
            cosine: e.cosine,
            schedule_weight: e.schedule_weight,
            total: e.total,
        };
        out.push_str(&serde_json::to_string(&line).expect("history line serializes"));
        out.push('\n');
    }
    fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("write '{}': {e}", path.display())))
}

fn write_summary(summary: &Summary, path: &Path) -> CliResult<()> {
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(path, json)
        .map_err(|e| CliError::runtime(format!("write '{}': {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::validation(format!("cannot create '{}': {e}", dir.display())))
}

/// Train one model per repeat; writes seed-suffixed checkpoint, history and
/// summary files.
pub fn cmd_train(job: &TrainJob, base: &Path, out: &Path, seed_override: Option<u64>) -> CliResult<Vec<PathBuf>> {
    job.validate(base)?;
    ensure_dir(out)?;
    let base_seed = seed_override.unwrap_or(job.train.seed);
    let mut checkpoints = Vec::new();

    for r in 0..job.repeats as u64 {
        let seed = base_seed.wrapping_add(r);
        let mut model_cfg = job.model.clone();
        model_cfg.seed = job.model.seed.wrapping_add(r);
        let mut train_cfg = job.train.clone();
        train_cfg.seed = seed;

        let (train_set, eval_set) = job.data.load_split(base, r)?;
        let mut model =
            TinyViT::<f32>::init(&model_cfg).map_err(CliError::validation_from)?;
        let mut result = train_supervised(&mut model, &train_set, &train_cfg)
            .map_err(CliError::runtime_from)?;
        let train_acc = evaluate(&model, &train_set).map_err(CliError::runtime_from)?;
        let test_acc = if job.data.split.is_some() {
            Some(evaluate(&model, &eval_set).map_err(CliError::runtime_from)?)
        } else {
            None
        };

        let ckpt = out.join(format!("checkpoint_s{seed}.json"));
        model
            .save_checkpoint(&ckpt)
            .map_err(CliError::runtime_from)?;
        write_history(&result, &out.join(format!("history_s{seed}.jsonl")))?;
        let label = job
            .label
            .clone()
            .unwrap_or_else(|| train_set.domain().to_string());
        let summary = Summary {
            format_version: SUMMARY_FORMAT_VERSION,
            kind: "train".into(),
            label,
            strategy: "supervised".into(),
            teacher: None,
            seed,
            epochs: train_cfg.epochs,
            accuracy: AccuracyBlock {
                train: Some(train_acc),
                test: test_acc,
                ..AccuracyBlock::default()
            },
            manifests_read: std::mem::take(&mut result.manifests_read),
            timing: Timing {
                wall_clock_secs: result.wall_clock_secs,
            },
        };
        write_summary(&summary, &out.join(format!("summary_s{seed}.json")))?;
        checkpoints.push(ckpt);
    }
    Ok(checkpoints)
}

/// Adapt a trained student to a target domain, reporting the four headline
/// accuracies (source/target, before/after). The adaptation loop itself
/// only ever reads the target training split; the summary's
/// `manifests_read` audit field records exactly what it touched.
pub fn cmd_adapt(job: &AdaptJob, base: &Path, out: &Path, seed_override: Option<u64>) -> CliResult<Vec<PathBuf>> {
    job.validate(base)?;
    ensure_dir(out)?;
    let base_seed = seed_override.unwrap_or(job.train.seed);
    let student_path = job.resolve_checkpoint(base);
    let mut outputs = Vec::new();

    for r in 0..job.repeats as u64 {
        let seed = base_seed.wrapping_add(r);
        let mut train_cfg = job.train.clone();
        train_cfg.seed = seed;
        let distill = DistillConfig {
            temperature: job.distill.temperature,
            total_epochs: train_cfg.epochs,
            strategy: job.strategy,
            teacher_kind: match &job.teacher {
                Some(TeacherSpec::Ensemble { .. }) => TeacherKind::Ensemble,
                _ => TeacherKind::PriorCopy,
            },
            class_weights: job.distill.class_weights.clone(),
        };

        let mut student =
            TinyViT::<f32>::load_checkpoint(&student_path).map_err(CliError::validation_from)?;
        let teacher = match &job.teacher {
            None => None,
            Some(TeacherSpec::PriorCopy) => Some(TeacherHandle::prior_copy(&student)),
            Some(TeacherSpec::Ensemble { .. }) => {
                let members = job
                    .resolve_ensemble(base)
                    .iter()
                    .map(|p| TinyViT::<f32>::load_checkpoint(p))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(CliError::validation_from)?;
                Some(TeacherHandle::ensemble(members).map_err(CliError::validation_from)?)
            }
        };

        let (_, source_eval) = job.data.source_eval.load_split(base, r)?;
        let (target_train, target_eval) = job.data.target.load_split(base, r)?;

        let source_before = evaluate(&student, &source_eval).map_err(CliError::runtime_from)?;
        let target_before = evaluate(&student, &target_eval).map_err(CliError::runtime_from)?;

        let mut result = adapt(&mut student, teacher.as_ref(), &target_train, &distill, &train_cfg)
            .map_err(CliError::runtime_from)?;

        let source_after = evaluate(&student, &source_eval).map_err(CliError::runtime_from)?;
        let target_after = evaluate(&student, &target_eval).map_err(CliError::runtime_from)?;

        let ckpt = out.join(format!("adapted_s{seed}.json"));
        student
            .save_checkpoint(&ckpt)
            .map_err(CliError::runtime_from)?;
        write_history(&result, &out.join(format!("history_s{seed}.jsonl")))?;
        let label = job.label.clone().unwrap_or_else(|| {
            format!(
                "{}->{}, {}, {}",
                source_eval.domain(),
                target_train.domain(),
                job.strategy.label(),
                result.teacher.as_deref().unwrap_or("-")
            )
        });
        let summary = Summary {
            format_version: SUMMARY_FORMAT_VERSION,
            kind: "adapt".into(),
            label,
            strategy: job.strategy.label().into(),
            teacher: result.teacher.clone(),
            seed,
            epochs: train_cfg.epochs,
            accuracy: AccuracyBlock {
                source_before: Some(source_before),
                target_before: Some(target_before),
                source_after: Some(source_after),
                target_after: Some(target_after),
                ..AccuracyBlock::default()
            },
            manifests_read: std::mem::take(&mut result.manifests_read),
            timing: Timing {
                wall_clock_secs: result.wall_clock_secs,
            },
        };
        write_summary(&summary, &out.join(format!("summary_s{seed}.json")))?;
        outputs.push(ckpt);
    }
    Ok(outputs)
}

/// Grad-CAM maps for every (image, class) pair plus one DFF decomposition
/// over the whole image list.
pub fn cmd_explain(job: &ExplainJob, base: &Path, out: &Path, seed_override: Option<u64>) -> CliResult<Vec<PathBuf>> {
    job.validate(base)?;
    ensure_dir(out)?;
    let (ckpt, images) = job.resolve_paths(base);
    let model = TinyViT::<f32>::load_checkpoint(&ckpt).map_err(CliError::validation_from)?;
    let size = model.config().image_size;
    for &class in &job.classes {
        if class >= model.config().num_classes {
            return Err(CliError::validation(format!(
                "class {class} out of range for {} classes",
                model.config().num_classes
            )));
        }
    }

    let mut written = Vec::new();
    let mut pixel_stack = ndarray::Array4::<f32>::zeros((images.len(), 3, size, size));
    for (i, path) in images.iter().enumerate() {
        let record = vitkd_core::data::SampleRecord {
            source: vitkd_core::data::ImageSource::File(path.clone()),
            subject_id: "query".into(),
            side: vitkd_core::Side::Palmar,
            hand: vitkd_core::Hand::Left,
            accessories: false,
            nail_polish: false,
            irregularities: false,
        };
        let img = vitkd_core::data::preprocess::<f32>(&record, size)
            .map_err(CliError::runtime_from)?;
        pixel_stack
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&img);
        let stem_base = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image{i}"));
        for &class in &job.classes {
            let map =
                grad_cam(&model, &img, class, job.site).map_err(CliError::runtime_from)?;
            let stem = format!("cam_{stem_base}_c{class}");
            written.push(export_heatmap(&map, out, &stem).map_err(CliError::runtime_from)?);
        }
    }

    let seed = seed_override.unwrap_or(job.nmf_seed);
    let concepts =
        dff(&model, &pixel_stack, job.dff_k, job.site, seed).map_err(CliError::runtime_from)?;
    written.extend(
        export_concept_maps(&concepts, out, "dff").map_err(CliError::runtime_from)?,
    );
    Ok(written)
}

/// Aggregate run directories into tables and plots.
pub fn cmd_report(job: &ReportJob, base: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    job.validate(base)?;
    ensure_dir(out)?;
    report::generate(&job.resolve_runs(base), out)
}

/// Shared helper for determinism checks: a summary re-serialized without
/// its timing field.
pub fn summary_without_timing(path: &Path) -> CliResult<String> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("read '{}': {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::runtime(format!("parse '{}': {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("timing");
    }
    Ok(serde_json::to_string(&value).expect("canonical summary"))
}

/// Export a synthetic dataset to `dir` (manifest + PNG files); a
/// convenience used by tests and docs examples.
pub fn export_synth(manifest: &DatasetManifest, dir: &Path) -> CliResult<PathBuf> {
    manifest.export(dir).map_err(CliError::runtime_from)
}
