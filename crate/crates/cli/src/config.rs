//! Job configurations, one JSON document per run. Hyperparameter defaults
//! mirror the training protocol (50 epochs, Adam at 2e-5, batch 32,
//! temperature 2).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitkd_core::data::{DatasetManifest, SplitSpec};
use vitkd_core::vit::CaptureSite;
use vitkd_core::{Hand, Side, Strategy, TrainConfig, ViTConfig};

use crate::{CliError, CliResult};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn default_format_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

fn default_repeats() -> usize {
    1
}

fn default_temperature() -> f64 {
    2.0
}

fn default_dff_k() -> usize {
    2
}

/// Synthetic two-domain generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub images_per_subject: usize,
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub which: SynthDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthDomain {
    Source,
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSpec {
    pub path: PathBuf,
    pub domain: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(default)]
    pub side: Option<Side>,
    #[serde(default)]
    pub hand: Option<Hand>,
}

/// Where a dataset comes from and how to slice it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(default)]
    pub manifest: Option<ManifestSpec>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub filter: Option<FilterSpec>,
    /// Optional per-subject split; commands train on the train side and
    /// evaluate on the test side.
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

impl DataSpec {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        match (&self.manifest, &self.synth) {
            (Some(_), Some(_)) => Err(CliError::validation(
                "data spec cannot name both a manifest and a synth generator",
            )),
            (None, None) => Err(CliError::validation(
                "data spec needs either a manifest or a synth generator",
            )),
            (Some(m), None) => {
                let path = resolve(base, &m.path);
                if !path.exists() {
                    return Err(CliError::validation(format!(
                        "manifest '{}' does not exist",
                        path.display()
                    )));
                }
                Ok(())
            }
            (None, Some(s)) => {
                if s.num_subjects < 2 || s.images_per_subject < 1 {
                    return Err(CliError::validation("synth spec needs >=2 subjects and >=1 image"));
                }
                Ok(())
            }
        }
    }

    /// Materialize the full (unsplit) manifest.
    pub fn load(&self, base: &Path, seed_offset: u64) -> CliResult<DatasetManifest> {
        let mut manifest = if let Some(m) = &self.manifest {
            DatasetManifest::load(&resolve(base, &m.path), m.domain.clone())
                .map_err(CliError::runtime_from)?
        } else {
            let s = self.synth.as_ref().expect("validated");
            let (src, tgt) = vitkd_core::data::synth_two_domain(
                s.num_subjects,
                s.images_per_subject,
                s.image_size,
                s.seed,
            )
            .map_err(CliError::runtime_from)?;
            match s.which {
                SynthDomain::Source => src,
                SynthDomain::Target => tgt,
            }
        };
        if let Some(f) = &self.filter {
            manifest = manifest
                .filter(f.side, f.hand)
                .map_err(CliError::runtime_from)?;
        }
        let _ = seed_offset;
        Ok(manifest)
    }

    /// Materialize as (train, eval): the split sides when a split is
    /// given, otherwise the whole set twice.
    pub fn load_split(
        &self,
        base: &Path,
        seed_offset: u64,
    ) -> CliResult<(DatasetManifest, DatasetManifest)> {
        let manifest = self.load(base, seed_offset)?;
        match &self.split {
            None => Ok((manifest.clone(), manifest)),
            Some(spec) => {
                let mut offset_spec = spec.clone();
                offset_spec.seed = spec.seed.wrapping_add(seed_offset);
                offset_spec.repeats = 1;
                let (train, test) = manifest
                    .split_per_subject(&offset_spec)
                    .map_err(CliError::runtime_from)?
                    .pop()
                    .expect("one repeat");
                Ok((train, test))
            }
        }
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// `train --config` document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainJob {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    #[serde(default)]
    pub label: Option<String>,
    pub model: ViTConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSpec,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl TrainJob {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        self.model.validate().map_err(CliError::validation_from)?;
        self.train.validate().map_err(CliError::validation_from)?;
        if self.repeats < 1 {
            return Err(CliError::validation("repeats must be >= 1"));
        }
        self.data.validate(base)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TeacherSpec {
    PriorCopy,
    Ensemble { checkpoints: Vec<PathBuf> },
}

/// Distillation knobs carried by adapt jobs; the schedule denominator is
/// always the training epoch budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSection {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptData {
    /// Held-out source-domain data used only for before/after evaluation,
    /// never by the adaptation loop. With a split, its test side is used.
    pub source_eval: DataSpec,
    /// Target-domain data; with a split the train side feeds adaptation
    /// and the test side is evaluated.
    pub target: DataSpec,
}

/// `adapt --config` document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptJob {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    #[serde(default)]
    pub label: Option<String>,
    pub student_checkpoint: PathBuf,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    pub strategy: Strategy,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: AdaptData,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl AdaptJob {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        self.train.validate().map_err(CliError::validation_from)?;
        if self.repeats < 1 {
            return Err(CliError::validation("repeats must be >= 1"));
        }
        if !(self.distill.temperature > 0.0) {
            return Err(CliError::validation("temperature must be positive"));
        }
        let ckpt = resolve(base, &self.student_checkpoint);
        if !ckpt.exists() {
            return Err(CliError::validation(format!(
                "student checkpoint '{}' does not exist",
                ckpt.display()
            )));
        }
        match (&self.strategy, &self.teacher) {
            (Strategy::None, _) => {}
            (_, None) => {
                return Err(CliError::validation(format!(
                    "strategy '{}' requires a teacher",
                    self.strategy.label()
                )))
            }
            (Strategy::Method2, Some(TeacherSpec::Ensemble { .. })) => {
                return Err(CliError::validation(
                    "method2 requires a prior-copy teacher; the ensemble has no internal embedding",
                ))
            }
            (_, Some(TeacherSpec::Ensemble { checkpoints })) => {
                if checkpoints.len() < 2 {
                    return Err(CliError::validation("an ensemble needs at least 2 checkpoints"));
                }
                for p in checkpoints {
                    let p = resolve(base, p);
                    if !p.exists() {
                        return Err(CliError::validation(format!(
                            "ensemble checkpoint '{}' does not exist",
                            p.display()
                        )));
                    }
                }
            }
            (_, Some(TeacherSpec::PriorCopy)) => {}
        }
        self.data.source_eval.validate(base)?;
        self.data.target.validate(base)
    }

    pub fn resolve_checkpoint(&self, base: &Path) -> PathBuf {
        resolve(base, &self.student_checkpoint)
    }

    pub fn resolve_ensemble(&self, base: &Path) -> Vec<PathBuf> {
        match &self.teacher {
            Some(TeacherSpec::Ensemble { checkpoints }) => {
                checkpoints.iter().map(|p| resolve(base, p)).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// `explain --config` document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainJob {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub classes: Vec<usize>,
    #[serde(default = "default_site")]
    pub site: CaptureSite,
    #[serde(default = "default_dff_k")]
    pub dff_k: usize,
    #[serde(default)]
    pub nmf_seed: u64,
}

fn default_site() -> CaptureSite {
    CaptureSite::FinalNorm
}

impl ExplainJob {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        let ckpt = resolve(base, &self.checkpoint);
        if !ckpt.exists() {
            return Err(CliError::validation(format!(
                "checkpoint '{}' does not exist",
                ckpt.display()
            )));
        }
        if self.images.is_empty() {
            return Err(CliError::validation("need at least one image"));
        }
        for p in &self.images {
            let p = resolve(base, p);
            if !p.exists() {
                return Err(CliError::validation(format!(
                    "image '{}' does not exist",
                    p.display()
                )));
            }
        }
        if self.classes.is_empty() {
            return Err(CliError::validation("need at least one target class"));
        }
        if self.dff_k < 1 {
            return Err(CliError::validation("dff_k must be >= 1"));
        }
        Ok(())
    }

    pub fn resolve_paths(&self, base: &Path) -> (PathBuf, Vec<PathBuf>) {
        (
            resolve(base, &self.checkpoint),
            self.images.iter().map(|p| resolve(base, p)).collect(),
        )
    }
}

/// `report --config` document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportJob {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub runs: Vec<PathBuf>,
}

impl ReportJob {
    pub fn validate(&self, base: &Path) -> CliResult<()> {
        if self.runs.is_empty() {
            return Err(CliError::validation("report needs at least one run directory"));
        }
        for dir in &self.runs {
            let dir = resolve(base, dir);
            if !dir.is_dir() {
                return Err(CliError::validation(format!(
                    "run directory '{}' does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve_runs(&self, base: &Path) -> Vec<PathBuf> {
        self.runs.iter().map(|p| resolve(base, p)).collect()
    }
}

pub fn read_job<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::validation(format!("cannot read config '{}': {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("config '{}': {e}", path.display())))
}
