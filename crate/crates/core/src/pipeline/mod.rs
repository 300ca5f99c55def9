//! End-to-end orchestration: dataset ingestion, extraction, scoring,
//! reporting, localization and the synthetic planted-cue generator.
//!
//! Artifacts live in one output directory:
//!
//! ```text
//! config.json          extraction config, data dir, runner spec
//! centroids.ltns       n_c x D centroid matrix
//! centroids.json       sidecar: n_c, seed, epochs, layout, standardization
//! extraction.json      image ids, evaluation counts
//! masks/NNNNNN.ltns    per-image label maps (H x W x 1)
//! scores.json          importance report and scoring evaluation counts
//! concepts.json        final report
//! concepts/cJJ/        example renders, masks, grid
//! ```

mod dataset;
mod extract;
mod image_io;
mod report;
mod score;
mod synth;

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelrt::{ModelRunner, RunnerError, SubprocessOptions, SubprocessRunner, ToyRunner, RUNNER_CMD_ENV};

pub use dataset::{ingest_dataset, resize_dataset, DatasetIndex, ImageEntry};
pub use extract::{
    extract_concepts, load_model, localize_image, run_extract, Artifacts, CentroidSidecar, ExtractionOutcome,
    ExtractionRecord,
};
pub use image_io::{load_image, load_mask_png, save_mask_png, save_png};
pub use report::{generate_report, load_report, ConceptEntry, ConceptReport, EvalCounts, ReportConfig};
pub use score::{run_score, score_concepts, ScoreRecord};
pub use synth::{synth_dataset, Cue, CueShape, SynthImage, SynthManifest, SynthSpec};

/// Settings of one extraction run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub layers: Vec<String>,
    pub n_c: usize,
    pub batch_size: usize,
    pub lambda: f32,
    pub epochs: usize,
    pub seed: u64,
    pub standardize: bool,
    /// Required input resolution `(H, W)`; taken from the first image when unset.
    pub resolution: Option<(usize, usize)>,
    /// Examples rendered per concept in the report.
    pub max_examples: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            layers: vec![],
            n_c: 20,
            batch_size: 8,
            lambda: 0.3,
            epochs: 10,
            seed: 0,
            standardize: true,
            resolution: None,
            max_examples: 8,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("at least one layer is required"));
        }
        if self.layers.iter().enumerate().any(|(i, l)| self.layers[..i].contains(l)) {
            return Err(Error::invalid(format!("duplicate layer in {:?}", self.layers)));
        }
        if self.n_c < 2 {
            return Err(Error::invalid(format!("n_c must be >= 2, got {}", self.n_c)));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::invalid("batch size and epochs must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if matches!(self.resolution, Some((h, w)) if h == 0 || w == 0) {
            return Err(Error::invalid("resolution must be positive"));
        }
        Ok(())
    }
}

/// How to reach the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RunnerSpec {
    /// Built-in analytic toy model with `n_k` classes.
    Toy { n_k: usize },
    /// External `concept-runner/1` process, started through `sh -c`.
    Command { cmd: String },
}

impl RunnerSpec {
    /// `--runner` wins over `--toy-model`, which wins over the environment.
    pub fn resolve(cmd: Option<&str>, toy: bool, n_k: usize) -> Result<Self> {
        if let Some(cmd) = cmd {
            return Ok(RunnerSpec::Command { cmd: cmd.to_string() });
        }
        if toy {
            return Ok(RunnerSpec::Toy { n_k });
        }
        match std::env::var(RUNNER_CMD_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Ok(RunnerSpec::Command { cmd }),
            _ => Err(RunnerError::NotConfigured.into()),
        }
    }

    pub fn open(&self) -> Result<Box<dyn ModelRunner>> {
        Ok(match self {
            RunnerSpec::Toy { n_k } => Box::new(ToyRunner::new(*n_k)?),
            RunnerSpec::Command { cmd } => Box::new(SubprocessRunner::spawn(cmd, SubprocessOptions::default())?),
        })
    }
}

/// `config.json`: what `extract` was asked to do.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub runner: RunnerSpec,
    pub extraction: ExtractionConfig,
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}
