//! Scoring: one gradient evaluation per image, accumulated per concept.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{ingest_dataset, DatasetIndex};
use super::extract::{load_labels, load_model, load_run, Artifacts};
use super::{write_json, RunnerSpec};
use crate::concepts::LabelMap;
use crate::error::{Error, Result};
use crate::importance::{ImportanceReport, RelevanceAccumulator};
use crate::modelrt::{AuditedRunner, EvalCounter, GradOutcome, ModelRunner, RunnerError};

/// `scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub report: ImportanceReport,
    pub counts: EvalCounter,
}

/// Scores every concept over `index` given each image's label map. Issues
/// exactly one `grad_g` evaluation per image and no forward passes, and
/// fails if the audit disagrees.
pub fn score_concepts(
    index: &DatasetIndex,
    runner: &mut dyn ModelRunner,
    labels: &[LabelMap],
    n_c: usize,
    batch_size: usize,
    resolution: (usize, usize),
) -> Result<ScoreRecord> {
    let n = index.len();
    if labels.len() != n {
        return Err(Error::Dimension { expected: n, got: labels.len() });
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let n_k = runner.info().n_k;
    if n_k < 2 {
        return Err(RunnerError::Incompatible(format!("runner reports {n_k} classes; at least 2 are needed")).into());
    }
    let mut runner = AuditedRunner::new(runner);
    let mut acc = RelevanceAccumulator::new(n_c, n_k);

    for start in (0..n).step_by(batch_size) {
        let range = start..(start + batch_size).min(n);
        let images = index.load_range(range.clone(), Some(resolution))?;
        let outcomes = runner.grad_g(&images)?;
        if outcomes.len() != images.len() {
            return Err(RunnerError::MalformedReply(format!(
                "{} gradients for {} images",
                outcomes.len(),
                images.len()
            ))
            .into());
        }
        let partial = outcomes
            .par_iter()
            .zip(&images)
            .zip(&labels[range])
            .map(|((out, img), lm)| {
                let mut a = RelevanceAccumulator::new(n_c, n_k);
                match out {
                    GradOutcome::Gradient { grad, .. } => {
                        if grad.shape() != img.shape() {
                            return Err(RunnerError::MalformedReply(format!(
                                "gradient shape {:?} for image {:?}",
                                grad.shape(),
                                img.shape()
                            ))
                            .into());
                        }
                        a.accumulate_labels(lm, grad)?;
                    }
                    GradOutcome::Undefined => a.skip(),
                }
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        for a in &partial {
            acc.merge(a)?;
        }
    }

    let counts = runner.counter();
    if counts.gradient_count != n as u64 || counts.forward_count != 0 {
        return Err(Error::invalid(format!("evaluation audit failed: {counts:?} for {n} images")));
    }
    Ok(ScoreRecord { report: acc.finalize(), counts })
}

/// Scores the extraction stored in `out_dir` and writes `scores.json`.
/// The runner recorded at extraction time is used unless overridden.
pub fn run_score(out_dir: &Path, runner: Option<RunnerSpec>) -> Result<ScoreRecord> {
    let (run, record) = load_run(out_dir)?;
    let index = ingest_dataset(&run.data_dir)?;
    let ids: Vec<String> = (0..index.len()).map(|i| index.image_id(i)).collect();
    if ids != record.image_ids {
        return Err(Error::Dataset {
            path: run.data_dir.clone(),
            msg: "dataset contents changed since extraction".into(),
        });
    }
    let (model, sidecar) = load_model(out_dir)?;
    let labels = load_labels(out_dir, &ids)?;
    let mut runner = runner.unwrap_or(run.runner).open()?;
    let scores =
        score_concepts(&index, &mut *runner, &labels, model.n_c(), run.extraction.batch_size, sidecar.resolution)?;
    write_json(&scores, &Artifacts::new(out_dir).scores())?;
    Ok(scores)
}
