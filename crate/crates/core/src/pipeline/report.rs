//! `concepts.json` and the per-concept PNG artifacts.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::ingest_dataset;
use super::extract::{load_labels, load_model, load_run, Artifacts};
use super::image_io::{save_mask_png, save_png};
use super::score::ScoreRecord;
use super::{create_dir, read_json, write_json, RunnerSpec};
use crate::concepts::{build_example, ConceptRecord, LabelMap};
use crate::error::{Error, Result};
use crate::modelrt::{EvalCounter, InputNormalization};
use crate::tensor::Tensor;

/// Grey used between grid tiles.
const GRID_GAP_VALUE: f32 = 0.5;
const GRID_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub data_dir: PathBuf,
    pub runner: RunnerSpec,
    pub layers: Vec<String>,
    pub n_c: usize,
    pub batch_size: usize,
    pub lambda: f32,
    pub epochs: usize,
    pub seed: u64,
    pub standardize: bool,
    pub resolution: (usize, usize),
    pub max_examples: usize,
    pub input_normalization: Option<InputNormalization>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub index: usize,
    pub importance: f64,
    pub mean_relevance: f64,
    pub n_images_present: usize,
    pub centroid_file: String,
    /// Row of this concept in `centroid_file`.
    pub centroid_row: usize,
    /// Rendered examples, relative to the output directory.
    pub examples: Vec<String>,
    /// Source image id of each example.
    pub example_images: Vec<String>,
    /// 1-bit mask of each example.
    pub masks: Vec<String>,
    pub grid: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCounts {
    pub n_images: usize,
    pub extraction_passes: usize,
    pub extraction: EvalCounter,
    pub scoring: EvalCounter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptReport {
    pub config: ReportConfig,
    pub classes: Vec<String>,
    pub concepts: Vec<ConceptEntry>,
    pub skipped_images: u64,
    pub eval_counts: EvalCounts,
}

fn by_importance(a: &ConceptEntry, b: &ConceptEntry) -> Ordering {
    b.importance.total_cmp(&a.importance).then(a.index.cmp(&b.index))
}

impl ConceptReport {
    /// Checks every structural invariant of the report.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("invalid report: {msg}")));
        let n = self.eval_counts.n_images;
        if self.concepts.len() != self.config.n_c {
            return bad(format!("{} concepts for n_c = {}", self.concepts.len(), self.config.n_c));
        }
        let mut seen = vec![false; self.config.n_c];
        for c in &self.concepts {
            if c.index >= seen.len() || std::mem::replace(&mut seen[c.index], true) {
                return bad(format!("concept index {} repeated or out of range", c.index));
            }
            if !(0.0..=1.0).contains(&c.importance) || !c.mean_relevance.is_finite() {
                return bad(format!("concept {}: importance {} out of [0, 1]", c.index, c.importance));
            }
            if c.n_images_present > n {
                return bad(format!("concept {}: present in {} of {n} images", c.index, c.n_images_present));
            }
            let k = self.config.max_examples.min(c.n_images_present);
            if c.examples.len() != k || c.masks.len() != k || c.example_images.len() != k {
                return bad(format!("concept {}: expected {k} examples", c.index));
            }
            if c.grid.is_some() != (k > 0) {
                return bad(format!("concept {}: grid present iff examples exist", c.index));
            }
        }
        if self.concepts.windows(2).any(|w| by_importance(&w[0], &w[1]) != Ordering::Less) {
            return bad("concepts not sorted by importance, then index".into());
        }
        let any_relevance = self.concepts.iter().any(|c| c.mean_relevance != 0.0);
        let top = self.concepts.first().map_or(0.0, |c| c.importance);
        if any_relevance != (top == 1.0) {
            return bad(format!("top importance {top} inconsistent with relevances"));
        }
        let e = &self.eval_counts;
        if e.scoring.gradient_count != n as u64 || e.scoring.forward_count != 0 {
            return bad(format!("scoring counts {:?} for {n} images", e.scoring));
        }
        if e.extraction.forward_count != (e.extraction_passes * n) as u64 || e.extraction.gradient_count != 0 {
            return bad(format!("extraction counts {:?} for {} passes", e.extraction, e.extraction_passes));
        }
        if self.skipped_images > n as u64 {
            return bad(format!("{} skipped of {n} images", self.skipped_images));
        }
        Ok(())
    }

    /// Per-concept summaries with centroids read back from `out_dir`.
    pub fn records(&self, out_dir: &Path) -> Result<Vec<ConceptRecord>> {
        let (model, _) = load_model(out_dir)?;
        Ok(self
            .concepts
            .iter()
            .map(|c| ConceptRecord {
                concept_index: c.index,
                centroid: model.centroids.centroid(c.centroid_row).to_vec(),
                importance: c.importance,
                n_images_present: c.n_images_present,
                example_refs: c.example_images.clone(),
            })
            .collect())
    }
}

/// Parses and validates a `concepts.json`.
pub fn load_report(path: &Path) -> Result<ConceptReport> {
    let report: ConceptReport = read_json(path)?;
    report.validate()?;
    Ok(report)
}

/// Tiles images row-major into a near-square grid separated by grey gaps.
fn grid(tiles: &[Tensor]) -> Result<Tensor> {
    let (h, w, c) = tiles[0].hwc()?;
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let gh = rows * h + (rows - 1) * GRID_GAP;
    let gw = cols * w + (cols - 1) * GRID_GAP;
    let mut data = vec![GRID_GAP_VALUE; gh * gw * c];
    for (t, tile) in tiles.iter().enumerate() {
        let (oi, oj) = ((t / cols) * (h + GRID_GAP), (t % cols) * (w + GRID_GAP));
        for i in 0..h {
            let dst = ((oi + i) * gw + oj) * c;
            data[dst..dst + w * c].copy_from_slice(&tile.data()[i * w * c..(i + 1) * w * c]);
        }
    }
    Tensor::new(vec![gh, gw, c], data)
}

fn rel(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

/// Builds `concepts.json` and the example PNGs from the extraction and
/// scoring artifacts in `out_dir`.
pub fn generate_report(out_dir: &Path) -> Result<ConceptReport> {
    let art = Artifacts::new(out_dir);
    let (run, record) = load_run(out_dir)?;
    let (model, sidecar) = load_model(out_dir)?;
    let scores: ScoreRecord = read_json(&art.scores())?;
    let n_c = model.n_c();
    if scores.report.n_c != n_c {
        return Err(Error::Dimension { expected: n_c, got: scores.report.n_c });
    }
    let index = ingest_dataset(&run.data_dir)?;
    if (0..index.len()).map(|i| index.image_id(i)).ne(record.image_ids.iter().cloned()) {
        return Err(Error::Dataset {
            path: run.data_dir.clone(),
            msg: "dataset contents changed since extraction".into(),
        });
    }
    let labels: Vec<LabelMap> = load_labels(out_dir, &record.image_ids)?;
    let areas: Vec<Vec<usize>> = labels.iter().map(|l| l.areas(n_c)).collect();
    let cfg = &run.extraction;

    let concepts_dir = Path::new("concepts");
    let _ = std::fs::remove_dir_all(out_dir.join(concepts_dir));
    let mut concepts = (0..n_c)
        .into_par_iter()
        .map(|j| {
            let mut ranked: Vec<(usize, usize)> =
                areas.iter().enumerate().map(|(i, a)| (i, a[j])).filter(|&(_, a)| a > 0).collect();
            let present = ranked.len();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(cfg.max_examples);

            let dir = concepts_dir.join(format!("c{j:02}"));
            if !ranked.is_empty() {
                create_dir(&out_dir.join(&dir))?;
            }
            let (mut examples, mut masks, mut tiles) = (vec![], vec![], vec![]);
            for (r, &(i, _)) in ranked.iter().enumerate() {
                let img = index.load(i, Some(sidecar.resolution))?;
                let mask = labels[i].mask::<f32>(j);
                let rendered = build_example(&img, &mask, cfg.lambda)?;
                let ex = dir.join(format!("example_{r:02}.png"));
                let mk = dir.join(format!("mask_{r:02}.png"));
                save_png(&rendered, &out_dir.join(&ex))?;
                let bits: Vec<bool> = labels[i].labels.iter().map(|&l| l as usize == j).collect();
                save_mask_png(&bits, sidecar.resolution, &out_dir.join(&mk))?;
                examples.push(rel(&ex));
                masks.push(rel(&mk));
                tiles.push(rendered);
            }
            let grid_path = if tiles.is_empty() {
                None
            } else {
                let g = dir.join("grid.png");
                save_png(&grid(&tiles)?, &out_dir.join(&g))?;
                Some(rel(&g))
            };
            Ok(ConceptEntry {
                index: j,
                importance: scores.report.importance[j],
                mean_relevance: scores.report.mean_relevance[j],
                n_images_present: present,
                centroid_file: rel(art.centroids().strip_prefix(out_dir).expect("inside out dir")),
                centroid_row: j,
                examples,
                example_images: ranked.iter().map(|&(i, _)| record.image_ids[i].clone()).collect(),
                masks,
                grid: grid_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    concepts.sort_by(by_importance);

    let report = ConceptReport {
        config: ReportConfig {
            data_dir: run.data_dir.clone(),
            runner: run.runner.clone(),
            layers: cfg.layers.clone(),
            n_c,
            batch_size: cfg.batch_size,
            lambda: cfg.lambda,
            epochs: cfg.epochs,
            seed: cfg.seed,
            standardize: cfg.standardize,
            resolution: sidecar.resolution,
            max_examples: cfg.max_examples,
            input_normalization: record.input_normalization.clone(),
        },
        classes: record.classes.clone(),
        concepts,
        skipped_images: scores.report.skipped,
        eval_counts: EvalCounts {
            n_images: record.image_ids.len(),
            extraction_passes: record.passes,
            extraction: record.counts,
            scoring: scores.counts,
        },
    };
    report.validate()?;
    write_json(&report, &art.report())?;
    Ok(report)
}
