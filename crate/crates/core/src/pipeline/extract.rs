//! Extraction: standardization statistics, streaming clustering and per-image
//! label maps.

use std::borrow::Cow;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetIndex;
use super::{create_dir, read_json, write_json, ExtractionConfig, RunConfig};
use crate::clustering::{fit_stream, BatchSource, CentroidSet, DescriptorBatch, FitOptions};
use crate::concepts::{localize, ConceptMask, ConceptModel, LabelMap};
use crate::error::{Error, Result};
use crate::lad::{assemble_descriptors, ActivationSet, LayerLayout, Standardization};
use crate::ltns;
use crate::modelrt::{check_layers, AuditedRunner, EvalCounter, InputNormalization, ModelRunner, RunnerError};
use crate::tensor::{StreamingStats, Tensor};

/// Channels whose corpus std falls below this are treated as constant.
const MIN_STD: f64 = 1e-6;

/// Descriptor batches kept in memory between epochs up to this many bytes;
/// beyond it they are rebuilt from the activation cache every epoch.
const DESCRIPTOR_MEMORY: usize = 512 << 20;

/// Paths of every artifact in an output directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub out_dir: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.out_dir.join("config.json")
    }

    pub fn centroids(&self) -> PathBuf {
        self.out_dir.join("centroids.ltns")
    }

    pub fn centroids_sidecar(&self) -> PathBuf {
        self.out_dir.join("centroids.json")
    }

    pub fn extraction(&self) -> PathBuf {
        self.out_dir.join("extraction.json")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.out_dir.join("masks")
    }

    pub fn mask(&self, i: usize) -> PathBuf {
        self.masks_dir().join(format!("{i:06}.ltns"))
    }

    pub fn scores(&self) -> PathBuf {
        self.out_dir.join("scores.json")
    }

    pub fn report(&self) -> PathBuf {
        self.out_dir.join("concepts.json")
    }

    fn cache_dir(&self) -> PathBuf {
        self.out_dir.join("cache")
    }

    fn cached(&self, image: usize, layer: usize) -> PathBuf {
        self.cache_dir().join(format!("{image:06}_{layer}.ltns"))
    }
}

/// `centroids.json`, the sidecar of `centroids.ltns`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidSidecar {
    pub n_c: usize,
    pub dim: usize,
    pub seed: u64,
    pub epochs: usize,
    pub layout: LayerLayout,
    pub standardization: Option<Standardization>,
    pub resolution: (usize, usize),
    /// Empty-cluster re-seeds per epoch.
    pub reseeds: Vec<usize>,
}

/// `extraction.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionRecord {
    pub classes: Vec<String>,
    pub image_ids: Vec<String>,
    pub resolution: (usize, usize),
    pub passes: usize,
    pub counts: EvalCounter,
    pub input_normalization: Option<InputNormalization>,
}

#[derive(Clone, Debug)]
pub struct ExtractionOutcome {
    pub model: ConceptModel,
    pub labels: Vec<LabelMap>,
    pub record: ExtractionRecord,
}

/// Requests activations for `images` and wraps them with their ids.
fn fetch(
    runner: &mut dyn ModelRunner,
    images: &[Tensor],
    ids: &[String],
    layers: &[String],
    resolution: (usize, usize),
) -> Result<Vec<ActivationSet>> {
    let acts = runner.activations(images, layers)?;
    if acts.len() != images.len() {
        return Err(
            RunnerError::MalformedReply(format!("{} activation sets for {} images", acts.len(), images.len())).into()
        );
    }
    acts.into_iter()
        .zip(ids)
        .map(|(layer_acts, id)| {
            let got: Vec<&str> = layer_acts.iter().map(|(l, _)| l.as_str()).collect();
            if got != layers {
                return Err(RunnerError::MalformedReply(format!("layers {got:?}, requested {layers:?}")).into());
            }
            ActivationSet::new(layer_acts, id.clone(), resolution)
        })
        .collect()
}

fn check_layout(expected: &mut Option<LayerLayout>, acts: &ActivationSet) -> Result<()> {
    let layout = acts.layout();
    match expected {
        None => *expected = Some(layout),
        Some(e) => {
            if let Some(diff) = e.diff(&layout) {
                return Err(Error::LayerConfig(format!("image {}: {diff}", acts.source_image_id())));
            }
        }
    }
    Ok(())
}

fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect()
}

/// Replays descriptor batches from the activation cache.
struct CachedBatches<'a> {
    art: &'a Artifacts,
    ranges: Vec<Range<usize>>,
    ids: Vec<String>,
    layout: &'a LayerLayout,
    resolution: (usize, usize),
    standardization: Option<&'a Standardization>,
    memory: Vec<Option<DescriptorBatch>>,
    memory_left: usize,
}

impl CachedBatches<'_> {
    fn load_acts(&self, i: usize) -> Result<ActivationSet> {
        let layers = self
            .layout
            .ids
            .iter()
            .enumerate()
            .map(|(l, id)| Ok((id.clone(), ltns::load(self.art.cached(i, l))?)))
            .collect::<Result<Vec<_>>>()?;
        ActivationSet::new(layers, self.ids[i].clone(), self.resolution)
    }

    fn build(&self, b: usize) -> Result<DescriptorBatch> {
        let fields = self.ranges[b]
            .clone()
            .into_par_iter()
            .map(|i| assemble_descriptors(&self.load_acts(i)?, self.standardization))
            .collect::<Result<Vec<_>>>()?;
        DescriptorBatch::from_fields(&fields)
    }
}

impl BatchSource<f32> for CachedBatches<'_> {
    fn num_batches(&self) -> usize {
        self.ranges.len()
    }

    fn batch(&mut self, index: usize) -> Result<Cow<'_, DescriptorBatch>> {
        if self.memory[index].is_none() {
            let batch = self.build(index)?;
            let bytes = batch.len() * batch.dim() * 4;
            if bytes > self.memory_left {
                return Ok(Cow::Owned(batch));
            }
            self.memory_left -= bytes;
            self.memory[index] = Some(batch);
        }
        Ok(Cow::Borrowed(self.memory[index].as_ref().expect("cached batch")))
    }
}

/// Runs extraction over `index` and writes centroids, sidecars and label maps
/// into `out_dir`. On failure every partial artifact is removed.
pub fn extract_concepts(
    index: &DatasetIndex,
    runner: &mut dyn ModelRunner,
    config: &ExtractionConfig,
    out_dir: &Path,
) -> Result<ExtractionOutcome> {
    let art = Artifacts::new(out_dir);
    let result = extract_inner(index, runner, config, &art);
    let _ = std::fs::remove_dir_all(art.cache_dir());
    if result.is_err() {
        let _ = std::fs::remove_dir_all(art.masks_dir());
        for p in [art.centroids(), art.centroids_sidecar(), art.extraction()] {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn extract_inner(
    index: &DatasetIndex,
    runner: &mut dyn ModelRunner,
    config: &ExtractionConfig,
    art: &Artifacts,
) -> Result<ExtractionOutcome> {
    config.validate()?;
    check_layers(&config.layers, &runner.info().layers)?;
    if runner.info().n_k != index.n_k {
        log::warn!("runner has {} classes, dataset has {}", runner.info().n_k, index.n_k);
    }
    let resolution = match config.resolution {
        Some(r) => r,
        None => index.first_resolution()?,
    };
    let n = index.len();
    let ids: Vec<String> = (0..n).map(|i| index.image_id(i)).collect();
    let ranges = batch_ranges(n, config.batch_size);
    let mut runner = AuditedRunner::new(runner);
    let mut layout = None;

    let standardization = if config.standardize {
        let mut stats: Option<StreamingStats<f64>> = None;
        for (b, r) in ranges.iter().enumerate() {
            let images = index.load_range(r.clone(), Some(resolution))?;
            let acts = fetch(&mut runner, &images, &ids[r.clone()], &config.layers, resolution)?;
            for a in &acts {
                check_layout(&mut layout, a)?;
            }
            let partial = acts
                .par_iter()
                .map(|a| {
                    let f = assemble_descriptors(a, None)?;
                    let mut s = StreamingStats::new(f.dim());
                    s.push_pixels(&f.field)?;
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            for s in partial {
                stats = Some(match stats {
                    None => s,
                    Some(acc) => acc.merge(&s)?,
                });
            }
            log::debug!("statistics pass: batch {}/{}", b + 1, ranges.len());
        }
        let stats = stats.ok_or_else(|| Error::invalid("empty dataset"))?;
        Some(Standardization::from_stats(&stats, MIN_STD)?)
    } else {
        None
    };

    create_dir(&art.cache_dir())?;
    for (b, r) in ranges.iter().enumerate() {
        let images = index.load_range(r.clone(), Some(resolution))?;
        let acts = fetch(&mut runner, &images, &ids[r.clone()], &config.layers, resolution)?;
        for a in &acts {
            check_layout(&mut layout, a)?;
        }
        acts.par_iter().zip(r.clone()).try_for_each(|(a, i)| {
            a.layers()
                .iter()
                .enumerate()
                .try_for_each(|(l, (_, t))| ltns::save(t, art.cached(i, l)).map_err(Error::from))
        })?;
        log::debug!("activation pass: batch {}/{}", b + 1, ranges.len());
    }
    let layout = layout.ok_or_else(|| Error::invalid("empty dataset"))?;

    let passes = if config.standardize { 2 } else { 1 };
    let counts = runner.counter();
    if counts.forward_count != (passes * n) as u64 || counts.gradient_count != 0 {
        return Err(Error::invalid(format!("evaluation audit failed: {counts:?} for {passes} passes over {n} images")));
    }

    let mut source = CachedBatches {
        art,
        ranges: ranges.clone(),
        ids: ids.clone(),
        layout: &layout,
        resolution,
        standardization: standardization.as_ref(),
        memory: vec![None; ranges.len()],
        memory_left: DESCRIPTOR_MEMORY,
    };
    let opts = FitOptions { n_c: config.n_c, seed: config.seed, epochs: config.epochs, ..FitOptions::default() };
    let fit = fit_stream(&mut source, &opts)?;
    drop(source);

    let model = ConceptModel::new(fit.centroids, layout.clone(), standardization.clone())?;
    let source = CachedBatches {
        art,
        ranges: vec![],
        ids: ids.clone(),
        layout: &layout,
        resolution,
        standardization: standardization.as_ref(),
        memory: vec![],
        memory_left: 0,
    };
    create_dir(&art.masks_dir())?;
    let labels = (0..n)
        .into_par_iter()
        .map(|i| {
            let labels = model.labels(&source.load_acts(i)?)?;
            ltns::save(&labels.to_tensor(), art.mask(i))?;
            Ok(labels)
        })
        .collect::<Result<Vec<_>>>()?;

    ltns::save(&model.centroids.to_tensor(), art.centroids())?;
    write_json(
        &CentroidSidecar {
            n_c: model.n_c(),
            dim: model.centroids.dim(),
            seed: config.seed,
            epochs: config.epochs,
            layout,
            standardization,
            resolution,
            reseeds: fit.reseeds,
        },
        &art.centroids_sidecar(),
    )?;
    let record = ExtractionRecord {
        classes: index.classes.clone(),
        image_ids: ids,
        resolution,
        passes,
        counts,
        input_normalization: runner.info().input_normalization.clone(),
    };
    write_json(&record, &art.extraction())?;
    Ok(ExtractionOutcome { model, labels, record })
}

/// Ingests `run.data_dir`, opens the configured runner, records `config.json`
/// and extracts into `out_dir`.
pub fn run_extract(run: &RunConfig, out_dir: &Path) -> Result<ExtractionOutcome> {
    run.extraction.validate()?;
    let index = super::dataset::ingest_dataset(&run.data_dir)?;
    let mut runner = run.runner.open()?;
    create_dir(out_dir)?;
    write_json(run, &Artifacts::new(out_dir).config())?;
    extract_concepts(&index, &mut *runner, &run.extraction, out_dir)
}

/// Loads `centroids.ltns` with its sidecar.
pub fn load_model(out_dir: &Path) -> Result<(ConceptModel, CentroidSidecar)> {
    let art = Artifacts::new(out_dir);
    let sidecar: CentroidSidecar = read_json(&art.centroids_sidecar())?;
    let centroids = CentroidSet::from_tensor(&ltns::load(art.centroids())?)?;
    if (centroids.n_c(), centroids.dim()) != (sidecar.n_c, sidecar.dim) {
        return Err(Error::invalid(format!(
            "centroids.ltns is {}x{}, sidecar says {}x{}",
            centroids.n_c(),
            centroids.dim(),
            sidecar.n_c,
            sidecar.dim
        )));
    }
    let model = ConceptModel::new(centroids, sidecar.layout.clone(), sidecar.standardization.clone())?;
    Ok((model, sidecar))
}

pub(crate) fn load_run(out_dir: &Path) -> Result<(RunConfig, ExtractionRecord)> {
    let art = Artifacts::new(out_dir);
    Ok((read_json(&art.config())?, read_json(&art.extraction())?))
}

pub(crate) fn load_labels(out_dir: &Path, ids: &[String]) -> Result<Vec<LabelMap>> {
    let art = Artifacts::new(out_dir);
    ids.par_iter().enumerate().map(|(i, id)| LabelMap::from_tensor(&ltns::load(art.mask(i))?, id.clone())).collect()
}

/// Localizes concept `concept` in a new image with the model stored in `out_dir`.
pub fn localize_image(
    out_dir: &Path,
    image: &Path,
    concept: usize,
    runner: &mut dyn ModelRunner,
) -> Result<ConceptMask> {
    let (model, sidecar) = load_model(out_dir)?;
    let img = super::image_io::load_image(image)?;
    let (h, w, _) = img.hwc()?;
    if (h, w) != sidecar.resolution {
        let (eh, ew) = sidecar.resolution;
        return Err(Error::Dataset {
            path: image.to_path_buf(),
            msg: format!("image is {h}x{w}, concepts were extracted at {eh}x{ew}"),
        });
    }
    let id = image.display().to_string();
    let acts = fetch(runner, &[img], &[id], &model.layout.ids, sidecar.resolution)?;
    localize(&acts[0], &model, concept)
}
