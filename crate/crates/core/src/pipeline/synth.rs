//! Synthetic planted-cue datasets: one coloured cue per image on a black
//! background, with ground-truth cue masks and a manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! images/<class>/NNNN.png   dataset root for ingestion
//! masks/<class>/NNNN.png    1-bit ground-truth cue masks
//! manifest.json
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::{save_mask_png, save_png};
use super::{create_dir, write_json};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Classes 0 and 1 share a two-bar cue of the same colour that differs
    /// only in the gap between the bars.
    pub entangled: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 3, count: 40, size: 128, seed: 0, entangled: false }
    }
}

const COLORS: [(&str, [f32; 3]); 3] = [("red", [1.0, 0.0, 0.0]), ("green", [0.0, 1.0, 0.0]), ("blue", [0.0, 0.0, 1.0])];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueShape {
    Square,
    Disk,
    Stripes,
    /// Two vertical bars `gap` pixels apart.
    Bars {
        gap: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cue {
    pub class_name: String,
    pub shape: CueShape,
    pub color: String,
    pub rgb: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthImage {
    /// Relative to the output directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub class: usize,
    /// `[top, left, bottom, right)` of the cue's bounding box.
    pub bbox: [usize; 4],
    pub cue_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub cues: Vec<Cue>,
    pub images: Vec<SynthImage>,
}

impl SynthManifest {
    pub fn load(out_dir: &Path) -> Result<Self> {
        super::read_json(&out_dir.join("manifest.json"))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.cues.iter().map(|c| c.class_name.clone()).collect()
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=9).contains(&self.classes) {
            return Err(Error::invalid(format!("classes must be in 2..=9, got {}", self.classes)));
        }
        if self.count < 4 {
            return Err(Error::invalid(format!("count must be >= 4 per class, got {}", self.count)));
        }
        if self.size < 32 {
            return Err(Error::invalid(format!("size must be >= 32, got {}", self.size)));
        }
        Ok(())
    }

    fn thickness(&self) -> usize {
        (self.size / 32).max(2)
    }

    /// Cue of each class: shape cycles square, disk, stripes and the colour
    /// shifts every three classes so no two classes share a cue.
    pub fn cues(&self) -> Vec<Cue> {
        (0..self.classes)
            .map(|k| {
                let (color, rgb) = if self.entangled && k < 2 { COLORS[0] } else { COLORS[(k + k / 3) % 3] };
                let shape = match (self.entangled, k) {
                    (true, 0) => CueShape::Bars { gap: self.thickness() },
                    (true, 1) => CueShape::Bars { gap: 2 * self.thickness() },
                    _ => [CueShape::Square, CueShape::Disk, CueShape::Stripes][k % 3],
                };
                let shape_name = match shape {
                    CueShape::Square => "square".to_string(),
                    CueShape::Disk => "disk".to_string(),
                    CueShape::Stripes => "stripes".to_string(),
                    CueShape::Bars { gap } => format!("bars_gap{gap}"),
                };
                Cue { class_name: format!("{k:02}_{color}_{shape_name}"), shape, color: color.to_string(), rgb }
            })
            .collect()
    }

    /// Bounding box `(height, width)` of a cue.
    fn extent(&self, shape: CueShape) -> (usize, usize) {
        let a = self.size / 4;
        match shape {
            CueShape::Square | CueShape::Stripes => (a, a),
            CueShape::Disk => (2 * (self.size / 8), 2 * (self.size / 8)),
            CueShape::Bars { gap } => (a, 2 * self.thickness() + gap),
        }
    }

    /// Whether offset `(i, j)` inside the bounding box belongs to the cue.
    fn inside(&self, shape: CueShape, i: usize, j: usize) -> bool {
        let t = self.thickness();
        match shape {
            CueShape::Square => true,
            CueShape::Disk => {
                let r = (self.size / 8) as f64;
                let (di, dj) = (i as f64 + 0.5 - r, j as f64 + 0.5 - r);
                di * di + dj * dj <= r * r
            }
            CueShape::Stripes => (i / t).is_multiple_of(2),
            CueShape::Bars { gap } => j < t || j >= t + gap,
        }
    }
}

/// Renders the dataset described by `spec` into `out_dir`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthManifest> {
    spec.validate()?;
    let cues = spec.cues();
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.classes * spec.count);

    for (k, cue) in cues.iter().enumerate() {
        let img_dir = Path::new("images").join(&cue.class_name);
        let mask_dir = Path::new("masks").join(&cue.class_name);
        create_dir(&out_dir.join(&img_dir))?;
        create_dir(&out_dir.join(&mask_dir))?;
        let (bh, bw) = spec.extent(cue.shape);
        for n in 0..spec.count {
            let top = rng.random_range(0..=s - bh);
            let left = rng.random_range(0..=s - bw);
            let mut mask = vec![false; s * s];
            for i in 0..bh {
                for j in 0..bw {
                    mask[(top + i) * s + left + j] = spec.inside(cue.shape, i, j);
                }
            }
            let img = Tensor::from_fn_hwc((s, s, 3), |i, j, c| if mask[i * s + j] { cue.rgb[c] } else { 0.0 })?;
            let name = format!("{n:04}.png");
            save_png(&img, &out_dir.join(&img_dir).join(&name))?;
            save_mask_png(&mask, (s, s), &out_dir.join(&mask_dir).join(&name))?;
            images.push(SynthImage {
                image: img_dir.join(&name),
                mask: mask_dir.join(&name),
                class: k,
                bbox: [top, left, top + bh, left + bw],
                cue_pixels: mask.iter().filter(|&&m| m).count(),
            });
        }
    }

    let manifest = SynthManifest { spec: spec.clone(), cues, images };
    write_json(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
