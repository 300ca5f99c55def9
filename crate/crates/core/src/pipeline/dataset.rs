//! `root/<class>/*.png` datasets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::create_dir;
use super::image_io::{load_image, save_png};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Path relative to the dataset root, `<class>/<file>`.
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub images: Vec<ImageEntry>,
    pub n_k: usize,
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), msg: msg.into() }
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| data_err(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| data_err(dir, e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Indexes `root/<class>/*.png`, ordered by class name then file name.
pub fn ingest_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut classes = Vec::new();
    let mut images = Vec::new();
    for (name, path) in sorted_entries(root)?.into_iter().filter(|(_, p)| p.is_dir()) {
        let class = classes.len();
        let files: Vec<_> = sorted_entries(&path)?.into_iter().filter(|(_, p)| is_png(p)).collect();
        if files.is_empty() {
            return Err(data_err(&path, "class directory holds no PNG images"));
        }
        images.extend(files.into_iter().map(|(file, _)| ImageEntry { path: Path::new(&name).join(file), class }));
        classes.push(name);
    }
    if classes.len() < 2 {
        return Err(data_err(root, format!("need at least 2 class subdirectories, found {}", classes.len())));
    }
    Ok(DatasetIndex { root: root.to_path_buf(), n_k: classes.len(), classes, images })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.root.join(&self.images[i].path)
    }

    /// Stable identifier `<class>/<file>`.
    pub fn image_id(&self, i: usize) -> String {
        self.images[i].path.to_string_lossy().replace('\\', "/")
    }

    /// Decodes image `i`, which must be exactly `resolution` when given.
    pub fn load(&self, i: usize, resolution: Option<(usize, usize)>) -> Result<Tensor> {
        let path = self.path(i);
        let img = load_image(&path)?;
        if let Some((h, w)) = resolution {
            let (ih, iw, _) = img.hwc()?;
            if (ih, iw) != (h, w) {
                let hint = if ih >= h && iw >= w { "; downsize it first with the resize command" } else { "" };
                return Err(data_err(&path, format!("image is {ih}x{iw}, expected {h}x{w}{hint}")));
            }
        }
        Ok(img)
    }

    /// Decodes a contiguous run of images in parallel.
    pub fn load_range(&self, range: std::ops::Range<usize>, resolution: Option<(usize, usize)>) -> Result<Vec<Tensor>> {
        range.into_par_iter().map(|i| self.load(i, resolution)).collect()
    }

    /// Resolution of the first image.
    pub fn first_resolution(&self) -> Result<(usize, usize)> {
        let (h, w, _) = self.load(0, None)?.hwc()?;
        Ok((h, w))
    }
}

/// Writes a copy of the dataset at `src` under `dst`, area-averaged down to
/// `(H, W)`. Images smaller than the target are rejected.
pub fn resize_dataset(src: &Path, dst: &Path, target: (usize, usize)) -> Result<usize> {
    let index = ingest_dataset(src)?;
    for class in &index.classes {
        create_dir(&dst.join(class))?;
    }
    (0..index.len()).into_par_iter().try_for_each(|i| {
        let path = index.path(i);
        let img = index.load(i, None)?;
        let (h, w, _) = img.hwc()?;
        if h < target.0 || w < target.1 {
            return Err(data_err(&path, format!("image is {h}x{w}, smaller than target {}x{}", target.0, target.1)));
        }
        save_png(&img.area_downscale(target)?, &dst.join(&index.images[i].path))
    })?;
    Ok(index.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(root: &Path, rel: &str, h: usize, w: usize, v: f32) {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        save_png(&Tensor::filled(vec![h, w, 3], v).unwrap(), &p).unwrap();
    }

    #[test]
    fn ordering_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        write(r, "b/2.png", 4, 4, 0.0);
        write(r, "b/1.png", 4, 4, 0.0);
        write(r, "a/z.png", 4, 4, 1.0);
        write(r, "a/y.png", 4, 4, 1.0);
        std::fs::write(r.join("a/notes.txt"), "x").unwrap();
        std::fs::write(r.join("README"), "x").unwrap();
        let idx = ingest_dataset(r).unwrap();
        assert_eq!(idx.n_k, 2);
        assert_eq!(idx.classes, ["a", "b"]);
        let ids: Vec<_> = (0..idx.len()).map(|i| idx.image_id(i)).collect();
        assert_eq!(ids, ["a/y.png", "a/z.png", "b/1.png", "b/2.png"]);
        assert_eq!(idx.images[2].class, 1);
        assert_eq!(ingest_dataset(r).unwrap(), idx);
    }

    #[test]
    fn rejections() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        write(r, "a/1.png", 4, 4, 0.0);
        assert!(ingest_dataset(r).is_err());
        std::fs::create_dir_all(r.join("b")).unwrap();
        assert!(ingest_dataset(r).is_err());
        write(r, "b/1.png", 8, 8, 0.0);
        let idx = ingest_dataset(r).unwrap();
        idx.load(0, Some((4, 4))).unwrap();
        let err = idx.load(1, Some((4, 4))).unwrap_err().to_string();
        assert!(err.contains("b/1.png") && err.contains("resize"), "{err}");
        assert!(idx.load(0, Some((8, 8))).is_err());
        std::fs::write(r.join("b/2.png"), b"not a png").unwrap();
        let idx = ingest_dataset(r).unwrap();
        assert!(idx.load(2, None).unwrap_err().to_string().contains("2.png"));
    }

    #[test]
    fn resize_halves_by_area_average() {
        let dir = tempfile::tempdir().unwrap();
        let (src, dst) = (dir.path().join("src"), dir.path().join("dst"));
        write(&src, "a/1.png", 8, 8, 0.2);
        write(&src, "b/1.png", 8, 6, 0.2);
        assert!(resize_dataset(&src, &dst, (4, 4)).is_ok());
        assert!(resize_dataset(&src, &dir.path().join("d2"), (4, 8)).is_err());
        let idx = ingest_dataset(&dst).unwrap();
        let img = idx.load(0, Some((4, 4))).unwrap();
        assert!(img.data().iter().all(|&v| v == (0.2f32 * 255.0).round() / 255.0));
    }
}
