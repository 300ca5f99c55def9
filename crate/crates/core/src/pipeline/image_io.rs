//! PNG reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Decodes any 8-bit PNG to an `H x W x 3` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel tensor as an 8-bit PNG, `clamp(round(255 v))`.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = t.hwc()?;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Shape(format!("cannot write {c}-channel tensor as PNG"))),
    };
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    write_png(path, (h, w), color, png::BitDepth::Eight, &bytes)
}

/// Writes a binary mask as a 1-bit grayscale PNG (white = inside).
pub fn save_mask_png(mask: &[bool], (h, w): (usize, usize), path: &Path) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask of {} pixels is not {h}x{w}", mask.len())));
    }
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (i, j) = (p / w, p % w);
        packed[i * stride + j / 8] |= 0x80 >> (j % 8);
    }
    write_png(path, (h, w), png::ColorType::Grayscale, png::BitDepth::One, &packed)
}

/// Reads a mask PNG of any depth; nonzero pixels are inside.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|v| v > 0).collect()))
}

fn write_png(
    path: &Path,
    (h, w): (usize, usize),
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}
