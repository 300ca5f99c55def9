//! Local aggregated descriptors: per-pixel vectors built by upscaling a set
//! of layer activations to the input resolution and stacking their channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, StreamingStats, Tensor};

/// Activations of the configured layers for one image, in configured order.
#[derive(Clone, Debug)]
pub struct ActivationSet<T = f32> {
    layers: Vec<(String, Tensor<T>)>,
    source_image_id: String,
    input_resolution: (usize, usize),
}

/// Layer ids and their channel counts, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub ids: Vec<String>,
    pub channels: Vec<usize>,
}

impl LayerLayout {
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Human-readable description of how `other` differs from `self`.
    pub fn diff(&self, other: &LayerLayout) -> Option<String> {
        if self == other {
            return None;
        }
        let fmt = |l: &LayerLayout| {
            l.ids.iter().zip(&l.channels).map(|(id, c)| format!("{id}:{c}")).collect::<Vec<_>>().join(",")
        };
        Some(format!("expected [{}], got [{}]", fmt(self), fmt(other)))
    }
}

impl<T: Scalar> ActivationSet<T> {
    pub fn new(
        layers: Vec<(String, Tensor<T>)>,
        source_image_id: impl Into<String>,
        input_resolution: (usize, usize),
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("activation set has no layers"));
        }
        let (ih, iw) = input_resolution;
        for (i, (id, act)) in layers.iter().enumerate() {
            if layers[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::invalid(format!("duplicate layer id {id:?}")));
            }
            let (h, w, _) = act.hwc()?;
            if h > ih || w > iw {
                return Err(Error::Shape(format!("layer {id:?} is {h}x{w}, larger than input {ih}x{iw}")));
            }
        }
        Ok(Self { layers, source_image_id: source_image_id.into(), input_resolution })
    }

    pub fn layers(&self) -> &[(String, Tensor<T>)] {
        &self.layers
    }

    pub fn source_image_id(&self) -> &str {
        &self.source_image_id
    }

    pub fn input_resolution(&self) -> (usize, usize) {
        self.input_resolution
    }

    pub fn layout(&self) -> LayerLayout {
        LayerLayout {
            ids: self.layers.iter().map(|(id, _)| id.clone()).collect(),
            channels: self.layers.iter().map(|(_, t)| *t.shape().last().unwrap_or(&0)).collect(),
        }
    }
}

/// Per-channel affine standardization `(v - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization<T = f32> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Standardization<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Dimension { expected: mean.len(), got: std.len() });
        }
        if let Some(k) = std.iter().position(|s| *s <= T::zero() || !s.is_finite()) {
            return Err(Error::invalid(format!("std of channel {k} must be > 0")));
        }
        Ok(Self { mean, std })
    }

    /// Builds standardization from corpus statistics. Channels whose spread is
    /// below `min_std` are constant over the corpus and get unit std, so they
    /// map to zero instead of dividing by zero.
    pub fn from_stats<S: Scalar>(stats: &StreamingStats<S>, min_std: f64) -> Result<Self> {
        let std = stats.std_dev().ok_or_else(|| Error::invalid("standardization statistics are empty"))?;
        let mean = stats.mean().iter().map(|m| T::from_f64_lossy(m.to_f64_lossy())).collect();
        let std = std
            .into_iter()
            .map(|s| {
                let s = s.to_f64_lossy();
                T::from_f64_lossy(if s < min_std { 1.0 } else { s })
            })
            .collect();
        Self::new(mean, std)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Per-pixel descriptor tensor `H x W x D` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField<T = f32> {
    pub field: Tensor<T>,
    pub image_id: String,
}

impl<T: Scalar> DescriptorField<T> {
    pub fn dim(&self) -> usize {
        *self.field.shape().last().expect("rank-3 field")
    }

    pub fn resolution(&self) -> (usize, usize) {
        let s = self.field.shape();
        (s[0], s[1])
    }
}

/// Upscales every activation to the input resolution, concatenates channels in
/// layer order, then optionally standardizes each channel.
pub fn assemble_descriptors<T: Scalar>(
    acts: &ActivationSet<T>,
    standardize: Option<&Standardization<T>>,
) -> Result<DescriptorField<T>> {
    let target = acts.input_resolution();
    let upscaled = acts.layers().iter().map(|(_, a)| a.bilinear_upscale(target)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = upscaled.iter().collect();
    let mut field = concat_channels(&refs)?;

    if let Some(st) = standardize {
        let d = *field.shape().last().expect("rank-3");
        if st.len() != d {
            return Err(Error::Dimension { expected: d, got: st.len() });
        }
        let inv: Vec<T> = st.std.iter().map(|&s| T::one() / s).collect();
        let shape = field.shape().to_vec();
        let mut data = field.into_data();
        for px in data.chunks_exact_mut(d) {
            for ((v, &m), &is) in px.iter_mut().zip(&st.mean).zip(&inv) {
                *v = (*v - m) * is;
            }
        }
        field = Tensor::new(shape, data)?;
    }

    Ok(DescriptorField { field, image_id: acts.source_image_id().to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize, offset: f32) -> Tensor {
        Tensor::from_fn_hwc((h, w, c), |i, j, k| offset + (i * 7 + j * 3 + k) as f32 * 0.1).unwrap()
    }

    #[test]
    fn single_full_resolution_layer_is_identity() {
        let a = ramp(4, 6, 3, 0.0);
        let acts = ActivationSet::new(vec![("a1".into(), a.clone())], "img", (4, 6)).unwrap();
        let d = assemble_descriptors(&acts, None).unwrap();
        assert_eq!(d.field, a);
        assert_eq!(d.image_id, "img");
    }

    #[test]
    fn two_layers_concatenate_in_order() {
        let a = ramp(4, 4, 2, 0.0);
        let b = ramp(2, 2, 3, 10.0);
        let acts = ActivationSet::new(vec![("a".into(), a.clone()), ("b".into(), b.clone())], "x", (4, 4)).unwrap();
        let d = assemble_descriptors(&acts, None).unwrap();
        assert_eq!(d.field.shape(), &[4, 4, 5]);
        let parts = d.field.split_channels(&[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b.bilinear_upscale((4, 4)).unwrap());
    }

    #[test]
    fn standardization_with_corpus_stats() {
        let corpus: Vec<ActivationSet> = (0..3)
            .map(|n| {
                let a = ramp(4, 4, 2, n as f32);
                let b = Tensor::from_fn_hwc((2, 2, 1), |i, j, _| (n * 5 + i * 2 + j) as f32 * 3.0).unwrap();
                ActivationSet::new(vec![("a".into(), a), ("b".into(), b)], format!("{n}"), (4, 4)).unwrap()
            })
            .collect();

        // Two-pass oracle over every pixel of every raw field.
        let raws: Vec<_> = corpus.iter().map(|a| assemble_descriptors(a, None).unwrap()).collect();
        let pixels: Vec<Vec<f64>> =
            raws.iter().flat_map(|f| f.field.pixels().map(|p| p.iter().map(|&v| v as f64).collect())).collect();
        let n = pixels.len() as f64;
        let mean: Vec<f64> = (0..3).map(|k| pixels.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        let std: Vec<f64> =
            (0..3).map(|k| (pixels.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt()).collect();

        let mut stats = StreamingStats::<f64>::new(3);
        for f in &raws {
            stats.push_pixels(&f.field).unwrap();
        }
        let stream_std = stats.std_dev().unwrap();
        for k in 0..3 {
            assert!((stats.mean()[k] - mean[k]).abs() < 1e-9);
            assert!((stream_std[k] - std[k]).abs() < 1e-9);
        }
        let st = Standardization::<f32>::from_stats(&stats, 1e-12).unwrap();

        let mut check = StreamingStats::<f64>::new(3);
        for a in &corpus {
            check.push_pixels(&assemble_descriptors(a, Some(&st)).unwrap().field).unwrap();
        }
        for (m, s) in check.mean().iter().zip(check.std_dev().unwrap()) {
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((s - 1.0).abs() < 1e-3, "std {s}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ActivationSet::<f32>::new(vec![], "x", (2, 2)).is_err());
        let a = ramp(2, 2, 1, 0.0);
        assert!(ActivationSet::new(vec![("a".into(), a.clone()), ("a".into(), a.clone())], "x", (2, 2)).is_err());
        assert!(ActivationSet::new(vec![("a".into(), ramp(3, 2, 1, 0.0))], "x", (2, 2)).is_err());
        assert!(Standardization::new(vec![0.0f32], vec![0.0]).is_err());
        assert!(Standardization::new(vec![0.0f32], vec![-1.0]).is_err());
        let acts = ActivationSet::new(vec![("a".into(), a)], "x", (2, 2)).unwrap();
        let st = Standardization::new(vec![0.0f32; 2], vec![1.0; 2]).unwrap();
        assert!(assemble_descriptors(&acts, Some(&st)).is_err());
    }

    #[test]
    fn layout_diff_names_both_sides() {
        let a = LayerLayout { ids: vec!["a1".into(), "a2".into()], channels: vec![3, 3] };
        let b = LayerLayout { ids: vec!["a1".into()], channels: vec![3] };
        assert_eq!(a.diff(&a), None);
        assert_eq!(a.diff(&b).unwrap(), "expected [a1:3,a2:3], got [a1:3]");
    }
}
