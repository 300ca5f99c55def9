//! Concept masks, example rendering and localization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::CentroidSet;
use crate::error::{Error, Result};
use crate::lad::{assemble_descriptors, ActivationSet, DescriptorField, LayerLayout, Standardization};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary `H x W x 1` localization of one concept in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptMask<T = f32> {
    pub mask: Tensor<T>,
    pub concept_index: usize,
    pub image_id: String,
}

impl<T: Scalar> ConceptMask<T> {
    /// Number of pixels inside the mask.
    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > T::zero()).count()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let s = self.mask.shape();
        (s[0], s[1])
    }

    pub fn is_binary(&self) -> bool {
        self.mask.data().iter().all(|&v| v == T::zero() || v == T::one())
    }
}

/// Nearest-centroid label of every pixel of one image.
///
/// This is the compact form of the full set of per-concept masks: the masks
/// are its indicator functions, so they partition the grid by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub image_id: String,
}

impl LabelMap {
    pub fn area(&self, concept: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == concept).count()
    }

    pub fn areas(&self, n_c: usize) -> Vec<usize> {
        let mut out = vec![0; n_c];
        for &l in &self.labels {
            out[l as usize] += 1;
        }
        out
    }

    pub fn mask<T: Scalar>(&self, concept: usize) -> ConceptMask<T> {
        let data = self.labels.iter().map(|&l| if l as usize == concept { T::one() } else { T::zero() }).collect();
        ConceptMask {
            mask: Tensor::from_parts_unchecked(vec![self.height, self.width, 1], data),
            concept_index: concept,
            image_id: self.image_id.clone(),
        }
    }

    pub fn masks<T: Scalar>(&self, n_c: usize) -> Vec<ConceptMask<T>> {
        (0..n_c).map(|j| self.mask(j)).collect()
    }

    /// Stored as an `H x W x 1` tensor of label values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts_unchecked(vec![self.height, self.width, 1], self.labels.iter().map(|&l| l as f32).collect())
    }

    pub fn from_tensor(t: &Tensor<f32>, image_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        if c != 1 {
            return Err(Error::Shape(format!("label map must have one channel, got {c}")));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < (1u32 << 24) as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::invalid(format!("invalid label value {v}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { height: h, width: w, labels, image_id: image_id.into() })
    }
}

/// Labels every pixel of `field` with its nearest centroid.
pub fn compute_labels<T: Scalar>(field: &DescriptorField<T>, centroids: &CentroidSet<T>) -> Result<LabelMap> {
    let d = field.dim();
    centroids.check_dim(d)?;
    let (h, w) = field.resolution();
    let labels = field.field.data().par_chunks_exact(d).map(|px| centroids.nearest(px).0 as u32).collect();
    Ok(LabelMap { height: h, width: w, labels, image_id: field.image_id.clone() })
}

/// One mask per concept; pixel `(a, b)` is set in mask `j` iff its descriptor
/// is nearest to centroid `j`.
pub fn compute_masks<T: Scalar>(field: &DescriptorField<T>, centroids: &CentroidSet<T>) -> Result<Vec<ConceptMask<T>>> {
    Ok(compute_labels(field, centroids)?.masks(centroids.n_c()))
}

/// `(1 - lambda) * (m * x) + lambda * x`: full value inside the mask, scaled by
/// `lambda` outside. The single-channel mask is broadcast over image channels.
pub fn build_example<T: Scalar>(image: &Tensor<T>, mask: &ConceptMask<T>, lambda: T) -> Result<Tensor<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::invalid(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let (h, w, c) = image.hwc()?;
    let (mh, mw, mc) = mask.mask.hwc()?;
    if (mh, mw, mc) != (h, w, 1) {
        return Err(Error::Shape(format!("mask {mh}x{mw}x{mc} does not align with image {h}x{w}x{c}")));
    }
    let keep = T::one() - lambda;
    let mut out = Vec::with_capacity(image.len());
    for (px, &m) in image.pixels().zip(mask.mask.data()) {
        // Binary masks take the exact endpoints of the blend.
        out.extend(px.iter().map(|&x| {
            if m == T::one() {
                x
            } else if m == T::zero() {
                lambda * x
            } else {
                keep * (m * x) + lambda * x
            }
        }));
    }
    Tensor::new(vec![h, w, c], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedExample<T = f32> {
    pub image_id: String,
    pub area: usize,
    pub image: Tensor<T>,
}

/// Ranks images by mask area (descending, corpus order on ties) and renders
/// the top `max_examples` that contain the concept at all.
pub fn build_example_set<T: Scalar>(
    corpus: &[(&Tensor<T>, &ConceptMask<T>)],
    lambda: T,
    max_examples: usize,
) -> Result<Vec<RenderedExample<T>>> {
    if corpus.is_empty() {
        return Err(Error::invalid("example set needs a nonempty corpus"));
    }
    let mut ranked: Vec<(usize, usize)> =
        corpus.iter().enumerate().map(|(i, (_, m))| (i, m.area())).filter(|&(_, a)| a > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(max_examples)
        .map(|(i, area)| {
            let (img, m) = corpus[i];
            Ok(RenderedExample { image_id: m.image_id.clone(), area, image: build_example(img, m, lambda)? })
        })
        .collect()
}

/// Everything needed to map new activations onto extracted concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModel<T = f32> {
    pub centroids: CentroidSet<T>,
    pub layout: LayerLayout,
    pub standardization: Option<Standardization<T>>,
}

impl<T: Scalar> ConceptModel<T> {
    pub fn new(
        centroids: CentroidSet<T>,
        layout: LayerLayout,
        standardization: Option<Standardization<T>>,
    ) -> Result<Self> {
        let d = layout.total_channels();
        centroids.check_dim(d)?;
        if let Some(st) = &standardization {
            if st.len() != d {
                return Err(Error::Dimension { expected: d, got: st.len() });
            }
        }
        Ok(Self { centroids, layout, standardization })
    }

    pub fn n_c(&self) -> usize {
        self.centroids.n_c()
    }

    pub fn descriptors(&self, acts: &ActivationSet<T>) -> Result<DescriptorField<T>> {
        if let Some(diff) = self.layout.diff(&acts.layout()) {
            return Err(Error::LayerConfig(diff));
        }
        assemble_descriptors(acts, self.standardization.as_ref())
    }

    pub fn labels(&self, acts: &ActivationSet<T>) -> Result<LabelMap> {
        compute_labels(&self.descriptors(acts)?, &self.centroids)
    }
}

/// Mask of one concept in a new image.
pub fn localize<T: Scalar>(
    acts: &ActivationSet<T>,
    model: &ConceptModel<T>,
    concept_index: usize,
) -> Result<ConceptMask<T>> {
    if concept_index >= model.n_c() {
        return Err(Error::invalid(format!("concept {concept_index} out of range (n_c = {})", model.n_c())));
    }
    Ok(model.labels(acts)?.mask(concept_index))
}

/// Per-concept summary: centroid, importance and example references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_index: usize,
    pub centroid: Vec<f32>,
    pub importance: f64,
    pub n_images_present: usize,
    pub example_refs: Vec<String>,
}

/// Intersection over union of two equally sized boolean masks; 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(h: usize, w: usize, rows: Vec<Vec<f32>>) -> DescriptorField {
        let d = rows[0].len();
        DescriptorField { field: Tensor::new(vec![h, w, d], rows.concat()).unwrap(), image_id: "f".into() }
    }

    fn centroids() -> CentroidSet {
        CentroidSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn uniform_field_selects_single_concept() {
        let f = field(2, 3, vec![vec![0.0, 1.0]; 6]);
        let masks = compute_masks(&f, &centroids()).unwrap();
        assert_eq!(masks.len(), 3);
        assert_eq!(masks[2].area(), 6);
        assert_eq!(masks[0].area() + masks[1].area(), 0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let f = field(1, 1, vec![vec![0.0, 1.0, 2.0]]);
        assert!(compute_masks(&f, &centroids()).is_err());
    }

    #[test]
    fn example_endpoints_and_hand_values() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.8f32; 6]).unwrap();
        let mask = ConceptMask {
            mask: Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap(),
            concept_index: 0,
            image_id: "i".into(),
        };
        let out = build_example(&img, &mask, 0.3).unwrap();
        for k in 0..3 {
            assert!((out.at(0, 0, k) - 0.8).abs() < 1e-7);
            assert!((out.at(0, 1, k) - 0.24).abs() < 1e-7);
        }
        assert_eq!(build_example(&img, &mask, 1.0).unwrap(), img);
        let ones = ConceptMask { mask: Tensor::filled(vec![1, 2, 1], 1.0).unwrap(), ..mask.clone() };
        assert_eq!(build_example(&img, &ones, 0.0).unwrap(), img);
        let zeros = ConceptMask { mask: Tensor::zeros(vec![1, 2, 1]).unwrap(), ..mask.clone() };
        assert!(build_example(&img, &zeros, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(build_example(&img, &mask, 1.5).is_err());
        assert!(build_example(&img, &mask, -0.1).is_err());
        assert!(build_example(&img, &mask, f32::NAN).is_err());
    }

    #[test]
    fn example_set_ranks_by_area() {
        let img = Tensor::filled(vec![2, 2, 3], 0.5f32).unwrap();
        let mk = |bits: [f32; 4], id: &str| ConceptMask {
            mask: Tensor::new(vec![2, 2, 1], bits.to_vec()).unwrap(),
            concept_index: 0,
            image_id: id.into(),
        };
        let masks = [mk([1.0, 0.0, 0.0, 0.0], "a"), mk([1.0, 1.0, 1.0, 0.0], "b"), mk([0.0; 4], "c")];
        let corpus: Vec<_> = masks.iter().map(|m| (&img, m)).collect();
        let all = build_example_set(&corpus, 0.3, 10).unwrap();
        assert_eq!(all.iter().map(|e| e.image_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        let top = build_example_set(&corpus, 0.3, 1).unwrap();
        assert_eq!(top[0].image_id, "b");
        let absent = [mk([0.0; 4], "x")];
        let corpus: Vec<_> = absent.iter().map(|m| (&img, m)).collect();
        assert!(build_example_set(&corpus, 0.3, 5).unwrap().is_empty());
    }

    #[test]
    fn localize_rejects_layer_mismatch_and_bad_index() {
        let model =
            ConceptModel::new(centroids(), LayerLayout { ids: vec!["a".into()], channels: vec![2] }, None).unwrap();
        let acts = ActivationSet::new(vec![("b".into(), Tensor::zeros(vec![2, 2, 2]).unwrap())], "x", (2, 2)).unwrap();
        match localize(&acts, &model, 0) {
            Err(Error::LayerConfig(msg)) => assert!(msg.contains("a:2") && msg.contains("b:2")),
            other => panic!("unexpected {other:?}"),
        }
        let ok = ActivationSet::new(vec![("a".into(), Tensor::zeros(vec![2, 2, 2]).unwrap())], "x", (2, 2)).unwrap();
        assert_eq!(localize(&ok, &model, 0).unwrap().area(), 4);
        assert!(localize(&ok, &model, 3).is_err());
    }

    #[test]
    fn label_map_tensor_round_trip() {
        let lm = LabelMap { height: 2, width: 2, labels: vec![0, 3, 2, 1], image_id: "q".into() };
        assert_eq!(LabelMap::from_tensor(&lm.to_tensor(), "q").unwrap(), lm);
        assert!(LabelMap::from_tensor(&Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap(), "q").is_err());
    }

    #[test]
    fn iou_basics() {
        assert_eq!(iou(&[true, false], &[true, false]), 1.0);
        assert_eq!(iou(&[true, true], &[true, false]), 0.5);
        assert_eq!(iou(&[false], &[false]), 0.0);
    }

    proptest! {
        #[test]
        fn masks_partition_and_match_brute_force(
            px in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 2), 12),
            cents in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 2), 1..6),
        ) {
            let f = field(3, 4, px.clone());
            let c = CentroidSet::from_rows(&cents).unwrap();
            let masks = compute_masks(&f, &c).unwrap();
            for (p, v) in px.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f32::INFINITY;
                for (j, cj) in cents.iter().enumerate() {
                    let d = (v[0] - cj[0]).powi(2) + (v[1] - cj[1]).powi(2);
                    if d < best_d { best = j; best_d = d; }
                }
                let total: f32 = masks.iter().map(|m| m.mask.data()[p]).sum();
                prop_assert_eq!(total, 1.0);
                prop_assert_eq!(masks[best].mask.data()[p], 1.0);
                prop_assert!(masks.iter().all(|m| m.is_binary()));
            }
        }

        #[test]
        fn example_monotone_in_lambda(
            vals in prop::collection::vec(0.0f32..1.0, 12),
            bits in prop::collection::vec(any::<bool>(), 4),
            l1 in 0.0f32..1.0, l2 in 0.0f32..1.0,
        ) {
            let img = Tensor::new(vec![2, 2, 3], vals).unwrap();
            let mask = ConceptMask {
                mask: Tensor::new(vec![2, 2, 1], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap(),
                concept_index: 0,
                image_id: "m".into(),
            };
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let a = build_example(&img, &mask, lo).unwrap();
            let b = build_example(&img, &mask, hi).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(x <= y);
            }
        }
    }
}
