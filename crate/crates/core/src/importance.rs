//! Single-evaluation concept importance.
//!
//! The logit vector `y` is reduced to `g(y) = ||y 1^T - 1 y^T||_F`, the
//! root of all summed squared pairwise logit differences. A concept's
//! relevance in one image is the L1 norm of the input gradient of `g(f(x))`
//! restricted to the concept's mask; importance is the mean relevance over
//! the images that contain the concept, scaled by the largest absolute mean.

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptMask, LabelMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_logits<T: Scalar>(y: &[T]) -> Result<()> {
    if y.len() < 2 {
        return Err(Error::invalid(format!("wrapper needs at least 2 logits, got {}", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    Ok(())
}

/// `sqrt(sum_ij (y_i - y_j)^2)`, evaluated as `sqrt(2 n sum_i (y_i - mean)^2)`.
pub fn wrapper_g<T: Scalar>(y: &[T]) -> Result<T> {
    check_logits(y)?;
    if y.iter().all(|&v| v == y[0]) {
        return Ok(T::zero());
    }
    let n = T::from_count(y.len());
    let mean = y.iter().copied().sum::<T>() / n;
    let ss: T = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    Ok((T::from_f64_lossy(2.0) * n * ss).sqrt())
}

/// Gradient of [`wrapper_g`]: `(2 n y_i - 2 sum(y)) / g(y)`.
pub fn grad_g_wrt_logits<T: Scalar>(y: &[T]) -> Result<Vec<T>> {
    let g = wrapper_g(y)?;
    if g == T::zero() {
        return Err(Error::UndefinedGradient);
    }
    let n = T::from_count(y.len());
    let mean = y.iter().copied().sum::<T>() / n;
    let scale = T::from_f64_lossy(2.0) * n / g;
    Ok(y.iter().map(|&v| scale * (v - mean)).collect())
}

/// `|| grad * m ||_1` with the mask broadcast over gradient channels.
pub fn image_relevance<T: Scalar>(input_grad: &Tensor<T>, mask: &ConceptMask<T>) -> Result<f64> {
    let (h, w, _) = input_grad.hwc()?;
    let (mh, mw, mc) = mask.mask.hwc()?;
    if (mh, mw, mc) != (h, w, 1) {
        return Err(Error::Shape(format!("mask {mh}x{mw}x{mc} does not align with gradient {:?}", input_grad.shape())));
    }
    Ok(input_grad
        .pixels()
        .zip(mask.mask.data())
        .filter(|(_, &m)| m != T::zero())
        .map(|(px, &m)| {
            let m = m.to_f64_lossy();
            px.iter().map(|v| (v.to_f64_lossy() * m).abs()).sum::<f64>()
        })
        .sum())
}

/// Running relevance sums and presence counts per concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceAccumulator {
    pub sums: Vec<f64>,
    pub presence: Vec<u64>,
    pub n_k: usize,
    /// Images whose gradient was undefined (all logits equal).
    pub skipped: u64,
}

impl RelevanceAccumulator {
    pub fn new(n_concepts: usize, n_k: usize) -> Self {
        Self { sums: vec![0.0; n_concepts], presence: vec![0; n_concepts], n_k, skipped: 0 }
    }

    pub fn n_concepts(&self) -> usize {
        self.sums.len()
    }

    /// Adds one image given its full set of per-concept masks.
    pub fn accumulate<T: Scalar>(&mut self, image_masks: &[ConceptMask<T>], input_grad: &Tensor<T>) -> Result<()> {
        if image_masks.len() != self.n_concepts() {
            return Err(Error::Dimension { expected: self.n_concepts(), got: image_masks.len() });
        }
        check_partition(image_masks)?;
        let mut updates = Vec::with_capacity(image_masks.len());
        for (j, m) in image_masks.iter().enumerate() {
            if m.area() > 0 {
                updates.push((j, image_relevance(input_grad, m)?));
            }
        }
        for (j, r) in updates {
            self.sums[j] += r;
            self.presence[j] += 1;
        }
        Ok(())
    }

    /// Same as [`accumulate`](Self::accumulate) from a label map, in one pass.
    pub fn accumulate_labels<T: Scalar>(&mut self, labels: &LabelMap, input_grad: &Tensor<T>) -> Result<()> {
        let (h, w, _) = input_grad.hwc()?;
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::Shape(format!(
                "label map {}x{} does not align with gradient {h}x{w}",
                labels.height, labels.width
            )));
        }
        let n = self.n_concepts();
        let mut sums = vec![0.0f64; n];
        let mut present = vec![false; n];
        for (px, &l) in input_grad.pixels().zip(&labels.labels) {
            let l = l as usize;
            if l >= n {
                return Err(Error::invalid(format!("label {l} out of range for {n} concepts")));
            }
            present[l] = true;
            sums[l] += px.iter().map(|v| v.to_f64_lossy().abs()).sum::<f64>();
        }
        for j in (0..n).filter(|&j| present[j]) {
            self.sums[j] += sums[j];
            self.presence[j] += 1;
        }
        Ok(())
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    /// Combines two partial accumulations (sum + count fold).
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n_concepts() != self.n_concepts() {
            return Err(Error::Dimension { expected: self.n_concepts(), got: other.n_concepts() });
        }
        for j in 0..self.n_concepts() {
            self.sums[j] += other.sums[j];
            self.presence[j] += other.presence[j];
        }
        self.skipped += other.skipped;
        Ok(())
    }

    pub fn finalize(&self) -> ImportanceReport {
        finalize(self)
    }
}

fn check_partition<T: Scalar>(masks: &[ConceptMask<T>]) -> Result<()> {
    let first = masks.first().ok_or_else(|| Error::invalid("no masks"))?;
    let len = first.mask.len();
    if masks.iter().any(|m| m.mask.len() != len) {
        return Err(Error::Shape("masks differ in size".into()));
    }
    for p in 0..len {
        let hits = masks.iter().filter(|m| m.mask.data()[p] != T::zero()).count();
        if hits != 1 {
            return Err(Error::invalid(format!("masks do not partition the grid: pixel {p} is covered {hits} times")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub mean_relevance: Vec<f64>,
    pub importance: Vec<f64>,
    pub presence: Vec<u64>,
    pub n_k: usize,
    pub n_c: usize,
    pub skipped: u64,
}

/// Mean relevance per concept (0 for absent concepts) and max-abs scaling.
pub fn finalize(acc: &RelevanceAccumulator) -> ImportanceReport {
    let mean_relevance: Vec<f64> =
        acc.sums.iter().zip(&acc.presence).map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    let max = mean_relevance.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let importance = mean_relevance.iter().map(|r| if max > 0.0 { r.abs() / max } else { 0.0 }).collect();
    ImportanceReport {
        n_c: acc.n_concepts(),
        mean_relevance,
        importance,
        presence: acc.presence.clone(),
        n_k: acc.n_k,
        skipped: acc.skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Sum over all ordered pairs, straight from the definition.
    fn g_oracle(y: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in y {
            for &b in y {
                s += (a - b) * (a - b);
            }
        }
        s.sqrt()
    }

    fn fd_grad(y: &[f64], h: f64) -> Vec<f64> {
        (0..y.len())
            .map(|i| {
                let mut p = y.to_vec();
                let mut m = y.to_vec();
                p[i] += h;
                m[i] -= h;
                (g_oracle(&p) - g_oracle(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn wrapper_values() {
        assert_eq!(wrapper_g(&[0.1f64, 0.1, 0.1]).unwrap(), 0.0);
        assert_eq!(wrapper_g(&[-7.25f32; 5]).unwrap(), 0.0);
        let v = wrapper_g(&[1.0f64, 0.0]).unwrap();
        assert!((v - g_oracle(&[1.0, 0.0])).abs() <= 1e-12);
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        let v = wrapper_g(&[3.0f64, 1.0, 1.0]).unwrap();
        assert!((g_oracle(&[3.0, 1.0, 1.0]) - 4.0).abs() < 1e-12);
        assert!((v - 4.0).abs() < 1e-12);
        assert!(wrapper_g(&[1.0f64]).is_err());
        assert!(wrapper_g(&[1.0f64, f64::NAN]).is_err());
    }

    #[test]
    fn gradient_values_from_finite_differences() {
        // Frozen from fd_grad (h = 1e-4): y = (1, 0) -> (sqrt 2, -sqrt 2);
        // y = (3, 1, 1) -> (2, -1, -1).
        let fd = fd_grad(&[1.0, 0.0], 1e-4);
        assert!((fd[0] - 2f64.sqrt()).abs() < 1e-6 && (fd[1] + 2f64.sqrt()).abs() < 1e-6);
        let fd = fd_grad(&[3.0, 1.0, 1.0], 1e-4);
        for (a, b) in fd.iter().zip([2.0, -1.0, -1.0]) {
            assert!((a - b).abs() < 1e-6);
        }

        let g = grad_g_wrt_logits(&[1.0f64, 0.0]).unwrap();
        assert!((g[0] - 2f64.sqrt()).abs() < 1e-12 && (g[1] + 2f64.sqrt()).abs() < 1e-12);
        let g = grad_g_wrt_logits(&[3.0f64, 1.0, 1.0]).unwrap();
        for (a, b) in g.iter().zip([2.0, -1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(grad_g_wrt_logits(&[2.0f64, 2.0]), Err(Error::UndefinedGradient)));
    }

    fn mask(bits: &[f32], h: usize, w: usize, j: usize) -> ConceptMask {
        ConceptMask {
            mask: Tensor::new(vec![h, w, 1], bits.to_vec()).unwrap(),
            concept_index: j,
            image_id: "img".into(),
        }
    }

    #[test]
    fn relevance_cases() {
        let grad = Tensor::new(vec![1, 3, 3], vec![0.5, -0.25, 0.0, 1.0, 0.0, 0.0, 9.0, -9.0, 9.0]).unwrap();
        assert_eq!(image_relevance(&grad, &mask(&[1.0, 1.0, 0.0], 1, 3, 0)).unwrap(), 1.75);
        assert_eq!(image_relevance(&grad, &mask(&[0.0; 3], 1, 3, 0)).unwrap(), 0.0);
        let full: f64 = grad.data().iter().map(|v| v.abs() as f64).sum();
        assert_eq!(image_relevance(&grad, &mask(&[1.0; 3], 1, 3, 0)).unwrap(), full);
        assert!(image_relevance(&grad, &mask(&[1.0; 2], 1, 2, 0)).is_err());
    }

    #[test]
    fn accumulate_counts_presence_once_per_image() {
        let grad = Tensor::filled(vec![2, 2, 3], 0.5f32).unwrap();
        let mut acc = RelevanceAccumulator::new(2, 3);
        let all0 = [mask(&[1.0; 4], 2, 2, 0), mask(&[0.0; 4], 2, 2, 1)];
        acc.accumulate(&all0, &grad).unwrap();
        assert_eq!(acc.presence, vec![1, 0]);
        assert_eq!(acc.sums, vec![6.0, 0.0]);
        let split = [mask(&[1.0, 0.0, 0.0, 0.0], 2, 2, 0), mask(&[0.0, 1.0, 1.0, 1.0], 2, 2, 1)];
        acc.accumulate(&split, &grad).unwrap();
        assert_eq!(acc.presence, vec![2, 1]);
        assert!(acc.accumulate(&split[..1], &grad).is_err());
        let overlap = [mask(&[1.0; 4], 2, 2, 0), mask(&[1.0; 4], 2, 2, 1)];
        assert!(acc.accumulate(&overlap, &grad).is_err());
    }

    #[test]
    fn finalize_cases() {
        let acc = RelevanceAccumulator { sums: vec![5.0], presence: vec![2], n_k: 2, skipped: 0 };
        let r = finalize(&acc);
        assert_eq!((r.mean_relevance[0], r.importance[0]), (2.5, 1.0));

        let acc = RelevanceAccumulator { sums: vec![4.0, 0.0], presence: vec![1, 0], n_k: 2, skipped: 0 };
        let r = finalize(&acc);
        assert_eq!((r.mean_relevance[1], r.importance[1]), (0.0, 0.0));

        let acc = RelevanceAccumulator { sums: vec![2.0, -4.0, 1.0], presence: vec![1, 1, 1], n_k: 2, skipped: 0 };
        assert_eq!(finalize(&acc).importance, vec![0.5, 1.0, 0.25]);

        let acc = RelevanceAccumulator::new(3, 2);
        assert_eq!(finalize(&acc).importance, vec![0.0; 3]);
    }

    #[test]
    fn label_and_mask_paths_agree() {
        let grad =
            Tensor::from_fn_hwc((3, 4, 3), |i, j, k| ((i * 13 + j * 5 + k * 3) % 7) as f32 * 0.125 - 0.375).unwrap();
        let labels =
            LabelMap { height: 3, width: 4, labels: vec![0, 0, 2, 2, 0, 2, 2, 2, 0, 0, 0, 2], image_id: "x".into() };
        let mut a = RelevanceAccumulator::new(3, 2);
        let mut b = RelevanceAccumulator::new(3, 2);
        a.accumulate(&labels.masks::<f32>(3), &grad).unwrap();
        b.accumulate_labels(&labels, &grad).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.presence, vec![1, 0, 1]);
    }

    proptest! {
        #[test]
        fn wrapper_translation_and_scaling(
            y in prop::collection::vec(-10.0f64..10.0, 2..8),
            c in -100.0f64..100.0,
            alpha in -5.0f64..5.0,
        ) {
            let g = wrapper_g(&y).unwrap();
            prop_assert!((g - g_oracle(&y)).abs() <= 1e-9 * (1.0 + g));
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            prop_assert!((wrapper_g(&shifted).unwrap() - g).abs() <= 1e-6 * (1.0 + g));
            let scaled: Vec<f64> = y.iter().map(|v| v * alpha).collect();
            prop_assert!((wrapper_g(&scaled).unwrap() - alpha.abs() * g).abs() <= 1e-6 * (1.0 + g));
        }

        #[test]
        fn gradient_components_sum_to_zero(y in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            prop_assume!(wrapper_g(&y).unwrap() > 1e-3);
            let g = grad_g_wrt_logits(&y).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn relevance_additive_over_disjoint_masks(
            grad in prop::collection::vec(-64i32..64, 24),
            labels in prop::collection::vec(0u8..3, 8),
        ) {
            // Dyadic values keep every partial sum exact.
            let grad = Tensor::new(vec![2, 4, 3], grad.iter().map(|&v| v as f32 / 8.0).collect()).unwrap();
            let m = |pred: &dyn Fn(u8) -> bool| mask(
                &labels.iter().map(|&l| pred(l) as u8 as f32).collect::<Vec<_>>(), 2, 4, 0);
            let r1 = image_relevance(&grad, &m(&|l| l == 0)).unwrap();
            let r2 = image_relevance(&grad, &m(&|l| l == 1)).unwrap();
            let r12 = image_relevance(&grad, &m(&|l| l <= 1)).unwrap();
            prop_assert_eq!(r12, r1 + r2);
        }

        #[test]
        fn importance_in_unit_interval(
            sums in prop::collection::vec(-100.0f64..100.0, 1..10),
            present in prop::collection::vec(0u64..5, 10),
        ) {
            let n = sums.len();
            let acc = RelevanceAccumulator { sums, presence: present[..n].to_vec(), n_k: 2, skipped: 0 };
            let r = finalize(&acc);
            prop_assert!(r.importance.iter().all(|&i| (0.0..=1.0).contains(&i)));
            if r.mean_relevance.iter().any(|&m| m != 0.0) {
                prop_assert!(r.importance.contains(&1.0));
            }
        }
    }
}
