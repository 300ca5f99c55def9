//! Fixed-weight analytic CNN used as the built-in model.
//!
//! ```text
//! a1 = relu(conv1x1(x))        identity colour filters, H x W x 3
//! a2 = avgpool2x2(a1)          floor(H/2) x floor(W/2) x 3
//! y  = W_head^T globalavg(a2)  n_k logits
//! ```

use crate::error::{Error, Result};
use crate::importance::{grad_g_wrt_logits, wrapper_g};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{check_layers, GradOutcome, LayerActivations, ModelRunner, RunnerError, RunnerInfo};

pub const TOY_LAYERS: [&str; 2] = ["a1", "a2"];

/// Off-dominant weight of the head matrix.
const HEAD_CROSS: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T = f32> {
    /// `conv[out][in]`.
    conv: [[T; 3]; 3],
    /// One column of three channel weights per class.
    head: Vec<[T; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyForward<T> {
    pub a1: Tensor<T>,
    pub a2: Tensor<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Class `k` is driven by colour channel `k mod 3`; columns for `k >= 3`
    /// are scaled by `1 + k / 3` so all columns stay distinct.
    pub fn new(n_k: usize) -> Result<Self> {
        if n_k < 2 {
            return Err(Error::invalid("toy model needs at least 2 classes"));
        }
        let (one, zero) = (T::one(), T::zero());
        let conv = [[one, zero, zero], [zero, one, zero], [zero, zero, one]];
        let head = (0..n_k)
            .map(|k| {
                let scale = 1.0 + (k / 3) as f64;
                let mut col = [T::from_f64_lossy(HEAD_CROSS * scale); 3];
                col[k % 3] = T::from_f64_lossy(scale);
                col
            })
            .collect();
        Ok(Self { conv, head })
    }

    pub fn n_k(&self) -> usize {
        self.head.len()
    }

    fn check_image(x: &Tensor<T>) -> Result<(usize, usize)> {
        let (h, w, c) = x.hwc()?;
        if c != 3 {
            return Err(Error::Shape(format!("toy model expects 3 channels, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("toy model needs at least 2x2 input, got {h}x{w}")));
        }
        Ok((h, w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ToyForward<T>> {
        let (h, w) = Self::check_image(x)?;
        let mut a1 = Vec::with_capacity(h * w * 3);
        for px in x.pixels() {
            for row in &self.conv {
                let z = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                a1.push(z.max(T::zero()));
            }
        }
        let a1 = Tensor::from_parts_unchecked(vec![h, w, 3], a1);

        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let mut a2 = Vec::with_capacity(h2 * w2 * 3);
        for i in 0..h2 {
            for j in 0..w2 {
                for c in 0..3 {
                    let s = a1.at(2 * i, 2 * j, c)
                        + a1.at(2 * i, 2 * j + 1, c)
                        + a1.at(2 * i + 1, 2 * j, c)
                        + a1.at(2 * i + 1, 2 * j + 1, c);
                    a2.push(s * quarter);
                }
            }
        }
        let a2 = Tensor::from_parts_unchecked(vec![h2, w2, 3], a2);

        let mut pooled = [T::zero(); 3];
        for px in a2.pixels() {
            for c in 0..3 {
                pooled[c] += px[c];
            }
        }
        let area = T::from_count(h2 * w2);
        for p in &mut pooled {
            *p /= area;
        }
        let logits = self.head.iter().map(|col| col[0] * pooled[0] + col[1] * pooled[1] + col[2] * pooled[2]).collect();
        Ok(ToyForward { a1, a2, logits })
    }

    /// `g(f(x))` and its input gradient by the chain rule through head,
    /// pooling, ReLU and convolution. `None` when `g = 0`.
    pub fn g_and_grad(&self, x: &Tensor<T>) -> Result<(T, Option<Tensor<T>>)> {
        let (h, w) = Self::check_image(x)?;
        let fwd = self.forward(x)?;
        let g = wrapper_g(&fwd.logits)?;
        if g == T::zero() {
            return Ok((g, None));
        }
        let dy = grad_g_wrt_logits(&fwd.logits)?;

        // dg/dpooled_c = sum_k head[k][c] dg/dy_k
        let mut dpooled = [T::zero(); 3];
        for (col, &d) in self.head.iter().zip(&dy) {
            for c in 0..3 {
                dpooled[c] += col[c] * d;
            }
        }
        let (h2, w2) = (h / 2, w / 2);
        // Every a1 pixel inside a pooling window receives the same share.
        let share = T::from_f64_lossy(0.25) / T::from_count(h2 * w2);
        let da1 = dpooled.map(|d| d * share);

        let mut grad = vec![T::zero(); h * w * 3];
        for i in 0..2 * h2 {
            for j in 0..2 * w2 {
                let px = x.pixel(i, j);
                let out = &mut grad[(i * w + j) * 3..(i * w + j + 1) * 3];
                for (o, row) in self.conv.iter().enumerate() {
                    let z = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
                    if z > T::zero() {
                        for c in 0..3 {
                            out[c] += row[c] * da1[o];
                        }
                    }
                }
            }
        }
        Ok((g, Some(Tensor::from_parts_unchecked(vec![h, w, 3], grad))))
    }
}

/// The toy model behind the [`ModelRunner`] interface.
pub struct ToyRunner {
    model: ToyModel<f32>,
    info: RunnerInfo,
}

impl ToyRunner {
    pub fn new(n_k: usize) -> Result<Self> {
        Ok(Self {
            model: ToyModel::new(n_k)?,
            info: RunnerInfo {
                layers: TOY_LAYERS.iter().map(|s| s.to_string()).collect(),
                n_k,
                input_normalization: None,
            },
        })
    }

    pub fn model(&self) -> &ToyModel<f32> {
        &self.model
    }
}

fn invalid(e: Error) -> RunnerError {
    RunnerError::InvalidInput(e.to_string())
}

impl ModelRunner for ToyRunner {
    fn info(&self) -> &RunnerInfo {
        &self.info
    }

    fn activations(&mut self, images: &[Tensor<f32>], layers: &[String]) -> Result<Vec<LayerActivations>, RunnerError> {
        check_layers(layers, &self.info.layers)?;
        images
            .iter()
            .map(|x| {
                let fwd = self.model.forward(x).map_err(invalid)?;
                Ok(layers
                    .iter()
                    .map(|l| {
                        let t = if l == "a1" { fwd.a1.clone() } else { fwd.a2.clone() };
                        (l.clone(), t)
                    })
                    .collect())
            })
            .collect()
    }

    fn logits(&mut self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>, RunnerError> {
        images.iter().map(|x| Ok(self.model.forward(x).map_err(invalid)?.logits)).collect()
    }

    fn grad_g(&mut self, images: &[Tensor<f32>]) -> Result<Vec<GradOutcome>, RunnerError> {
        images
            .iter()
            .map(|x| {
                Ok(match self.model.g_and_grad(x).map_err(invalid)? {
                    (g, Some(grad)) => GradOutcome::Gradient { g, grad },
                    (_, None) => GradOutcome::Undefined,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn_hwc((h, w, 3), |_, _, _| rng.random_range(0.05..1.0)).unwrap()
    }

    #[test]
    fn red_pixel_passes_through_a1() {
        let m = ToyModel::<f32>::new(3).unwrap();
        let mut data = vec![0.0f32; 4 * 4 * 3];
        data[0] = 1.0;
        let x = Tensor::new(vec![4, 4, 3], data).unwrap();
        let f = m.forward(&x).unwrap();
        assert_eq!(f.a1.pixel(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(f.a2.shape(), &[2, 2, 3]);
        assert_eq!(f.a2.pixel(0, 0), &[0.25, 0.0, 0.0]);
    }

    #[test]
    fn black_image_is_dead() {
        let m = ToyModel::<f32>::new(3).unwrap();
        let x = Tensor::zeros(vec![6, 6, 3]).unwrap();
        let f = m.forward(&x).unwrap();
        assert!(f.a1.data().iter().chain(f.a2.data()).all(|&v| v == 0.0));
        assert!(f.logits.iter().all(|&v| v == 0.0));
        assert_eq!(m.g_and_grad(&x).unwrap(), (0.0, None));
    }

    #[test]
    fn head_columns_are_distinct() {
        let m = ToyModel::<f64>::new(7).unwrap();
        for a in 0..7 {
            for b in a + 1..7 {
                assert_ne!(m.head[a], m.head[b]);
            }
        }
        assert!(ToyModel::<f64>::new(1).is_err());
    }

    #[test]
    fn zero_pixels_have_zero_gradient() {
        let m = ToyModel::<f32>::new(3).unwrap();
        let mut x = Tensor::zeros(vec![8, 8, 3]).unwrap().into_data();
        for p in 0..16 {
            x[p * 3] = 0.9;
        }
        let x = Tensor::new(vec![8, 8, 3], x).unwrap();
        let (_, grad) = m.g_and_grad(&x).unwrap();
        let grad = grad.unwrap();
        for (px, gx) in x.pixels().zip(grad.pixels()) {
            for c in 0..3 {
                if px[c] == 0.0 {
                    assert_eq!(gx[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let m = ToyModel::<f64>::new(3).unwrap();
        for (seed, (h, w)) in [(1u64, (8, 8)), (2, (7, 9))] {
            let x = random_image(seed, h, w);
            let (_, grad) = m.g_and_grad(&x).unwrap();
            let grad = grad.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..5 {
                let (i, j, c) = (rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..3));
                let bump = |delta: f64| {
                    let mut d = x.data().to_vec();
                    d[(i * w + j) * 3 + c] += delta;
                    let xp = Tensor::new(vec![h, w, 3], d).unwrap();
                    wrapper_g(&m.forward(&xp).unwrap().logits).unwrap()
                };
                let fd = (bump(1e-3) - bump(-1e-3)) / 2e-3;
                let an = grad.at(i, j, c);
                // Odd sizes leave the last row/column outside every window.
                let rel = (fd - an).abs() / an.abs().max(1e-12);
                assert!(rel < 1e-3 || (an == 0.0 && fd.abs() < 1e-12), "fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn f32_and_f64_models_agree() {
        let x64 = random_image(9, 6, 6);
        let x32: Tensor<f32> = x64.cast();
        let l64 = ToyModel::<f64>::new(4).unwrap().forward(&x64).unwrap().logits;
        let l32 = ToyModel::<f32>::new(4).unwrap().forward(&x32).unwrap().logits;
        for (a, b) in l64.iter().zip(l32) {
            assert!((a - b as f64).abs() < 1e-5);
        }
    }
}
