//! Dense row-major tensors with channels-last image helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Image-like tensors are `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    /// Builds an `h x w x c` tensor from a per-element function.
    pub fn from_fn_hwc((h, w, c): (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(vec![h, w, c], data)
    }

    /// Internal constructor for values produced by finite-preserving kernels.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width, channels)` of an image-like tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::Shape(format!("expected rank-3 HxWxC tensor, got {other:?}"))),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        let (w, c) = (self.shape[1], self.shape[2]);
        self.data[(i * w + j) * c + k]
    }

    /// Channel vector of pixel `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let (w, c) = (self.shape[1], self.shape[2]);
        let start = (i * w + j) * c;
        &self.data[start..start + c]
    }

    /// Iterates over per-pixel channel vectors in row-major order.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        let c = *self.shape.last().expect("tensor has at least one dim");
        self.data.chunks_exact(c)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Bilinear upscaling of an `h x w x c` tensor to `target = (H, W)`.
    ///
    /// Output pixel `(i, j)` samples the source at the half-pixel-centred
    /// coordinate `((i + 0.5) h / H - 0.5, (j + 0.5) w / W - 0.5)`, clamped to
    /// the source grid. Each lerp is clamped to its endpoints so outputs never
    /// leave the per-channel source range and constants stay exact.
    pub fn bilinear_upscale(&self, target: (usize, usize)) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::invalid("upscale target must be at least 1x1"));
        }
        if th < h || tw < w {
            return Err(Error::invalid(format!("upscale target {th}x{tw} is smaller than source {h}x{w}")));
        }
        if (th, tw) == (h, w) {
            return Ok(self.clone());
        }

        let rows = sample_axis(h, th);
        let cols = sample_axis(w, tw);
        let mut out = Vec::with_capacity(th * tw * c);
        for &(i0, i1, fi) in &rows {
            let fi = T::from_f64_lossy(fi);
            for &(j0, j1, fj) in &cols {
                let fj = T::from_f64_lossy(fj);
                let p00 = self.pixel(i0, j0);
                let p01 = self.pixel(i0, j1);
                let p10 = self.pixel(i1, j0);
                let p11 = self.pixel(i1, j1);
                for k in 0..c {
                    let top = lerp(p00[k], p01[k], fj);
                    let bottom = lerp(p10[k], p11[k], fj);
                    out.push(lerp(top, bottom, fi));
                }
            }
        }
        Ok(Self::from_parts_unchecked(vec![th, tw, c], out))
    }

    /// Box-filter (area-average) downscaling to `target = (H, W)`.
    pub fn area_downscale(&self, target: (usize, usize)) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        let (th, tw) = target;
        if th == 0 || tw == 0 || th > h || tw > w {
            return Err(Error::invalid(format!("downscale target {th}x{tw} must be within 1x1..={h}x{w}")));
        }
        if (th, tw) == (h, w) {
            return Ok(self.clone());
        }
        let rows = area_weights(h, th);
        let cols = area_weights(w, tw);
        let mut out = vec![T::zero(); th * tw * c];
        for (oi, row_w) in rows.iter().enumerate() {
            for (oj, col_w) in cols.iter().enumerate() {
                let dst = &mut out[(oi * tw + oj) * c..(oi * tw + oj + 1) * c];
                for &(si, wi) in row_w {
                    for &(sj, wj) in col_w {
                        let weight = T::from_f64_lossy(wi * wj);
                        for (d, &s) in dst.iter_mut().zip(self.pixel(si, sj)) {
                            *d += weight * s;
                        }
                    }
                }
            }
        }
        Ok(Self::from_parts_unchecked(vec![th, tw, c], out))
    }

    /// Splits channels into consecutive groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let (h, w, c) = self.hwc()?;
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(Error::Shape(format!("channel split {sizes:?} does not partition {c} channels")));
        }
        let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(h * w * s)).collect();
        for px in self.pixels() {
            let mut offset = 0;
            for (part, &s) in parts.iter_mut().zip(sizes) {
                part.extend_from_slice(&px[offset..offset + s]);
                offset += s;
            }
        }
        Ok(parts.into_iter().zip(sizes).map(|(data, &s)| Self::from_parts_unchecked(vec![h, w, s], data)).collect())
    }
}

/// Concatenates `H x W x c_k` tensors along the channel axis in list order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_channels needs at least one part"))?;
    let (h, w, _) = first.hwc()?;
    let mut total = 0;
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape(format!("cannot concatenate {ph}x{pw} part onto {h}x{w}")));
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(h * w * total);
    let mut iters: Vec<_> = parts.iter().map(|p| p.pixels()).collect();
    for _ in 0..h * w {
        for it in iters.iter_mut() {
            data.extend_from_slice(it.next().expect("pixel counts agree"));
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![h, w, total], data))
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor needs at least one dimension".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

/// For every output index: (lower source index, upper source index, fraction).
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let u = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// For every output index: list of (source index, normalized overlap weight).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Streaming per-channel mean and variance (Welford, with Chan's merge).
#[derive(Clone, Debug, PartialEq)]
pub struct StreamingStats<T = f64> {
    count: u64,
    mean: Vec<T>,
    m2: Vec<T>,
}

impl<T: Scalar> StreamingStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { count: 0, mean: vec![T::zero(); channels], m2: vec![T::zero(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn m2(&self) -> &[T] {
        &self.m2
    }

    pub fn push<S: Scalar>(&mut self, sample: &[S]) -> Result<()> {
        if sample.len() != self.channels() {
            return Err(Error::Dimension { expected: self.channels(), got: sample.len() });
        }
        self.count += 1;
        let n = T::from_f64_lossy(self.count as f64);
        for ((m, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let x = T::from_f64_lossy(x.to_f64_lossy());
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
        Ok(())
    }

    /// Pushes every pixel of an `H x W x C` tensor.
    pub fn push_pixels<S: Scalar>(&mut self, t: &Tensor<S>) -> Result<()> {
        let (_, _, c) = t.hwc()?;
        if c != self.channels() {
            return Err(Error::Dimension { expected: self.channels(), got: c });
        }
        for px in t.pixels() {
            self.push(px)?;
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if other.channels() != self.channels() {
            return Err(Error::Dimension { expected: self.channels(), got: other.channels() });
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let count = self.count + other.count;
        let (na, nb, n) = (
            T::from_f64_lossy(self.count as f64),
            T::from_f64_lossy(other.count as f64),
            T::from_f64_lossy(count as f64),
        );
        let mut mean = Vec::with_capacity(self.channels());
        let mut m2 = Vec::with_capacity(self.channels());
        for k in 0..self.channels() {
            let delta = other.mean[k] - self.mean[k];
            mean.push(self.mean[k] + delta * nb / n);
            m2.push(self.m2[k] + other.m2[k] + delta * delta * na * nb / n);
        }
        Ok(Self { count, mean, m2 })
    }

    /// Population variance `m2 / count`; `None` before the first sample.
    pub fn variance(&self) -> Option<Vec<T>> {
        (self.count > 0).then(|| {
            let n = T::from_f64_lossy(self.count as f64);
            self.m2.iter().map(|&m| (m / n).max(T::zero())).collect()
        })
    }

    pub fn std_dev(&self) -> Option<Vec<T>> {
        self.variance().map(|v| v.into_iter().map(|x| x.sqrt()).collect())
    }
}
