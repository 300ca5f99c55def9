//! Streaming minibatch k-means over descriptor batches.
//!
//! Each batch is assigned against the centroids as they stood at the start of
//! the batch (distance work is parallel), then centroids are updated point by
//! point in batch order with per-centre learning rate `1 / count`.

use std::borrow::Cow;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lad::DescriptorField;
use crate::scalar::{squared_distance, Scalar};
use crate::tensor::Tensor;

/// Row-major block of descriptor vectors sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorBatch<T = f32> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> DescriptorBatch<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of dimension {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: bad.len() });
        }
        Self::new(dim, rows.concat())
    }

    /// Every pixel descriptor of the given fields, in field then pixel order.
    pub fn from_fields(fields: &[DescriptorField<T>]) -> Result<Self> {
        let dim = fields.first().ok_or_else(|| Error::invalid("no descriptor fields"))?.dim();
        let mut data = Vec::with_capacity(fields.iter().map(|f| f.field.len()).sum());
        for f in fields {
            if f.dim() != dim {
                return Err(Error::Dimension { expected: dim, got: f.dim() });
            }
            data.extend_from_slice(f.field.data());
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.dim)
    }

    fn extend(&mut self, other: &Self) {
        self.data.extend_from_slice(&other.data);
    }
}

/// The `n_c` concept centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet<T = f32> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> CentroidSet<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form centroids of dimension {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("centroids must be finite"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let b = DescriptorBatch::from_rows(rows)?;
        Self::new(b.dim, b.data)
    }

    /// Centroids stored as an `n_c x D` tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[_, d] => Self::new(d, t.data().to_vec()),
            other => Err(Error::Shape(format!("centroid tensor must be n_c x D, got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts_unchecked(vec![self.n_c(), self.dim], self.data.clone())
    }

    pub fn n_c(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> &[T] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.dim)
    }

    fn centroid_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    #[inline]
    pub(crate) fn nearest(&self, v: &[T]) -> (usize, T) {
        let mut best = (0, T::infinity());
        for (j, c) in self.iter().enumerate() {
            let d = squared_distance(v, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Mean squared distance of `points` to their nearest centroid.
    pub fn inertia(&self, points: &DescriptorBatch<T>) -> Result<f64> {
        self.check_dim(points.dim())?;
        if points.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = points.rows().map(|r| self.nearest(r).1.to_f64_lossy()).sum();
        Ok(total / points.len() as f64)
    }

    pub(crate) fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::Dimension { expected: self.dim, got });
        }
        Ok(())
    }
}

/// Index of the nearest centroid by squared Euclidean distance.
pub fn assign_nearest<T: Scalar>(centroids: &CentroidSet<T>, v: &[T]) -> Result<usize> {
    centroids.check_dim(v.len())?;
    Ok(centroids.nearest(v).0)
}

/// Per-centre learning-rate bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterFitState {
    pub counts: Vec<u64>,
    pub rng_seed: u64,
    pub batch_index: u64,
}

impl ClusterFitState {
    pub fn new(n_c: usize, rng_seed: u64) -> Self {
        Self { counts: vec![0; n_c], rng_seed, batch_index: 0 }
    }
}

/// k-means++ seeding over `sample`.
///
/// Deterministic for fixed `(sample, n_c, seed)`. If the sample holds fewer
/// than `n_c` distinct points the remaining centroids repeat sample points.
pub fn init_centroids<T: Scalar>(sample: &DescriptorBatch<T>, n_c: usize, seed: u64) -> Result<CentroidSet<T>> {
    if n_c == 0 {
        return Err(Error::invalid("n_c must be at least 1"));
    }
    if sample.len() < n_c {
        return Err(Error::invalid(format!("k-means++ needs at least {n_c} samples, got {}", sample.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample.len();
    let mut chosen = Vec::with_capacity(n_c * sample.dim());
    let first = rng.random_range(0..n);
    chosen.extend_from_slice(sample.row(first));

    let mut d2: Vec<f64> = sample.rows().map(|r| squared_distance(r, sample.row(first)).to_f64_lossy()).collect();
    for _ in 1..n_c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` past the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        let row = sample.row(pick);
        chosen.extend_from_slice(row);
        d2.par_iter_mut().zip(sample.data.par_chunks_exact(sample.dim())).for_each(|(d, r)| {
            let nd = squared_distance(r, row).to_f64_lossy();
            if nd < *d {
                *d = nd;
            }
        });
    }
    CentroidSet::new(sample.dim(), chosen)
}

/// Per-batch assignment record.
#[derive(Clone, Debug)]
pub struct BatchAssignment<T> {
    /// Assigned centroid per point, against centroids at batch start.
    pub labels: Vec<usize>,
    /// Squared distance of each point to its assigned centroid.
    pub distances: Vec<T>,
}

/// One minibatch step: parallel assignment, then sequential per-point updates.
pub fn minibatch_update<T: Scalar>(
    state: &mut ClusterFitState,
    centroids: &mut CentroidSet<T>,
    batch: &DescriptorBatch<T>,
) -> Result<BatchAssignment<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("minibatch is empty"));
    }
    centroids.check_dim(batch.dim())?;
    if state.counts.len() != centroids.n_c() {
        return Err(Error::Dimension { expected: centroids.n_c(), got: state.counts.len() });
    }
    let (labels, distances): (Vec<usize>, Vec<T>) =
        batch.data.par_chunks_exact(batch.dim()).map(|r| centroids.nearest(r)).unzip();

    for (row, &j) in batch.rows().zip(&labels) {
        state.counts[j] += 1;
        let lr = T::one() / T::from_f64_lossy(state.counts[j] as f64);
        for (c, &x) in centroids.centroid_mut(j).iter_mut().zip(row) {
            *c += lr * (x - *c);
        }
    }
    state.batch_index += 1;
    Ok(BatchAssignment { labels, distances })
}

/// Source of descriptor batches that can be replayed once per epoch.
pub trait BatchSource<T: Scalar> {
    fn num_batches(&self) -> usize;
    fn batch(&mut self, index: usize) -> Result<Cow<'_, DescriptorBatch<T>>>;
}

impl<T: Scalar> BatchSource<T> for [DescriptorBatch<T>] {
    fn num_batches(&self) -> usize {
        self.len()
    }

    fn batch(&mut self, index: usize) -> Result<Cow<'_, DescriptorBatch<T>>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl<T: Scalar> BatchSource<T> for Vec<DescriptorBatch<T>> {
    fn num_batches(&self) -> usize {
        self.len()
    }

    fn batch(&mut self, index: usize) -> Result<Cow<'_, DescriptorBatch<T>>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub n_c: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Permute batch order every epoch (seeded). Off by default.
    pub shuffle_batches: bool,
    /// Cap on the k-means++ seeding sample; larger samples are subsampled.
    pub init_sample_limit: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { n_c: 20, seed: 0, epochs: 10, shuffle_batches: false, init_sample_limit: 1 << 16 }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub centroids: CentroidSet<T>,
    pub state: ClusterFitState,
    /// Number of centroid re-seeds caused by empty clusters, per epoch.
    pub reseeds: Vec<usize>,
}

pub fn fit_stream<T: Scalar, S: BatchSource<T> + ?Sized>(source: &mut S, opts: &FitOptions) -> Result<FitResult<T>> {
    fit_stream_observed(source, opts, |_, _| {})
}

/// [`fit_stream`] with a hook called after every epoch (post re-seeding).
pub fn fit_stream_observed<T: Scalar, S: BatchSource<T> + ?Sized>(
    source: &mut S,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(usize, &CentroidSet<T>),
) -> Result<FitResult<T>> {
    let n_c = opts.n_c;
    let n_batches = source.num_batches();
    if n_batches == 0 {
        return Err(Error::invalid("fit_stream needs at least one batch"));
    }
    if n_c == 0 || opts.epochs == 0 {
        return Err(Error::invalid("n_c and epochs must be at least 1"));
    }

    let sample = seeding_sample(source, n_c, opts.init_sample_limit, opts.seed)?;
    let mut centroids = init_centroids(&sample, n_c, opts.seed)?;
    drop(sample);

    let mut state = ClusterFitState::new(n_c, opts.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0005_eed0_fba7_c4e5);
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut reseeds = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        if opts.shuffle_batches {
            order.shuffle(&mut order_rng);
        }
        let mut epoch_counts = vec![0u64; n_c];
        let mut far = Farthest::new(n_c);
        for &b in &order {
            let batch = source.batch(b)?;
            let assignment = minibatch_update(&mut state, &mut centroids, &batch)?;
            for (i, (&j, &d)) in assignment.labels.iter().zip(&assignment.distances).enumerate() {
                epoch_counts[j] += 1;
                far.offer(d.to_f64_lossy(), || batch.row(i).to_vec());
            }
        }
        let n_reseeded = reseed_empty(&mut centroids, &epoch_counts, far);
        if n_reseeded > 0 {
            log::debug!("epoch {epoch}: re-seeded {n_reseeded} empty clusters");
        }
        reseeds.push(n_reseeded);
        on_epoch(epoch, &centroids);
    }

    Ok(FitResult { centroids, state, reseeds })
}

/// Moves every centroid that won no point this epoch onto one of the points
/// farthest from their assigned centroid, farthest first.
fn reseed_empty<T: Scalar>(centroids: &mut CentroidSet<T>, epoch_counts: &[u64], far: Farthest<T>) -> usize {
    let mut candidates = far.into_sorted().into_iter();
    let mut n = 0;
    for j in (0..centroids.n_c()).filter(|&j| epoch_counts[j] == 0) {
        match candidates.next() {
            Some(point) => {
                centroids.centroid_mut(j).copy_from_slice(&point);
                n += 1;
            }
            None => break,
        }
    }
    n
}

/// Seeding sample: the first batch, extended with later batches until it holds
/// at least `n_c` distinct points (or the stream is exhausted).
fn seeding_sample<T: Scalar, S: BatchSource<T> + ?Sized>(
    source: &mut S,
    n_c: usize,
    limit: usize,
    seed: u64,
) -> Result<DescriptorBatch<T>> {
    let mut sample = source.batch(0)?.into_owned();
    let mut next = 1;
    while distinct_rows(&sample, n_c) < n_c && next < source.num_batches() {
        let b = source.batch(next)?;
        if b.dim() != sample.dim() {
            return Err(Error::Dimension { expected: sample.dim(), got: b.dim() });
        }
        sample.extend(&b);
        next += 1;
    }
    if sample.len() < n_c {
        return Err(Error::invalid(format!("stream holds {} descriptors, fewer than n_c = {n_c}", sample.len())));
    }
    if sample.len() > limit.max(n_c) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x1417);
        let mut idx = rand::seq::index::sample(&mut rng, sample.len(), limit.max(n_c)).into_vec();
        idx.sort_unstable();
        // Keep every distinct point if there are only a handful of them.
        let mut seen = HashSet::new();
        for (i, r) in sample.rows().enumerate() {
            if seen.len() >= n_c {
                break;
            }
            if seen.insert(bits(r)) && idx.binary_search(&i).is_err() {
                idx.push(i);
            }
        }
        idx.sort_unstable();
        let mut data = Vec::with_capacity(idx.len() * sample.dim());
        for i in idx {
            data.extend_from_slice(sample.row(i));
        }
        sample = DescriptorBatch::new(sample.dim(), data)?;
    }
    Ok(sample)
}

fn bits<T: Scalar>(r: &[T]) -> Vec<u64> {
    r.iter().map(|v| v.to_f64_lossy().to_bits()).collect()
}

/// Counts distinct rows, stopping early once `stop_at` is reached.
fn distinct_rows<T: Scalar>(b: &DescriptorBatch<T>, stop_at: usize) -> usize {
    let mut seen = HashSet::new();
    for r in b.rows() {
        seen.insert(bits(r));
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

/// Keeps the `k` points farthest from their assigned centroid, earliest first on ties.
struct Farthest<T> {
    k: usize,
    items: Vec<(f64, Vec<T>)>,
}

impl<T> Farthest<T> {
    fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    fn offer(&mut self, d: f64, point: impl FnOnce() -> Vec<T>) {
        if d <= 0.0 {
            return;
        }
        if self.items.len() == self.k && self.items.last().is_some_and(|(m, _)| d <= *m) {
            return;
        }
        let pos = self.items.partition_point(|(m, _)| *m >= d);
        self.items.insert(pos, (d, point()));
        self.items.truncate(self.k);
    }

    fn into_sorted(self) -> Vec<Vec<T>> {
        self.items.into_iter().map(|(_, p)| p).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: &[&[f64]]) -> DescriptorBatch<f64> {
        DescriptorBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn init_with_n_c_equal_to_sample_is_a_permutation() {
        let s = batch(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 5.0], &[3.0, 3.0]]);
        let c = init_centroids(&s, 4, 9).unwrap();
        let mut got: Vec<Vec<f64>> = c.iter().map(|r| r.to_vec()).collect();
        let mut want: Vec<Vec<f64>> = s.rows().map(|r| r.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn init_single_centroid_is_a_sample_point() {
        let s = batch(&[&[0.5], &[1.5], &[9.0]]);
        let c = init_centroids(&s, 1, 3).unwrap();
        assert!(s.rows().any(|r| r == c.centroid(0)));
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let s = DescriptorBatch::new(3, (0..300).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
        assert_eq!(init_centroids(&s, 7, 42).unwrap(), init_centroids(&s, 7, 42).unwrap());
        assert!(init_centroids(&batch(&[&[1.0]]), 2, 0).is_err());
    }

    #[test]
    fn update_leaves_centroid_at_identical_points() {
        let mut c = CentroidSet::from_rows(&[vec![1.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let before = c.clone();
        let mut st = ClusterFitState::new(2, 0);
        minibatch_update(&mut st, &mut c, &batch(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert_eq!(c, before);
        assert_eq!(st.counts, vec![2, 0]);
    }

    #[test]
    fn first_point_moves_centroid_fully() {
        let mut c = CentroidSet::from_rows(&[vec![0.0]]).unwrap();
        let mut st = ClusterFitState::new(1, 0);
        minibatch_update(&mut st, &mut c, &batch(&[&[1.0]])).unwrap();
        assert_eq!(c.centroid(0), &[1.0]);
        assert!(minibatch_update(&mut st, &mut c, &batch(&[&[1.0, 2.0]])).is_err());
        let empty = DescriptorBatch::<f64>::new(1, vec![]).unwrap();
        assert!(minibatch_update(&mut st, &mut c, &empty).is_err());
    }

    #[test]
    fn assign_ties_and_exact_matches() {
        let c = CentroidSet::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0], vec![4.0, 4.0], vec![7.0, -2.0]]).unwrap();
        assert_eq!(assign_nearest(&c, &[7.0, -2.0]).unwrap(), 3);
        assert_eq!(assign_nearest(&c, &[0.0, 0.0]).unwrap(), 0);
        assert!(assign_nearest(&c, &[0.0]).is_err());
    }

    #[test]
    fn single_cluster_converges_to_mean() {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin() * 3.0, i as f64 * 0.1]).collect();
        let mean: Vec<f64> = (0..2).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / 50.0).collect();
        let mut src = vec![DescriptorBatch::from_rows(&pts).unwrap()];
        let opts = FitOptions { n_c: 1, epochs: 50, ..Default::default() };
        let fit = fit_stream(&mut src, &opts).unwrap();
        for (c, m) in fit.centroids.centroid(0).iter().zip(&mean) {
            assert!((c - m).abs() < 1e-3);
        }
    }

    #[test]
    fn repeated_distinct_points_are_recovered_exactly() {
        let points = [[0.0, 0.0], [3.0, 1.0], [-2.0, 7.0]];
        let rows: Vec<Vec<f64>> = (0..60).map(|i| points[i % 3].to_vec()).collect();
        let mut src: Vec<_> = rows.chunks(10).map(|c| DescriptorBatch::from_rows(c).unwrap()).collect();
        let fit = fit_stream(&mut src, &FitOptions { n_c: 3, epochs: 3, ..Default::default() }).unwrap();
        let mut got: Vec<Vec<f64>> = fit.centroids.iter().map(|r| r.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn seeding_sample_grows_past_degenerate_first_batch() {
        let mut src = vec![batch(&[&[0.0], &[0.0], &[0.0], &[0.0]]), batch(&[&[5.0], &[0.0]]), batch(&[&[9.0]])];
        let fit = fit_stream(&mut src, &FitOptions { n_c: 3, epochs: 2, ..Default::default() }).unwrap();
        let mut got: Vec<f64> = fit.centroids.iter().map(|r| r[0]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![0.0, 5.0, 9.0]);
    }

    #[test]
    fn empty_cluster_is_reseeded_to_farthest_point() {
        // Centroid 1 starts far away and never wins a point.
        let mut c = CentroidSet::from_rows(&[vec![0.0], vec![1000.0]]).unwrap();
        let mut st = ClusterFitState::new(2, 0);
        minibatch_update(&mut st, &mut c, &batch(&[&[0.0], &[1.0]])).unwrap();
        assert_eq!(st.counts, vec![2, 0]);

        let mut far = Farthest::new(2);
        for (d, p) in [(1.0, 1.0), (4.0, 2.0), (9.0, 3.0), (9.0, 3.5), (0.0, 0.0)] {
            far.offer(d, || vec![p]);
        }
        assert_eq!(reseed_empty(&mut c, &[2, 0], far), 1);
        // Farthest wins; the earlier of two equal distances is kept first.
        assert_eq!(c.centroid(1), &[3.0]);
    }

    #[test]
    fn too_few_points_rejected() {
        let mut src = vec![batch(&[&[0.0]]), batch(&[&[1.0]])];
        assert!(fit_stream(&mut src, &FitOptions { n_c: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn shuffled_order_is_seed_deterministic() {
        let mut src: Vec<_> = (0..6)
            .map(|b| DescriptorBatch::new(2, (0..20).map(|i| ((b * 20 + i) as f64 * 0.7).cos()).collect()).unwrap())
            .collect();
        let opts = FitOptions { n_c: 3, epochs: 4, shuffle_batches: true, seed: 5, ..Default::default() };
        let a = fit_stream(&mut src, &opts).unwrap();
        let b = fit_stream(&mut src, &opts).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    proptest! {
        #[test]
        fn assign_matches_brute_force(
            cents in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 1..8),
            v in prop::collection::vec(-5i32..5, 3),
        ) {
            // Integer-valued coordinates make exact ties common.
            let rows: Vec<Vec<f64>> = cents.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let c = CentroidSet::from_rows(&rows).unwrap();
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, r) in rows.iter().enumerate() {
                let d: f64 = r.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d { best = j; best_d = d; }
            }
            prop_assert_eq!(assign_nearest(&c, &v).unwrap(), best);
        }

        #[test]
        fn counts_are_monotone(points in prop::collection::vec(-10.0f64..10.0, 4..40)) {
            let mut c = CentroidSet::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
            let mut st = ClusterFitState::new(2, 0);
            let mut prev = st.counts.clone();
            for chunk in points.chunks(3) {
                let b = DescriptorBatch::new(1, chunk.to_vec()).unwrap();
                minibatch_update(&mut st, &mut c, &b).unwrap();
                prop_assert!(st.counts.iter().zip(&prev).all(|(a, b)| a >= b));
                prev = st.counts.clone();
            }
        }
    }
}
