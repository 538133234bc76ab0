//! Dense feature maps, embedding vectors and similarity maps.
//!
//! Everything here is `f64` and channel-major: a [`FeatureMap`] stores channel
//! `c` at `data[c * h * w ..][.. h * w]`, each channel row-major over the grid.

use crate::error::{Error, Result};

/// Norm guard used by cosine similarities computed over maps and batches.
pub const COSINE_EPS: f64 = 1e-12;

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A `C x h x w` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data, "feature map")?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a map from a closure over `(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Every position holds the same vector.
    pub fn constant(vector: &EmbeddingVector, height: usize, width: usize) -> Result<Self> {
        Self::from_fn(vector.dim(), height, width, |c, _, _| vector[c])
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `h * w`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[c * self.positions() + i * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.positions();
        &self.data[c * p..(c + 1) * p]
    }

    /// The channel vector at flat position `p = i * w + j`.
    pub fn token(&self, p: usize) -> EmbeddingVector {
        let stride = self.positions();
        EmbeddingVector((0..self.channels).map(|c| self.data[c * stride + p]).collect())
    }

    /// All position vectors in row-major grid order.
    pub fn tokens(&self) -> Vec<EmbeddingVector> {
        (0..self.positions()).map(|p| self.token(p)).collect()
    }

    /// Euclidean norm of every position vector.
    pub fn position_norms(&self) -> Vec<f64> {
        let p = self.positions();
        let mut sq = vec![0.0; p];
        for c in 0..self.channels {
            for (acc, x) in sq.iter_mut().zip(self.channel(c)) {
                *acc += x * x;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|x| x * alpha).collect(),
        )
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// A length-`C` real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ShapeMismatch("embedding vector must be non-empty".into()));
        }
        check_finite(&data, "embedding vector")?;
        Ok(Self(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|x| x * alpha).collect())
    }
}

impl std::ops::Index<usize> for EmbeddingVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// An `h x w` real map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        check_finite(&data, "similarity map")?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Flat index of the largest entry; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = k;
            }
        }
        best
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent lanes let the compiler vectorize the reduction.
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f64>() + tail
}

/// Global average pooling over all spatial positions.
pub fn gap(f: &FeatureMap) -> EmbeddingVector {
    let p = f.positions() as f64;
    EmbeddingVector((0..f.channels).map(|c| f.channel(c).iter().sum::<f64>() / p).collect())
}

/// Mean over the positions where `mask` is nonzero, weighted by the mask.
pub fn masked_gap(f: &FeatureMap, mask: &SimilarityMap) -> Result<EmbeddingVector> {
    if mask.height != f.height || mask.width != f.width {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{} but feature map is {}x{}",
            mask.height, mask.width, f.height, f.width
        )));
    }
    let mass: f64 = mask.data.iter().sum();
    if mass == 0.0 {
        return Err(Error::AllZeroMask);
    }
    Ok(EmbeddingVector(
        (0..f.channels).map(|c| dot(f.channel(c), &mask.data) / mass).collect(),
    ))
}

/// Strict cosine similarity: errors on a zero-norm argument.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with dims {} and {}",
            u.dim(),
            v.dim()
        )));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine with [`COSINE_EPS`] added to each norm, for batch and map contexts.
pub fn cosine_similarity_guarded(u: &[f64], v: &[f64]) -> f64 {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    (dot(u, v) / ((nu + COSINE_EPS) * (nv + COSINE_EPS))).clamp(-1.0, 1.0)
}

/// Cosine similarity of every position of `f` against `v`.
///
/// A zero `v` is an error; zero position vectors are guarded and score 0.
pub fn cosine_similarity_map(f: &FeatureMap, v: &EmbeddingVector) -> Result<SimilarityMap> {
    if f.channels != v.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {} channels, vector has dim {}",
            f.channels,
            v.dim()
        )));
    }
    let nv = v.norm();
    if nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let norms = f.position_norms();
    Ok(cosine_map_with_norms(f, &norms, v.as_slice(), nv))
}

pub(crate) fn cosine_map_with_norms(f: &FeatureMap, norms: &[f64], v: &[f64], v_norm: f64) -> SimilarityMap {
    let p = f.positions();
    let mut dots = vec![0.0; p];
    for (c, &vc) in v.iter().enumerate() {
        for (acc, x) in dots.iter_mut().zip(f.channel(c)) {
            *acc += x * vc;
        }
    }
    let denom_v = v_norm + COSINE_EPS;
    let data = dots
        .iter()
        .zip(norms)
        .map(|(d, n)| (d / ((n + COSINE_EPS) * denom_v)).clamp(-1.0, 1.0))
        .collect();
    SimilarityMap::from_raw(f.height, f.width, data)
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn minmax_normalize(s: &SimilarityMap) -> SimilarityMap {
    let (lo, hi) = (s.min(), s.max());
    let range = hi - lo;
    let data = if range > 0.0 {
        s.data.iter().map(|x| (x - lo) / range).collect()
    } else {
        vec![0.0; s.len()]
    };
    SimilarityMap::from_raw(s.height, s.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn gap_of_constant_map_is_the_vector() {
        let v = ev(&[0.5, -1.0, 2.0]);
        let f = FeatureMap::constant(&v, 3, 4).unwrap();
        assert_eq!(gap(&f), v);
        let single = FeatureMap::constant(&v, 1, 1).unwrap();
        assert_eq!(gap(&single), v);
    }

    #[test]
    fn gap_two_channel_example() {
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 3.0, 0.0, 4.0]).unwrap();
        assert_eq!(gap(&f).as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn masked_gap_cases() {
        let f = FeatureMap::from_fn(3, 2, 3, |c, i, j| (c * 7 + i * 3 + j) as f64 * 0.25).unwrap();
        let ones = SimilarityMap::filled(2, 3, 1.0).unwrap();
        assert_eq!(masked_gap(&f, &ones).unwrap(), gap(&f));

        let mut one_hot = vec![0.0; 6];
        one_hot[4] = 1.0;
        let m = SimilarityMap::new(2, 3, one_hot).unwrap();
        assert_eq!(masked_gap(&f, &m).unwrap(), f.token(4));

        let zeros = SimilarityMap::filled(2, 3, 0.0).unwrap();
        assert_eq!(masked_gap(&f, &zeros), Err(Error::AllZeroMask));

        let wrong = SimilarityMap::filled(3, 2, 1.0).unwrap();
        assert!(matches!(masked_gap(&f, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let u = ev(&[1.0, 2.0, -0.5]);
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let a = ev(&[1.0, 0.0]);
        let b = ev(&[0.0, 3.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&u, &u.scaled(-1.0)).unwrap(), -1.0);
    }

    #[test]
    fn cosine_zero_vector_errors() {
        let u = ev(&[1.0, 2.0]);
        let z = ev(&[0.0, 0.0]);
        assert_eq!(cosine_similarity(&u, &z), Err(Error::ZeroVector));
        assert_eq!(cosine_similarity(&z, &u), Err(Error::ZeroVector));
    }

    #[test]
    fn cosine_map_examples() {
        let v = ev(&[1.0, -2.0, 0.5]);
        let f = FeatureMap::constant(&v, 2, 2).unwrap();
        let s = cosine_similarity_map(&f, &v).unwrap();
        assert!(s.data().iter().all(|x| (x - 1.0).abs() < 1e-10));

        let v = ev(&[1.0, 0.0]);
        let f = FeatureMap::from_fn(2, 2, 2, |c, _, _| if c == 1 { 3.0 } else { 0.0 }).unwrap();
        let s = cosine_similarity_map(&f, &v).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));

        let v = ev(&[0.6, 0.8]);
        let f = FeatureMap::from_fn(2, 1, 2, |c, _, j| if j == 0 { v[c] } else { -v[c] }).unwrap();
        let s = cosine_similarity_map(&f, &v).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-10);
        assert!((s.get(0, 1) + 1.0).abs() < 1e-10);
    }

    #[test]
    fn cosine_map_guards_zero_positions_but_not_zero_query() {
        let f = FeatureMap::new(2, 1, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = cosine_similarity_map(&f, &ev(&[1.0, 1.0])).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-10);
        assert_eq!(cosine_similarity_map(&f, &ev(&[0.0, 0.0])), Err(Error::ZeroVector));
    }

    #[test]
    fn minmax_examples() {
        let s = SimilarityMap::new(2, 2, vec![0.0, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(minmax_normalize(&s).data(), &[0.0, 0.25, 0.5, 1.0]);
        let c = SimilarityMap::filled(3, 3, 0.7).unwrap();
        assert!(minmax_normalize(&c).data().iter().all(|&x| x == 0.0));
        let unit = SimilarityMap::new(1, 3, vec![0.0, 0.3, 1.0]).unwrap();
        assert_eq!(minmax_normalize(&unit), unit);
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(
            FeatureMap::new(2, 2, 2, vec![0.0; 7]),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(
            FeatureMap::new(1, 1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite("feature map"))
        );
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert!(EmbeddingVector::new(vec![f64::INFINITY]).is_err());
    }

    fn feature_map_strategy() -> impl Strategy<Value = FeatureMap> {
        (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-10.0f64..10.0, c * h * w).prop_map(move |d| FeatureMap::new(c, h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn gap_equals_full_mask(f in feature_map_strategy()) {
            let ones = SimilarityMap::filled(f.height(), f.width(), 1.0).unwrap();
            prop_assert_eq!(gap(&f), masked_gap(&f, &ones).unwrap());
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            let (u, v) = (ev(&u), ev(&v));
            prop_assume!(u.norm() > 1e-6 && v.norm() > 1e-6);
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert_eq!(c, cosine_similarity(&v, &u).unwrap());
            let scaled = cosine_similarity(&u.scaled(alpha), &v.scaled(beta)).unwrap();
            prop_assert!((c - scaled).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn minmax_range_and_idempotence(data in proptest::collection::vec(-3.0f64..3.0, 2..30)) {
            let n = data.len();
            let s = SimilarityMap::new(1, n, data).unwrap();
            let once = minmax_normalize(&s);
            prop_assert!(once.data().iter().all(|x| (0.0..=1.0).contains(x)));
            if s.max() > s.min() {
                prop_assert_eq!(once.min(), 0.0);
                prop_assert_eq!(once.max(), 1.0);
                prop_assert_eq!(minmax_normalize(&once), once);
            }
        }

        #[test]
        fn map_ops_stay_finite(f in feature_map_strategy(), seed in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let v = EmbeddingVector::new(seed[..f.channels()].to_vec()).unwrap();
            prop_assume!(v.norm() > 0.0);
            let s = cosine_similarity_map(&f, &v).unwrap();
            prop_assert!(s.data().iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));
            prop_assert!(minmax_normalize(&s).data().iter().all(|x| x.is_finite()));
            prop_assert!(gap(&f).as_slice().iter().all(|x| x.is_finite()));
        }
    }
}
