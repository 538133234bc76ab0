//! Adaptive tri-map thresholds and soft-mask pooling of similarity maps.
//!
//! Each map is split by two order statistics: `eps_p`, the smallest of the
//! top `t_p` percent of scores, and `eps_n`, the largest of the bottom `t_n`
//! percent. Temperature sigmoids around those thresholds give soft positive
//! and negative masks, and the mask-weighted means of the map are `SP`/`SN`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_map_with_norms, EmbeddingVector, FeatureMap, SimilarityMap, COSINE_EPS};

pub const DEFAULT_TAU_S: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Percent of the map assigned to the positive region.
    pub tp: f64,
    /// Percent of the map assigned to the negative region.
    pub tn: f64,
    pub tau_s: f64,
}

impl ThresholdConfig {
    /// Defaults for the globally pooled path.
    pub fn pooled() -> Self {
        Self {
            tp: 30.0,
            tn: 50.0,
            tau_s: DEFAULT_TAU_S,
        }
    }

    /// Defaults for the token-cut path.
    pub fn masked() -> Self {
        Self {
            tp: 30.0,
            tn: 30.0,
            tau_s: DEFAULT_TAU_S,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pct = |x: f64| x > 0.0 && x <= 100.0;
        if !pct(self.tp) || !pct(self.tn) {
            return Err(Error::InvalidConfig(format!(
                "tp and tn must be percentages in (0, 100], got {} and {}",
                self.tp, self.tn
            )));
        }
        if self.tp + self.tn > 100.0 {
            return Err(Error::InvalidConfig(format!(
                "tp + tn must not exceed 100, got {}",
                self.tp + self.tn
            )));
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_s must be positive, got {}",
                self.tau_s
            )));
        }
        Ok(())
    }
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self::pooled()
    }
}

/// How the positive/negative masks of each map are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Adaptive thresholds with soft sigmoid masks.
    TriMap,
    /// Hard token-cut foreground masks; whole-map negatives off the diagonal.
    BiMap,
}

/// Number of elements in a region covering `percent` of `n`: ceiling, at least 1.
pub fn region_size(percent: f64, n: usize) -> usize {
    let raw = percent / 100.0 * n as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Selected thresholds together with the map positions they were read from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub eps_p: f64,
    pub eps_n: f64,
    pub index_p: usize,
    pub index_n: usize,
}

pub fn select_thresholds(s: &SimilarityMap, cfg: &ThresholdConfig) -> Thresholds {
    let data = s.data();
    let n = data.len();
    let mut keyed: Vec<(f64, usize)> = data.iter().copied().zip(0..).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let index_p = keyed.select_nth_unstable_by(n - region_size(cfg.tp, n), cmp).1 .1;
    let index_n = keyed.select_nth_unstable_by(region_size(cfg.tn, n) - 1, cmp).1 .1;
    Thresholds {
        eps_p: data[index_p],
        eps_n: data[index_n],
        index_p,
        index_n,
    }
}

/// Distance from either threshold to the nearest other map value; below this
/// the order statistics can swap under a perturbation.
pub fn threshold_margin(s: &SimilarityMap, th: &Thresholds) -> f64 {
    let gap = |idx: usize| {
        let v = s.data()[idx];
        s.data()
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != idx)
            .fold(f64::INFINITY, |m, (_, x)| m.min((x - v).abs()))
    };
    gap(th.index_p).min(gap(th.index_n))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMap {
    pub eps_p: f64,
    pub eps_n: f64,
    pub pos_mask: SimilarityMap,
    pub neg_mask: SimilarityMap,
}

pub fn soft_masks(s: &SimilarityMap, eps_p: f64, eps_n: f64, tau_s: f64) -> TriMap {
    let pos = s.data().iter().map(|x| sigmoid((x - eps_p) / tau_s)).collect();
    let neg = s.data().iter().map(|x| sigmoid(-(x - eps_n) / tau_s)).collect();
    TriMap {
        eps_p,
        eps_n,
        pos_mask: SimilarityMap::from_raw(s.height(), s.width(), pos),
        neg_mask: SimilarityMap::from_raw(s.height(), s.width(), neg),
    }
}

/// Mask-weighted mean `<m, s>_F / Σ m`; falls back to the plain mean for a massless mask.
pub fn pooled_similarity(s: &SimilarityMap, mask: &SimilarityMap) -> f64 {
    weighted_mean(s.data(), mask.data())
}

fn weighted_mean(s: &[f64], m: &[f64]) -> f64 {
    let mass: f64 = m.iter().sum();
    if mass > 0.0 {
        s.iter().zip(m).map(|(x, w)| x * w).sum::<f64>() / mass
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// `N x N` grid of maps; `map(i, j)` compares sample `i`'s visual map with induction vector `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarityTensor {
    n: usize,
    maps: Vec<SimilarityMap>,
}

impl BatchSimilarityTensor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn map(&self, i: usize, j: usize) -> &SimilarityMap {
        &self.maps[i * self.n + j]
    }

    pub fn maps(&self) -> &[SimilarityMap] {
        &self.maps
    }
}

pub fn build_batch_tensor(visual: &[FeatureMap], induction: &[EmbeddingVector]) -> Result<BatchSimilarityTensor> {
    let n = visual.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if induction.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} visual maps but {} induction vectors",
            induction.len()
        )));
    }
    let ind_norms: Vec<f64> = induction.iter().map(EmbeddingVector::norm).collect();
    let mut maps = Vec::with_capacity(n * n);
    for (i, f) in visual.iter().enumerate() {
        let norms = f.position_norms();
        for (j, v) in induction.iter().enumerate() {
            let pair_err = |source: Error| Error::Pair {
                row: i,
                col: j,
                source: Box::new(source),
            };
            if f.channels() != v.dim() {
                return Err(pair_err(Error::ShapeMismatch(format!(
                    "{} channels vs dim {}",
                    f.channels(),
                    v.dim()
                ))));
            }
            maps.push(cosine_map_with_norms(f, &norms, v.as_slice(), ind_norms[j]));
        }
    }
    Ok(BatchSimilarityTensor { n, maps })
}

/// Pooled positive/negative similarity of one map, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PooledMap {
    pub sp: f64,
    pub sn: f64,
    pos_mask: Vec<f64>,
    neg_mask: Vec<f64>,
    /// `∂m/∂s` per position; `None` when the masks are constants.
    pos_slope: Option<Vec<f64>>,
    neg_slope: Option<Vec<f64>>,
    thresholds: Option<Thresholds>,
}

impl PooledMap {
    /// Adaptive tri-map pooling.
    pub fn trimap(s: &SimilarityMap, cfg: &ThresholdConfig) -> Self {
        let th = select_thresholds(s, cfg);
        let n = s.len();
        let inv_tau = 1.0 / cfg.tau_s;
        let mut pos_mask = Vec::with_capacity(n);
        let mut neg_mask = Vec::with_capacity(n);
        let mut pos_slope = Vec::with_capacity(n);
        let mut neg_slope = Vec::with_capacity(n);
        for &x in s.data() {
            let mp = sigmoid((x - th.eps_p) * inv_tau);
            let mn = sigmoid(-(x - th.eps_n) * inv_tau);
            pos_mask.push(mp);
            neg_mask.push(mn);
            pos_slope.push(mp * (1.0 - mp) * inv_tau);
            neg_slope.push(-mn * (1.0 - mn) * inv_tau);
        }
        Self {
            sp: weighted_mean(s.data(), &pos_mask),
            sn: weighted_mean(s.data(), &neg_mask),
            pos_mask,
            neg_mask,
            pos_slope: Some(pos_slope),
            neg_slope: Some(neg_slope),
            thresholds: Some(th),
        }
    }

    /// Pooling with fixed masks.
    pub fn fixed(s: &SimilarityMap, pos_mask: Vec<f64>, neg_mask: Vec<f64>) -> Self {
        Self {
            sp: weighted_mean(s.data(), &pos_mask),
            sn: weighted_mean(s.data(), &neg_mask),
            pos_mask,
            neg_mask,
            pos_slope: None,
            neg_slope: None,
            thresholds: None,
        }
    }

    pub fn thresholds(&self) -> Option<Thresholds> {
        self.thresholds
    }

    /// Gradient w.r.t. the map entries given `∂L/∂SP` and `∂L/∂SN`.
    ///
    /// Threshold positions also receive the gradient of the threshold they set.
    pub fn backward(&self, s: &SimilarityMap, d_sp: f64, d_sn: f64) -> Vec<f64> {
        let mut grad = vec![0.0; s.len()];
        let mut eps_p_grad = 0.0;
        let mut eps_n_grad = 0.0;
        eps_p_grad += pool_backward(
            s.data(),
            &self.pos_mask,
            self.pos_slope.as_deref(),
            self.sp,
            d_sp,
            &mut grad,
        );
        eps_n_grad += pool_backward(
            s.data(),
            &self.neg_mask,
            self.neg_slope.as_deref(),
            self.sn,
            d_sn,
            &mut grad,
        );
        if let Some(th) = self.thresholds {
            grad[th.index_p] += eps_p_grad;
            grad[th.index_n] += eps_n_grad;
        }
        grad
    }
}

/// Accumulates `upstream * ∂pool/∂s` into `grad` and returns `upstream * ∂pool/∂eps`.
fn pool_backward(s: &[f64], mask: &[f64], slope: Option<&[f64]>, pooled: f64, upstream: f64, grad: &mut [f64]) -> f64 {
    if upstream == 0.0 {
        return 0.0;
    }
    let mass: f64 = mask.iter().sum();
    if !(mass > 0.0) {
        let w = upstream / s.len() as f64;
        grad.iter_mut().for_each(|g| *g += w);
        return 0.0;
    }
    let scale = upstream / mass;
    match slope {
        None => {
            for (g, m) in grad.iter_mut().zip(mask) {
                *g += scale * m;
            }
            0.0
        }
        Some(slope) => {
            let mut eps_grad = 0.0;
            for k in 0..s.len() {
                let centred = (s[k] - pooled) * slope[k];
                grad[k] += scale * (mask[k] + centred);
                eps_grad -= scale * centred;
            }
            eps_grad
        }
    }
}

/// `SP`/`SN` for every map of a batch tensor plus the per-map backward state.
#[derive(Debug, Clone)]
pub struct BatchPooling {
    n: usize,
    maps: Vec<PooledMap>,
}

impl BatchPooling {
    /// Tri-map pooling with thresholds taken from each map's own scores.
    pub fn trimap(t: &BatchSimilarityTensor, cfg: &ThresholdConfig) -> Self {
        Self {
            n: t.n,
            maps: t.maps.iter().map(|s| PooledMap::trimap(s, cfg)).collect(),
        }
    }

    /// Bi-map pooling from per-sample foreground masks.
    ///
    /// Sample `i` uses its mask `m` as the positive region of every map in row `i`,
    /// `1 - m` as the negative region of its own map and the whole map elsewhere.
    /// A missing mask pools the whole map.
    pub fn bimap(t: &BatchSimilarityTensor, masks: &[Option<SimilarityMap>]) -> Result<Self> {
        if masks.len() != t.n {
            return Err(Error::ShapeMismatch(format!(
                "{} masks for a batch of {}",
                masks.len(),
                t.n
            )));
        }
        let len = t.maps[0].len();
        let mut maps = Vec::with_capacity(t.n * t.n);
        for (i, mask) in masks.iter().enumerate() {
            let fg: Vec<f64> = match mask {
                Some(m) if m.len() == len => m.data().to_vec(),
                Some(_) => return Err(Error::ShapeMismatch("mask and map sizes differ".into()).at_sample(i)),
                None => vec![1.0; len],
            };
            let bg: Vec<f64> = fg.iter().map(|m| 1.0 - m).collect();
            for j in 0..t.n {
                let neg = if i == j { bg.clone() } else { vec![1.0; len] };
                maps.push(PooledMap::fixed(t.map(i, j), fg.clone(), neg));
            }
        }
        Ok(Self { n: t.n, maps })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn map(&self, i: usize, j: usize) -> &PooledMap {
        &self.maps[i * self.n + j]
    }

    /// Row-major `N x N` positive similarities.
    pub fn sp(&self) -> Vec<f64> {
        self.maps.iter().map(|m| m.sp).collect()
    }

    /// Row-major `N x N` negative similarities.
    pub fn sn(&self) -> Vec<f64> {
        self.maps.iter().map(|m| m.sn).collect()
    }

    /// Smallest [`threshold_margin`] over the maps; infinite for fixed masks.
    pub fn threshold_margin(&self, t: &BatchSimilarityTensor) -> f64 {
        self.maps
            .iter()
            .zip(&t.maps)
            .filter_map(|(pm, s)| pm.thresholds.map(|th| threshold_margin(s, &th)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Gradients w.r.t. every map of `t`, row-major like the maps themselves.
    pub fn backward(&self, t: &BatchSimilarityTensor, d_sp: &[f64], d_sn: &[f64]) -> Vec<Vec<f64>> {
        self.maps
            .iter()
            .zip(&t.maps)
            .enumerate()
            .map(|(k, (pm, s))| pm.backward(s, d_sp[k], d_sn[k]))
            .collect()
    }
}

/// Row-major `SP` and `SN` matrices under adaptive tri-map pooling.
pub fn sp_sn_matrices(t: &BatchSimilarityTensor, cfg: &ThresholdConfig) -> (Vec<f64>, Vec<f64>) {
    let pooled = BatchPooling::trimap(t, cfg);
    (pooled.sp(), pooled.sn())
}

/// Gradient of a cosine map w.r.t. the visual map, given `∂L/∂s` per position.
///
/// The query vector `v` is a constant. Accumulates into `out` (channel-major).
pub fn cosine_map_backward(f: &FeatureMap, norms: &[f64], v: &[f64], grad_s: &[f64], out: &mut [f64]) {
    let p = f.positions();
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bv = v_norm + COSINE_EPS;
    let mut dots = vec![0.0; p];
    for (c, &vc) in v.iter().enumerate() {
        for (acc, x) in dots.iter_mut().zip(f.channel(c)) {
            *acc += x * vc;
        }
    }
    // s = d / (a b) with a = |x| + eps: ∂s/∂x = v/(a b) - d x / (a² b |x|)
    let mut coef_v = vec![0.0; p];
    let mut coef_x = vec![0.0; p];
    for k in 0..p {
        if grad_s[k] == 0.0 {
            continue;
        }
        let a = norms[k] + COSINE_EPS;
        coef_v[k] = grad_s[k] / (a * bv);
        if norms[k] > 0.0 {
            coef_x[k] = -grad_s[k] * dots[k] / (a * a * bv * norms[k]);
        }
    }
    for (c, &vc) in v.iter().enumerate() {
        let xs = f.channel(c);
        let o = &mut out[c * p..(c + 1) * p];
        for k in 0..p {
            o[k] += coef_v[k] * vc + coef_x[k] * xs[k];
        }
    }
}

/// Gradient of every map in row `i` of a batch tensor w.r.t. visual map `f`.
///
/// `s_row[j]` is the forward map of `f` against `queries[j]`, whose raw dot
/// products are recovered as `s * (|x|+eps) * (|v|+eps)`. Equivalent to
/// calling [`cosine_map_backward`] once per query, accumulated into `out`.
pub fn cosine_row_backward(
    f: &FeatureMap,
    norms: &[f64],
    queries: &[&[f64]],
    s_row: &[&SimilarityMap],
    grad_row: &[&[f64]],
    out: &mut [f64],
) {
    let p = f.positions();
    let channels = f.channels();
    // out[c, k] += Σ_j cv[j, k] v_j[c] + cx[k] x[c, k]
    let mut cv = vec![0.0; queries.len() * p];
    let mut cx = vec![0.0; p];
    for (j, v) in queries.iter().enumerate() {
        let bv = v.iter().map(|x| x * x).sum::<f64>().sqrt() + COSINE_EPS;
        let (s, g) = (s_row[j].data(), grad_row[j]);
        let row = &mut cv[j * p..(j + 1) * p];
        for k in 0..p {
            if g[k] == 0.0 {
                continue;
            }
            let a = norms[k] + COSINE_EPS;
            row[k] = g[k] / (a * bv);
            if norms[k] > 0.0 {
                // d / (a² b |x|) with d = s a b
                cx[k] -= g[k] * s[k] / (a * norms[k]);
            }
        }
    }
    for c in 0..channels {
        let o = &mut out[c * p..(c + 1) * p];
        for (oo, (xs, w)) in o.iter_mut().zip(f.channel(c).iter().zip(&cx)) {
            *oo += w * xs;
        }
        for (j, v) in queries.iter().enumerate() {
            let vc = v[c];
            if vc == 0.0 {
                continue;
            }
            for (oo, w) in o.iter_mut().zip(&cv[j * p..(j + 1) * p]) {
                *oo += w * vc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, d: &[f64]) -> SimilarityMap {
        SimilarityMap::new(h, w, d.to_vec()).unwrap()
    }

    fn cfg(tp: f64, tn: f64) -> ThresholdConfig {
        ThresholdConfig {
            tp,
            tn,
            tau_s: DEFAULT_TAU_S,
        }
    }

    #[test]
    fn region_sizes_use_ceiling() {
        assert_eq!(region_size(25.0, 4), 1);
        assert_eq!(region_size(30.0, 49), 15);
        assert_eq!(region_size(30.0, 196), 59);
        assert_eq!(region_size(1.0, 4), 1);
        assert_eq!(region_size(100.0, 7), 7);
    }

    #[test]
    fn threshold_examples() {
        let s = map(2, 2, &[0.3, 0.1, 0.4, 0.2]);
        let th = select_thresholds(&s, &cfg(25.0, 25.0));
        assert_eq!((th.eps_p, th.eps_n), (0.4, 0.1));
        assert_eq!((th.index_p, th.index_n), (2, 1));

        let th = select_thresholds(&s, &cfg(100.0, 100.0));
        assert_eq!((th.eps_p, th.eps_n), (s.min(), s.max()));

        let c = SimilarityMap::filled(3, 3, 0.42).unwrap();
        let th = select_thresholds(&c, &cfg(30.0, 50.0));
        assert_eq!((th.eps_p, th.eps_n), (0.42, 0.42));
    }

    #[test]
    fn soft_mask_examples() {
        let s = map(1, 3, &[0.5, -0.2, 0.5 + 10.0 * DEFAULT_TAU_S]);
        let t = soft_masks(&s, 0.5, -0.2, DEFAULT_TAU_S);
        assert_eq!(t.pos_mask.get(0, 0), 0.5);
        assert_eq!(t.neg_mask.get(0, 1), 0.5);
        // sigmoid(10) = 1 / (1 + e^-10)
        assert!((t.pos_mask.get(0, 2) - 0.999_954_602_131_297_6).abs() < 1e-12);
    }

    #[test]
    fn pooled_similarity_examples() {
        let s = map(2, 2, &[0.1, 0.5, -0.3, 0.9]);
        let uniform = SimilarityMap::filled(2, 2, 0.37).unwrap();
        assert!((pooled_similarity(&s, &uniform) - 0.3).abs() < 1e-15);

        let tau = DEFAULT_TAU_S;
        let peaked = map(2, 2, &[0.5, 0.5, 0.5, 0.5 + 20.0 * tau]);
        let masks = soft_masks(&peaked, 0.5 + 10.0 * tau, 0.0, tau);
        assert!((pooled_similarity(&peaked, &masks.pos_mask) - peaked.get(1, 1)).abs() < 1e-3);

        let c = SimilarityMap::filled(2, 3, -0.25).unwrap();
        let m = map(2, 3, &[0.1, 0.9, 0.3, 0.2, 0.05, 0.7]);
        assert!((pooled_similarity(&c, &m) + 0.25).abs() < 1e-15);
    }

    fn fm(v: &[f64], h: usize, w: usize) -> FeatureMap {
        FeatureMap::constant(&EmbeddingVector::new(v.to_vec()).unwrap(), h, w).unwrap()
    }

    #[test]
    fn batch_tensor_examples() {
        let v = EmbeddingVector::new(vec![0.2, -0.4, 1.0]).unwrap();
        let f = FeatureMap::constant(&v, 2, 2).unwrap();
        let t = build_batch_tensor(&[f], std::slice::from_ref(&v)).unwrap();
        assert!(t.map(0, 0).data().iter().all(|x| (x - 1.0).abs() < 1e-10));

        let a = FeatureMap::from_fn(2, 2, 2, |c, i, j| (c + i + 2 * j) as f64 - 1.0).unwrap();
        let b = fm(&[1.0, 0.5], 2, 2);
        let ia = crate::tensor::gap(&a);
        let ib = EmbeddingVector::new(vec![-1.0, 2.0]).unwrap();
        let t = build_batch_tensor(&[a.clone(), b.clone()], &[ia.clone(), ib.clone()]).unwrap();
        let svv = crate::tensor::cosine_similarity_map(&a, &ia).unwrap();
        assert_eq!(t.map(0, 0), &svv);

        let swapped = build_batch_tensor(&[b, a], &[ib, ia]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(t.map(i, j), swapped.map(1 - i, 1 - j));
            }
        }

        assert!(matches!(
            build_batch_tensor(&[fm(&[1.0, 0.0], 1, 1)], &[EmbeddingVector::new(vec![1.0]).unwrap()]),
            Err(Error::Pair { row: 0, col: 0, .. })
        ));
        assert_eq!(build_batch_tensor(&[], &[]).unwrap_err(), Error::EmptyBatch);
    }

    #[test]
    fn constant_map_collapses_sp_and_sn() {
        let v = EmbeddingVector::new(vec![1.0, 1.0]).unwrap();
        let f = FeatureMap::constant(&v, 3, 3).unwrap();
        let t = build_batch_tensor(&[f], &[v]).unwrap();
        let (sp, sn) = sp_sn_matrices(&t, &ThresholdConfig::pooled());
        let c = t.map(0, 0).get(0, 0);
        assert!((sp[0] - c).abs() < 1e-15 && (sn[0] - c).abs() < 1e-15);
    }

    #[test]
    fn two_level_plateau_is_recovered() {
        for (tp, tn) in [(30.0, 50.0), (30.0, 30.0), (20.0, 10.0)] {
            let n = 100;
            let k = region_size(tp, n);
            let data: Vec<f64> = (0..n).map(|i| if i < k { 0.8 } else { 0.1 }).collect();
            let s = map(10, 10, &data);
            let pm = PooledMap::trimap(&s, &cfg(tp, tn));
            assert!((pm.sp - 0.8).abs() < 1e-3, "tp={tp}: {}", pm.sp);
            assert!(pm.sp >= pm.sn);
        }
    }

    #[test]
    fn sp_converges_to_hard_mean_as_temperature_drops() {
        // Top 30% is a plateau at 0.7; the rest is spread below it.
        let top = region_size(30.0, 49);
        let data: Vec<f64> = (0..49)
            .map(|k| {
                if k < top {
                    0.7
                } else {
                    -0.8 + 1.495 * (k - top) as f64 / (49 - top) as f64
                }
            })
            .collect();
        let s = map(7, 7, &data);
        let errs: Vec<f64> = [0.03, 0.003, 0.0003]
            .iter()
            .map(|&tau_s| {
                (PooledMap::trimap(
                    &s,
                    &ThresholdConfig {
                        tp: 30.0,
                        tn: 50.0,
                        tau_s,
                    },
                )
                .sp - 0.7)
                    .abs()
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-6);
    }

    #[test]
    fn threshold_element_keeps_half_weight_in_the_limit() {
        let data: Vec<f64> = (0..49).map(|k| ((k * 37) % 49) as f64 / 48.0 * 1.6 - 0.8).collect();
        let s = map(7, 7, &data);
        let top = region_size(30.0, 49);
        let mut sorted = data.clone();
        sorted.sort_by(f64::total_cmp);
        let half = (sorted[49 - top + 1..].iter().sum::<f64>() + 0.5 * sorted[49 - top]) / (top as f64 - 0.5);
        let pm = PooledMap::trimap(
            &s,
            &ThresholdConfig {
                tp: 30.0,
                tn: 50.0,
                tau_s: 0.0003,
            },
        );
        assert!((pm.sp - half).abs() < 1e-9);
    }

    #[test]
    fn bimap_uses_masks_and_whole_map_negatives() {
        let a = FeatureMap::from_fn(2, 1, 4, |c, _, j| if (j < 2) == (c == 0) { 1.0 } else { 0.1 }).unwrap();
        let b = FeatureMap::from_fn(2, 1, 4, |c, _, j| (c + j) as f64 + 0.5).unwrap();
        let ia = crate::tensor::gap(&a);
        let ib = crate::tensor::gap(&b);
        let t = build_batch_tensor(&[a, b], &[ia, ib]).unwrap();
        let m = SimilarityMap::new(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pool = BatchPooling::bimap(&t, &[Some(m), None]).unwrap();
        let s00 = t.map(0, 0).data();
        assert!((pool.map(0, 0).sp - (s00[0] + s00[1]) / 2.0).abs() < 1e-15);
        assert!((pool.map(0, 0).sn - (s00[2] + s00[3]) / 2.0).abs() < 1e-15);
        let s01 = t.map(0, 1).data();
        assert!((pool.map(0, 1).sn - s01.iter().sum::<f64>() / 4.0).abs() < 1e-15);
        let s11 = t.map(1, 1).data();
        assert!((pool.map(1, 1).sp - s11.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn pooled_map_backward_matches_finite_differences() {
        let data: Vec<f64> = (0..16).map(|k| ((k * 11 % 16) as f64 / 15.0 - 0.5) * 1.3).collect();
        let s = map(4, 4, &data);
        let c = cfg(30.0, 50.0);
        let (gp, gn) = (0.7, -1.3);
        let pm = PooledMap::trimap(&s, &c);
        let analytic = pm.backward(&s, gp, gn);
        let h = 1e-6;
        for k in 0..16 {
            let mut up = data.clone();
            up[k] += h;
            let mut dn = data.clone();
            dn[k] -= h;
            let f = |d: Vec<f64>| {
                let p = PooledMap::trimap(&map(4, 4, &d), &c);
                gp * p.sp + gn * p.sn
            };
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() < 1e-6 * analytic[k].abs().max(1.0),
                "k={k}: {fd} vs {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let f = FeatureMap::from_fn(3, 2, 2, |c, i, j| ((c * 5 + i * 3 + j * 7) % 11) as f64 / 5.0 - 1.0).unwrap();
        let v = [0.3, -0.8, 0.5];
        let g = [0.4, -1.1, 0.25, 0.9];
        let mut out = vec![0.0; 12];
        cosine_map_backward(&f, &f.position_norms(), &v, &g, &mut out);
        let objective = |f: &FeatureMap| {
            let s = crate::tensor::cosine_similarity_map(f, &EmbeddingVector::new(v.to_vec()).unwrap()).unwrap();
            s.data().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for k in 0..12 {
            let mut up = f.data().to_vec();
            up[k] += h;
            let mut dn = f.data().to_vec();
            dn[k] -= h;
            let fd = (objective(&FeatureMap::new(3, 2, 2, up).unwrap())
                - objective(&FeatureMap::new(3, 2, 2, dn).unwrap()))
                / (2.0 * h);
            assert!((fd - out[k]).abs() < 1e-8, "k={k}");
        }
    }

    #[test]
    fn row_backward_matches_per_query_backward() {
        let f = FeatureMap::from_fn(3, 2, 3, |c, i, j| ((c * 5 + i * 3 + j * 7) % 11) as f64 / 5.0 - 1.0).unwrap();
        let queries = [vec![0.3, -0.8, 0.5], vec![1.0, 0.0, 0.0], vec![-0.2, 0.4, 2.0]];
        let grads = [
            vec![0.4, -1.1, 0.25, 0.9, 0.0, 0.3],
            vec![0.0; 6],
            vec![-0.5, 0.2, 0.1, 0.7, -0.3, 1.2],
        ];
        let norms = f.position_norms();
        let maps: Vec<SimilarityMap> = queries
            .iter()
            .map(|q| crate::tensor::cosine_similarity_map(&f, &EmbeddingVector::new(q.clone()).unwrap()).unwrap())
            .collect();
        let mut expected = vec![0.0; 18];
        for (q, g) in queries.iter().zip(&grads) {
            cosine_map_backward(&f, &norms, q, g, &mut expected);
        }
        let mut got = vec![0.0; 18];
        let qs: Vec<&[f64]> = queries.iter().map(Vec::as_slice).collect();
        let ss: Vec<&SimilarityMap> = maps.iter().collect();
        let gs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        cosine_row_backward(&f, &norms, &qs, &ss, &gs, &mut got);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn eps_p_dominates_eps_n(
            data in proptest::collection::vec(-1.0f64..1.0, 2..80),
            tp in 1.0f64..99.0,
            frac in 0.0f64..1.0,
        ) {
            let tn = ((100.0 - tp) * frac).max(0.5);
            prop_assume!(tp + tn <= 100.0);
            let n = data.len();
            let s = map(1, n, &data);
            let th = select_thresholds(&s, &cfg(tp, tn));
            prop_assert!(th.eps_p >= th.eps_n);
        }

        #[test]
        fn batch_pooling_is_permutation_equivariant(seed in 0u64..1000) {
            let mk = |k: u64| {
                FeatureMap::from_fn(3, 2, 3, |c, i, j| {
                    (((seed + k) * 7919 + c as u64 * 104_729 + i as u64 * 31 + j as u64 * 17) % 1000) as f64 / 500.0 - 1.0
                }).unwrap()
            };
            let maps = [mk(1), mk(2), mk(3)];
            let inds: Vec<EmbeddingVector> = maps.iter().map(crate::tensor::gap).collect();
            let t = build_batch_tensor(&maps, &inds).unwrap();
            let perm = [2usize, 0, 1];
            let pm: Vec<FeatureMap> = perm.iter().map(|&k| maps[k].clone()).collect();
            let pi: Vec<EmbeddingVector> = perm.iter().map(|&k| inds[k].clone()).collect();
            let tp = build_batch_tensor(&pm, &pi).unwrap();
            let (sp, sn) = sp_sn_matrices(&t, &ThresholdConfig::pooled());
            let (psp, psn) = sp_sn_matrices(&tp, &ThresholdConfig::pooled());
            for a in 0..3 {
                for b in 0..3 {
                    prop_assert_eq!(psp[a * 3 + b], sp[perm[a] * 3 + perm[b]]);
                    prop_assert_eq!(psn[a * 3 + b], sn[perm[a] * 3 + perm[b]]);
                }
            }
        }
    }
}
