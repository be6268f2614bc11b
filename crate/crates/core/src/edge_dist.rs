//! Product-Bernoulli distributions over directed adjacency matrices.
//!
//! Every entry `(i, j)` of an `N x N` adjacency matrix is an independent
//! Bernoulli variable with probability `theta[(i, j)]`. Entries can be
//! *trainable*, in which case they live in `[epsilon, 1 - epsilon]`, or
//! *frozen*, in which case they keep whatever value they were given (including
//! exactly `0` or `1`) and receive no gradient.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Default probability clamp for trainable entries.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// A binary `N x N` matrix stored as one bitset per row.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct AdjacencySample {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for AdjacencySample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdjacencySample")
            .field("n", &self.n)
            .field("edges", &self.edges().collect::<Vec<_>>())
            .finish()
    }
}

impl AdjacencySample {
    pub fn empty(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Self {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(shape_err(format!("indices below {n}"), format!("({i}, {j})")));
            }
            a.set(i, j, true);
        }
        Ok(a)
    }

    /// Builds a sample from a dense matrix; any non-zero entry is an edge.
    pub fn from_dense(dense: &Array2<u8>) -> Result<Self> {
        let (r, c) = dense.dim();
        if r != c {
            return Err(shape_err("square matrix", format!("{r}x{c}")));
        }
        let mut a = Self::empty(r);
        for ((i, j), &v) in dense.indexed_iter() {
            if v != 0 {
                a.set(i, j, true);
            }
        }
        Ok(a)
    }

    pub fn to_dense(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.n, self.n), |(i, j)| self.get(i, j) as u8)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        let w = &mut self.bits[i * self.words + j / 64];
        if on {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    pub fn clear(&mut self) {
        self.bits.iter_mut().for_each(|w| *w = 0);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    #[inline]
    pub(crate) fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    #[inline]
    pub(crate) fn row_words_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.bits[i * self.words..(i + 1) * self.words]
    }

    /// Column indices of the ones in row `i`, ascending.
    #[inline]
    pub fn row(&self, i: usize) -> RowIter<'_> {
        RowIter {
            words: self.row_words(i),
            word_idx: 0,
            current: self.row_words(i).first().copied().unwrap_or(0),
        }
    }

    /// All `(row, col)` pairs with a one, in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |j| (i, j)))
    }
}

pub struct RowIter<'a> {
    words: &'a [u64],
    word_idx: usize,
    current: u64,
}

impl Iterator for RowIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        loop {
            if self.current != 0 {
                let bit = self.current.trailing_zeros() as usize;
                self.current &= self.current - 1;
                return Some(self.word_idx * 64 + bit);
            }
            self.word_idx += 1;
            self.current = *self.words.get(self.word_idx)?;
        }
    }
}

/// Independent-edge distribution `P_A^theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDistribution {
    theta: Array2<f64>,
    mask: Array2<bool>,
    epsilon: f64,
}

impl EdgeDistribution {
    /// Builds a distribution; trainable entries are projected into
    /// `[epsilon, 1 - epsilon]`, frozen entries must already lie in `[0, 1]`.
    pub fn new(theta: Array2<f64>, mask: Array2<bool>, epsilon: f64) -> Result<Self> {
        let (r, c) = theta.dim();
        if r != c {
            return Err(shape_err("square theta", format!("{r}x{c}")));
        }
        if mask.dim() != theta.dim() {
            return Err(shape_err(format!("{r}x{c} mask"), format!("{:?}", mask.dim())));
        }
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
        }
        for (&t, &m) in theta.iter().zip(mask.iter()) {
            if !t.is_finite() || (!m && !(0.0..=1.0).contains(&t)) {
                return Err(Error::Config(format!("edge probability {t} out of range")));
            }
        }
        let mut d = Self {
            theta,
            mask,
            epsilon,
        };
        d.project_in_place();
        Ok(d)
    }

    /// All entries trainable.
    pub fn trainable(theta: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(theta.dim(), true);
        Self::new(theta, mask, DEFAULT_EPSILON)
    }

    /// All entries frozen at the given values.
    pub fn fixed(theta: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(theta.dim(), false);
        Self::new(theta, mask, DEFAULT_EPSILON)
    }

    pub fn uniform(n: usize, p: f64) -> Result<Self> {
        Self::trainable(Array2::from_elem((n, n), p))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn is_trainable(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    /// Pins entry `(i, j)` to `value` and removes it from the trainable set.
    pub fn freeze(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("frozen probability {value} out of range")));
        }
        self.theta[(i, j)] = value;
        self.mask[(i, j)] = false;
        Ok(())
    }

    /// Overwrites the trainable entries from `values` (row-major, length
    /// `N^2`); frozen entries are left alone and the result is projected.
    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.theta.len() {
            return Err(shape_err(self.theta.len(), values.len()));
        }
        for ((t, &m), &v) in self.theta.iter_mut().zip(self.mask.iter()).zip(values) {
            if m {
                *t = v;
            }
        }
        self.project_in_place();
        Ok(())
    }

    /// Applies `update` to the raw row-major parameter slice, then restores
    /// frozen entries and projects.
    pub fn update(&mut self, update: impl FnOnce(&mut [f64])) {
        let frozen: Vec<(usize, f64)> = self
            .mask
            .iter()
            .zip(self.theta.iter())
            .enumerate()
            .filter(|(_, (&m, _))| !m)
            .map(|(k, (_, &t))| (k, t))
            .collect();
        let slice = self.theta.as_slice_mut().expect("theta is contiguous");
        update(slice);
        for (k, t) in frozen {
            slice[k] = t;
        }
        self.project_in_place();
    }

    pub fn project(&self) -> Self {
        let mut d = self.clone();
        d.project_in_place();
        d
    }

    pub fn project_in_place(&mut self) {
        let (lo, hi) = (self.epsilon, 1.0 - self.epsilon);
        for (t, &m) in self.theta.iter_mut().zip(self.mask.iter()) {
            if m {
                *t = if t.is_nan() { lo } else { t.clamp(lo, hi) };
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AdjacencySample {
        let mut a = AdjacencySample::empty(self.n());
        self.sample_into(rng, &mut a);
        a
    }

    /// Draws a sample into an existing buffer. Consumes exactly `N^2` uniform
    /// draws so sample streams stay aligned across distributions.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut AdjacencySample) {
        let n = self.n();
        if out.n != n {
            *out = AdjacencySample::empty(n);
        }
        let theta = self.theta.as_slice().expect("theta is contiguous");
        for i in 0..n {
            let row = &theta[i * n..(i + 1) * n];
            let words = out.row_words_mut(i);
            for (w, chunk) in words.iter_mut().zip(row.chunks(64)) {
                let mut bits = 0u64;
                for (b, &p) in chunk.iter().enumerate() {
                    let u: f64 = rng.gen();
                    bits |= ((u < p) as u64) << b;
                }
                *w = bits;
            }
        }
    }

    pub fn log_likelihood(&self, a: &AdjacencySample) -> Result<f64> {
        self.check_sample(a)?;
        let n = self.n();
        let mut ll = 0.0;
        for i in 0..n {
            for j in 0..n {
                let t = self.theta[(i, j)];
                if a.get(i, j) {
                    if t == 0.0 {
                        return Err(Error::ImpossibleSample { row: i, col: j });
                    }
                    ll += t.ln();
                } else if t == 1.0 {
                    // A missing edge under a sure edge is equally impossible.
                    return Err(Error::ImpossibleSample { row: i, col: j });
                } else if t > 0.0 {
                    ll += (1.0 - t).ln();
                }
            }
        }
        Ok(ll)
    }

    /// `d log P(A) / d theta`; zero on frozen entries.
    pub fn score_gradient(&self, a: &AdjacencySample) -> Array2<f64> {
        let mut acc = ScoreAccumulator::new(self.n());
        acc.add_sample(a, 1.0);
        acc.finish(self)
    }

    /// `KL(self || prior)` summed over all entries.
    pub fn kl_to(&self, prior: &EdgeDistribution) -> Result<f64> {
        if prior.theta.dim() != self.theta.dim() {
            return Err(shape_err(
                format!("{:?}", self.theta.dim()),
                format!("{:?}", prior.theta.dim()),
            ));
        }
        Ok(self
            .theta
            .iter()
            .zip(prior.theta.iter())
            .map(|(&t, &p)| bernoulli_kl(t, p))
            .sum())
    }

    /// Gradient of [`Self::kl_to`] with respect to the trainable entries.
    pub fn kl_gradient(&self, prior: &EdgeDistribution) -> Result<Array2<f64>> {
        if prior.theta.dim() != self.theta.dim() {
            return Err(shape_err(
                format!("{:?}", self.theta.dim()),
                format!("{:?}", prior.theta.dim()),
            ));
        }
        let mut g = Array2::zeros(self.theta.dim());
        for (((g, &t), &p), &m) in g
            .iter_mut()
            .zip(self.theta.iter())
            .zip(prior.theta.iter())
            .zip(self.mask.iter())
        {
            if m {
                *g = (t / p).ln() - ((1.0 - t) / (1.0 - p)).ln();
            }
        }
        Ok(g)
    }

    /// Number of entries with probability strictly inside `(0, 1)`.
    pub fn stochastic_entries(&self) -> usize {
        self.theta.iter().filter(|&&t| t > 0.0 && t < 1.0).count()
    }

    fn check_sample(&self, a: &AdjacencySample) -> Result<()> {
        if a.n() != self.n() {
            return Err(shape_err(format!("{}-node sample", self.n()), a.n()));
        }
        Ok(())
    }
}

fn bernoulli_kl(t: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(t, p) + term(1.0 - t, 1.0 - p)
}

/// Accumulates `sum_k c_k * d log P(A_k) / d theta` without touching every
/// entry per sample.
///
/// For a trainable entry the score is `A/t - (1-A)/(1-t)`, which regroups as
/// `A * (1/t + 1/(1-t)) - 1/(1-t)`. Only the ones of each sample and one
/// weight total per row need to be tracked.
#[derive(Clone, Debug)]
pub struct ScoreAccumulator {
    n: usize,
    ones: Vec<f64>,
    row_total: Vec<f64>,
}

impl ScoreAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ones: vec![0.0; n * n],
            row_total: vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        self.ones.iter_mut().for_each(|v| *v = 0.0);
        self.row_total.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `weight * score(A)`.
    #[inline]
    pub fn add_sample(&mut self, a: &AdjacencySample, weight: f64) {
        if weight == 0.0 {
            return;
        }
        for i in 0..self.n {
            self.row_total[i] += weight;
            for j in a.row(i) {
                self.ones[i * self.n + j] += weight;
            }
        }
    }

    /// Adds `sum_i row_weights[i] * score(A restricted to row i)`.
    #[inline]
    pub fn add_rows(&mut self, a: &AdjacencySample, row_weights: &[f64]) {
        for (i, &w) in row_weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.row_total[i] += w;
            for j in a.row(i) {
                self.ones[i * self.n + j] += w;
            }
        }
    }

    pub fn finish(&self, dist: &EdgeDistribution) -> Array2<f64> {
        let n = self.n;
        Array2::from_shape_fn((n, n), |(i, j)| {
            if !dist.mask[(i, j)] {
                return 0.0;
            }
            let t = dist.theta[(i, j)];
            self.ones[i * n + j] * (1.0 / t + 1.0 / (1.0 - t)) - self.row_total[i] / (1.0 - t)
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeDistributionRecord {
    n: usize,
    epsilon: f64,
    theta: Vec<f64>,
    mask: Vec<bool>,
}

impl Serialize for EdgeDistribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EdgeDistributionRecord {
            n: self.n(),
            epsilon: self.epsilon,
            theta: self.theta.iter().copied().collect(),
            mask: self.mask.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EdgeDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = EdgeDistributionRecord::deserialize(d)?;
        let theta = Array2::from_shape_vec((r.n, r.n), r.theta).map_err(D::Error::custom)?;
        let mask = Array2::from_shape_vec((r.n, r.n), r.mask).map_err(D::Error::custom)?;
        EdgeDistribution::new(theta, mask, r.epsilon).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_probability_never_fires() {
        let d = EdgeDistribution::fixed(Array2::zeros((5, 5))).unwrap();
        let mut r = rng(1);
        for _ in 0..1000 {
            assert_eq!(d.sample(&mut r).count_ones(), 0);
        }
    }

    #[test]
    fn near_one_probability_rate() {
        // 1 - eps with eps = 1e-4: the binomial 99.99% interval on 10^6 draws
        // sits well inside [0.9996, 1.0].
        let d = EdgeDistribution::uniform(10, 1.0).unwrap();
        assert_eq!(d.theta()[(0, 0)], 1.0 - DEFAULT_EPSILON);
        let mut r = rng(2);
        let mut ones = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            ones += d.sample(&mut r).count_ones();
        }
        let frac = ones as f64 / (draws * 100) as f64;
        assert!((0.9996..=1.0).contains(&frac), "{frac}");
    }

    #[test]
    fn edge_frequency_matches_probability() {
        let mut theta = Array2::zeros((3, 3));
        theta[(0, 1)] = 0.75;
        theta[(1, 2)] = 0.75;
        let d = EdgeDistribution::fixed(theta).unwrap();
        let mut r = rng(3);
        let mut hits = 0;
        for _ in 0..100_000 {
            let a = d.sample(&mut r);
            hits += a.get(0, 1) as usize;
            assert!(!a.get(0, 0));
        }
        assert!((hits as f64 / 1e5 - 0.75).abs() < 0.01);
    }

    #[test]
    fn log_likelihood_examples() {
        let d = EdgeDistribution::uniform(2, 0.5).unwrap();
        let a = AdjacencySample::from_edges(2, &[(0, 1)]).unwrap();
        assert_abs_diff_eq!(d.log_likelihood(&a).unwrap(), 4.0 * 0.5f64.ln(), epsilon = 1e-12);

        let mut theta = Array2::zeros((2, 2));
        theta[(0, 1)] = 0.75;
        let d = EdgeDistribution::fixed(theta).unwrap();
        assert_abs_diff_eq!(d.log_likelihood(&a).unwrap(), 0.75f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn impossible_sample_is_rejected() {
        let d = EdgeDistribution::fixed(Array2::zeros((2, 2))).unwrap();
        let a = AdjacencySample::from_edges(2, &[(1, 0)]).unwrap();
        assert!(matches!(
            d.log_likelihood(&a),
            Err(Error::ImpossibleSample { row: 1, col: 0 })
        ));
    }

    #[test]
    fn score_examples() {
        let d = EdgeDistribution::uniform(1, 0.75).unwrap();
        let on = AdjacencySample::from_edges(1, &[(0, 0)]).unwrap();
        let off = AdjacencySample::empty(1);
        assert_abs_diff_eq!(d.score_gradient(&on)[(0, 0)], 1.0 / 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(d.score_gradient(&off)[(0, 0)], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn score_is_zero_on_frozen_entries() {
        let mut d = EdgeDistribution::uniform(2, 0.3).unwrap();
        d.freeze(0, 1, 0.25).unwrap();
        let a = AdjacencySample::from_edges(2, &[(0, 1), (1, 1)]).unwrap();
        let s = d.score_gradient(&a);
        assert_eq!(s[(0, 1)], 0.0);
        assert_abs_diff_eq!(s[(1, 1)], 1.0 / 0.3, epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        let d = EdgeDistribution::uniform(3, 0.4).unwrap();
        assert_eq!(d.kl_to(&d).unwrap(), 0.0);

        let p = EdgeDistribution::uniform(1, 0.75).unwrap();
        let q = EdgeDistribution::uniform(1, 0.5).unwrap();
        // Two-point sum over A in {0, 1}.
        let oracle: f64 = [(0.75f64, 0.5f64), (0.25, 0.5)]
            .iter()
            .map(|&(a, b)| a * (a / b).ln())
            .sum();
        assert_abs_diff_eq!(p.kl_to(&q).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 0.130812, epsilon = 1e-6);

        assert!(matches!(
            p.kl_to(&EdgeDistribution::uniform(2, 0.5).unwrap()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut r = rng(7);
        for _ in 0..1000 {
            let n = r.gen_range(1..4);
            let a = Array2::from_shape_fn((n, n), |_| r.gen_range(0.01..0.99));
            let b = Array2::from_shape_fn((n, n), |_| r.gen_range(0.01..0.99));
            let a = EdgeDistribution::trainable(a).unwrap();
            let b = EdgeDistribution::trainable(b).unwrap();
            assert!(a.kl_to(&b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let theta = Array2::from_shape_vec((2, 2), vec![0.2, 0.7, 0.45, 0.9]).unwrap();
        let prior = EdgeDistribution::uniform(2, 0.3).unwrap();
        let d = EdgeDistribution::trainable(theta.clone()).unwrap();
        let g = d.kl_gradient(&prior).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let (i, j) = (k / 2, k % 2);
            let mut tp = theta.clone();
            tp[(i, j)] += h;
            let mut tm = theta.clone();
            tm[(i, j)] -= h;
            let fp = EdgeDistribution::trainable(tp).unwrap().kl_to(&prior).unwrap();
            let fm = EdgeDistribution::trainable(tm).unwrap().kl_to(&prior).unwrap();
            assert_abs_diff_eq!(g[(i, j)], (fp - fm) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn projection_examples() {
        let theta = Array2::from_shape_vec((2, 2), vec![1.2, -0.1, 0.5, 0.0]).unwrap();
        let mut mask = Array2::from_elem((2, 2), true);
        mask[(1, 1)] = false;
        let d = EdgeDistribution::new(theta, mask, 1e-4).unwrap();
        assert_eq!(d.theta()[(0, 0)], 1.0 - 1e-4);
        assert_eq!(d.theta()[(0, 1)], 1e-4);
        assert_eq!(d.theta()[(1, 0)], 0.5);
        assert_eq!(d.theta()[(1, 1)], 0.0);
        assert_eq!(d.project().project(), d.project());
    }

    #[test]
    fn update_keeps_frozen_entries() {
        let mut d = EdgeDistribution::uniform(2, 0.5).unwrap();
        d.freeze(1, 0, 0.25).unwrap();
        d.update(|t| t.iter_mut().for_each(|v| *v += 0.7));
        assert_eq!(d.theta()[(1, 0)], 0.25);
        assert_eq!(d.theta()[(0, 0)], 1.0 - 1e-4);
    }

    #[test]
    fn json_round_trip() {
        let mut d = EdgeDistribution::uniform(3, 0.2).unwrap();
        d.freeze(2, 1, 0.0).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["n"], 3);
        assert_eq!(v["theta"].as_array().unwrap().len(), 9);
        assert_eq!(v["mask"][7], false);
        let back: EdgeDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn row_iteration_crosses_word_boundaries() {
        let edges = [(0, 3), (0, 63), (0, 64), (0, 119), (5, 70)];
        let a = AdjacencySample::from_edges(120, &edges).unwrap();
        assert_eq!(a.row(0).collect::<Vec<_>>(), vec![3, 63, 64, 119]);
        assert_eq!(a.edges().collect::<Vec<_>>(), edges.to_vec());
        assert_eq!(AdjacencySample::from_dense(&a.to_dense()).unwrap(), a);
    }
}
