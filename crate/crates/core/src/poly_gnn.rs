//! Hop-polynomial graph predictor.
//!
//! `f(x, A) = tanh( sum_l 1[A^l != 0] x W_l^T )` where `W_l` is `d_out x d_in`.
//! The indicator only depends on reachability, so hop matrices are computed
//! with boolean products on row bitsets.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edge_dist::AdjacencySample;
use crate::error::{shape_err, Error, Result};

/// Node-level feature stack, `N x d`.
pub type NodeFeatures = Array2<f64>;

/// Reachability matrices of exactly `1..=hops` steps.
pub fn hop_matrices(a: &AdjacencySample, hops: usize) -> Vec<AdjacencySample> {
    let mut out = Vec::new();
    hop_matrices_into(a, hops, &mut out);
    out
}

pub(crate) fn hop_matrices_into(a: &AdjacencySample, hops: usize, out: &mut Vec<AdjacencySample>) {
    let n = a.n();
    out.resize_with(hops, || AdjacencySample::empty(n));
    if hops == 0 {
        return;
    }
    out[0].clone_from(a);
    for l in 1..hops {
        let (done, rest) = out.split_at_mut(l);
        let prev = &done[l - 1];
        let next = &mut rest[0];
        if next.n() != n {
            *next = AdjacencySample::empty(n);
        }
        for i in 0..n {
            let dst = next.row_words_mut(i);
            dst.iter_mut().for_each(|w| *w = 0);
            for k in prev.row(i) {
                for (d, s) in dst.iter_mut().zip(a.row_words(k)) {
                    *d |= s;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyGnn {
    layers: Vec<Array2<f64>>,
}

impl PolyGnn {
    pub fn new(layers: Vec<Array2<f64>>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidShape("at least one hop layer is required".into()))?;
        let dim = first.dim();
        if let Some(bad) = layers.iter().find(|w| w.dim() != dim) {
            return Err(shape_err(format!("{dim:?}"), format!("{:?}", bad.dim())));
        }
        Ok(Self { layers })
    }

    /// All weights drawn i.i.d. from `U(low, high)`.
    pub fn random<R: Rng + ?Sized>(
        hops: usize,
        d_in: usize,
        d_out: usize,
        low: f64,
        high: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..hops)
            .map(|_| Array2::from_shape_fn((d_out, d_in), |_| low + (high - low) * rng.gen::<f64>()))
            .collect();
        Self::new(layers)
    }

    pub fn hops(&self) -> usize {
        self.layers.len()
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn d_out(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(shape_err(self.num_params(), values.len()));
        }
        for (w, v) in self.layers.iter_mut().flat_map(|w| w.iter_mut()).zip(values) {
            *w = *v;
        }
        Ok(())
    }

    pub fn forward(&self, x: &NodeFeatures, a: &AdjacencySample) -> Result<NodeFeatures> {
        self.check_input(x, a)?;
        let proj = Projected::new(self, x.view());
        let hops = hop_matrices(a, self.hops());
        let mut y = vec![0.0; x.nrows() * self.d_out()];
        proj.forward(&hops, &mut y);
        Ok(Array2::from_shape_vec((x.nrows(), self.d_out()), y).expect("sized above"))
    }

    /// Gradients `dL/dW_l` given `dL/dy` at the output of [`Self::forward`].
    pub fn backward(
        &self,
        x: &NodeFeatures,
        a: &AdjacencySample,
        dl_dy: &NodeFeatures,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_input(x, a)?;
        if dl_dy.dim() != (x.nrows(), self.d_out()) {
            return Err(shape_err(
                format!("{}x{}", x.nrows(), self.d_out()),
                format!("{:?}", dl_dy.dim()),
            ));
        }
        let proj = Projected::new(self, x.view());
        let hops = hop_matrices(a, self.hops());
        let mut y = vec![0.0; x.nrows() * self.d_out()];
        proj.forward(&hops, &mut y);
        let mut scatter = proj.scatter_buffer();
        let g: Vec<f64> = dl_dy.iter().copied().collect();
        proj.scatter_back(&hops, &y, &g, &mut scatter);
        Ok(proj.weight_gradients(&scatter))
    }

    /// Rescales every weight by `1 + delta`, `delta ~ U[-max_pert, max_pert]`.
    pub fn perturb<R: Rng + ?Sized>(&self, max_pert: f64, rng: &mut R) -> Result<Self> {
        if !(max_pert >= 0.0) {
            return Err(Error::Config(format!("perturbation bound must be >= 0, got {max_pert}")));
        }
        let mut out = self.clone();
        for w in out.layers.iter_mut().flat_map(|w| w.iter_mut()) {
            let delta = max_pert * (2.0 * rng.gen::<f64>() - 1.0);
            *w *= 1.0 + delta;
        }
        Ok(out)
    }

    fn check_input(&self, x: &NodeFeatures, a: &AdjacencySample) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(shape_err(format!("{} input features", self.d_in()), x.ncols()));
        }
        if a.n() != x.nrows() {
            return Err(shape_err(format!("{}-node adjacency", x.nrows()), a.n()));
        }
        Ok(())
    }
}

/// Per-input cache of `u_l = x W_l^T`, which does not depend on `A`.
///
/// All buffers are row-major `N x d_out`.
pub(crate) struct Projected<'a> {
    x: ArrayView2<'a, f64>,
    u: Vec<Vec<f64>>,
    d_out: usize,
}

impl<'a> Projected<'a> {
    pub(crate) fn new(model: &PolyGnn, x: ArrayView2<'a, f64>) -> Self {
        let d_out = model.d_out();
        let u = model
            .layers
            .iter()
            .map(|w| x.dot(&w.t()).iter().copied().collect())
            .collect();
        Self { x, u, d_out }
    }

    pub(crate) fn n(&self) -> usize {
        self.x.nrows()
    }

    pub(crate) fn out_len(&self) -> usize {
        self.x.nrows() * self.d_out
    }

    pub(crate) fn forward(&self, hops: &[AdjacencySample], y: &mut [f64]) {
        let d = self.d_out;
        y.iter_mut().for_each(|v| *v = 0.0);
        for (h, u) in hops.iter().zip(&self.u) {
            for i in 0..self.n() {
                let zi = &mut y[i * d..(i + 1) * d];
                for j in h.row(i) {
                    for (z, uj) in zi.iter_mut().zip(&u[j * d..(j + 1) * d]) {
                        *z += uj;
                    }
                }
            }
        }
        y.iter_mut().for_each(|v| *v = v.tanh());
    }

    pub(crate) fn scatter_buffer(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.out_len()]; self.u.len()]
    }

    /// Accumulates `H_l^T (g * (1 - y^2))` into `acc[l]`. Summing over samples
    /// first and calling [`Self::weight_gradients`] once is exact because the
    /// weight gradient is linear in the scattered term.
    pub(crate) fn scatter_back(
        &self,
        hops: &[AdjacencySample],
        y: &[f64],
        g: &[f64],
        acc: &mut [Vec<f64>],
    ) {
        let d = self.d_out;
        let delta: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
        for (h, v) in hops.iter().zip(acc.iter_mut()) {
            for i in 0..self.n() {
                let di = &delta[i * d..(i + 1) * d];
                for j in h.row(i) {
                    for (vj, dv) in v[j * d..(j + 1) * d].iter_mut().zip(di) {
                        *vj += dv;
                    }
                }
            }
        }
    }

    /// `dW_l = acc_l^T x`.
    pub(crate) fn weight_gradients(&self, acc: &[Vec<f64>]) -> Vec<Array2<f64>> {
        let d = self.d_out;
        acc.iter()
            .map(|v| {
                let v = ArrayView2::from_shape((self.n(), d), v).expect("sized by scatter_buffer");
                v.t().dot(&self.x)
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct PolyGnnRecord {
    #[serde(rename = "L")]
    hops: usize,
    d_in: usize,
    d_out: usize,
    layers: Vec<Vec<f64>>,
}

impl Serialize for PolyGnn {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolyGnnRecord {
            hops: self.hops(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            layers: self.layers.iter().map(|w| w.iter().copied().collect()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolyGnn {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = PolyGnnRecord::deserialize(d)?;
        if r.layers.len() != r.hops {
            return Err(D::Error::custom(format!(
                "L = {} but {} layers given",
                r.hops,
                r.layers.len()
            )));
        }
        let layers = r
            .layers
            .into_iter()
            .map(|v| Array2::from_shape_vec((r.d_out, r.d_in), v).map_err(D::Error::custom))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        PolyGnn::new(layers).map_err(D::Error::custom)
    }
}
