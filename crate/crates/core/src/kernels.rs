//! Kernels on flattened whole-graph outputs.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `(1 + |a-b|^2 / (2 alpha sigma^2))^(-alpha)`
    RationalQuadratic,
    /// `-|a-b|`, the energy-distance kernel.
    Energy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
    pub alpha: f64,
}

fn default_sigma() -> f64 {
    0.04
}

fn default_alpha() -> f64 {
    0.5
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::RationalQuadratic,
            sigma: default_sigma(),
            alpha: default_alpha(),
        }
    }
}

impl KernelSpec {
    pub fn rational_quadratic(sigma: f64, alpha: f64) -> Result<Self> {
        let k = Self {
            kind: KernelKind::RationalQuadratic,
            sigma,
            alpha,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn energy() -> Self {
        Self {
            kind: KernelKind::Energy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "kernel needs sigma > 0 and alpha > 0, got sigma = {}, alpha = {}",
                self.sigma, self.alpha
            )));
        }
        Ok(())
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_len(a, b)?;
        Ok(self.eval_unchecked(a, b))
    }

    pub fn grad_wrt_first(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        check_len(a, b)?;
        let mut g = vec![0.0; a.len()];
        self.add_grad_wrt_first(a, b, 1.0, &mut g);
        Ok(g)
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = sq_dist(a, b);
        match self.kind {
            KernelKind::RationalQuadratic => {
                (1.0 + d2 / (2.0 * self.alpha * self.sigma * self.sigma)).powf(-self.alpha)
            }
            KernelKind::Energy => -d2.sqrt(),
        }
    }

    /// `out += scale * d k(a, b) / d a`.
    #[inline]
    pub(crate) fn add_grad_wrt_first(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        let d2 = sq_dist(a, b);
        let coef = match self.kind {
            KernelKind::RationalQuadratic => {
                let s2 = self.sigma * self.sigma;
                let base = 1.0 + d2 / (2.0 * self.alpha * s2);
                -base.powf(-self.alpha - 1.0) / s2
            }
            KernelKind::Energy => {
                if d2 == 0.0 {
                    return;
                }
                -1.0 / d2.sqrt()
            }
        };
        let c = scale * coef;
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += c * (x - y);
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(a.len(), b.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernels() -> [KernelSpec; 3] {
        [
            KernelSpec::default(),
            KernelSpec::rational_quadratic(0.7, 2.0).unwrap(),
            KernelSpec::energy(),
        ]
    }

    #[test]
    fn rational_quadratic_values() {
        let k = KernelSpec::default();
        let a = [0.1, -0.4, 0.3];
        assert_eq!(k.eval(&a, &a).unwrap(), 1.0);
        // |a-b|^2 = 2 alpha sigma^2
        let d = (2.0 * 0.5 * 0.04f64 * 0.04).sqrt();
        let b = [0.1 + d, -0.4, 0.3];
        assert_abs_diff_eq!(k.eval(&a, &b).unwrap(), 2f64.powf(-0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(k.eval(&a, &b).unwrap(), 0.70711, epsilon = 1e-5);
    }

    #[test]
    fn energy_values() {
        let k = KernelSpec::energy();
        let a = [0.2, 0.5];
        let b = [-0.1, 0.9];
        assert_eq!(k.eval(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(k.eval(&a, &b).unwrap(), -0.5, epsilon = 1e-12);
        assert_eq!(k.eval(&a, &b).unwrap(), k.eval(&b, &a).unwrap());
        assert_eq!(k.grad_wrt_first(&a, &a).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_at_coincidence() {
        let a = [0.3, 0.3];
        assert_eq!(KernelSpec::default().grad_wrt_first(&a, &a).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in kernels() {
            for _ in 0..50 {
                let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g = k.grad_wrt_first(&a, &b).unwrap();
                let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for i in 0..a.len() {
                    let h = 1e-6;
                    let mut ap = a.clone();
                    ap[i] += h;
                    let mut am = a.clone();
                    am[i] -= h;
                    let fd = (k.eval(&ap, &b).unwrap() - k.eval(&am, &b).unwrap()) / (2.0 * h);
                    let tol = 1e-6 * g[i].abs().max(fd.abs()).max(scale * 1e-3).max(1e-9);
                    assert!((g[i] - fd).abs() <= tol, "{:?} {i}: {} vs {fd}", k.kind, g[i]);
                }
                let back = k.grad_wrt_first(&b, &a).unwrap();
                for (x, y) in g.iter().zip(&back) {
                    assert_abs_diff_eq!(*x, -*y, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn rational_quadratic_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = KernelSpec::default();
        for _ in 0..1000 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = k.eval(&a, &b).unwrap();
            assert!(v > 0.0 && v < 1.0);
            assert_eq!(v, k.eval(&b, &a).unwrap());
        }
    }

    #[test]
    fn invalid_parameters_and_lengths() {
        assert!(KernelSpec::rational_quadratic(0.0, 0.5).is_err());
        assert!(KernelSpec::rational_quadratic(0.1, -1.0).is_err());
        assert!(matches!(
            KernelSpec::default().eval(&[0.0], &[0.0, 1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(KernelSpec::energy().grad_wrt_first(&[0.0], &[]).is_err());
    }
}
