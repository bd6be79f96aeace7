//! Sensitivity functions `l(t, X_t, x)`.

mod adam;
mod network;

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

pub use adam::AdamState;
pub use network::{Mlp, MlpShape, MlpWorkspace};

use crate::error::{invalid, Error, Result};
use crate::localvol::LocalVolSurface;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SensitivitySpec {
    Zero,
    /// `beta * 1_A(x)` with `A = [lower, upper)`; `upper = None` is unbounded.
    /// A constant sensitivity is `A = [0, inf)`.
    OneFactorCorridor { beta: f64, lower: f64, upper: Option<f64>, multiplicative: bool },
    /// `scale * tanh(alpha * x / X_t)`.
    Tanh { scale: f64, alpha: f64 },
    /// `beta * ln x`.
    EmaLog { beta: f64 },
    Neural(Mlp),
}

impl SensitivitySpec {
    pub fn one_factor(beta: f64, lower: f64, upper: Option<f64>, multiplicative: bool) -> Result<Self> {
        if !beta.is_finite() || !(lower >= 0.0) || upper.is_some_and(|u| !(u > lower)) {
            return Err(invalid("one-factor corridor needs finite beta and 0 <= lower < upper"));
        }
        if multiplicative && beta.abs() >= 0.5 {
            return Err(invalid("multiplicative one-factor sensitivity needs |beta| < 1/2"));
        }
        Ok(Self::OneFactorCorridor { beta, lower, upper, multiplicative })
    }

    pub fn constant(c: f64) -> Self {
        Self::OneFactorCorridor { beta: c, lower: 0.0, upper: None, multiplicative: false }
    }

    /// Tanh sensitivity checked against `scale <= min_local_variance / 4` on `[0, t_max]`.
    pub fn tanh(scale: f64, alpha: f64, surface: &LocalVolSurface, t_max: f64) -> Result<Self> {
        if !(scale.is_finite() && alpha.is_finite() && alpha >= 0.0) {
            return Err(invalid("tanh sensitivity needs finite scale and alpha >= 0"));
        }
        let bound = 0.25 * surface.min_local_variance(t_max);
        if scale.abs() > bound {
            return Err(invalid(alloc::format!("tanh scale {scale} exceeds {bound}")));
        }
        Ok(Self::Tanh { scale, alpha })
    }

    /// Tanh sensitivity at the largest admissible scale.
    pub fn tanh_bounded(alpha: f64, surface: &LocalVolSurface, t_max: f64) -> Result<Self> {
        Self::tanh(0.25 * surface.min_local_variance(t_max), alpha, surface, t_max)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    pub fn eval(&self, t: f64, x_t: f64, x: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::OneFactorCorridor { beta, lower, upper, .. } => {
                if x >= *lower && upper.is_none_or(|u| x < u) {
                    *beta
                } else {
                    0.0
                }
            }
            Self::Tanh { scale, alpha } => scale * (alpha * x / x_t).tanh(),
            Self::EmaLog { beta } => beta * x.ln(),
            Self::Neural(net) => net.eval(t, x_t, x),
        }
    }

    /// `out[m] = l(t, x_t, nodes[m])`.
    pub fn eval_row(&self, t: f64, x_t: f64, nodes: &[f64], out: &mut [f64], ws: &mut MlpWorkspace) {
        match self {
            Self::Neural(net) => net.eval_row(t, x_t, nodes, out, ws),
            _ => {
                for (o, x) in out.iter_mut().zip(nodes) {
                    *o = self.eval(t, x_t, *x);
                }
            }
        }
    }

    /// Row-major `J x M` matrix of `l(t, xs[j], nodes[m])`.
    pub fn eval_batch(&self, t: f64, xs: &[f64], nodes: &[f64]) -> Vec<f64> {
        let m = nodes.len();
        let mut out = alloc::vec![0.0; xs.len() * m];
        let mut ws = MlpWorkspace::default();
        for (row, x) in out.chunks_exact_mut(m.max(1)).zip(xs) {
            self.eval_row(t, *x, nodes, row, &mut ws);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Zero => 0,
            Self::OneFactorCorridor { .. } | Self::EmaLog { .. } => 1,
            Self::Tanh { .. } => 2,
            Self::Neural(net) => net.n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Zero => Vec::new(),
            Self::OneFactorCorridor { beta, .. } | Self::EmaLog { beta } => alloc::vec![*beta],
            Self::Tanh { scale, alpha } => alloc::vec![*scale, *alpha],
            Self::Neural(net) => net.theta().to_vec(),
        }
    }

    /// Replaces the trainable parameters. Construction-time bounds are not rechecked.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::LengthMismatch { expected: self.n_params(), got: p.len() });
        }
        match self {
            Self::Zero => {}
            Self::OneFactorCorridor { beta, .. } | Self::EmaLog { beta } => *beta = p[0],
            Self::Tanh { scale, alpha } => {
                *scale = p[0];
                *alpha = p[1];
            }
            Self::Neural(net) => net.theta_mut().copy_from_slice(p),
        }
        Ok(())
    }

    /// Accumulates `sum_m upstream[m] * d l_m / d params` into `grad`; returns
    /// `sum_m upstream[m] * d l_m / d x_t`.
    pub fn row_backward(
        &self,
        t: f64,
        x_t: f64,
        nodes: &[f64],
        upstream: &[f64],
        grad: &mut [f64],
        ws: &mut MlpWorkspace,
    ) -> f64 {
        self.row_backward_values(t, x_t, nodes, upstream, grad, ws, None)
    }

    /// As [`SensitivitySpec::row_backward`], also writing the row values when asked.
    #[allow(clippy::too_many_arguments)]
    pub fn row_backward_values(
        &self,
        t: f64,
        x_t: f64,
        nodes: &[f64],
        upstream: &[f64],
        grad: &mut [f64],
        ws: &mut MlpWorkspace,
        values: Option<&mut [f64]>,
    ) -> f64 {
        if let Self::Neural(net) = self {
            return net.row_backward_values(t, x_t, nodes, upstream, grad, ws, values);
        }
        if let Some(out) = values {
            self.eval_row(t, x_t, nodes, out, ws);
        }
        match self {
            Self::Zero => 0.0,
            Self::OneFactorCorridor { lower, upper, .. } => {
                grad[0] += nodes
                    .iter()
                    .zip(upstream)
                    .filter(|(x, _)| **x >= *lower && upper.is_none_or(|u| **x < u))
                    .map(|(_, u)| u)
                    .sum::<f64>();
                0.0
            }
            Self::EmaLog { .. } => {
                grad[0] += nodes.iter().zip(upstream).map(|(x, u)| u * x.ln()).sum::<f64>();
                0.0
            }
            Self::Tanh { scale, alpha } => {
                let mut dx = 0.0;
                for (x, u) in nodes.iter().zip(upstream) {
                    let arg = alpha * x / x_t;
                    let th = arg.tanh();
                    let sech2 = 1.0 - th * th;
                    grad[0] += u * th;
                    grad[1] += u * scale * sech2 * x / x_t;
                    dx -= u * scale * sech2 * arg / x_t;
                }
                dx
            }
            Self::Neural(_) => unreachable!(),
        }
    }

    /// `max_m |l(t, x_t, nodes[m])|`.
    pub fn sup_abs(&self, t: f64, x_t: f64, nodes: &[f64]) -> f64 {
        let mut row = alloc::vec![0.0; nodes.len()];
        self.eval_row(t, x_t, nodes, &mut row, &mut MlpWorkspace::default());
        row.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let s = LocalVolSurface::constant(0.2).unwrap();
        let tanh = SensitivitySpec::tanh(0.25 * 0.04, 1.0, &s, 1.0).unwrap();
        assert!((tanh.eval(0.1, 100.0, 100.0) - 0.007_615_941_559_557_649).abs() < 1e-15);
        assert_eq!(SensitivitySpec::Zero.eval(0.3, 1.0, 2.0), 0.0);
        let of = SensitivitySpec::one_factor(0.3, 110.0, None, false).unwrap();
        assert_eq!(of.eval(0.0, 100.0, 90.0), 0.0);
        assert_eq!(of.eval(0.0, 100.0, 120.0), 0.3);
        assert!(SensitivitySpec::tanh(0.011, 1.0, &s, 1.0).is_err());
        assert!(SensitivitySpec::one_factor(0.5, 0.0, None, true).is_err());
        assert!(SensitivitySpec::one_factor(0.4, 0.0, None, true).is_ok());
    }

    #[test]
    fn batch_shapes() {
        let z = SensitivitySpec::Zero.eval_batch(0.1, &[90.0, 110.0], &[80.0, 100.0, 120.0]);
        assert_eq!(z, alloc::vec![0.0; 6]);
        let shape = MlpShape::standard(1.0, 100.0, 1);
        let n = shape.n_params();
        let net = SensitivitySpec::Neural(Mlp::with_theta(shape, alloc::vec![0.0; n]).unwrap());
        let b = net.eval_batch(0.1, &[90.0, 110.0], &[80.0, 100.0, 120.0]);
        assert!(b.iter().all(|v| *v == core::f64::consts::LN_2));
        let net = SensitivitySpec::Neural(Mlp::init(MlpShape::standard(1.0, 100.0, 4)).unwrap());
        let b = net.eval_batch(0.2, &[90.0, 110.0], &[80.0, 100.0, 120.0]);
        for j in 0..2 {
            for m in 0..3 {
                let x = [90.0, 110.0][j];
                assert_eq!(b[j * 3 + m], net.eval(0.2, x, [80.0, 100.0, 120.0][m]));
            }
        }
    }

    #[test]
    fn parametric_gradients() {
        let nodes = [70.0, 95.0, 130.0];
        let up = [0.5, -1.0, 2.0];
        for spec in [
            SensitivitySpec::Tanh { scale: 0.01, alpha: 1.3 },
            SensitivitySpec::EmaLog { beta: 0.2 },
            SensitivitySpec::one_factor(0.1, 90.0, Some(120.0), false).unwrap(),
        ] {
            let mut grad = alloc::vec![0.0; spec.n_params()];
            let dx = spec.row_backward(0.1, 100.0, &nodes, &up, &mut grad, &mut MlpWorkspace::default());
            let f = |s: &SensitivitySpec, x_t: f64| -> f64 {
                nodes.iter().zip(&up).map(|(x, u)| u * s.eval(0.1, x_t, *x)).sum()
            };
            let h = 1e-6;
            let fd_x = (f(&spec, 100.0 + h) - f(&spec, 100.0 - h)) / (2.0 * h);
            assert!((fd_x - dx).abs() < 1e-8);
            for k in 0..spec.n_params() {
                let p = spec.params();
                let (mut a, mut b) = (spec.clone(), spec.clone());
                let (mut pa, mut pb) = (p.clone(), p.clone());
                pa[k] += h;
                pb[k] -= h;
                a.set_params(&pa).unwrap();
                b.set_params(&pb).unwrap();
                let fd = (f(&a, 100.0) - f(&b, 100.0)) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-7, "{spec:?} {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    fn small_net() -> impl Strategy<Value = Mlp> {
        (any::<u64>(), -0.5f64..0.5).prop_map(|(seed, jitter)| {
            let mut m = Mlp::init(MlpShape::standard(1.0, 100.0, seed)).unwrap();
            for (k, th) in m.theta_mut().iter_mut().enumerate() {
                *th += jitter * ((k % 7) as f64 - 3.0) / 3.0;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn neural_output_nonnegative(m in small_net(), t in 0.0f64..2.0, xt in 1.0f64..400.0, x in 1.0f64..400.0) {
            prop_assert!(m.eval(t, xt, x) >= 0.0);
        }

        #[test]
        fn tanh_within_positivity_bound(vol in 0.05f64..0.8, alpha in 0.0f64..5.0, xt in 1.0f64..1000.0, x in 0.0f64..1000.0) {
            let s = LocalVolSurface::constant(vol).unwrap();
            let spec = SensitivitySpec::tanh_bounded(alpha, &s, 1.0).unwrap();
            prop_assert!(spec.eval(0.0, xt, x).abs() < 0.5 * vol * vol);
        }

        #[test]
        fn tanh_monotone_in_x(alpha in 0.0f64..5.0, xt in 1.0f64..1000.0, x in 0.0f64..1000.0, dx in 0.0f64..100.0) {
            let spec = SensitivitySpec::Tanh { scale: 0.01, alpha };
            prop_assert!(spec.eval(0.0, xt, x + dx) >= spec.eval(0.0, xt, x));
        }
    }
}
