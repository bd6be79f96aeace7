//! Feedforward network `(t, X_t, x) -> l`: ReLU hidden layers, softplus output.
//!
//! Parameters are flattened layer by layer as `W` (stored input-major,
//! `W[i * out + k]`) followed by `b`, and finally the optional output shift.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpShape {
    /// Layer widths, input first. The input width is 3.
    pub sizes: Vec<usize>,
    /// Normalises `t`.
    pub horizon: f64,
    /// Normalises `X_t` and `x`.
    pub spot: f64,
    /// Multiplies the softplus output.
    pub output_scale: f64,
    /// Adds a trainable constant after the output activation.
    pub output_shift: bool,
    pub seed: u64,
}

impl MlpShape {
    /// `[3, 64, 64, 1]`.
    pub fn standard(horizon: f64, spot: f64, seed: u64) -> Self {
        Self {
            sizes: alloc::vec![3, 64, 64, 1],
            horizon,
            spot,
            output_scale: 1.0,
            output_shift: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes[0] != 3 || *self.sizes.last().unwrap() != 1 {
            return Err(invalid("network layers must start at 3 inputs and end at 1 output"));
        }
        if self.sizes.contains(&0) {
            return Err(invalid("network layers must be non-empty"));
        }
        if !(self.horizon > 0.0 && self.spot > 0.0 && self.output_scale > 0.0) {
            return Err(invalid("network normalisation constants must be > 0"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let layers: usize = self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        layers + usize::from(self.output_shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    shape: MlpShape,
    theta: Vec<f64>,
}

/// Scratch buffers for row evaluation.
#[derive(Debug, Default, Clone)]
pub struct MlpWorkspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    z: Vec<f64>,
    shared: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights from `shape.seed`, zero biases.
    pub fn init(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
        let mut theta = Vec::with_capacity(shape.n_params());
        for w in shape.sizes.windows(2) {
            let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new(-a, a).map_err(|_| invalid("bad init range"))?;
            theta.extend((0..w[0] * w[1]).map(|_| dist.sample(&mut rng)));
            theta.extend(core::iter::repeat_n(0.0, w[1]));
        }
        if shape.output_shift {
            theta.push(0.0);
        }
        Ok(Self { shape, theta })
    }

    pub fn with_theta(shape: MlpShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.n_params() {
            return Err(Error::LengthMismatch { expected: shape.n_params(), got: theta.len() });
        }
        Ok(Self { shape, theta })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let mut off = 0;
        for w in self.shape.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.shape.sizes[l], self.shape.sizes[l + 1]);
        (&self.theta[off..off + i * o], &self.theta[off + i * o..off + i * o + o])
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.shape.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn shift(&self) -> f64 {
        if self.shape.output_shift {
            *self.theta.last().unwrap()
        } else {
            0.0
        }
    }

    pub fn eval(&self, t: f64, x_t: f64, x: f64) -> f64 {
        let mut out = [0.0];
        self.eval_row(t, x_t, &[x], &mut out, &mut MlpWorkspace::default());
        out[0]
    }

    /// `out[m] = l(t, x_t, nodes[m])`.
    pub fn eval_row(&self, t: f64, x_t: f64, nodes: &[f64], out: &mut [f64], ws: &mut MlpWorkspace) {
        self.forward(t, x_t, nodes, ws);
        let scale = self.shape.output_scale;
        let shift = self.shift();
        for (o, z) in out.iter_mut().zip(&ws.z) {
            *o = scale * softplus(*z) + shift;
        }
    }

    fn forward(&self, t: f64, x_t: f64, nodes: &[f64], ws: &mut MlpWorkspace) {
        let sizes = &self.shape.sizes;
        let rows = nodes.len();
        let depth = sizes.len() - 1;
        ws.acts.resize_with(depth, Vec::new);
        ws.deltas.resize_with(depth, Vec::new);
        for l in 0..depth {
            ws.acts[l].resize(rows * sizes[l + 1], 0.0);
        }
        ws.z.resize(rows, 0.0);

        let tt = t / self.shape.horizon;
        let xx = x_t / self.shape.spot;
        let (w, b) = self.layer(0);
        let width = sizes[1];
        ws.shared.clear();
        ws.shared.extend((0..width).map(|k| b[k] + w[k] * tt + w[width + k] * xx));
        let wx = &w[2 * width..3 * width];
        let last = depth == 1;
        for (m, node) in nodes.iter().enumerate() {
            let xn = node / self.shape.spot;
            let h = &mut ws.acts[0][m * width..(m + 1) * width];
            for k in 0..width {
                let v = ws.shared[k] + wx[k] * xn;
                h[k] = if last { v } else { v.max(0.0) };
            }
        }

        for l in 1..depth {
            let (w, b) = self.layer(l);
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let (prev, rest) = ws.acts.split_at_mut(l);
            let input = &prev[l - 1];
            let output = &mut rest[0];
            let hidden = l + 1 < depth;
            for m in 0..rows {
                let a = &input[m * n_in..(m + 1) * n_in];
                let o = &mut output[m * n_out..(m + 1) * n_out];
                o.copy_from_slice(b);
                if n_out == 1 {
                    o[0] += dot(a, w);
                } else {
                    for (i, ai) in a.iter().enumerate() {
                        if *ai != 0.0 {
                            axpy(*ai, &w[i * n_out..(i + 1) * n_out], o);
                        }
                    }
                }
                if hidden {
                    for v in o.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        ws.z.copy_from_slice(&ws.acts[depth - 1][..rows]);
    }

    /// Accumulates `sum_m upstream[m] * d l_m / d theta` into `grad` and returns
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

    /// As [`Mlp::row_backward`], also writing the row values when asked.
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
        self.forward(t, x_t, nodes, ws);
        let sizes = &self.shape.sizes;
        let depth = sizes.len() - 1;
        let rows = nodes.len();
        let scale = self.shape.output_scale;
        if let Some(out) = values {
            let shift = self.shift();
            for (o, z) in out.iter_mut().zip(&ws.z) {
                *o = scale * softplus(*z) + shift;
            }
        }
        if self.shape.output_shift {
            *grad.last_mut().unwrap() += upstream.iter().sum::<f64>();
        }

        for l in 0..depth {
            ws.deltas[l].resize(rows * sizes[l + 1], 0.0);
        }
        for m in 0..rows {
            ws.deltas[depth - 1][m] = upstream[m] * scale * sigmoid(ws.z[m]);
        }

        for l in (1..depth).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let off = self.layer_offset(l);
            let (w, _) = self.layer(l);
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let delta = &upper[0];
            let delta_in = &mut lower[l - 1];
            let input = &ws.acts[l - 1];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for m in 0..rows {
                let d = &delta[m * n_out..(m + 1) * n_out];
                let a = &input[m * n_in..(m + 1) * n_in];
                for (g, dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                let di = &mut delta_in[m * n_in..(m + 1) * n_in];
                for i in 0..n_in {
                    if a[i] > 0.0 {
                        axpy(a[i], d, &mut gw[i * n_out..(i + 1) * n_out]);
                        di[i] = if n_out == 1 { w[i] * d[0] } else { dot(&w[i * n_out..(i + 1) * n_out], d) };
                    } else {
                        di[i] = 0.0;
                    }
                }
            }
        }

        let width = sizes[1];
        let (w, _) = self.layer(0);
        let tt = t / self.shape.horizon;
        let xx = x_t / self.shape.spot;
        let delta = &ws.deltas[0];
        ws.shared.clear();
        ws.shared.resize(width, 0.0);
        let (gw, gb) = grad[..3 * width + width].split_at_mut(3 * width);
        for (m, node) in nodes.iter().enumerate() {
            let d = &delta[m * width..(m + 1) * width];
            axpy(1.0, d, &mut ws.shared);
            axpy(node / self.shape.spot, d, &mut gw[2 * width..3 * width]);
        }
        let sum = &ws.shared;
        axpy(tt, sum, &mut gw[..width]);
        axpy(xx, sum, &mut gw[width..2 * width]);
        axpy(1.0, sum, gb);
        dot(&w[width..2 * width], sum) / self.shape.spot
    }

    /// Gradient of `sum_i upstream[i] * l(inputs[i])` with respect to theta.
    pub fn backprop(&self, inputs: &[[f64; 3]], upstream: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != upstream.len() {
            return Err(Error::LengthMismatch { expected: inputs.len(), got: upstream.len() });
        }
        if upstream.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let mut grad = alloc::vec![0.0; self.n_params()];
        let mut ws = MlpWorkspace::default();
        for (inp, u) in inputs.iter().zip(upstream) {
            self.row_backward(inp[0], inp[1], &[inp[2]], &[*u], &mut grad, &mut ws);
        }
        Ok(grad)
    }
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::RngCore;

    fn net(seed: u64) -> Mlp {
        Mlp::init(MlpShape::standard(0.5, 100.0, seed)).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn parameter_count() {
        assert_eq!(MlpShape::standard(1.0, 1.0, 0).n_params(), 4481);
        assert_eq!(net(1).n_params(), 4481);
        let mut shape = MlpShape::standard(1.0, 1.0, 0);
        shape.output_shift = true;
        assert_eq!(shape.n_params(), 4482);
    }

    #[test]
    fn zero_weights_give_ln2() {
        let shape = MlpShape::standard(0.5, 100.0, 0);
        let m = Mlp::with_theta(shape.clone(), alloc::vec![0.0; shape.n_params()]).unwrap();
        assert_eq!(m.eval(0.1, 90.0, 120.0), core::f64::consts::LN_2);
    }

    #[test]
    fn row_matches_pointwise() {
        let m = net(3);
        let nodes = [60.0, 80.0, 100.0, 130.0];
        let mut out = [0.0; 4];
        m.eval_row(0.2, 95.0, &nodes, &mut out, &mut MlpWorkspace::default());
        for (o, x) in out.iter().zip(&nodes) {
            assert_eq!(*o, m.eval(0.2, 95.0, *x));
            assert!(*o >= 0.0);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - core::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let m = net(5);
        let g = m.backprop(&[[0.1, 100.0, 90.0], [0.3, 80.0, 120.0]], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(m.backprop(&[[0.1, 100.0, 90.0]], &[f64::NAN]), Err(Error::NonFiniteGradient));
    }

    #[test]
    fn batch_gradient_is_sum() {
        let m = net(6);
        let a = [0.1, 100.0, 90.0];
        let b = [0.4, 85.0, 125.0];
        let ga = m.backprop(&[a], &[0.7]).unwrap();
        let gb = m.backprop(&[b], &[-1.3]).unwrap();
        let gab = m.backprop(&[a, b], &[0.7, -1.3]).unwrap();
        for k in 0..gab.len() {
            assert!((gab[k] - ga[k] - gb[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for probe in 0..20 {
            let mut shape = MlpShape::standard(0.5, 100.0, probe);
            shape.output_shift = probe % 2 == 0;
            let mut m = Mlp::init(shape).unwrap();
            for th in m.theta_mut().iter_mut() {
                *th += 0.1 * (unit(&mut rng) - 0.5);
            }
            let inp = [0.5 * unit(&mut rng), 70.0 + 60.0 * unit(&mut rng), 60.0 + 80.0 * unit(&mut rng)];
            let g = m.backprop(&[inp], &[1.0]).unwrap();
            for _ in 0..50 {
                let k = (rng.next_u64() % m.n_params() as u64) as usize;
                let h = 1e-6 * (1.0 + m.theta()[k].abs());
                let base = m.theta()[k];
                m.theta_mut()[k] = base + h;
                let up = m.eval(inp[0], inp[1], inp[2]);
                m.theta_mut()[k] = base - h;
                let dn = m.eval(inp[0], inp[1], inp[2]);
                m.theta_mut()[k] = base;
                let fd = (up - dn) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(err < 1e-5 || (fd - g[k]).abs() < 1e-10, "probe {probe} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = net(8);
        let nodes = [70.0, 100.0, 140.0];
        let up = [0.3, -0.2, 1.1];
        let mut grad = alloc::vec![0.0; m.n_params()];
        let mut ws = MlpWorkspace::default();
        let dx = m.row_backward(0.25, 97.0, &nodes, &up, &mut grad, &mut ws);
        let f = |x: f64| -> f64 {
            let mut out = [0.0; 3];
            m.eval_row(0.25, x, &nodes, &mut out, &mut MlpWorkspace::default());
            out.iter().zip(&up).map(|(o, u)| o * u).sum()
        };
        let h = 1e-4;
        let fd = (f(97.0 + h) - f(97.0 - h)) / (2.0 * h);
        assert!((fd - dx).abs() < 1e-8 * (1.0 + fd.abs()), "{fd} vs {dx}");
    }
}
