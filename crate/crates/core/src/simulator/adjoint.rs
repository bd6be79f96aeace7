//! Reverse pass through the log-Euler recursion for parameter gradients.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use super::{projection, PathEnsemble};
use crate::error::{invalid, Error, Result};
use crate::model::{LovModel, VarianceMode};
use crate::sensitivity::MlpWorkspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdjointOptions {
    /// Differentiate the projected measure through the spots and the bandwidth.
    /// When off, the kernel weights are held fixed.
    pub through_projection: bool,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self { through_projection: true }
    }
}

/// Gradient of a scalar `L` with respect to the sensitivity parameters, given
/// `dL/dX` at every grid point (`(N + 1) x J`, step-major). Occupations,
/// corridor membership and clamped steps have zero derivative. The ensemble must
/// carry a tape.
pub fn pathwise_gradient(
    ensemble: &PathEnsemble,
    model: &LovModel,
    seeds: &[f64],
    options: AdjointOptions,
) -> Result<Vec<f64>> {
    let tape = ensemble.tape.as_ref().ok_or_else(|| invalid("ensemble was simulated without a tape"))?;
    let j_count = ensemble.paths;
    let n_steps = ensemble.steps;
    if seeds.len() != (n_steps + 1) * j_count {
        return Err(Error::LengthMismatch { expected: (n_steps + 1) * j_count, got: seeds.len() });
    }
    let dt = ensemble.dt;
    let sqdt = dt.sqrt();
    let nodes = model.partition.nodes();
    let m = nodes.len();
    let mut grad = alloc::vec![0.0; model.spec.n_params()];
    let mut a = seeds[n_steps * j_count..].to_vec();
    let mut next = alloc::vec![0.0; j_count];
    let mut ws = MlpWorkspace::default();
    let mut upstream = alloc::vec![0.0; m];
    let mut ell = alloc::vec![0.0; m];
    let mut gbar = Vec::new();

    for n in (0..n_steps).rev() {
        let t = n as f64 * dt;
        let rec = &tape.steps[n];
        let project = rec.active && options.through_projection && !model.uncentered;
        if project {
            gbar.clear();
            gbar.resize(j_count * m, 0.0);
        }
        for j in 0..j_count {
            let xn = ensemble.x(j, n);
            let x1 = ensemble.x(j, n + 1);
            let mut an = a[j] * x1 / xn;
            if !tape.clamped[n * j_count + j] && a[j] != 0.0 {
                let s = ensemble.sigma(j, n);
                let z = ensemble.normals.get(j, n);
                let c = a[j] * x1 * (z * sqdt / (2.0 * s) - 0.5 * dt);
                let (local, dlocal) = model.surface.variance_and_dx(t, xn);
                if !rec.active {
                    an += c * dlocal;
                } else {
                    let o = &rec.o[j * m..(j + 1) * m];
                    let g = rec.gamma;
                    let (weight, dlocal_factor) = match model.mode {
                        VarianceMode::Additive => (c * g, 1.0),
                        VarianceMode::Multiplicative => (c * g * local, f64::NAN),
                    };
                    if model.uncentered {
                        for k in 0..m {
                            upstream[k] = weight * o[k];
                        }
                    } else {
                        let oh = &rec.ohat[j * m..(j + 1) * m];
                        for k in 0..m {
                            upstream[k] = weight * (o[k] - oh[k]);
                        }
                    }
                    let need_values = project || model.mode == VarianceMode::Multiplicative;
                    let dx = model.spec.row_backward_values(
                        t,
                        xn,
                        nodes,
                        &upstream,
                        &mut grad,
                        &mut ws,
                        need_values.then_some(&mut ell[..]),
                    );
                    let factor = if model.mode == VarianceMode::Multiplicative {
                        let base = if model.uncentered { 0.0 } else { ell[0] };
                        let pairing: f64 = if model.uncentered {
                            ell.iter().zip(o).map(|(l, ov)| l * ov).sum()
                        } else {
                            let oh = &rec.ohat[j * m..(j + 1) * m];
                            ell.iter().zip(o.iter().zip(oh)).map(|(l, (ov, ohv))| (l - base) * (ov - ohv)).sum()
                        };
                        1.0 + g * pairing
                    } else {
                        dlocal_factor
                    };
                    an += c * dlocal * factor + dx;
                    if project {
                        for k in 0..m {
                            gbar[j * m + k] = -weight * ell[k];
                        }
                    }
                }
            }
            next[j] = an + seeds[n * j_count + j];
        }
        if project {
            let xbar = projection::project_adjoint(
                &rec.o,
                &rec.ohat,
                m,
                ensemble.spots(n),
                ensemble.bandwidth_multiplier,
                &gbar,
            );
            for (v, xb) in next.iter_mut().zip(&xbar) {
                *v += xb;
            }
        }
        core::mem::swap(&mut a, &mut next);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(grad)
}
