//! Local and implied volatility surfaces on rectilinear (time, strike) grids.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::market::MarketEnvironment;

pub const LOCAL_VARIANCE_FLOOR: f64 = 1e-4;
pub const LOCAL_VARIANCE_CAP: f64 = 4.0;

/// Values on a (time, strike) grid, row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    times: Vec<f64>,
    strikes: Vec<f64>,
    log_strikes: Vec<f64>,
    values: Vec<f64>,
}

impl Grid {
    fn new(times: Vec<f64>, strikes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || strikes.is_empty() {
            return Err(Error::DegenerateGrid("empty axis".into()));
        }
        if values.len() != times.len() * strikes.len() {
            return Err(Error::LengthMismatch {
                expected: times.len() * strikes.len(),
                got: values.len(),
            });
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) || !strictly_ascending(&times) {
            return Err(Error::DegenerateGrid("time grid must be finite, >= 0 and strictly ascending".into()));
        }
        if strikes.iter().any(|k| !k.is_finite() || *k <= 0.0) || !strictly_ascending(&strikes) {
            return Err(Error::DegenerateGrid("strike grid must be finite, > 0 and strictly ascending".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!("volatilities must be finite and > 0, found {v}")));
        }
        let log_strikes = strikes.iter().map(|k| k.ln()).collect();
        Ok(Self { times, strikes, log_strikes, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, time_index: usize, strike_index: usize) -> f64 {
        self.values[time_index * self.strikes.len() + strike_index]
    }

    fn interpolate(&self, t: f64, x: f64) -> (f64, f64) {
        let (i0, i1, wt) = bracket(&self.times, t);
        let (k0, k1, wk) = bracket(&self.log_strikes, x.ln());
        let n = self.strikes.len();
        let v00 = self.values[i0 * n + k0];
        let v01 = self.values[i0 * n + k1];
        let v10 = self.values[i1 * n + k0];
        let v11 = self.values[i1 * n + k1];
        let lo = v00 + (v01 - v00) * wk;
        let hi = v10 + (v11 - v10) * wk;
        let value = lo + (hi - lo) * wt;
        // d value / d ln x, zero on flat extrapolation
        let slope = if k0 == k1 {
            0.0
        } else {
            let dk = self.log_strikes[k1] - self.log_strikes[k0];
            ((v01 - v00) * (1.0 - wt) + (v11 - v10) * wt) / dk
        };
        (value, slope)
    }
}

fn strictly_ascending(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Returns `(lo, hi, weight)` with flat extrapolation outside the axis.
fn bracket(axis: &[f64], x: f64) -> (usize, usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = axis.partition_point(|a| *a <= x);
    let lo = hi - 1;
    (lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo]))
}

/// Local volatility `sigma_loc(t, x)`, bilinear in `(t, ln x)` with flat
/// extrapolation in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolSurface {
    grid: Grid,
}

impl LocalVolSurface {
    pub fn new(times: Vec<f64>, strikes: Vec<f64>, vols: Vec<f64>) -> Result<Self> {
        Ok(Self { grid: Grid::new(times, strikes, vols)? })
    }

    pub fn constant(sigma: f64) -> Result<Self> {
        Self::new(alloc::vec![0.0], alloc::vec![1.0], alloc::vec![sigma])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Local volatility at `(t, x)`.
    pub fn vol(&self, t: f64, x: f64) -> f64 {
        self.grid.interpolate(t, x).0
    }

    pub fn variance(&self, t: f64, x: f64) -> f64 {
        let v = self.vol(t, x);
        v * v
    }

    /// Local variance and its derivative in `x`.
    pub fn variance_and_dx(&self, t: f64, x: f64) -> (f64, f64) {
        let (v, dv_dlnx) = self.grid.interpolate(t, x);
        (v * v, 2.0 * v * dv_dlnx / x)
    }

    /// Minimum local variance over grid rows with `t <= t_max` (the first row
    /// when none qualifies, since it is extrapolated flat backwards).
    pub fn min_local_variance(&self, t_max: f64) -> f64 {
        let n = self.grid.strikes.len();
        let rows = self.grid.times.iter().take_while(|t| **t <= t_max).count().max(1);
        self.grid.values[..rows * n]
            .iter()
            .map(|v| v * v)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Black-Scholes implied volatilities on a (time, strike) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpliedVolSurface {
    grid: Grid,
}

impl ImpliedVolSurface {
    pub fn new(times: Vec<f64>, strikes: Vec<f64>, vols: Vec<f64>) -> Result<Self> {
        Ok(Self { grid: Grid::new(times, strikes, vols)? })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vol(&self, t: f64, x: f64) -> f64 {
        self.grid.interpolate(t, x).0
    }
}

/// A node whose raw Dupire variance fell outside `[floor, cap]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DupireWarning {
    pub time_index: usize,
    pub strike_index: usize,
    /// Raw local variance before flooring; NaN when the denominator was not positive.
    pub raw_variance: f64,
    pub stored_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DupireOutput {
    pub surface: LocalVolSurface,
    pub warnings: Vec<DupireWarning>,
}

/// First and second derivatives on a non-uniform axis, three-point stencils;
/// one-sided at the edges.
fn derivatives(axis: &[f64], f: &[f64], i: usize) -> (f64, f64) {
    let n = axis.len();
    let c = if i == 0 { 1 } else if i == n - 1 { n - 2 } else { i };
    let (x0, x1, x2) = (axis[c - 1], axis[c], axis[c + 1]);
    let (f0, f1, f2) = (f[c - 1], f[c], f[c + 1]);
    let x = axis[i];
    // Lagrange interpolant through three points, differentiated at x.
    let d0 = (x0 - x1) * (x0 - x2);
    let d1 = (x1 - x0) * (x1 - x2);
    let d2 = (x2 - x0) * (x2 - x1);
    let first = f0 * ((x - x1) + (x - x2)) / d0 + f1 * ((x - x0) + (x - x2)) / d1 + f2 * ((x - x0) + (x - x1)) / d2;
    let second = 2.0 * (f0 / d0 + f1 / d1 + f2 / d2);
    (first, second)
}

/// Local volatility by Dupire's formula in total-variance / log-moneyness form.
///
/// With `w = sigma_imp^2 T` and `y = ln(K / F(T))`,
/// `sigma_loc^2 = d_T w / (1 - y/w w_y + 1/4 (-1/4 - 1/w + y^2/w^2) w_y^2 + 1/2 w_yy)`.
/// Strike derivatives are taken on the log-strike grid at fixed `T`; the time
/// derivative at fixed `y` adds `(r - q) w_y` to the one at fixed strike.
pub fn dupire_from_implied(iv: &ImpliedVolSurface, env: &MarketEnvironment) -> Result<DupireOutput> {
    let g = &iv.grid;
    let (nt, nk) = (g.times.len(), g.strikes.len());
    if nt < 3 || nk < 3 {
        return Err(Error::DegenerateGrid("Dupire extraction needs at least a 3x3 grid".into()));
    }
    if g.times[0] <= 0.0 {
        return Err(Error::DegenerateGrid("implied grid times must be > 0".into()));
    }
    let carry = env.rate - env.dividend_yield;
    let total: Vec<f64> = (0..nt)
        .flat_map(|i| (0..nk).map(move |k| (i, k)))
        .map(|(i, k)| {
            let s = g.value(i, k);
            s * s * g.times[i]
        })
        .collect();

    let mut vols = Vec::with_capacity(nt * nk);
    let mut warnings = Vec::new();
    let mut column = alloc::vec![0.0; nt];
    for i in 0..nt {
        let t = g.times[i];
        let row = &total[i * nk..(i + 1) * nk];
        for k in 0..nk {
            for (ii, c) in column.iter_mut().enumerate() {
                *c = total[ii * nk + k];
            }
            let (w_t_fixed_k, _) = derivatives(&g.times, &column, i);
            let (w_y, w_yy) = derivatives(&g.log_strikes, row, k);
            let w = row[k];
            let y = g.log_strikes[k] - env.forward(t).ln();
            let numerator = w_t_fixed_k + carry * w_y;
            let denominator = 1.0 - y / w * w_y + 0.25 * (-0.25 - 1.0 / w + y * y / (w * w)) * w_y * w_y + 0.5 * w_yy;
            let raw = numerator / denominator;
            let raw = if denominator > 0.0 && raw.is_finite() { raw } else { f64::NAN };
            let stored = if raw.is_nan() {
                LOCAL_VARIANCE_FLOOR
            } else {
                raw.clamp(LOCAL_VARIANCE_FLOOR, LOCAL_VARIANCE_CAP)
            };
            if raw.is_nan() || stored != raw {
                warnings.push(DupireWarning {
                    time_index: i,
                    strike_index: k,
                    raw_variance: raw,
                    stored_variance: stored,
                });
            }
            vols.push(stored.sqrt());
        }
    }
    let surface = LocalVolSurface::new(g.times.clone(), g.strikes.clone(), vols)?;
    Ok(DupireOutput { surface, warnings })
}
