//! Nadaraya-Watson projection of the occupation measures onto the current spot.
//!
//! With the quartic kernel `K(s) = (1 - s^2)^2` on `|s| < 1` and scaled spots
//! `u = X / h`, every path falls into a unit cell `c = floor(u)` with offset
//! `v = u - c`. A query in cell `c` only sees its own cell, the part of cell
//! `c - 1` with `v_b > v_a` and the part of cell `c + 1` with `v_b < v_a`. On each
//! of those pieces `K(u_a - u_b)` is a quartic polynomial in `v_b`, so the
//! weighted sums reduce to running power moments `sum v_b^k O_b` and the whole
//! projection costs `O(J M)` after sorting.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

/// `K(s) = 1 - 2 s^2 + s^4`.
pub(crate) const QUARTIC: [f64; 5] = [1.0, 0.0, -2.0, 0.0, 1.0];
/// `K'(s) = -4 s + 4 s^3`.
pub(crate) const QUARTIC_PRIME: [f64; 5] = [0.0, -4.0, 0.0, 4.0, 0.0];

const BINOM: [[f64; 5]; 5] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 0.0, 0.0],
    [1.0, 2.0, 1.0, 0.0, 0.0],
    [1.0, 3.0, 3.0, 1.0, 0.0],
    [1.0, 4.0, 6.0, 4.0, 1.0],
];

/// `psi(d) = 15/16 (1 - (d/h)^2)^2 / h` on `|d| < h`.
pub fn quartic_kernel(delta: f64, h: f64) -> f64 {
    let s = delta / h;
    if s.abs() >= 1.0 {
        return 0.0;
    }
    let w = 1.0 - s * s;
    0.9375 * w * w / h
}

/// `multiplier * sd(X) * J^{-1/5}`, floored at `1e-8 * mean(X)`.
pub fn bandwidth(x: &[f64], multiplier: f64) -> f64 {
    bandwidth_parts(x, multiplier).0
}

/// `(h, mean, sd, floored)`.
pub(crate) fn bandwidth_parts(x: &[f64], multiplier: f64) -> (f64, f64, f64, bool) {
    let j = x.len();
    let mean = x.iter().sum::<f64>() / j as f64;
    let floor = 1e-8 * mean;
    if j < 2 {
        return (floor, mean, 0.0, true);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (j - 1) as f64;
    let sd = var.sqrt();
    let h = multiplier * sd * (j as f64).powf(-0.2);
    if h > floor {
        (h, mean, sd, false)
    } else {
        (floor, mean, sd, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEstimate {
    /// Row-major `J x M`.
    pub ohat: Vec<f64>,
    pub bandwidth: f64,
}

/// Projects the row-major `J x M` occupations `o` onto the spots `x`.
///
/// Each row is `sum_b psi(x_a - x_b) O_b / sum_b psi(x_a - x_b)`, self weight
/// included. A row whose window holds only itself is copied.
pub fn project_occupation(o: &[f64], m: usize, x: &[f64], h: f64) -> ProjectionEstimate {
    let mut ohat = alloc::vec![0.0; o.len()];
    project_into(o, m, x, h, &mut ohat, &mut Vec::new());
    ProjectionEstimate { ohat, bandwidth: h }
}

pub(crate) fn project_into(o: &[f64], m: usize, x: &[f64], h: f64, ohat: &mut [f64], scratch: &mut Vec<f64>) {
    let j = x.len();
    if j < 2 || m == 0 {
        ohat.copy_from_slice(o);
        return;
    }
    let cols = m + 1;
    scratch.clear();
    scratch.reserve(j * cols);
    for row in o.chunks_exact(m) {
        scratch.extend_from_slice(row);
        scratch.push(1.0);
    }
    let sm = Smoother::new(x, h);
    let mut sums = alloc::vec![0.0; j * cols];
    let mut counts = alloc::vec![0u32; j];
    sm.apply(scratch, cols, &QUARTIC, &mut sums, Some(&mut counts));
    for a in 0..j {
        let dst = &mut ohat[a * m..(a + 1) * m];
        if counts[a] <= 1 {
            dst.copy_from_slice(&o[a * m..(a + 1) * m]);
            continue;
        }
        let row = &sums[a * cols..(a + 1) * cols];
        let s = row[m];
        for (d, n) in dst.iter_mut().zip(&row[..m]) {
            *d = (n / s).max(0.0);
        }
    }
}

/// Reference `O(J k M)` estimator summing the kernel directly over each window.
pub fn project_occupation_direct(o: &[f64], m: usize, x: &[f64], h: f64) -> Vec<f64> {
    let j = x.len();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|a, b| x[*a].total_cmp(&x[*b]).then(a.cmp(b)));
    let mut ohat = alloc::vec![0.0; o.len()];
    let mut lo = 0;
    for p in 0..j {
        let a = order[p];
        while x[order[lo]] <= x[a] - h {
            lo += 1;
        }
        let mut s = 0.0;
        let mut members = 0;
        let dst = &mut ohat[a * m..(a + 1) * m];
        for &b in order[lo..].iter().take_while(|b| x[**b] < x[a] + h) {
            let w = quartic_kernel(x[a] - x[b], h);
            if w > 0.0 {
                members += 1;
                s += w;
                for (d, ob) in dst.iter_mut().zip(&o[b * m..(b + 1) * m]) {
                    *d += w * ob;
                }
            }
        }
        if members <= 1 {
            dst.copy_from_slice(&o[a * m..(a + 1) * m]);
        } else {
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
    }
    ohat
}

/// Spots sorted into unit cells of the scaled axis `u = (X - min X) / h`.
pub(crate) struct Smoother {
    order: Vec<usize>,
    v: Vec<f64>,
    /// `(start, end, cell)` runs of the sorted positions.
    runs: Vec<(usize, usize, i64)>,
}

impl Smoother {
    pub(crate) fn new(x: &[f64], h: f64) -> Self {
        let j = x.len();
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_unstable_by(|a, b| x[*a].total_cmp(&x[*b]).then(a.cmp(b)));
        let base = x[order[0]];
        let mut v = Vec::with_capacity(j);
        let mut runs: Vec<(usize, usize, i64)> = Vec::new();
        for (p, &a) in order.iter().enumerate() {
            let u = (x[a] - base) / h;
            let c = u.floor();
            v.push(u - c);
            let c = c as i64;
            match runs.last_mut() {
                Some(r) if r.2 == c => r.1 = p + 1,
                _ => runs.push((p, p + 1, c)),
            }
        }
        Self { order, v, runs }
    }

    /// `out[a] = sum_b P(u_a - u_b) values[b]` over `|u_a - u_b| < 1`, with `P`
    /// given by its monomial coefficients. `counts[a]` receives the window size.
    pub(crate) fn apply(
        &self,
        values: &[f64],
        cols: usize,
        poly: &[f64; 5],
        out: &mut [f64],
        mut counts: Option<&mut [u32]>,
    ) {
        let width = 5 * cols;
        let mut totals = alloc::vec![0.0; self.runs.len() * width];
        for (r, &(s, e, _)) in self.runs.iter().enumerate() {
            let t = &mut totals[r * width..(r + 1) * width];
            for p in s..e {
                add_moments(t, self.v[p], &values[self.order[p] * cols..(self.order[p] + 1) * cols], cols);
            }
        }
        let mut prev_pre = alloc::vec![0.0; width];
        let mut next_pre = alloc::vec![0.0; width];
        let mut acc = alloc::vec![0.0; cols];
        for (r, &(s, e, c)) in self.runs.iter().enumerate() {
            let prev = (r > 0 && self.runs[r - 1].2 == c - 1).then(|| r - 1);
            let next = (r + 1 < self.runs.len() && self.runs[r + 1].2 == c + 1).then(|| r + 1);
            prev_pre.iter_mut().for_each(|v| *v = 0.0);
            next_pre.iter_mut().for_each(|v| *v = 0.0);
            let mut pp = prev.map_or(0, |q| self.runs[q].0);
            let mut np = next.map_or(0, |q| self.runs[q].0);
            for p in s..e {
                let va = self.v[p];
                let mut count = (e - s) as u32;
                acc.iter_mut().for_each(|v| *v = 0.0);
                let own = &totals[r * width..(r + 1) * width];
                combine(&mut acc, &coefficients(poly, va), own, cols);
                if let Some(q) = prev {
                    let end = self.runs[q].1;
                    while pp < end && self.v[pp] <= va {
                        let b = self.order[pp];
                        add_moments(&mut prev_pre, self.v[pp], &values[b * cols..(b + 1) * cols], cols);
                        pp += 1;
                    }
                    count += (end - pp) as u32;
                    let q_e = coefficients(poly, 1.0 + va);
                    let tot = &totals[q * width..(q + 1) * width];
                    for k in 0..5 {
                        let ck = q_e[k];
                        let (tk, pk) = (&tot[k * cols..(k + 1) * cols], &prev_pre[k * cols..(k + 1) * cols]);
                        for ((a, t), pr) in acc.iter_mut().zip(tk).zip(pk) {
                            *a += ck * (t - pr);
                        }
                    }
                }
                if let Some(q) = next {
                    let end = self.runs[q].1;
                    while np < end && self.v[np] < va {
                        let b = self.order[np];
                        add_moments(&mut next_pre, self.v[np], &values[b * cols..(b + 1) * cols], cols);
                        np += 1;
                    }
                    count += (np - self.runs[q].0) as u32;
                    combine(&mut acc, &coefficients(poly, va - 1.0), &next_pre, cols);
                }
                let a = self.order[p];
                out[a * cols..(a + 1) * cols].copy_from_slice(&acc);
                if let Some(cnt) = counts.as_deref_mut() {
                    cnt[a] = count;
                }
            }
        }
    }
}

/// Coefficients of `v^k` in `P(e - v)`.
#[inline]
fn coefficients(p: &[f64; 5], e: f64) -> [f64; 5] {
    let mut pow = [1.0; 5];
    for i in 1..5 {
        pow[i] = pow[i - 1] * e;
    }
    let mut q = [0.0; 5];
    for k in 0..5 {
        let mut s = 0.0;
        for i in k..5 {
            s += p[i] * BINOM[i][k] * pow[i - k];
        }
        q[k] = if k % 2 == 1 { -s } else { s };
    }
    q
}

#[inline]
fn add_moments(t: &mut [f64], v: f64, vals: &[f64], cols: usize) {
    let mut w = 1.0;
    for k in 0..5 {
        for (d, x) in t[k * cols..(k + 1) * cols].iter_mut().zip(vals) {
            *d += w * x;
        }
        w *= v;
    }
}

#[inline]
fn combine(acc: &mut [f64], q: &[f64; 5], moments: &[f64], cols: usize) {
    for k in 0..5 {
        let ck = q[k];
        for (a, mk) in acc.iter_mut().zip(&moments[k * cols..(k + 1) * cols]) {
            *a += ck * mk;
        }
    }
}

/// Reverse mode of [`project_into`] with respect to the spots, the occupations
/// held fixed. `gbar` is `dL/dOhat` (row-major `J x M`); returns `dL/dX`
/// including the dependence of the bandwidth on `X`.
pub(crate) fn project_adjoint(
    o: &[f64],
    ohat: &[f64],
    m: usize,
    x: &[f64],
    multiplier: f64,
    gbar: &[f64],
) -> Vec<f64> {
    let j = x.len();
    let mut xbar = alloc::vec![0.0; j];
    if j < 2 || m == 0 {
        return xbar;
    }
    let (h, mean, sd, floored) = bandwidth_parts(x, multiplier);
    let sm = Smoother::new(x, h);

    let ones = alloc::vec![1.0; j];
    let mut s = alloc::vec![0.0; j];
    let mut counts = alloc::vec![0u32; j];
    sm.apply(&ones, 1, &QUARTIC, &mut s, Some(&mut counts));

    // values [O | 1 | c | s] smoothed with K'
    let cols = 2 * m + 2;
    let mut vals = alloc::vec![0.0; j * cols];
    for a in 0..j {
        let row = &mut vals[a * cols..(a + 1) * cols];
        row[..m].copy_from_slice(&o[a * m..(a + 1) * m]);
        row[m] = 1.0;
        if counts[a] > 1 {
            let g = &gbar[a * m..(a + 1) * m];
            let oh = &ohat[a * m..(a + 1) * m];
            let mut sa = 0.0;
            for k in 0..m {
                row[m + 1 + k] = g[k] / s[a];
                sa -= g[k] * oh[k];
            }
            row[2 * m + 1] = sa / s[a];
        }
    }
    let mut sm_out = alloc::vec![0.0; j * cols];
    sm.apply(&vals, cols, &QUARTIC_PRIME, &mut sm_out, None);

    let mut hbar = 0.0;
    for a in 0..j {
        if counts[a] <= 1 {
            continue;
        }
        let v = &vals[a * cols..(a + 1) * cols];
        let p = &sm_out[a * cols..(a + 1) * cols];
        let mut ubar = v[2 * m + 1] * p[m] + p[2 * m + 1];
        for k in 0..m {
            ubar += v[m + 1 + k] * p[k] + v[k] * p[m + 1 + k];
        }
        xbar[a] = ubar / h;
        hbar -= ubar * (x[a] - mean) / (h * h);
    }
    if floored {
        let d = 1e-8 / j as f64;
        xbar.iter_mut().for_each(|v| *v += hbar * d);
    } else {
        let scale = hbar * h / ((j - 1) as f64 * sd * sd);
        for a in 0..j {
            xbar[a] += scale * (x[a] - mean);
        }
    }
    xbar
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_values() {
        assert_eq!(quartic_kernel(0.0, 1.0), 0.9375);
        assert_eq!(quartic_kernel(1.0, 1.0), 0.0);
        assert_eq!(quartic_kernel(-2.5, 1.0), 0.0);
        let n = 10_000;
        let h = 0.7;
        let step = 2.0 * h / n as f64;
        let integral: f64 = (0..n).map(|i| quartic_kernel(-h + (i as f64 + 0.5) * step, h) * step).sum();
        assert!((integral - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bandwidth_rule() {
        // sd = 10 for two points 10 * sqrt(2) apart; the J factor is checked separately
        let x = [100.0 - 5.0 * 2f64.sqrt(), 100.0 + 5.0 * 2f64.sqrt()];
        let h2 = bandwidth(&x, 1.5);
        assert!((h2 - 15.0 * 2f64.powf(-0.2)).abs() < 1e-12);
        assert!((15.0 * 4096f64.powf(-0.2) - 2.841_968_562_206_996_6).abs() < 1e-12);
        assert!((bandwidth(&x, 3.0) - 2.0 * h2).abs() < 1e-12);
        assert_eq!(bandwidth(&[50.0; 8], 1.5), 50.0 * 1e-8);
    }

    #[test]
    fn identical_spots_give_cross_path_mean() {
        let o = [0.1, 0.3, 0.0, 0.4, 0.2, 0.2, 0.3, 0.1];
        let x = [100.0; 4];
        let est = project_occupation(&o, 2, &x, 1.0);
        for row in est.ohat.chunks(2) {
            assert!((row[0] - 0.15).abs() < 1e-15);
            assert!((row[1] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_particles_keep_their_rows() {
        let o = [0.1, 0.3, 0.4, 0.0];
        let est = project_occupation(&o, 2, &[90.0, 110.0], 5.0);
        assert_eq!(est.ohat, o.to_vec());
        let est = project_occupation(&o[..2], 2, &[90.0], 5.0);
        assert_eq!(est.ohat, o[..2].to_vec());
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, f64)> {
        (2usize..60, 1usize..6, 0.05f64..3.0).prop_flat_map(|(j, m, h)| {
            (
                proptest::collection::vec(0.0f64..1.0, j * m),
                proptest::collection::vec(95.0f64..105.0, j),
                Just(m),
                Just(h),
            )
        })
    }

    proptest! {
        #[test]
        fn fast_matches_direct((o, x, m, h) in case()) {
            let fast = project_occupation(&o, m, &x, h).ohat;
            let direct = project_occupation_direct(&o, m, &x, h);
            for (a, b) in fast.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
            }
        }

        #[test]
        fn rows_are_convex_combinations((o, x, m, h) in case()) {
            let fast = project_occupation(&o, m, &x, h).ohat;
            for c in 0..m {
                let lo = o.iter().skip(c).step_by(m).fold(f64::INFINITY, |a, v| a.min(*v));
                let hi = o.iter().skip(c).step_by(m).fold(0.0f64, |a, v| a.max(*v));
                for v in fast.iter().skip(c).step_by(m) {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn adjoint_matches_finite_differences((o, x, m, _h) in case(), seed in 0u64..1000) {
            let mult = 1.5;
            let g: Vec<f64> = (0..o.len()).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0) - 1.0).collect();
            let f = |x: &[f64]| -> f64 {
                let h = bandwidth(x, mult);
                let oh = project_occupation(&o, m, x, h).ohat;
                oh.iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            let h0 = bandwidth(&x, mult);
            let oh = project_occupation(&o, m, &x, h0).ohat;
            let xbar = project_adjoint(&o, &oh, m, &x, mult, &g);
            let k = (seed as usize) % x.len();
            let eps = 1e-6;
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            prop_assert!((fd - xbar[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{} vs {}", fd, xbar[k]);
        }
    }
}
