//! Least Squares Monte Carlo pricing on simulated ensembles, European pricing
//! and a Cox-Ross-Rubinstein oracle.

use alloc::vec::Vec;
use core::ops::Range;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::market::{bs_price, MarketEnvironment, PayoffFlag};
use crate::simulator::PathEnsemble;

/// Regressors: intercept, Black-Scholes price, `L_1..L_3`, total volatility,
/// five band occupations and their products with the spot.
pub const N_FEATURES: usize = 16;

/// Marks a path that is never exercised.
pub const NEVER: usize = usize::MAX;

/// Laguerre polynomials `L_0..L_3`.
pub fn laguerre(k: usize, y: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => 1.0 - y,
        2 => 1.0 - 2.0 * y + 0.5 * y * y,
        3 => 1.0 - 3.0 * y + 1.5 * y * y - y * y * y / 6.0,
        _ => panic!("laguerre degree {k} > 3"),
    }
}

/// Corridor ranges of the bands `A_1..A_5`: band `n` holds corridors
/// `m_{n-1}..m_n - 1` (1-based) with `m_n = 1 + floor(n M / 5)`.
pub fn feature_bands(m: usize) -> [Range<usize>; 5] {
    let edge = |n: usize| n * m / 5;
    [edge(0)..edge(1), edge(1)..edge(2), edge(2)..edge(3), edge(3)..edge(4), edge(4)..edge(5)]
}

/// Regression features for one path at one date.
#[allow(clippy::too_many_arguments)]
pub fn features(
    env: &MarketEnvironment,
    strike: f64,
    flag: PayoffFlag,
    tau: f64,
    x: f64,
    sigma: f64,
    bands: &[f64; 5],
    out: &mut [f64; N_FEATURES],
) {
    let y = x / env.spot;
    out[0] = 1.0;
    out[1] = bs_price(x, strike, tau, sigma, env.rate, env.dividend_yield, flag);
    out[2] = laguerre(1, y);
    out[3] = laguerre(2, y);
    out[4] = laguerre(3, y);
    out[5] = sigma * tau.sqrt();
    for b in 0..5 {
        out[6 + b] = bands[b];
        out[11 + b] = x * bands[b];
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LsmcOptions {
    /// Regress on in-the-money paths only.
    pub itm_only: bool,
    /// Exercise dates as step indices; `None` means every step up to expiry.
    pub exercise_dates: Option<Vec<usize>>,
    /// Fit the policy on the first half of the pairs, price on the second.
    pub two_pass: bool,
    /// Singular values below `rank_tol * max` are dropped.
    pub rank_tol: f64,
}

impl Default for LsmcOptions {
    fn default() -> Self {
        Self { itm_only: true, exercise_dates: None, two_pass: false, rank_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExercisePolicy {
    pub dates: Vec<usize>,
    /// Coefficients per date in `dates` order; `None` where the regression was
    /// skipped for lack of in-the-money paths. The expiry date has none.
    pub coefficients: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsmcResult {
    pub price: f64,
    pub std_error: f64,
    pub policy: ExercisePolicy,
    /// Same paths were used to fit and to price (low-biased estimate).
    pub in_sample: bool,
    /// Exercise step per path, [`NEVER`] if not exercised.
    pub stop_step: Vec<usize>,
    /// Undiscounted payoff at the exercise step.
    pub cashflow: Vec<f64>,
    /// Antithetic pairs entering the price estimate: pair `p` is paths `p`
    /// and `p + J/2`.
    pub priced: Range<usize>,
}

impl LsmcResult {
    /// Weight of path `j` in the price estimate.
    pub fn path_weight(&self, j: usize) -> f64 {
        let half = self.stop_step.len() / 2;
        let p = if j < half { j } else { j - half };
        if self.priced.contains(&p) {
            0.5 / self.priced.len() as f64
        } else {
            0.0
        }
    }
}

/// Maps an expiry to the nearest step; it must lie in `(0, horizon]`.
pub fn expiry_step(ensemble: &PathEnsemble, expiry: f64) -> Result<usize> {
    let n = (expiry / ensemble.dt).round();
    if !(expiry > 0.0) || n < 1.0 || n > ensemble.steps as f64 {
        return Err(invalid(alloc::format!(
            "expiry {expiry} is outside the simulated horizon {}",
            ensemble.horizon()
        )));
    }
    Ok(n as usize)
}

/// Discounted mean payoff at expiry with its antithetic-pair standard error.
pub fn price_european(
    ensemble: &PathEnsemble,
    env: &MarketEnvironment,
    strike: f64,
    expiry: f64,
    flag: PayoffFlag,
) -> Result<(f64, f64)> {
    let n = expiry_step(ensemble, expiry)?;
    let df = (-env.rate * n as f64 * ensemble.dt).exp();
    let values: Vec<f64> = ensemble.spots(n).iter().map(|x| df * flag.intrinsic(*x, strike)).collect();
    Ok(pair_estimate(&values, 0..ensemble.paths))
}

/// Mean and standard error over `range`, pairing `j` with `j + J/2`.
fn pair_estimate(values: &[f64], range: Range<usize>) -> (f64, f64) {
    let half = values.len() / 2;
    let pairs: Vec<f64> = range
        .clone()
        .filter(|j| *j < half)
        .map(|j| 0.5 * (values[j] + values[j + half]))
        .collect();
    let n = pairs.len() as f64;
    let mean = pairs.iter().sum::<f64>() / n;
    if pairs.len() < 2 {
        return (mean, 0.0);
    }
    let var = pairs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Longstaff-Schwartz price of an early-exercise option.
pub fn price_american(
    ensemble: &PathEnsemble,
    env: &MarketEnvironment,
    strike: f64,
    expiry: f64,
    flag: PayoffFlag,
    options: &LsmcOptions,
) -> Result<LsmcResult> {
    let n_t = expiry_step(ensemble, expiry)?;
    let j_count = ensemble.paths;
    let half = j_count / 2;
    let dt = ensemble.dt;
    let r = env.rate;

    let mut dates: Vec<usize> = match &options.exercise_dates {
        Some(d) => d.iter().copied().filter(|n| *n >= 1 && *n <= n_t).collect(),
        None => (1..=n_t).collect(),
    };
    dates.push(n_t);
    dates.sort_unstable();
    dates.dedup();

    // fit on pairs [0, half/2) and their partners, price on the rest
    let fit_pair = |j: usize| -> bool {
        let p = if j < half { j } else { j - half };
        !options.two_pass || p < half / 2
    };
    let priced = if options.two_pass { half / 2..half } else { 0..half };

    let mut cash: Vec<f64> = ensemble.spots(n_t).iter().map(|x| flag.intrinsic(*x, strike)).collect();
    let mut stop: Vec<usize> = cash.iter().map(|c| if *c > 0.0 { n_t } else { NEVER }).collect();

    // band occupations at t_{n_T}, walked back one step at a time
    let m = ensemble.partition.len();
    let bands = feature_bands(m);
    let band_of: Vec<usize> = (0..m).map(|c| bands.iter().position(|b| b.contains(&c)).unwrap()).collect();
    let mut occ = alloc::vec![[0.0f64; 5]; j_count];
    // visit counts keep emptied bands at exactly zero
    let mut visits = alloc::vec![[0u32; 5]; j_count];
    for n in 0..n_t {
        let inc = ensemble.increment(n);
        for (j, x) in ensemble.spots(n).iter().enumerate() {
            let b = band_of[ensemble.partition.locate(*x)];
            occ[j][b] += inc;
            visits[j][b] += 1;
        }
    }
    let mut occ_step = n_t;

    let mut coefficients = alloc::vec![None; dates.len()];
    let mut f = [0.0; N_FEATURES];
    let mut rows: Vec<[f64; N_FEATURES]> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut members: Vec<usize> = Vec::new();
    for (d, &n) in dates.iter().enumerate().rev() {
        if n == n_t {
            continue;
        }
        while occ_step > n {
            occ_step -= 1;
            let inc = ensemble.increment(occ_step);
            for (j, x) in ensemble.spots(occ_step).iter().enumerate() {
                let b = band_of[ensemble.partition.locate(*x)];
                visits[j][b] -= 1;
                occ[j][b] = if visits[j][b] == 0 { 0.0 } else { occ[j][b] - inc };
            }
        }
        let tau = (n_t - n) as f64 * dt;
        rows.clear();
        targets.clear();
        members.clear();
        for j in 0..j_count {
            let x = ensemble.x(j, n);
            let intrinsic = flag.intrinsic(x, strike);
            if options.itm_only && intrinsic <= 0.0 {
                continue;
            }
            members.push(j);
            if !fit_pair(j) {
                continue;
            }
            features(env, strike, flag, tau, x, ensemble.sigma(j, n), &occ[j], &mut f);
            rows.push(f);
            targets.push(if stop[j] == NEVER { 0.0 } else { cash[j] * (-r * (stop[j] - n) as f64 * dt).exp() });
        }
        if rows.len() < N_FEATURES {
            continue;
        }
        let beta = regress(&rows, &targets, options.rank_tol);
        for &j in &members {
            let x = ensemble.x(j, n);
            let intrinsic = flag.intrinsic(x, strike);
            if intrinsic <= 0.0 {
                continue;
            }
            features(env, strike, flag, tau, x, ensemble.sigma(j, n), &occ[j], &mut f);
            let continuation: f64 = f.iter().zip(&beta).map(|(a, b)| a * b).sum();
            if intrinsic >= continuation {
                cash[j] = intrinsic;
                stop[j] = n;
            }
        }
        coefficients[d] = Some(beta);
    }

    let values: Vec<f64> = (0..j_count)
        .map(|j| if stop[j] == NEVER { 0.0 } else { cash[j] * (-r * stop[j] as f64 * dt).exp() })
        .collect();
    let (price, std_error) = pair_estimate(&values, priced.clone());
    Ok(LsmcResult {
        price,
        std_error,
        policy: ExercisePolicy { dates, coefficients },
        in_sample: !options.two_pass,
        stop_step: stop,
        cashflow: cash,
        priced,
    })
}

/// Least squares via column-scaled normal equations and a truncated SVD.
fn regress(rows: &[[f64; N_FEATURES]], y: &[f64], rank_tol: f64) -> Vec<f64> {
    let mut scale = [0.0f64; N_FEATURES];
    for row in rows {
        for k in 0..N_FEATURES {
            scale[k] += row[k] * row[k];
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let mut a = DMatrix::<f64>::zeros(N_FEATURES, N_FEATURES);
    let mut b = DVector::<f64>::zeros(N_FEATURES);
    let mut z = [0.0; N_FEATURES];
    for (row, yv) in rows.iter().zip(y) {
        for k in 0..N_FEATURES {
            z[k] = row[k] / scale[k];
        }
        for i in 0..N_FEATURES {
            b[i] += z[i] * yv;
            for k in i..N_FEATURES {
                a[(i, k)] += z[i] * z[k];
            }
        }
    }
    for i in 0..N_FEATURES {
        for k in 0..i {
            a[(i, k)] = a[(k, i)];
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let sol = svd
        .solve(&b, rank_tol * smax)
        .unwrap_or_else(|_| DVector::zeros(N_FEATURES));
    (0..N_FEATURES).map(|k| sol[k] / scale[k]).collect()
}

/// Cox-Ross-Rubinstein lattice price.
#[allow(clippy::too_many_arguments)]
pub fn binomial_price(
    x0: f64,
    strike: f64,
    expiry: f64,
    sigma: f64,
    r: f64,
    q: f64,
    flag: PayoffFlag,
    american: bool,
    steps: usize,
) -> Result<f64> {
    if steps == 0 || !(x0 > 0.0 && strike >= 0.0 && expiry > 0.0 && sigma >= 0.0) {
        return Err(invalid("binomial lattice needs steps >= 1, x0 > 0, T > 0, sigma >= 0"));
    }
    let dt = expiry / steps as f64;
    if sigma == 0.0 {
        let value_at = |n: usize| {
            let t = n as f64 * dt;
            (-r * t).exp() * flag.intrinsic(x0 * ((r - q) * t).exp(), strike)
        };
        return Ok(if american { (0..=steps).map(value_at).fold(0.0, f64::max) } else { value_at(steps) });
    }
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let p = (((r - q) * dt).exp() - d) / (u - d);
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("binomial probability outside [0, 1]; increase steps"));
    }
    let df = (-r * dt).exp();
    let mut v: Vec<f64> = (0..=steps)
        .map(|i| flag.intrinsic(x0 * u.powi(i as i32) * d.powi((steps - i) as i32), strike))
        .collect();
    for n in (0..steps).rev() {
        for i in 0..=n {
            let cont = df * (p * v[i + 1] + (1.0 - p) * v[i]);
            v[i] = if american {
                let s = x0 * u.powi(i as i32) * d.powi((n - i) as i32);
                cont.max(flag.intrinsic(s, strike))
            } else {
                cont
            };
        }
    }
    Ok(v[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localvol::LocalVolSurface;
    use crate::market::bs_price;
    use crate::model::{LovModel, VarianceMode};
    use crate::occupation::CorridorPartition;
    use crate::sensitivity::SensitivitySpec;
    use crate::simulator::{simulate_lov, SimConfig};

    #[test]
    fn laguerre_values() {
        assert_eq!(laguerre(1, 0.0), 1.0);
        assert_eq!(laguerre(2, 2.0), -1.0);
        assert_eq!(laguerre(3, 0.0), 1.0);
        assert!((laguerre(3, 1.0) - (1.0 - 3.0 + 1.5 - 1.0 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn bands_partition_corridors() {
        for m in 1..80 {
            let b = feature_bands(m);
            assert_eq!(b[0].start, 0);
            assert_eq!(b[4].end, m);
            for w in b.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
            assert_eq!(b.iter().map(|r| r.len()).sum::<usize>(), m);
        }
        assert_eq!(feature_bands(63)[0], 0..12);
    }

    #[test]
    fn binomial_oracles() {
        let eu = binomial_price(100.0, 100.0, 1.0, 0.2, 0.05, 0.0, PayoffFlag::Put, false, 2000).unwrap();
        let bs = bs_price(100.0, 100.0, 1.0, 0.2, 0.05, 0.0, PayoffFlag::Put);
        assert!((eu - bs).abs() < 1e-3);
        for steps in [1, 7, 50, 301] {
            let a = binomial_price(100.0, 95.0, 1.0, 0.25, 0.04, 0.0, PayoffFlag::Call, true, steps).unwrap();
            let e = binomial_price(100.0, 95.0, 1.0, 0.25, 0.04, 0.0, PayoffFlag::Call, false, steps).unwrap();
            assert!((a - e).abs() < 1e-10);
            let ap = binomial_price(100.0, 95.0, 1.0, 0.25, 0.04, 0.0, PayoffFlag::Put, true, steps).unwrap();
            let ep = binomial_price(100.0, 95.0, 1.0, 0.25, 0.04, 0.0, PayoffFlag::Put, false, steps).unwrap();
            assert!(ap >= ep);
        }
        let z = binomial_price(100.0, 90.0, 1.0, 0.0, 0.05, 0.0, PayoffFlag::Call, false, 10).unwrap();
        assert!((z - (100.0 - 90.0 * (-0.05f64).exp())).abs() < 1e-12);
    }

    fn flat_ensemble(paths: usize, steps: usize, horizon: f64, r: f64) -> (PathEnsemble, MarketEnvironment) {
        let env = MarketEnvironment::new(100.0, r, 0.0).unwrap();
        let model = LovModel::new(
            LocalVolSurface::constant(0.2).unwrap(),
            CorridorPartition::build(100.0, 0.2, horizon, 7).unwrap(),
            SensitivitySpec::Zero,
            VarianceMode::Additive,
            0.0,
        )
        .unwrap();
        let config = SimConfig { horizon, steps, paths, seed: 17, ..SimConfig::default() };
        (simulate_lov(&config, &env, &model).unwrap(), env)
    }

    #[test]
    fn deep_itm_put_exercises_at_once() {
        let (e, env) = flat_ensemble(1024, 4, 0.5, 0.1);
        let res = price_american(&e, &env, 1000.0, 0.5, PayoffFlag::Put, &LsmcOptions::default()).unwrap();
        assert!(res.stop_step.iter().all(|s| *s == 1));
        let mean_x1 = e.spots(1).iter().sum::<f64>() / 1024.0;
        let expect = (1000.0 - mean_x1) * (-0.1 * e.dt).exp();
        assert!((res.price - expect).abs() < 1e-9);
    }

    #[test]
    fn worthless_put_and_call() {
        let (e, env) = flat_ensemble(64, 10, 0.25, 0.01);
        let res = price_american(&e, &env, 1e-6, 0.25, PayoffFlag::Put, &LsmcOptions::default()).unwrap();
        assert_eq!(res.price, 0.0);
        let kmax = e.terminal().iter().fold(0.0f64, |a, b| a.max(*b));
        assert_eq!(price_european(&e, &env, kmax, 0.25, PayoffFlag::Call).unwrap().0, 0.0);
    }

    #[test]
    fn european_matches_black_scholes() {
        let (e, env) = flat_ensemble(1 << 14, 50, 1.0, 0.03);
        let (p, se) = price_european(&e, &env, 100.0, 1.0, PayoffFlag::Call).unwrap();
        let bs = bs_price(100.0, 100.0, 1.0, 0.2, 0.03, 0.0, PayoffFlag::Call);
        assert!((p - bs).abs() < 2.0 * se, "{p} vs {bs} (se {se})");
        let (f, fse) = price_european(&e, &env, 0.0, 1.0, PayoffFlag::Call).unwrap();
        assert!((f - 100.0).abs() < 2.0 * fse);
    }

    #[test]
    fn two_pass_prices_held_out_half() {
        let (e, env) = flat_ensemble(2048, 25, 0.5, 0.05);
        let opts = LsmcOptions { two_pass: true, ..LsmcOptions::default() };
        let res = price_american(&e, &env, 100.0, 0.5, PayoffFlag::Put, &opts).unwrap();
        assert!(!res.in_sample);
        let eu = bs_price(100.0, 100.0, 0.5, 0.2, 0.05, 0.0, PayoffFlag::Put);
        assert!(res.price > eu - 3.0 * res.std_error);
    }
}
