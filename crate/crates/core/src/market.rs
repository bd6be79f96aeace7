//! Option quotes, market environment and Black-Scholes analytics.

use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PayoffFlag {
    Call,
    Put,
}

impl PayoffFlag {
    /// +1 for calls, -1 for puts.
    pub fn eta(self) -> f64 {
        match self {
            PayoffFlag::Call => 1.0,
            PayoffFlag::Put => -1.0,
        }
    }

    pub fn intrinsic(self, spot: f64, strike: f64) -> f64 {
        (self.eta() * (spot - strike)).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Exercise {
    European,
    American,
}

/// A quoted vanilla option together with its calibration weight.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptionQuote {
    pub strike: f64,
    pub expiry: f64,
    pub flag: PayoffFlag,
    pub exercise: Exercise,
    pub bid: f64,
    pub ask: f64,
    pub mid: f64,
    pub weight: f64,
}

impl OptionQuote {
    pub fn new(
        strike: f64,
        expiry: f64,
        flag: PayoffFlag,
        exercise: Exercise,
        bid: f64,
        ask: f64,
    ) -> Result<Self> {
        if !(strike.is_finite() && strike > 0.0) {
            return Err(invalid("strike must be finite and > 0"));
        }
        if !(expiry.is_finite() && expiry > 0.0) {
            return Err(invalid("expiry must be finite and > 0"));
        }
        if !(bid.is_finite() && ask.is_finite()) {
            return Err(invalid("bid/ask must be finite"));
        }
        if bid < 0.0 || ask < 0.0 {
            return Err(invalid("negative price"));
        }
        if bid > ask {
            return Err(invalid("crossed market: bid > ask"));
        }
        Ok(Self {
            strike,
            expiry,
            flag,
            exercise,
            bid,
            ask,
            mid: 0.5 * (bid + ask),
            weight: 1.0,
        })
    }

    pub fn spread(&self) -> f64 {
        self.ask - self.bid
    }

    /// Relative bid-ask spread `(ask - bid) / mid`; infinite when the mid is zero.
    pub fn relative_spread(&self) -> f64 {
        if self.mid > 0.0 {
            self.spread() / self.mid
        } else {
            f64::INFINITY
        }
    }

    pub fn in_band(&self, price: f64) -> bool {
        price >= self.bid && price <= self.ask
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MarketEnvironment {
    pub spot: f64,
    pub rate: f64,
    pub dividend_yield: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub valuation_date: String,
}

impl MarketEnvironment {
    pub fn new(spot: f64, rate: f64, dividend_yield: f64) -> Result<Self> {
        let env = Self {
            spot,
            rate,
            dividend_yield,
            valuation_date: String::new(),
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spot.is_finite() && self.spot > 0.0) {
            return Err(invalid("spot must be finite and > 0"));
        }
        if !self.rate.is_finite() {
            return Err(invalid("rate must be finite"));
        }
        if !(self.dividend_yield.is_finite() && self.dividend_yield >= 0.0) {
            return Err(invalid("dividend yield must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.spot * ((self.rate - self.dividend_yield) * t).exp()
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.rate * t).exp()
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Black-Scholes price with continuous dividend yield.
///
/// At `t = 0` the intrinsic value is returned; a zero total volatility gives
/// the discounted intrinsic value of the forward.
pub fn bs_price(spot: f64, strike: f64, t: f64, sigma: f64, r: f64, q: f64, flag: PayoffFlag) -> f64 {
    if t <= 0.0 {
        return flag.intrinsic(spot, strike);
    }
    let df = (-r * t).exp();
    let fwd = spot * ((r - q) * t).exp();
    let sd = sigma * t.sqrt();
    if sd <= 0.0 {
        return df * flag.intrinsic(fwd, strike);
    }
    let d1 = ((fwd / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    match flag {
        PayoffFlag::Call => df * (fwd * norm_cdf(d1) - strike * norm_cdf(d2)),
        PayoffFlag::Put => df * (strike * norm_cdf(-d2) - fwd * norm_cdf(-d1)),
    }
}

/// Black-Scholes Vega, `d price / d sigma`. Identical for calls and puts.
pub fn bs_vega(spot: f64, strike: f64, t: f64, sigma: f64, r: f64, q: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let sqrt_t = t.sqrt();
    let sd = sigma * sqrt_t;
    if sd <= 0.0 {
        return 0.0;
    }
    let fwd = spot * ((r - q) * t).exp();
    let d1 = ((fwd / strike).ln() + 0.5 * sd * sd) / sd;
    spot * (-q * t).exp() * norm_pdf(d1) * sqrt_t
}

/// Result of an implied volatility inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpliedVol {
    pub sigma: f64,
    /// The price sits on the lower no-arbitrage bound; `sigma` is reported as 0.
    pub at_lower_bound: bool,
}

/// No-arbitrage bounds `[lower, upper)` of a European option price.
pub fn price_bounds(spot: f64, strike: f64, t: f64, r: f64, q: f64, flag: PayoffFlag) -> (f64, f64) {
    let disc_spot = spot * (-q * t).exp();
    let disc_strike = strike * (-r * t).exp();
    match flag {
        PayoffFlag::Call => ((disc_spot - disc_strike).max(0.0), disc_spot),
        PayoffFlag::Put => ((disc_strike - disc_spot).max(0.0), disc_strike),
    }
}

/// Inverts [`bs_price`] for the volatility. Bisection brackets the root, Newton
/// polishes it.
pub fn implied_vol(
    price: f64,
    spot: f64,
    strike: f64,
    t: f64,
    r: f64,
    q: f64,
    flag: PayoffFlag,
) -> Result<ImpliedVol> {
    if !(spot > 0.0 && strike > 0.0 && t > 0.0 && price.is_finite()) {
        return Err(invalid("implied_vol requires spot, strike, t > 0 and a finite price"));
    }
    let (lower, upper) = price_bounds(spot, strike, t, r, q, flag);
    let tol = 1e-14 * upper.max(1.0);
    if price < lower - tol || price >= upper {
        return Err(Error::ArbitrageViolation { price, lower, upper });
    }
    if price <= lower + tol {
        return Ok(ImpliedVol { sigma: 0.0, at_lower_bound: true });
    }

    let f = |s: f64| bs_price(spot, strike, t, s, r, q, flag) - price;
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::ArbitrageViolation { price, lower, upper });
        }
    }
    while hi - lo > 1e-3 * hi.max(1e-2) {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut sigma = 0.5 * (lo + hi);
    for _ in 0..100 {
        let diff = f(sigma);
        if diff == 0.0 {
            break;
        }
        if diff < 0.0 {
            lo = sigma;
        } else {
            hi = sigma;
        }
        let vega = bs_vega(spot, strike, t, sigma, r, q);
        let mut next = if vega > 0.0 { sigma - diff / vega } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - sigma).abs() <= 1e-16 * sigma.max(1e-8) {
            sigma = next;
            break;
        }
        sigma = next;
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    Ok(ImpliedVol { sigma, at_lower_bound: false })
}

/// `w = 1 / (max(vega, floor) * spread)`.
pub fn weight_from_vega(vega: f64, spread: f64, vega_floor: f64) -> f64 {
    1.0 / (vega.max(vega_floor) * spread)
}

/// Reference implied volatility for weighting quote `i`: interpolated (linear
/// in strike, flat beyond the wings) from the call quotes of the same expiry,
/// or the quote's own implied volatility when the expiry has no calls.
pub fn reference_vol(quotes: &[OptionQuote], i: usize, env: &MarketEnvironment) -> f64 {
    let target = &quotes[i];
    let (r, q) = (env.rate, env.dividend_yield);
    let mut smile: Vec<(f64, f64)> = quotes
        .iter()
        .filter(|c| c.flag == PayoffFlag::Call && (c.expiry - target.expiry).abs() <= 1e-12)
        .filter_map(|c| {
            implied_vol(c.mid, env.spot, c.strike, c.expiry, r, q, PayoffFlag::Call)
                .ok()
                .filter(|iv| !iv.at_lower_bound)
                .map(|iv| (c.strike, iv.sigma))
        })
        .collect();
    if smile.is_empty() {
        return implied_vol(target.mid, env.spot, target.strike, target.expiry, r, q, target.flag)
            .map(|iv| iv.sigma)
            .unwrap_or(0.0);
    }
    smile.sort_by(|a, b| a.0.total_cmp(&b.0));
    interp_linear_flat(&smile, target.strike)
}

fn interp_linear_flat(points: &[(f64, f64)], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let k = points.partition_point(|p| p.0 <= x);
    let (x0, y0) = points[k - 1];
    let (x1, y1) = points[k];
    if x1 - x0 <= 0.0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Vega-and-spread calibration weights, one per quote.
pub fn calibration_weights(
    quotes: &[OptionQuote],
    env: &MarketEnvironment,
    vega_floor: f64,
) -> Result<Vec<f64>> {
    if !(vega_floor > 0.0) {
        return Err(invalid("vega floor must be > 0"));
    }
    quotes
        .iter()
        .enumerate()
        .map(|(i, quote)| {
            let spread = quote.spread();
            if !(spread > 0.0) {
                return Err(Error::ZeroSpread(i));
            }
            let vol = reference_vol(quotes, i, env);
            let vega = bs_vega(
                env.spot,
                quote.strike,
                quote.expiry,
                vol,
                env.rate,
                env.dividend_yield,
            );
            Ok(weight_from_vega(vega, spread, vega_floor))
        })
        .collect()
}

/// Computes and stores the weights on the quotes.
pub fn assign_weights(quotes: &mut [OptionQuote], env: &MarketEnvironment, vega_floor: f64) -> Result<()> {
    let weights = calibration_weights(quotes, env, vega_floor)?;
    for (quote, w) in quotes.iter_mut().zip(weights) {
        quote.weight = w;
    }
    Ok(())
}
