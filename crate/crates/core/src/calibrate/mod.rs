//! Fitting the sensitivity parameters to option quotes: weighted RMSE loss,
//! gradients and the Adam training loop.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::lsmc::{self, expiry_step, LsmcOptions, NEVER};
use crate::market::{Exercise, MarketEnvironment, OptionQuote, PayoffFlag};
use crate::model::LovModel;
use crate::rng::Normals;
use crate::sensitivity::AdamState;
use crate::simulator::{pathwise_gradient, simulate_lov_with, AdjointOptions, PathEnsemble, SimConfig};

/// `sqrt(mean((w_i (p_i - mid_i))^2))`.
pub fn loss(prices: &[f64], quotes: &[OptionQuote]) -> Result<f64> {
    if prices.len() != quotes.len() {
        return Err(Error::LengthMismatch { expected: quotes.len(), got: prices.len() });
    }
    if quotes.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let sum: f64 = prices.iter().zip(quotes).map(|(p, q)| sq(q.weight * (p - q.mid))).sum();
    Ok((sum / quotes.len() as f64).sqrt())
}

/// The loss reached when every price sits on its bid or ask.
pub fn threshold_alpha(quotes: &[OptionQuote]) -> Result<f64> {
    if quotes.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let sum: f64 = quotes.iter().map(|q| sq(q.weight * q.spread())).sum();
    Ok(0.5 * (sum / quotes.len() as f64).sqrt())
}

/// `dL/dp_i`; zero at a perfect fit.
pub fn loss_gradient(prices: &[f64], quotes: &[OptionQuote]) -> Result<Vec<f64>> {
    let l = loss(prices, quotes)?;
    let n = quotes.len() as f64;
    Ok(prices
        .iter()
        .zip(quotes)
        .map(|(p, q)| if l > 0.0 { q.weight * q.weight * (p - q.mid) / (n * l) } else { 0.0 })
        .collect())
}

fn sq(x: f64) -> f64 {
    x * x
}

/// Quotes that enter the training loss: everything but European calls.
pub fn training_set(quotes: &[OptionQuote]) -> Vec<OptionQuote> {
    quotes
        .iter()
        .filter(|q| !(q.flag == PayoffFlag::Call && q.exercise == Exercise::European))
        .cloned()
        .collect()
}

/// One model price with the per-path exercise data needed for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentPrice {
    pub price: f64,
    pub std_error: f64,
    /// Exercise step per path, [`NEVER`] if unexercised.
    pub stop_step: Vec<usize>,
    /// Weight of each path's discounted payoff in `price`.
    pub path_weight: Vec<f64>,
}

/// Prices every quote off one ensemble: European payoffs at expiry, American
/// ones by LSMC.
pub fn price_quotes(
    ensemble: &PathEnsemble,
    env: &MarketEnvironment,
    quotes: &[OptionQuote],
    lsmc_options: &LsmcOptions,
) -> Result<Vec<InstrumentPrice>> {
    let j_count = ensemble.paths;
    quotes
        .iter()
        .map(|q| match q.exercise {
            Exercise::European => {
                let n = expiry_step(ensemble, q.expiry)?;
                let (price, std_error) = lsmc::price_european(ensemble, env, q.strike, q.expiry, q.flag)?;
                let stop_step = ensemble
                    .spots(n)
                    .iter()
                    .map(|x| if q.flag.intrinsic(*x, q.strike) > 0.0 { n } else { NEVER })
                    .collect();
                Ok(InstrumentPrice { price, std_error, stop_step, path_weight: alloc::vec![1.0 / j_count as f64; j_count] })
            }
            Exercise::American => {
                let res = lsmc::price_american(ensemble, env, q.strike, q.expiry, q.flag, lsmc_options)?;
                let path_weight = (0..j_count).map(|j| res.path_weight(j)).collect();
                Ok(InstrumentPrice { price: res.price, std_error: res.std_error, stop_step: res.stop_step, path_weight })
            }
        })
        .collect()
}

/// `dL/dX` seeds for the reverse pass, exercise times held fixed.
pub fn exercise_seeds(
    ensemble: &PathEnsemble,
    env: &MarketEnvironment,
    quotes: &[OptionQuote],
    prices: &[InstrumentPrice],
    dloss_dprice: &[f64],
) -> Vec<f64> {
    let j_count = ensemble.paths;
    let mut seeds = alloc::vec![0.0; (ensemble.steps + 1) * j_count];
    for ((q, p), g) in quotes.iter().zip(prices).zip(dloss_dprice) {
        if *g == 0.0 {
            continue;
        }
        let eta = q.flag.eta();
        for j in 0..j_count {
            let n = p.stop_step[j];
            if n == NEVER || p.path_weight[j] == 0.0 {
                continue;
            }
            let df = (-env.rate * n as f64 * ensemble.dt).exp();
            seeds[n * j_count + j] += g * p.path_weight[j] * df * eta;
        }
    }
    seeds
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum GradientMethod {
    /// Reverse pass with exercise times and regression coefficients frozen.
    Pathwise { through_projection: bool },
    /// Central differences on common random numbers.
    FiniteDifference { step: f64 },
}

impl Default for GradientMethod {
    fn default() -> Self {
        GradientMethod::Pathwise { through_projection: true }
    }
}

/// Simulation grid shared by every epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GridConfig {
    pub steps_per_year: f64,
    pub bandwidth_multiplier: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps_per_year: 252.0, bandwidth_multiplier: 1.5 }
    }
}

impl GridConfig {
    /// Horizon and step count covering the longest expiry.
    pub fn horizon_steps(&self, quotes: &[OptionQuote]) -> Result<(f64, usize)> {
        let horizon = quotes.iter().map(|q| q.expiry).fold(0.0, f64::max);
        if !(horizon > 0.0) || !(self.steps_per_year > 0.0) {
            return Err(invalid("need a positive expiry and steps_per_year"));
        }
        Ok((horizon, ((horizon * self.steps_per_year).round() as usize).max(1)))
    }

    pub fn sim_config(&self, quotes: &[OptionQuote], paths: usize, seed: u64, record_tape: bool) -> Result<SimConfig> {
        let (horizon, steps) = self.horizon_steps(quotes)?;
        Ok(SimConfig {
            horizon,
            steps,
            paths,
            seed,
            bandwidth_multiplier: self.bandwidth_multiplier,
            record_tape,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub prices: Vec<InstrumentPrice>,
    pub gradient: Option<Vec<f64>>,
}

/// Simulates on `normals`, prices `quotes` and optionally differentiates the loss.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &LovModel,
    env: &MarketEnvironment,
    quotes: &[OptionQuote],
    config: &SimConfig,
    normals: &Normals,
    lsmc_options: &LsmcOptions,
    gradient: Option<GradientMethod>,
) -> Result<Evaluation> {
    let tape = matches!(gradient, Some(GradientMethod::Pathwise { .. }));
    let config = SimConfig { record_tape: tape, ..config.clone() };
    let ensemble = simulate_lov_with(&config, env, model, normals)?;
    let prices = price_quotes(&ensemble, env, quotes, lsmc_options)?;
    let p: Vec<f64> = prices.iter().map(|p| p.price).collect();
    let l = loss(&p, quotes)?;
    let gradient = match gradient {
        None => None,
        Some(GradientMethod::Pathwise { through_projection }) => {
            let dl = loss_gradient(&p, quotes)?;
            let seeds = exercise_seeds(&ensemble, env, quotes, &prices, &dl);
            drop(p);
            Some(pathwise_gradient(&ensemble, model, &seeds, AdjointOptions { through_projection })?)
        }
        Some(GradientMethod::FiniteDifference { step }) => {
            drop(ensemble);
            Some(fd_gradient(model, env, quotes, &config, normals, lsmc_options, step)?)
        }
    };
    if let Some(g) = &gradient {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
    }
    Ok(Evaluation { loss: l, prices, gradient })
}

fn fd_gradient(
    model: &LovModel,
    env: &MarketEnvironment,
    quotes: &[OptionQuote],
    config: &SimConfig,
    normals: &Normals,
    lsmc_options: &LsmcOptions,
    step: f64,
) -> Result<Vec<f64>> {
    let config = SimConfig { record_tape: false, ..config.clone() };
    let theta = model.spec.params();
    let at = |k: usize, v: f64| -> Result<f64> {
        let mut m = model.clone();
        let mut q = theta.clone();
        q[k] = v;
        m.spec.set_params(&q)?;
        let e = simulate_lov_with(&config, env, &m, normals)?;
        let p: Vec<f64> = price_quotes(&e, env, quotes, lsmc_options)?.iter().map(|p| p.price).collect();
        loss(&p, quotes)
    };
    (0..theta.len())
        .map(|k| {
            let h = step * (1.0 + theta[k].abs());
            Ok((at(k, theta[k] + h)? - at(k, theta[k] - h)?) / (2.0 * h))
        })
        .collect()
}

/// Antithetic pair counts: from epoch `from_epoch` on, use `pairs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchStage {
    pub from_epoch: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CalibrationConfig {
    pub grid: GridConfig,
    pub schedule: Vec<BatchStage>,
    pub gradient: GradientMethod,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Trailing window of the stopping rule.
    pub window: usize,
    /// Largest window range as a fraction of alpha.
    pub window_range: f64,
    /// Epoch `e` draws with seed `seed + e`.
    pub seed: u64,
    pub holdout_pairs: usize,
    pub holdout_seed: u64,
    pub lsmc: LsmcOptions,
    pub vega_floor: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            schedule: alloc::vec![BatchStage { from_epoch: 0, pairs: 256 }, BatchStage { from_epoch: 1000, pairs: 4096 }],
            gradient: GradientMethod::default(),
            learning_rate: 1e-3,
            max_epochs: 2000,
            window: 50,
            window_range: 0.05,
            seed: 1,
            holdout_pairs: 4096,
            holdout_seed: u64::MAX - 1,
            lsmc: LsmcOptions::default(),
            vega_floor: 1e-2,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule[0].from_epoch != 0 {
            return Err(invalid("batch schedule must start at epoch 0"));
        }
        if self.schedule.windows(2).any(|w| w[0].from_epoch >= w[1].from_epoch) {
            return Err(invalid("batch schedule epochs must be strictly increasing"));
        }
        if self.schedule.iter().any(|s| s.pairs == 0) || self.holdout_pairs == 0 {
            return Err(invalid("pair counts must be > 0"));
        }
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 || self.window == 0 {
            return Err(invalid("learning rate, epoch limit and window must be > 0"));
        }
        if !(self.window_range >= 0.0) {
            return Err(invalid("window range must be >= 0"));
        }
        if let GradientMethod::FiniteDifference { step } = self.gradient {
            if !(step > 0.0) {
                return Err(invalid("finite-difference step must be > 0"));
            }
        }
        Ok(())
    }

    pub fn pairs_at(&self, epoch: usize) -> usize {
        self.schedule.iter().rev().find(|s| s.from_epoch <= epoch).map_or(self.schedule[0].pairs, |s| s.pairs)
    }

    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_add(epoch as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// NaN for an aborted epoch.
    pub loss: f64,
    pub alpha: f64,
    pub paths: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuoteFit {
    pub strike: f64,
    pub expiry: f64,
    pub flag: PayoffFlag,
    pub exercise: Exercise,
    pub model_price: f64,
    pub std_error: f64,
    pub bid: f64,
    pub ask: f64,
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationReport {
    pub converged: bool,
    pub epochs: usize,
    pub best_epoch: usize,
    pub alpha: f64,
    /// Training loss on the held-out draws.
    pub holdout_loss: f64,
    pub holdout_in_band: f64,
    pub fits: Vec<QuoteFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub theta: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub report: CalibrationReport,
}

/// Whether the last `window` losses are all below `alpha` and spread by less
/// than `range * alpha`.
pub fn window_converged(history: &[EpochRecord], alpha: f64, window: usize, range: f64) -> bool {
    if history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.loss), hi.max(r.loss)));
    tail.iter().all(|r| r.loss < alpha) && hi - lo < range * alpha
}

/// Prices `quotes` (all of them, calls included) under `model` on held-out
/// draws.
pub fn report_fits(
    model: &LovModel,
    env: &MarketEnvironment,
    quotes: &[OptionQuote],
    config: &CalibrationConfig,
) -> Result<Vec<QuoteFit>> {
    let sim = config.grid.sim_config(quotes, 2 * config.holdout_pairs, config.holdout_seed, false)?;
    let normals = sim.normals();
    let e = simulate_lov_with(&sim, env, model, &normals)?;
    let prices = price_quotes(&e, env, quotes, &config.lsmc)?;
    Ok(quotes
        .iter()
        .zip(&prices)
        .map(|(q, p)| QuoteFit {
            strike: q.strike,
            expiry: q.expiry,
            flag: q.flag,
            exercise: q.exercise,
            model_price: p.price,
            std_error: p.std_error,
            bid: q.bid,
            ask: q.ask,
            in_band: q.in_band(p.price),
        })
        .collect())
}

/// The training loop. `quotes` must carry weights; European calls are
/// dropped from the loss. `observer` sees every epoch record and the
/// parameters that produced it.
pub fn calibrate(
    config: &CalibrationConfig,
    model: &LovModel,
    env: &MarketEnvironment,
    quotes: &[OptionQuote],
    observer: &mut dyn FnMut(&EpochRecord, &[f64]),
) -> Result<CalibrationOutcome> {
    config.validate()?;
    env.validate()?;
    let train = training_set(quotes);
    if train.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let alpha = threshold_alpha(&train)?;
    let mut model = model.clone();
    let mut theta = model.spec.params();
    if theta.is_empty() {
        return Err(invalid("sensitivity has no parameters to calibrate"));
    }
    let mut adam = AdamState::with_rates(theta.len(), config.learning_rate, 0.9, 0.999, 1e-8);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best = (f64::INFINITY, 0usize, theta.clone());
    let mut converged = false;

    for epoch in 0..config.max_epochs {
        let pairs = config.pairs_at(epoch);
        let sim = config.grid.sim_config(&train, 2 * pairs, config.epoch_seed(epoch), false)?;
        let normals = sim.normals();
        let record = match evaluate(&model, env, &train, &sim, &normals, &config.lsmc, Some(config.gradient)) {
            Ok(ev) => {
                let grad = ev.gradient.unwrap_or_default();
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if ev.loss < best.0 {
                    best = (ev.loss, epoch, theta.clone());
                }
                let rec = EpochRecord { epoch, loss: ev.loss, alpha, paths: 2 * pairs, gradient_norm: norm };
                history.push(rec);
                observer(&rec, &theta);
                if window_converged(&history, alpha, config.window, config.window_range) {
                    converged = true;
                    break;
                }
                adam.step(&mut theta, &grad)?;
                model.spec.set_params(&theta)?;
                continue;
            }
            Err(Error::NonFiniteGradient) | Err(Error::NonFinite { .. }) => {
                EpochRecord { epoch, loss: f64::NAN, alpha, paths: 2 * pairs, gradient_norm: f64::NAN }
            }
            Err(e) => return Err(e),
        };
        history.push(record);
        observer(&record, &theta);
    }

    let (final_theta, best_epoch) = if converged {
        (theta, history.last().map_or(0, |r| r.epoch))
    } else {
        (best.2, best.1)
    };
    model.spec.set_params(&final_theta)?;

    let sim = config.grid.sim_config(&train, 2 * config.holdout_pairs, config.holdout_seed, false)?;
    let ev = evaluate(&model, env, &train, &sim, &sim.normals(), &config.lsmc, None)?;
    let inside = train.iter().zip(&ev.prices).filter(|(q, p)| q.in_band(p.price)).count();
    let fits = report_fits(&model, env, quotes, config)?;
    Ok(CalibrationOutcome {
        theta: final_theta,
        report: CalibrationReport {
            converged,
            epochs: history.len(),
            best_epoch,
            alpha,
            holdout_loss: ev.loss,
            holdout_in_band: inside as f64 / train.len() as f64,
            fits,
        },
        history,
    })
}
