//! Particle simulation of occupied SDEs with log-Euler steps.

mod adjoint;
mod projection;

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

pub use adjoint::{pathwise_gradient, AdjointOptions};
pub use projection::{bandwidth, project_occupation, project_occupation_direct, quartic_kernel, ProjectionEstimate};

use crate::error::{invalid, Error, Result};
use crate::market::MarketEnvironment;
use crate::model::LovModel;
use crate::occupation::{barycenter, clock_increment, CorridorPartition, Transform};
use crate::rng::Normals;
use crate::sensitivity::MlpWorkspace;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SimConfig {
    /// `T` in years.
    pub horizon: f64,
    /// `N`; `dt = T / N`.
    pub steps: usize,
    /// `J`, even: paths `j` and `j + J/2` are antithetic.
    pub paths: usize,
    pub seed: u64,
    /// `kappa_bw` in the bandwidth rule.
    pub bandwidth_multiplier: f64,
    /// Keep per-step occupations, projections and clamp flags for gradients.
    pub record_tape: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 252, paths: 1 << 12, seed: 0, bandwidth_multiplier: 1.5, record_tape: false }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(invalid("horizon must be finite and > 0"));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if self.paths == 0 || !self.paths.is_multiple_of(2) {
            return Err(invalid("paths must be even and > 0"));
        }
        if !(self.bandwidth_multiplier > 0.0) {
            return Err(invalid("bandwidth multiplier must be > 0"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn normals(&self) -> Normals {
        Normals::generate(self.seed, self.paths / 2, self.steps)
    }
}

/// Per-step state kept for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Occupations before the step, `J x M`.
    pub o: Vec<f64>,
    /// Their projection (empty when the correction is inactive).
    pub ohat: Vec<f64>,
    pub gamma: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub steps: Vec<StepRecord>,
    /// `N x J`, step-major.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub spot: f64,
    pub kappa: f64,
    pub bandwidth_multiplier: f64,
    pub partition: CorridorPartition,
    /// `(N + 1) x J`, step-major.
    pub x: Vec<f64>,
    /// `N x J`, step-major; the volatility used over `[t_n, t_{n+1})`.
    pub sigma: Vec<f64>,
    /// Final occupations, `J x M`.
    pub occupation: Vec<f64>,
    /// Common total occupation mass after `N` steps.
    pub total_mass: f64,
    pub clamp_events: u64,
    /// `max |sum_m Ohat_jm - mass|` over all steps and paths.
    pub mass_residual: f64,
    pub normals: Normals,
    pub tape: Option<Tape>,
}

impl PathEnsemble {
    #[inline]
    pub fn x(&self, j: usize, n: usize) -> f64 {
        self.x[n * self.paths + j]
    }

    #[inline]
    pub fn sigma(&self, j: usize, n: usize) -> f64 {
        self.sigma[n * self.paths + j]
    }

    pub fn spots(&self, n: usize) -> &[f64] {
        &self.x[n * self.paths..(n + 1) * self.paths]
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn terminal(&self) -> &[f64] {
        self.spots(self.steps)
    }

    /// Occupation mass added at step `n`.
    pub fn increment(&self, n: usize) -> f64 {
        clock_increment(self.kappa, self.time(n), self.dt)
    }
}

struct PathStep {
    sigma: f64,
    x_next: f64,
    clamped: bool,
}

/// Runs the LOV particle scheme with draws from `config.seed`.
pub fn simulate_lov(config: &SimConfig, env: &MarketEnvironment, model: &LovModel) -> Result<PathEnsemble> {
    simulate_lov_with(config, env, model, &config.normals())
}

/// Runs the LOV particle scheme with the given draws.
pub fn simulate_lov_with(
    config: &SimConfig,
    env: &MarketEnvironment,
    model: &LovModel,
    normals: &Normals,
) -> Result<PathEnsemble> {
    config.validate()?;
    env.validate()?;
    check_normals(config, normals)?;
    let j_count = config.paths;
    let n_steps = config.steps;
    let dt = config.dt();
    let sqdt = dt.sqrt();
    let drift = (env.rate - env.dividend_yield) * dt;
    let nodes = model.partition.nodes();
    let m = nodes.len();
    let correct = !model.spec.is_zero();

    let mut x = alloc::vec![0.0; (n_steps + 1) * j_count];
    x[..j_count].iter_mut().for_each(|v| *v = env.spot);
    let mut sigma = alloc::vec![0.0; n_steps * j_count];
    let mut o = alloc::vec![0.0; j_count * m];
    let mut ohat = alloc::vec![0.0; j_count * m];
    let mut scratch = Vec::new();
    let mut mass = 0.0;
    let mut clamps = 0u64;
    let mut residual = 0.0f64;
    let mut tape = config.record_tape.then(|| Tape { steps: Vec::with_capacity(n_steps), clamped: alloc::vec![false; n_steps * j_count] });

    for n in 0..n_steps {
        let t = n as f64 * dt;
        let (cur, rest) = x.split_at_mut((n + 1) * j_count);
        let xn = &cur[n * j_count..];
        let gamma = if correct { model.gamma_at(t, mass) } else { None };
        if gamma.is_some() && !model.uncentered {
            let h = bandwidth(xn, config.bandwidth_multiplier);
            projection::project_into(&o, m, xn, h, &mut ohat, &mut scratch);
            for row in ohat.chunks_exact(m) {
                residual = residual.max((row.iter().sum::<f64>() - mass).abs());
            }
        }

        let step_path = |j: usize, ws: &mut (MlpWorkspace, Vec<f64>)| -> PathStep {
            let xj = xn[j];
            let local = model.surface.variance(t, xj);
            let raw = match gamma {
                None => local,
                Some(g) => {
                    let (mlp_ws, ell) = ws;
                    ell.resize(m, 0.0);
                    model.spec.eval_row(t, xj, nodes, ell, mlp_ws);
                    let oj = &o[j * m..(j + 1) * m];
                    let pairing = if model.uncentered {
                        ell.iter().zip(oj).map(|(l, ov)| l * ov).sum::<f64>()
                    } else {
                        let base = ell[0];
                        ell.iter()
                            .zip(oj.iter().zip(&ohat[j * m..(j + 1) * m]))
                            .map(|(l, (ov, oh))| (l - base) * (ov - oh))
                            .sum::<f64>()
                    };
                    model.combine(local, g * pairing)
                }
            };
            let mut flag = 0;
            let v = model.clamp(raw, &mut flag);
            let s = v.sqrt();
            let z = normals.get(j, n);
            PathStep { sigma: s, x_next: xj * (s * sqdt * z + drift - 0.5 * v * dt).exp(), clamped: flag > 0 }
        };
        let results = map_paths(j_count, step_path);

        let next = &mut rest[..j_count];
        for (j, r) in results.iter().enumerate() {
            if !(r.x_next.is_finite() && r.x_next > 0.0 && r.sigma.is_finite()) {
                return Err(Error::NonFinite { step: n, path: j });
            }
            next[j] = r.x_next;
            sigma[n * j_count + j] = r.sigma;
            if r.clamped {
                clamps += 1;
            }
        }
        if let Some(tape) = tape.as_mut() {
            for (j, r) in results.iter().enumerate() {
                tape.clamped[n * j_count + j] = r.clamped;
            }
            let active = gamma.is_some();
            tape.steps.push(StepRecord {
                o: if active { o.clone() } else { Vec::new() },
                ohat: if active && !model.uncentered { ohat.clone() } else { Vec::new() },
                gamma: gamma.unwrap_or(0.0),
                active,
            });
        }

        let inc = clock_increment(model.kappa, t, dt);
        for (j, xj) in xn.iter().enumerate() {
            o[j * m + model.partition.locate(*xj)] += inc;
        }
        mass += inc;
    }

    Ok(PathEnsemble {
        paths: j_count,
        steps: n_steps,
        dt,
        spot: env.spot,
        kappa: model.kappa,
        bandwidth_multiplier: config.bandwidth_multiplier,
        partition: model.partition.clone(),
        x,
        sigma,
        occupation: o,
        total_mass: mass,
        clamp_events: clamps,
        mass_residual: residual,
        normals: normals.clone(),
        tape,
    })
}

fn check_normals(config: &SimConfig, normals: &Normals) -> Result<()> {
    if normals.paths() != config.paths || normals.steps() != config.steps {
        return Err(invalid("normal draws do not match the path and step counts"));
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn map_paths<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize, &mut (MlpWorkspace, Vec<f64>)) -> T,
{
    let mut ws = (MlpWorkspace::default(), Vec::new());
    (0..count).map(|j| f(j, &mut ws)).collect()
}

#[cfg(feature = "parallel")]
fn map_paths<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut (MlpWorkspace, Vec<f64>)) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map_init(|| (MlpWorkspace::default(), Vec::new()), |ws, j| f(j, ws))
        .collect()
}

/// Guyon's toy model: `sigma = Sigma(Y)` with `Sigma(y) = -a/b + c y^{-b}` and
/// trend `Y = X / barycenter(O)`, `Y = 1` on the first step. `Sigma` is clamped
/// to `[sqrt(floor), sqrt(cap)]` of the model variance window.
#[allow(clippy::too_many_arguments)]
pub fn simulate_guyon_toy(
    config: &SimConfig,
    env: &MarketEnvironment,
    partition: &CorridorPartition,
    kappa: f64,
    alpha: f64,
    beta: f64,
    gamma_toy: f64,
    normals: &Normals,
) -> Result<PathEnsemble> {
    config.validate()?;
    env.validate()?;
    check_normals(config, normals)?;
    if !(alpha > 0.0 && beta > 0.0 && gamma_toy > 0.0) {
        return Err(invalid("toy model parameters must be > 0"));
    }
    let (vol_floor, vol_cap) = (crate::localvol::LOCAL_VARIANCE_FLOOR.sqrt(), crate::localvol::LOCAL_VARIANCE_CAP.sqrt());
    let j_count = config.paths;
    let n_steps = config.steps;
    let dt = config.dt();
    let sqdt = dt.sqrt();
    let drift = (env.rate - env.dividend_yield) * dt;
    let m = partition.len();
    let nodes = partition.nodes();
    let mut x = alloc::vec![env.spot; (n_steps + 1) * j_count];
    let mut sigma = alloc::vec![0.0; n_steps * j_count];
    let mut o = alloc::vec![0.0; j_count * m];
    let mut mass = 0.0;
    let mut clamps = 0;
    for n in 0..n_steps {
        let t = n as f64 * dt;
        for j in 0..j_count {
            let xj = x[n * j_count + j];
            let trend = if mass > 0.0 { xj / barycenter(nodes, &o[j * m..(j + 1) * m], Transform::Identity)? } else { 1.0 };
            let raw = -alpha / beta + gamma_toy * trend.powf(-beta);
            let s = if raw < vol_floor {
                clamps += 1;
                vol_floor
            } else if raw > vol_cap {
                clamps += 1;
                vol_cap
            } else {
                raw
            };
            let next = xj * (s * sqdt * normals.get(j, n) + drift - 0.5 * s * s * dt).exp();
            if !(next.is_finite() && next > 0.0) {
                return Err(Error::NonFinite { step: n, path: j });
            }
            x[(n + 1) * j_count + j] = next;
            sigma[n * j_count + j] = s;
        }
        let inc = clock_increment(kappa, t, dt);
        for j in 0..j_count {
            o[j * m + partition.locate(x[n * j_count + j])] += inc;
        }
        mass += inc;
    }
    Ok(PathEnsemble {
        paths: j_count,
        steps: n_steps,
        dt,
        spot: env.spot,
        kappa,
        bandwidth_multiplier: config.bandwidth_multiplier,
        partition: partition.clone(),
        x,
        sigma,
        occupation: o,
        total_mass: mass,
        clamp_events: clamps,
        mass_residual: 0.0,
        normals: normals.clone(),
        tape: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localvol::LocalVolSurface;
    use crate::model::VarianceMode;
    use crate::sensitivity::SensitivitySpec;

    fn env(r: f64) -> MarketEnvironment {
        MarketEnvironment::new(100.0, r, 0.0).unwrap()
    }

    fn model(spec: SensitivitySpec, m: usize) -> LovModel {
        let surface = LocalVolSurface::new(
            alloc::vec![0.0, 0.5, 1.0],
            alloc::vec![70.0, 100.0, 140.0],
            alloc::vec![0.3, 0.22, 0.18, 0.28, 0.2, 0.17, 0.26, 0.2, 0.18],
        )
        .unwrap();
        let partition = CorridorPartition::build(100.0, 0.2, 0.5, m).unwrap();
        LovModel::new(surface, partition, spec, VarianceMode::Additive, 12.0).unwrap()
    }

    fn cfg(paths: usize, steps: usize) -> SimConfig {
        SimConfig { horizon: 0.5, steps, paths, seed: 42, ..SimConfig::default() }
    }

    #[test]
    fn constant_sensitivity_is_bitwise_local_vol() {
        let c = cfg(512, 40);
        let lv = simulate_lov(&c, &env(0.03), &model(SensitivitySpec::Zero, 9)).unwrap();
        let lov = simulate_lov(&c, &env(0.03), &model(SensitivitySpec::constant(0.013), 9)).unwrap();
        assert_eq!(lv.x, lov.x);
        assert_eq!(lv.sigma, lov.sigma);
        assert!(lov.mass_residual < 1e-12);
    }

    #[test]
    fn antithetic_log_returns_sum_to_drift() {
        let flat = LovModel::new(
            LocalVolSurface::constant(0.2).unwrap(),
            CorridorPartition::build(100.0, 0.2, 1.0, 5).unwrap(),
            SensitivitySpec::Zero,
            VarianceMode::Additive,
            0.0,
        )
        .unwrap();
        let c = cfg(64, 20);
        let e = simulate_lov(&c, &env(0.05), &flat).unwrap();
        let expect = 2.0 * (0.05 - 0.02) * 0.5;
        for j in 0..32 {
            let s = (e.terminal()[j] / 100.0).ln() + (e.terminal()[j + 32] / 100.0).ln();
            assert!((s - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_invariants() {
        let s = LocalVolSurface::constant(0.2).unwrap();
        let spec = SensitivitySpec::tanh_bounded(1.0, &s, 0.5).unwrap();
        let m = model(spec, 7);
        let c = SimConfig { record_tape: true, ..cfg(256, 30) };
        let e = simulate_lov(&c, &env(0.0), &m).unwrap();
        assert!(e.x.iter().all(|v| *v > 0.0));
        for j in 0..128 {
            for n in 0..30 {
                assert_eq!(e.normals.get(j + 128, n), -e.normals.get(j, n));
            }
        }
        let mass: f64 = (0..30).map(|n| e.increment(n)).fold(0.0, |a, b| a + b);
        assert_eq!(e.total_mass, mass);
        for row in e.occupation.chunks(7) {
            assert!((row.iter().sum::<f64>() - mass).abs() < 1e-13 * mass);
        }
        let tape = e.tape.as_ref().unwrap();
        assert_eq!(tape.steps.len(), 30);
        assert!(!tape.steps[0].active && tape.steps[1].active);
    }

    #[test]
    fn toy_model_constant_path() {
        let c = cfg(4, 25);
        let p = CorridorPartition::build(100.0, 0.2, 0.5, 5).unwrap();
        let sigma1: f64 = -0.1 / 0.5 + 0.35;
        let r = 0.5 * sigma1 * sigma1;
        let e = simulate_guyon_toy(&c, &env(r), &p, 12.0, 0.1, 0.5, 0.35, &Normals::zeros(2, 25)).unwrap();
        for n in 0..25 {
            for j in 0..4 {
                assert!((e.x(j, n) - 100.0).abs() < 1e-10);
                assert!((e.sigma(j, n) - sigma1).abs() < 1e-15);
            }
        }
        let sig = |y: f64| -0.1 / 0.5 + 0.35 * y.powf(-0.5);
        assert!(sig(1.1) < sig(1.0) && sig(0.9) > sig(1.0));
    }

    #[test]
    fn rejects_odd_paths() {
        let c = cfg(3, 5);
        assert!(simulate_lov(&c, &env(0.0), &model(SensitivitySpec::Zero, 3)).is_err());
    }
}
