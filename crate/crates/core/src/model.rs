//! The LOV variance `sigma_t^2 = sigma_loc^2 + gamma * <l, O - Ohat>` and its
//! positivity guard.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::localvol::{LocalVolSurface, LOCAL_VARIANCE_CAP, LOCAL_VARIANCE_FLOOR};
use crate::occupation::{gamma, pair_against, CorridorPartition};
use crate::sensitivity::{MlpWorkspace, SensitivitySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VarianceMode {
    /// `sigma_loc^2 + gamma <l, O - Ohat>`
    #[default]
    Additive,
    /// `sigma_loc^2 (1 + gamma <l, O - Ohat>)`
    Multiplicative,
}

/// How `gamma` is obtained at `t_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GammaRule {
    /// Inverse of the accumulated discrete mass.
    #[default]
    DiscreteMass,
    /// `kappa / (e^{kappa t} - 1)`.
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LovModel {
    pub surface: LocalVolSurface,
    pub partition: CorridorPartition,
    pub spec: SensitivitySpec,
    pub mode: VarianceMode,
    pub kappa: f64,
    pub floor: f64,
    pub cap: f64,
    pub gamma_rule: GammaRule,
    /// Drops `Ohat` from the correction.
    pub uncentered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    pub pass: bool,
    /// `min (bound - sup_x |l|)`; the bound is `sigma_loc^2 / 2` (additive) or `1/2`.
    pub worst_margin: f64,
    pub worst_t: f64,
    pub worst_x: f64,
}

impl LovModel {
    pub fn new(
        surface: LocalVolSurface,
        partition: CorridorPartition,
        spec: SensitivitySpec,
        mode: VarianceMode,
        kappa: f64,
    ) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(invalid("kappa must be finite and >= 0"));
        }
        Ok(Self {
            surface,
            partition,
            spec,
            mode,
            kappa,
            floor: LOCAL_VARIANCE_FLOOR,
            cap: LOCAL_VARIANCE_CAP,
            gamma_rule: GammaRule::DiscreteMass,
            uncentered: false,
        })
    }

    pub fn with_clamp(mut self, floor: f64, cap: f64) -> Result<Self> {
        if !(floor > 0.0 && cap > floor && cap.is_finite()) {
            return Err(invalid("variance clamp needs 0 < floor < cap < inf"));
        }
        self.floor = floor;
        self.cap = cap;
        Ok(self)
    }

    pub fn with_gamma_rule(mut self, rule: GammaRule) -> Self {
        self.gamma_rule = rule;
        self
    }

    pub fn with_uncentered(mut self, uncentered: bool) -> Self {
        self.uncentered = uncentered;
        self
    }

    /// `gamma` for a measure of mass `mass` at time `t`; `None` at zero mass.
    pub fn gamma_at(&self, t: f64, mass: f64) -> Option<f64> {
        if !(mass > 0.0) {
            return None;
        }
        match self.gamma_rule {
            GammaRule::DiscreteMass => Some(1.0 / mass),
            GammaRule::Continuous => gamma(self.kappa, t).ok(),
        }
    }

    /// Clamped variance; `clamps` is incremented when the raw value leaves
    /// `[floor, cap]`.
    pub fn variance(&self, t: f64, x: f64, o: &[f64], ohat: &[f64], clamps: &mut u64) -> Result<f64> {
        let m = self.partition.len();
        if o.len() != m {
            return Err(Error::LengthMismatch { expected: m, got: o.len() });
        }
        let local = self.surface.variance(t, x);
        let mass: f64 = o.iter().sum();
        let Some(g) = self.gamma_at(t, mass) else {
            return Ok(self.clamp(local, clamps));
        };
        let mut ell = alloc::vec![0.0; m];
        self.spec.eval_row(t, x, self.partition.nodes(), &mut ell, &mut MlpWorkspace::default());
        let pairing = if self.uncentered {
            pair_against(&ell, o, &alloc::vec![0.0; m])?
        } else {
            pair_against(&ell, o, ohat)?
        };
        Ok(self.clamp(self.combine(local, g * pairing), clamps))
    }

    #[inline]
    pub(crate) fn combine(&self, local: f64, correction: f64) -> f64 {
        match self.mode {
            VarianceMode::Additive => local + correction,
            VarianceMode::Multiplicative => local * (1.0 + correction),
        }
    }

    #[inline]
    pub(crate) fn clamp(&self, v: f64, clamps: &mut u64) -> f64 {
        if v < self.floor {
            *clamps += 1;
            self.floor
        } else if v > self.cap {
            *clamps += 1;
            self.cap
        } else {
            v
        }
    }

    /// Compares `sup_x |l(t, x', x)|` over the nodes with the positivity bound on
    /// a `(t, x')` grid: surface times up to `t_max` plus `0` and `t_max`, and
    /// the partition nodes.
    pub fn check_positivity_bound(&self, t_max: f64) -> PositivityReport {
        let mut times: Vec<f64> = self.surface.grid().times().iter().copied().filter(|t| *t <= t_max).collect();
        times.push(0.0);
        times.push(t_max);
        let nodes = self.partition.nodes();
        let mut report = PositivityReport { pass: true, worst_margin: f64::INFINITY, worst_t: 0.0, worst_x: 0.0 };
        for &t in &times {
            for &xp in nodes {
                let sup = self.spec.sup_abs(t, xp, nodes);
                let bound = match self.mode {
                    VarianceMode::Additive => 0.5 * self.surface.variance(t, xp),
                    VarianceMode::Multiplicative => 0.5,
                };
                let margin = bound - sup;
                if margin < report.worst_margin {
                    report = PositivityReport { pass: margin > 0.0, worst_margin: margin, worst_t: t, worst_x: xp };
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(spec: SensitivitySpec, mode: VarianceMode) -> LovModel {
        let surface = LocalVolSurface::constant(0.2).unwrap();
        let partition = CorridorPartition::build(100.0, 0.2, 1.0, 5).unwrap();
        LovModel::new(surface, partition, spec, mode, 12.0).unwrap()
    }

    #[test]
    fn centered_term_vanishes() {
        let m = model(SensitivitySpec::Tanh { scale: 0.01, alpha: 1.0 }, VarianceMode::Additive);
        let o = [0.0, 0.1, 0.2, 0.0, 0.05];
        let mut clamps = 0;
        assert_eq!(m.variance(0.3, 100.0, &o, &o, &mut clamps).unwrap(), 0.2 * 0.2);
        let z = model(SensitivitySpec::Zero, VarianceMode::Additive);
        let ohat = [0.07, 0.07, 0.07, 0.07, 0.07];
        assert_eq!(z.variance(0.3, 100.0, &o, &ohat, &mut clamps).unwrap(), 0.2 * 0.2);
        assert_eq!(z.variance(0.0, 100.0, &[0.0; 5], &[0.0; 5], &mut clamps).unwrap(), 0.2 * 0.2);
        assert_eq!(clamps, 0);
    }

    #[test]
    fn single_excess_mass() {
        let spec = SensitivitySpec::one_factor(0.01, 105.0, Some(125.0), false).unwrap();
        let m = model(spec, VarianceMode::Additive);
        let inc = (12.0f64 * 0.25).exp() / 252.0;
        let o = [0.2, 0.3, 0.1, inc, 0.0];
        let ohat = [0.2, 0.3, 0.1, 0.0, 0.0];
        let g = 1.0 / (0.6 + inc);
        let mut clamps = 0;
        let v = m.variance(0.25, 100.0, &o, &ohat, &mut clamps).unwrap();
        assert!((v - (0.04 + g * 0.01 * inc)).abs() < 1e-16);
    }

    #[test]
    fn clamp_counts() {
        let m = model(SensitivitySpec::constant(10.0), VarianceMode::Additive).with_uncentered(true);
        let mut clamps = 0;
        let v = m.variance(0.1, 100.0, &[0.1, 0.0, 0.0, 0.0, 0.0], &[0.0; 5], &mut clamps).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(clamps, 1);
        assert!(m.clone().with_clamp(0.0, 1.0).is_err());
    }

    #[test]
    fn positivity_reports() {
        let s = LocalVolSurface::constant(0.2).unwrap();
        let tanh = SensitivitySpec::tanh_bounded(1.0, &s, 1.0).unwrap();
        let r = model(tanh, VarianceMode::Additive).check_positivity_bound(1.0);
        assert!(r.pass && r.worst_margin >= 0.01 - 1e-15);
        let of = SensitivitySpec::one_factor(0.4, 100.0, None, true).unwrap();
        let r = model(of, VarianceMode::Multiplicative).check_positivity_bound(1.0);
        assert!(r.pass && (r.worst_margin - 0.1).abs() < 1e-15);
        let r = model(SensitivitySpec::constant(0.04), VarianceMode::Additive).check_positivity_bound(1.0);
        assert!(!r.pass && r.worst_margin < 0.0);
    }

    fn equal_mass_pair(m: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (proptest::collection::vec(0.0f64..1.0, m), proptest::collection::vec(0.0f64..1.0, m)).prop_map(|(a, b)| {
            let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
            let b = b.iter().map(|v| v * sa.max(1e-12) / sb.max(1e-12)).collect();
            (a, b)
        })
    }

    proptest! {
        #[test]
        fn variance_within_clamp(beta in -5.0f64..5.0, o in proptest::collection::vec(0.0f64..1.0, 5), oh in proptest::collection::vec(0.0f64..1.0, 5), x in 1.0f64..300.0) {
            let m = model(SensitivitySpec::EmaLog { beta }, VarianceMode::Additive);
            let mut c = 0;
            let v = m.variance(0.2, x, &o, &oh, &mut c).unwrap();
            prop_assert!(v >= m.floor && v <= m.cap);
        }

        #[test]
        fn bounded_tanh_keeps_variance_positive((o, oh) in equal_mass_pair(5), alpha in 0.0f64..4.0, x in 20.0f64..300.0, t in 0.01f64..1.0) {
            let s = LocalVolSurface::constant(0.2).unwrap();
            let m = model(SensitivitySpec::tanh_bounded(alpha, &s, 1.0).unwrap(), VarianceMode::Additive);
            let mass: f64 = o.iter().sum();
            prop_assume!(mass > 0.0);
            let mut ell = [0.0; 5];
            m.spec.eval_row(t, x, m.partition.nodes(), &mut ell, &mut MlpWorkspace::default());
            let raw = m.surface.variance(t, x) + pair_against(&ell, &o, &oh).unwrap() / mass;
            prop_assert!(raw > 0.0);
        }

        #[test]
        fn additive_matches_multiplicative(o in proptest::collection::vec(0.0f64..1.0, 5), oh in proptest::collection::vec(0.0f64..1.0, 5), alpha in 0.0f64..3.0, x in 50.0f64..200.0) {
            let surface = LocalVolSurface::new(alloc::vec![0.0, 1.0], alloc::vec![80.0, 120.0], alloc::vec![0.25, 0.2, 0.3, 0.22]).unwrap();
            let partition = CorridorPartition::build(100.0, 0.2, 1.0, 5).unwrap();
            let t = 0.4;
            let local = surface.variance(t, x);
            let add = LovModel::new(surface.clone(), partition.clone(), SensitivitySpec::Tanh { scale: 0.005, alpha }, VarianceMode::Additive, 0.0).unwrap();
            let mul = LovModel::new(surface, partition, SensitivitySpec::Tanh { scale: 0.005 / local, alpha }, VarianceMode::Multiplicative, 0.0).unwrap();
            let mut c = 0;
            let a = add.variance(t, x, &o, &oh, &mut c).unwrap();
            let b = mul.variance(t, x, &o, &oh, &mut c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
