//! Corridor partitions and discrete, exponential-clock occupation measures.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Nodes `x_1 < ... < x_M` and the corridors
/// `C_m = [x_m - eps_{m-1}, x_m + eps_m)` with `eps_m = (x_{m+1} - x_m) / 2`,
/// `eps_0 = x_1` and `eps_M = inf`. The corridors partition `[0, inf)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorridorPartition {
    nodes: Vec<f64>,
    /// Interior boundaries `x_m + eps_m`, `m = 1..M-1`.
    edges: Vec<f64>,
}

impl CorridorPartition {
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("partition needs at least one node"));
        }
        if nodes.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(invalid("partition nodes must be finite and > 0"));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("partition nodes must be strictly ascending"));
        }
        let edges = nodes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self { nodes, edges })
    }

    /// `M` equally spaced nodes on `x0 (1 -/+ 2 sigma_ref sqrt(T))`, the lower end
    /// clipped at `1e-6 x0`. A single node sits at `x0`.
    pub fn build(x0: f64, sigma_ref: f64, horizon: f64, m: usize) -> Result<Self> {
        if !(x0.is_finite() && x0 > 0.0) {
            return Err(invalid("x0 must be finite and > 0"));
        }
        if !(sigma_ref.is_finite() && sigma_ref > 0.0 && horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("reference vol and horizon must be finite and > 0"));
        }
        if m == 0 {
            return Err(invalid("partition needs at least one corridor"));
        }
        if m == 1 {
            return Self::from_nodes(alloc::vec![x0]);
        }
        let half_width = 2.0 * sigma_ref * horizon.sqrt();
        let lo = (x0 * (1.0 - half_width)).max(1e-6 * x0);
        let hi = x0 * (1.0 + half_width);
        if !(lo > 0.0 && lo < hi) {
            return Err(invalid("corridor band is empty after clipping"));
        }
        let step = (hi - lo) / (m - 1) as f64;
        let nodes = (0..m)
            .map(|i| if i == m - 1 { hi } else { lo + step * i as f64 })
            .collect();
        Self::from_nodes(nodes)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Index of the corridor containing `x >= 0`.
    #[inline]
    pub fn locate(&self, x: f64) -> usize {
        self.edges.partition_point(|e| *e <= x)
    }

    /// `[lower, upper)` of corridor `m`.
    pub fn bounds(&self, m: usize) -> (f64, f64) {
        let lower = if m == 0 { 0.0 } else { self.edges[m - 1] };
        let upper = if m + 1 == self.nodes.len() { f64::INFINITY } else { self.edges[m] };
        (lower, upper)
    }
}

/// Normalisation `gamma_t = kappa / (e^{kappa t} - 1)`, `1 / t` for `kappa = 0`:
/// the inverse of the continuous-time total occupation mass.
pub fn gamma(kappa: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid("gamma is undefined at t <= 0"));
    }
    if kappa == 0.0 {
        return Ok(1.0 / t);
    }
    Ok(kappa / (kappa * t).exp_m1())
}

/// Clock increment `e^{kappa t} dt` added to the occupied corridor.
#[inline]
pub fn clock_increment(kappa: f64, t: f64, dt: f64) -> f64 {
    (kappa * t).exp() * dt
}

/// `f(x)` in the barycenter functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
}

/// Occupation times of one path over a partition.
///
/// The total mass is accumulated separately in clock order, so it depends only
/// on the increments and never on which corridors the path visited.
#[derive(Debug, Clone)]
pub struct DiscreteOccupation<'a> {
    partition: &'a CorridorPartition,
    times: Vec<f64>,
    kappa: f64,
    mass: f64,
}

impl<'a> DiscreteOccupation<'a> {
    pub fn new(partition: &'a CorridorPartition, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(invalid("kappa must be finite and >= 0"));
        }
        Ok(Self {
            partition,
            times: alloc::vec![0.0; partition.len()],
            kappa,
            mass: 0.0,
        })
    }

    pub fn partition(&self) -> &CorridorPartition {
        self.partition
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn total_mass(&self) -> f64 {
        self.mass
    }

    /// Adds `e^{kappa t} dt` to the corridor containing `x`; returns its index.
    pub fn accumulate(&mut self, x: f64, t: f64, dt: f64) -> usize {
        let m = self.partition.locate(x);
        let inc = clock_increment(self.kappa, t, dt);
        self.times[m] += inc;
        self.mass += inc;
        m
    }

    pub fn barycenter(&self, transform: Transform) -> Result<f64> {
        barycenter(self.partition.nodes(), &self.times, transform)
    }
}

/// `sum_m f(x_m) O_m / sum_m O_m`.
pub fn barycenter(nodes: &[f64], occupation: &[f64], transform: Transform) -> Result<f64> {
    if nodes.len() != occupation.len() {
        return Err(Error::LengthMismatch { expected: nodes.len(), got: occupation.len() });
    }
    let mass: f64 = occupation.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    let weighted: f64 = nodes
        .iter()
        .zip(occupation)
        .filter(|(_, o)| **o != 0.0)
        .map(|(x, o)| match transform {
            Transform::Identity => x * o,
            Transform::Log => x.ln() * o,
        })
        .sum();
    Ok(weighted / mass)
}

/// `sum_m l_m (O_m - Ohat_m)`.
pub fn pair_against(sensitivity: &[f64], occupation: &[f64], projected: &[f64]) -> Result<f64> {
    check_lengths(sensitivity, occupation, projected)?;
    Ok(sensitivity
        .iter()
        .zip(occupation.iter().zip(projected))
        .map(|(l, (o, p))| l * (o - p))
        .sum())
}

/// Pairing against a centred difference `O - Ohat` of two measures with equal
/// total mass. The sensitivity is shifted by its first entry, which leaves the
/// value unchanged for equal masses and makes constant sensitivities cancel
/// exactly rather than up to rounding.
#[inline]
pub fn pair_against_centered(sensitivity: &[f64], occupation: &[f64], projected: &[f64]) -> f64 {
    let base = sensitivity[0];
    sensitivity
        .iter()
        .zip(occupation.iter().zip(projected))
        .map(|(l, (o, p))| (l - base) * (o - p))
        .sum()
}

fn check_lengths(a: &[f64], b: &[f64], c: &[f64]) -> Result<()> {
    if b.len() != a.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    if c.len() != a.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: c.len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_partition() {
        let p = CorridorPartition::build(100.0, 0.25, 1.0, 3).unwrap();
        assert_eq!(p.nodes(), &[50.0, 100.0, 150.0]);
        assert_eq!(p.bounds(1), (75.0, 125.0));
        assert_eq!(p.bounds(0), (0.0, 75.0));
        assert_eq!(p.bounds(2), (125.0, f64::INFINITY));
        assert_eq!(p.locate(74.999), 0);
        assert_eq!(p.locate(75.0), 1);
        assert_eq!(p.locate(125.0), 2);
        assert_eq!(p.locate(0.0), 0);
    }

    #[test]
    fn single_corridor_covers_half_line() {
        let p = CorridorPartition::build(100.0, 0.25, 1.0, 1).unwrap();
        assert_eq!(p.nodes(), &[100.0]);
        assert_eq!(p.bounds(0), (0.0, f64::INFINITY));
        assert_eq!(p.locate(1e9), 0);
    }

    #[test]
    fn wide_band_is_clipped() {
        let p = CorridorPartition::build(100.0, 1.0, 1.0, 5).unwrap();
        assert!((p.nodes()[0] - 1e-4).abs() < 1e-18);
        assert!(p.nodes().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn odd_partition_centres_on_spot() {
        let p = CorridorPartition::build(231.80, 0.32, 0.38, 63).unwrap();
        assert_eq!(p.len(), 63);
        assert!((p.nodes()[31] - 231.80).abs() < 1e-9);
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma(0.0, 0.5).unwrap(), 2.0);
        // 12 / (e - 1)
        assert!((gamma(12.0, 1.0 / 12.0).unwrap() - 6.983_720_482_431_918).abs() < 1e-12);
        assert!((gamma(1e-12, 0.5).unwrap() - 2.0).abs() < 1e-6);
        assert!(gamma(1.0, 0.0).is_err());
        for &(k, t) in &[(12.0, 0.5), (0.3, 2.0), (50.0, 0.01)] {
            let mass = (k * t).exp_m1() / k;
            assert!((gamma(k, t).unwrap() * mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_increments() {
        let p = CorridorPartition::build(100.0, 0.25, 1.0, 3).unwrap();
        let mut occ = DiscreteOccupation::new(&p, 0.0).unwrap();
        let m = occ.accumulate(90.0, 0.3, 1.0 / 252.0);
        assert_eq!(m, 1);
        assert_eq!(occ.times()[1], 1.0 / 252.0);
        occ.accumulate(90.0, 0.4, 1.0 / 252.0);
        assert_eq!(occ.times()[1], 2.0 / 252.0);

        let mut occ = DiscreteOccupation::new(&p, 12.0).unwrap();
        occ.accumulate(130.0, 1.0 / 12.0, 1.0 / 252.0);
        // e / 252
        assert!((occ.times()[2] - 0.010_786_832_652_615_258).abs() < 1e-15);
        assert_eq!(occ.total_mass(), occ.times()[2]);
    }

    #[test]
    fn barycenters() {
        let nodes = [50.0, 100.0, 150.0];
        assert_eq!(barycenter(&nodes, &[0.0, 0.3, 0.0], Transform::Identity).unwrap(), 100.0);
        assert_eq!(barycenter(&nodes, &[0.2, 0.0, 0.2], Transform::Identity).unwrap(), 100.0);
        let log = barycenter(&nodes, &[0.0, 0.0, 1.0], Transform::Log).unwrap();
        assert!((log - 150.0_f64.ln()).abs() < 1e-15);
        assert_eq!(barycenter(&nodes, &[0.0; 3], Transform::Identity), Err(Error::ZeroMass));
    }

    #[test]
    fn constant_path_barycenter_is_its_node() {
        let p = CorridorPartition::build(100.0, 0.2, 0.5, 7).unwrap();
        let mut occ = DiscreteOccupation::new(&p, 12.0).unwrap();
        let dt = 1.0 / 252.0;
        for n in 0..126 {
            occ.accumulate(103.0, n as f64 * dt, dt);
        }
        let node = p.nodes()[p.locate(103.0)];
        assert_eq!(occ.barycenter(Transform::Identity).unwrap(), node);
    }

    #[test]
    fn pairing() {
        let o = [0.1, 0.2, 0.3];
        let same_mass = [0.2, 0.2, 0.2];
        assert!(pair_against(&[0.7; 3], &o, &same_mass).unwrap().abs() < 1e-16);
        assert_eq!(pair_against_centered(&[0.7; 3], &o, &same_mass), 0.0);
        assert_eq!(pair_against(&[0.3, 0.1, 0.2], &o, &o).unwrap(), 0.0);
        let mut excess = [0.0; 4];
        excess[3] = 1.0;
        let l = [0.5, -0.2, 0.9, 0.01];
        assert_eq!(pair_against(&l, &excess, &[0.0; 4]).unwrap(), 0.01);
        assert!(matches!(pair_against(&l, &o, &o), Err(Error::LengthMismatch { .. })));
    }
}
