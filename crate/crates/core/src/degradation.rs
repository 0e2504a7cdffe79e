//! Distribution evolution under P/E cycling, retention and read disturb, plus
//! cell-to-cell program interference and the FN tunneling and coupling
//! capacitance utilities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationTable, CalibrationTables, Mechanism, DAY};
use crate::error::{Error, Result};
use crate::voltage::{optimal_refs, CellMode, DistributionSet, ReadRefs, State, StateDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationState {
    pub pe_cycles: u32,
    /// Seconds since the data was programmed.
    pub retention_s: f64,
    pub read_disturbs: u64,
}

impl DegradationState {
    pub const FRESH: DegradationState = DegradationState { pe_cycles: 0, retention_s: DAY, read_disturbs: 1 };

    pub fn new(pe_cycles: u32, retention_s: f64, read_disturbs: u64) -> Self {
        DegradationState { pe_cycles, retention_s, read_disturbs }
    }
}

/// Per-state parameters at one degradation point, split into the pieces the
/// per-cell model needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatePoint {
    pub mean: f64,
    pub stddev: f64,
    /// Program-noise component: the P/E table stddev at this wear.
    pub sigma_prog: f64,
    /// Extra spread contributed by retention and by read disturb.
    pub extra_ret: f64,
    pub extra_dist: f64,
}

/// Loadings on the three per-cell latents: vth = mean + k_prog*z + k_ret*w_r +
/// k_dist*w_d with independent standard normal latents. The loadings square-sum
/// to the composed variance, so the population stays exactly Gaussian while
/// each cell keeps a fixed retention and disturb susceptibility.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CellCoeffs {
    pub mean: f64,
    pub k_prog: f64,
    pub k_ret: f64,
    pub k_dist: f64,
}

impl CellCoeffs {
    #[inline]
    pub fn vth(&self, z: f32, wr: f32, wd: f32) -> f64 {
        self.mean + self.k_prog * z as f64 + self.k_ret * wr as f64 + self.k_dist * wd as f64
    }

    pub fn stddev(&self) -> f64 {
        (self.k_prog.powi(2) + self.k_ret.powi(2) + self.k_dist.powi(2)).sqrt()
    }
}

impl StatePoint {
    pub fn coeffs(&self) -> CellCoeffs {
        let s = (self.sigma_prog.powi(2) + self.extra_ret.powi(2) + self.extra_dist.powi(2)).sqrt();
        let k = self.stddev / s;
        CellCoeffs {
            mean: self.mean,
            k_prog: k * self.sigma_prog,
            k_ret: k * self.extra_ret,
            k_dist: k * self.extra_dist,
        }
    }
}

fn interp_row(t: &CalibrationTable, key: f64, log: bool, extrapolate: bool, axis: &'static str) -> Result<([f64; 8], [f64; 8])> {
    let n = t.keys.len();
    if !key.is_finite() {
        return Err(Error::OutOfRange { axis, key });
    }
    if key <= t.keys[0] {
        return Ok((t.means[0], t.stddevs[0]));
    }
    if key > t.keys[n - 1] && !extrapolate {
        return Err(Error::OutOfRange { axis, key });
    }
    let i = t.keys.partition_point(|&k| k < key).clamp(1, n - 1);
    let (k0, k1) = (t.keys[i - 1], t.keys[i]);
    let f = if log { (key.ln() - k0.ln()) / (k1.ln() - k0.ln()) } else { (key - k0) / (k1 - k0) };
    let mut m = [0.0; 8];
    let mut s = [0.0; 8];
    for j in 0..8 {
        m[j] = t.means[i - 1][j] + f * (t.means[i][j] - t.means[i - 1][j]);
        s[j] = t.stddevs[i - 1][j] + f * (t.stddevs[i][j] - t.stddevs[i - 1][j]);
    }
    Ok((m, s))
}

/// Table-driven channel: calibration tables plus the extrapolation policy.
#[derive(Clone, Debug)]
pub struct ChannelModel {
    tables: Arc<CalibrationTables>,
    extrapolate: bool,
}

impl ChannelModel {
    pub fn new(tables: Arc<CalibrationTables>, extrapolate: bool) -> Self {
        ChannelModel { tables, extrapolate }
    }

    pub fn builtin() -> Self {
        ChannelModel::new(Arc::new(CalibrationTables::builtin()), false)
    }

    pub fn with_extrapolation(mut self, on: bool) -> Self {
        self.extrapolate = on;
        self
    }

    pub fn tables(&self) -> &CalibrationTables {
        &self.tables
    }

    /// All eight calibrated states at `deg`.
    pub fn points(&self, deg: &DegradationState) -> Result<[StatePoint; 8]> {
        let t = &self.tables;
        let (m4, s4) = interp_row(&t.pe, deg.pe_cycles as f64, false, self.extrapolate, "pe")?;
        let (m5, s5) = interp_row(&t.retention, deg.retention_s.max(1.0), true, self.extrapolate, "retention")?;
        let (m6, s6) = interp_row(&t.disturb, (deg.read_disturbs as f64).max(1.0), true, self.extrapolate, "disturb")?;
        let floor = t.pe.stddevs[0];
        let (m5b, s5b) = (t.retention.means[0], t.retention.stddevs[0]);
        let (m6b, s6b) = (t.disturb.means[0], t.disturb.stddevs[0]);
        let mut out = [StatePoint { mean: 0.0, stddev: 0.0, sigma_prog: 0.0, extra_ret: 0.0, extra_dist: 0.0 }; 8];
        for j in 0..8 {
            let dr = s5[j] - s5b[j];
            let dd = s6[j] - s6b[j];
            let sp = s4[j];
            out[j] = StatePoint {
                mean: m4[j] + (m5[j] - m5b[j]) + (m6[j] - m6b[j]),
                stddev: (sp + dr + dd).max(floor[j]),
                sigma_prog: sp,
                extra_ret: ((sp + dr).powi(2) - sp * sp).max(0.0).sqrt(),
                extra_dist: ((sp + dd).powi(2) - sp * sp).max(0.0).sqrt(),
            };
        }
        Ok(out)
    }

    pub fn state_at(&self, state: State, deg: &DegradationState) -> Result<StateDistribution> {
        let p = self.points(deg)?[state.index()];
        Ok(StateDistribution::new(state, p.mean, p.stddev))
    }

    pub fn distribution_at(&self, mode: CellMode, deg: &DegradationState) -> Result<DistributionSet> {
        let p = self.points(deg)?;
        let states = mode
            .table_states()
            .iter()
            .map(|&s| StateDistribution::new(s, p[s.index()].mean, p[s.index()].stddev))
            .collect();
        DistributionSet::new(mode, states)
    }

    /// Read references fixed at design time: pdf intersections at the
    /// fresh (0 P/E, 1 day, 1 read) row.
    pub fn frozen_refs(&self, mode: CellMode) -> ReadRefs {
        let d = self.distribution_at(mode, &DegradationState::FRESH).expect("first row is always in range");
        optimal_refs(&d).expect("calibrated fresh states separate cleanly")
    }

    /// States along one table's own axis, anchored at that table's first row
    /// rather than composed with the others. The spread attributed to the
    /// mechanism is the growth over the first row.
    pub fn table_points(&self, m: Mechanism, key: f64) -> Result<[StatePoint; 8]> {
        let t = self.tables.table(m);
        let (log, axis) = match m {
            Mechanism::Pe => (false, "pe"),
            Mechanism::Retention => (true, "retention"),
            Mechanism::Disturb => (true, "disturb"),
        };
        let (mean, sd) = interp_row(t, key, log, self.extrapolate, axis)?;
        let base = t.stddevs[0];
        let mut out = [StatePoint { mean: 0.0, stddev: 0.0, sigma_prog: 0.0, extra_ret: 0.0, extra_dist: 0.0 }; 8];
        for j in 0..8 {
            let (sp, extra) = match m {
                Mechanism::Pe => (sd[j], 0.0),
                _ => (base[j], (sd[j].powi(2) - base[j].powi(2)).max(0.0).sqrt()),
            };
            out[j] = StatePoint {
                mean: mean[j],
                stddev: sd[j],
                sigma_prog: sp,
                extra_ret: if m == Mechanism::Retention { extra } else { 0.0 },
                extra_dist: if m == Mechanism::Disturb { extra } else { 0.0 },
            };
        }
        Ok(out)
    }

    pub fn key_span(&self, m: Mechanism) -> (f64, f64) {
        let k = &self.tables.table(m).keys;
        (k[0], k[k.len() - 1])
    }
}

/// Distribution set at `deg` without extrapolation.
pub fn distribution_at(mode: CellMode, deg: &DegradationState, tables: &CalibrationTables) -> Result<DistributionSet> {
    ChannelModel::new(Arc::new(tables.clone()), false).distribution_at(mode, deg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProcessNode {
    #[serde(rename = "2y-nm")]
    Nm2y,
    #[serde(rename = "1x-nm")]
    Nm1x,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingCoefficients {
    pub wordline: f64,
    pub bitline: f64,
    pub diagonal: f64,
    pub node: ProcessNode,
}

impl CouplingCoefficients {
    pub fn for_node(node: ProcessNode) -> Self {
        match node {
            ProcessNode::Nm2y => CouplingCoefficients { wordline: 0.060, bitline: 0.032, diagonal: 0.012, node },
            ProcessNode::Nm1x => CouplingCoefficients { wordline: 0.110, bitline: 0.055, diagonal: 0.020, node },
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.wordline > self.bitline && self.bitline > self.diagonal && self.diagonal > 0.0
    }

    pub fn coefficient(&self, pos: NeighborPosition) -> f64 {
        match pos {
            NeighborPosition::Wordline => self.wordline,
            NeighborPosition::Bitline => self.bitline,
            NeighborPosition::Diagonal => self.diagonal,
        }
    }
}

/// Where an aggressor sits relative to the victim: across the wordline
/// (same bitline), across the bitline (same wordline), or diagonally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeighborPosition {
    Wordline,
    Bitline,
    Diagonal,
}

/// Victim shift as the coupling-weighted sum of aggressor shifts.
pub fn interference_shift(victim_deltas: &[(NeighborPosition, f64)], coeffs: &CouplingCoefficients) -> f64 {
    victim_deltas.iter().map(|&(pos, dv)| coeffs.coefficient(pos) * dv).sum()
}

/// Parallel-plate capacitance ε·S/d.
pub fn coupling_capacitance(epsilon: f64, area: f64, distance: f64) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::Parameter(format!("cell separation must be positive, got {distance}")));
    }
    Ok(epsilon * area / distance)
}

/// Fowler-Nordheim current density α·E²·exp(−β/E).
pub fn fn_tunneling_current(alpha: f64, beta: f64, e_ox: f64) -> Result<f64> {
    if !(e_ox > 0.0) {
        return Err(Error::Parameter(format!("oxide field must be positive, got {e_ox}")));
    }
    Ok(alpha * e_ox * e_ox * (-beta / e_ox).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{MONTH, WEEK, YEAR};

    fn chan() -> ChannelModel {
        ChannelModel::builtin()
    }

    #[test]
    fn grid_points_reproduce_rows() {
        let c = chan();
        let t = CalibrationTables::builtin();
        for (i, &k) in t.pe.keys.iter().enumerate() {
            let p = c.points(&DegradationState::new(k as u32, DAY, 1)).unwrap();
            for j in 0..8 {
                assert!((p[j].mean - t.pe.means[i][j]).abs() < 1e-9);
                assert!((p[j].stddev - t.pe.stddevs[i][j].max(t.pe.stddevs[0][j])).abs() < 1e-9);
            }
        }
        for (i, &k) in t.retention.keys.iter().enumerate() {
            let p = c.points(&DegradationState::new(2000, k, 1)).unwrap();
            for j in 0..8 {
                assert!((p[j].mean - t.retention.means[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn composition_examples() {
        let c = chan();
        let d = c.distribution_at(CellMode::Tlc, &DegradationState::new(2000, DAY, 1)).unwrap();
        assert!((d.states[0].mean + 92.7).abs() < 1e-9);
        assert!((d.states[1].mean - 66.6).abs() < 1e-9);
        let d = c.distribution_at(CellMode::Tlc, &DegradationState::new(2000, YEAR, 1)).unwrap();
        assert!((d.states[7].mean - 440.8).abs() < 1e-9);
        assert!((d.states[7].stddev - 12.4).abs() < 1e-9);
        let d = c.distribution_at(CellMode::Tlc, &DegradationState::new(2000, DAY, 100_000)).unwrap();
        assert!((d.states[0].mean + 28.9).abs() < 1e-9, "{}", d.states[0].mean);
    }

    #[test]
    fn out_of_range_without_extrapolation() {
        let c = chan();
        assert!(matches!(
            c.points(&DegradationState::new(3500, DAY, 1)),
            Err(Error::OutOfRange { axis: "pe", .. })
        ));
        assert!(c.points(&DegradationState::new(2000, 2.0 * YEAR, 1)).is_err());
        let c = c.with_extrapolation(true);
        let p = c.points(&DegradationState::new(2000, DAY, 200_000)).unwrap();
        assert!((p[0].mean + 15.9).abs() < 1e-9, "{}", p[0].mean);
    }

    #[test]
    fn below_first_key_clamps() {
        let c = chan();
        let a = c.points(&DegradationState::new(1000, 0.0, 0)).unwrap();
        let b = c.points(&DegradationState::new(1000, DAY, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_trends_on_interpolated_curves() {
        let c = chan();
        let mut prev = f64::NEG_INFINITY;
        for pe in (0..=3000).step_by(10) {
            let p = c.points(&DegradationState::new(pe, DAY, 1)).unwrap();
            // the 0 -> 200 row pair dips by 0.4 before the climb
            if pe > 200 {
                assert!(p[0].mean >= prev);
            }
            prev = p[0].mean;
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let n = 10f64.powf(5.0 * i as f64 / 100.0) as u64;
            let p = c.points(&DegradationState::new(2000, DAY, n)).unwrap();
            assert!(p[0].mean >= prev);
            prev = p[0].mean;
        }
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let t = DAY * (365f64).powf(i as f64 / 100.0);
            let p = c.points(&DegradationState::new(2000, t, 1)).unwrap();
            assert!(p[7].mean <= prev + 1e-12);
            prev = p[7].mean;
        }
    }

    #[test]
    fn stddevs_follow_monotone_table_columns() {
        let c = chan();
        let t = CalibrationTables::builtin();
        for j in 0..8 {
            let col: Vec<f64> = t.retention.stddevs.iter().map(|r| r[j]).collect();
            if col.windows(2).all(|w| w[0] <= w[1]) {
                let mut prev = 0.0;
                for i in 0..=60 {
                    let secs = DAY * (365f64).powf(i as f64 / 60.0);
                    let s = c.points(&DegradationState::new(2000, secs, 1)).unwrap()[j].stddev;
                    assert!(s >= prev - 1e-12);
                    prev = s;
                }
            }
        }
    }

    #[test]
    fn cell_coefficients_preserve_variance() {
        let c = chan();
        for deg in [
            DegradationState::new(0, DAY, 1),
            DegradationState::new(2000, 3.0 * MONTH, 1),
            DegradationState::new(3000, WEEK, 50_000),
        ] {
            for p in c.points(&deg).unwrap() {
                let k = p.coeffs();
                assert!((k.stddev() - p.stddev).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frozen_refs_match_oracle() {
        let r = chan().frozen_refs(CellMode::Tlc);
        let oracle = [33.42, 96.04, 160.31, 223.41, 286.48, 350.93, 417.87];
        for (a, b) in r.voltages().iter().zip(oracle) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn interference_examples() {
        let n1x = CouplingCoefficients::for_node(ProcessNode::Nm1x);
        let n2y = CouplingCoefficients::for_node(ProcessNode::Nm2y);
        assert!(n1x.is_ordered() && n2y.is_ordered());
        assert_eq!(interference_shift(&[], &n1x), 0.0);
        assert_eq!(interference_shift(&[(NeighborPosition::Wordline, 0.0)], &n1x), 0.0);
        assert!((interference_shift(&[(NeighborPosition::Wordline, 100.0)], &n1x) - 11.0).abs() < 1e-12);
        let v = interference_shift(&[(NeighborPosition::Wordline, 50.0), (NeighborPosition::Bitline, 50.0)], &n2y);
        assert!((v - 4.6).abs() < 1e-12);
    }

    #[test]
    fn capacitance_and_tunneling() {
        assert_eq!(coupling_capacitance(1.0, 2.0, 2.0).unwrap(), 1.0);
        assert_eq!(coupling_capacitance(1.0, 4.0, 2.0).unwrap(), 2.0);
        assert_eq!(coupling_capacitance(1.0, 2.0, 1.0).unwrap(), 2.0);
        assert!(coupling_capacitance(1.0, 2.0, 0.0).is_err());

        assert_eq!(fn_tunneling_current(1.0, 0.0, 2.0).unwrap(), 4.0);
        assert!((fn_tunneling_current(1.0, 2.0, 2.0).unwrap() - 4.0 * (-1f64).exp()).abs() < 1e-12);
        assert!(fn_tunneling_current(1.0, 2.0, 0.0).is_err());
        let mut prev = 0.0;
        for i in 1..1000 {
            let j = fn_tunneling_current(1.0, 3.0, i as f64 * 0.01).unwrap();
            assert!(j > prev);
            prev = j;
        }
    }
}
