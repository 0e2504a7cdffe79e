//! Threshold-voltage channel: per-state Gaussian distributions on the
//! normalized 0..512 scale, Gray bit mappings, read binning, analytic RBER,
//! optimal read references and LLRs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Normalized threshold voltage. 0 is GND, 512 the nominal maximum; erased
/// cells sit below 0.
pub type Voltage = f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum State {
    #[serde(rename = "ER")]
    Er,
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
}

impl State {
    pub const ALL: [State; 8] = [
        State::Er,
        State::P1,
        State::P2,
        State::P3,
        State::P4,
        State::P5,
        State::P6,
        State::P7,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<State> {
        State::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        ["ER", "P1", "P2", "P3", "P4", "P5", "P6", "P7"][self.index()]
    }

    pub fn parse(s: &str) -> Option<State> {
        State::ALL.iter().copied().find(|st| st.name().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellMode {
    Slc,
    Mlc,
    Tlc,
    TlcDowngraded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageType {
    Lsb,
    Csb,
    Msb,
}

impl CellMode {
    pub fn levels(self) -> usize {
        self.table_states().len()
    }

    pub fn bits(self) -> usize {
        match self {
            CellMode::Slc => 1,
            CellMode::Mlc | CellMode::TlcDowngraded => 2,
            CellMode::Tlc => 3,
        }
    }

    /// Calibrated TLC states that realize each level of this mode. MLC and
    /// downgraded TLC both use the widely spaced ER/P3/P5/P7 subset.
    pub fn table_states(self) -> &'static [State] {
        match self {
            CellMode::Slc => &[State::Er, State::P7],
            CellMode::Mlc | CellMode::TlcDowngraded => &[State::Er, State::P3, State::P5, State::P7],
            CellMode::Tlc => &State::ALL,
        }
    }

    /// Page types in programming order within a wordline.
    pub fn page_types(self) -> &'static [PageType] {
        match self {
            CellMode::Slc => &[PageType::Lsb],
            CellMode::Mlc | CellMode::TlcDowngraded => &[PageType::Lsb, PageType::Msb],
            CellMode::Tlc => &[PageType::Lsb, PageType::Csb, PageType::Msb],
        }
    }

    pub fn page_slot(self, page: PageType) -> Option<usize> {
        self.page_types().iter().position(|&p| p == page)
    }

    pub fn gray(self) -> GrayMap {
        match self {
            CellMode::Slc => GrayMap::new(1, vec![0b1, 0b0]),
            CellMode::Mlc | CellMode::TlcDowngraded => GrayMap::new(2, vec![0b11, 0b01, 0b00, 0b10]),
            CellMode::Tlc => GrayMap::new(
                3,
                vec![0b111, 0b011, 0b001, 0b101, 0b100, 0b000, 0b010, 0b110],
            ),
        }
        .expect("built-in Gray maps are valid")
    }
}

/// Bijection between levels and bit tuples. Codes are written MSB first, so
/// the LSB page reads bit 0 and the MSB page reads bit `bits - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayMap {
    bits: usize,
    codes: Vec<u8>,
}

impl GrayMap {
    pub fn new(bits: usize, codes: Vec<u8>) -> Result<Self> {
        if !(1..=3).contains(&bits) || codes.len() != 1 << bits {
            return Err(Error::Parameter(format!("{} codes for {} bits", codes.len(), bits)));
        }
        let mut seen = vec![false; codes.len()];
        for &c in &codes {
            let c = c as usize;
            if c >= seen.len() || seen[c] {
                return Err(Error::Parameter("gray codes must form a bijection".into()));
            }
            seen[c] = true;
        }
        if codes.windows(2).any(|w| (w[0] ^ w[1]).count_ones() != 1) {
            return Err(Error::Parameter("adjacent levels must differ in exactly one bit".into()));
        }
        Ok(GrayMap { bits, codes })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn levels(&self) -> usize {
        self.codes.len()
    }

    pub fn code(&self, level: usize) -> u8 {
        self.codes[level]
    }

    pub fn bit_position(&self, page: PageType) -> Option<usize> {
        match (page, self.bits) {
            (PageType::Lsb, _) => Some(0),
            (PageType::Csb, 3) => Some(1),
            (PageType::Msb, b) if b >= 2 => Some(b - 1),
            _ => None,
        }
    }

    pub fn bit(&self, level: usize, page: PageType) -> u8 {
        let pos = self.bit_position(page).expect("page type not present in this map");
        (self.codes[level] >> pos) & 1
    }

    pub fn level_of(&self, code: u8) -> usize {
        self.codes.iter().position(|&c| c == code).expect("code outside map")
    }

    /// Level whose code carries `bit` on `page` and agrees with `base` on the
    /// other pages.
    pub fn with_bit(&self, base: u8, page: PageType, bit: u8) -> u8 {
        let pos = self.bit_position(page).expect("page type not present in this map");
        (base & !(1 << pos)) | ((bit & 1) << pos)
    }

    /// Boundary indices (between level i and i+1) where `page`'s bit changes.
    pub fn page_boundaries(&self, page: PageType) -> Vec<usize> {
        (0..self.levels() - 1)
            .filter(|&i| self.bit(i, page) != self.bit(i + 1, page))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    pub state: State,
    pub mean: Voltage,
    pub stddev: Voltage,
}

impl StateDistribution {
    pub fn new(state: State, mean: Voltage, stddev: Voltage) -> Self {
        StateDistribution { state, mean, stddev }
    }

    pub fn pdf(&self, v: Voltage) -> f64 {
        let z = (v - self.mean) / self.stddev;
        (-0.5 * z * z).exp() / (self.stddev * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Probability mass in the half-open interval (a, b].
    pub fn mass(&self, a: Voltage, b: Voltage) -> f64 {
        if b <= a {
            return 0.0;
        }
        if self.stddev <= 0.0 {
            return if a < self.mean && self.mean <= b { 1.0 } else { 0.0 };
        }
        let za = (a - self.mean) / self.stddev;
        let zb = (b - self.mean) / self.stddev;
        if za > 0.0 {
            (upper_tail(za) - upper_tail(zb)).max(0.0)
        } else {
            (lower_tail(zb) - lower_tail(za)).max(0.0)
        }
    }
}

pub fn lower_tail(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSet {
    pub mode: CellMode,
    pub states: Vec<StateDistribution>,
}

impl DistributionSet {
    pub fn new(mode: CellMode, states: Vec<StateDistribution>) -> Result<Self> {
        if states.len() != mode.levels() {
            return Err(Error::Parameter(format!(
                "{:?} needs {} states, got {}",
                mode,
                mode.levels(),
                states.len()
            )));
        }
        if states.windows(2).any(|w| w[0].mean >= w[1].mean) {
            return Err(Error::Parameter("state means must strictly increase".into()));
        }
        if states.iter().any(|s| !(s.stddev >= 0.0) || !s.mean.is_finite()) {
            return Err(Error::Parameter("stddev must be non-negative".into()));
        }
        Ok(DistributionSet { mode, states })
    }

    pub fn level(&self, i: usize) -> &StateDistribution {
        &self.states[i]
    }

    /// Same set with every stddev multiplied by `k`.
    pub fn scaled(&self, k: f64) -> DistributionSet {
        let mut out = self.clone();
        for s in &mut out.states {
            s.stddev *= k;
        }
        out
    }
}

/// Strictly ascending read reference voltages, one per level boundary for a
/// full read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadRefs {
    voltages: Vec<Voltage>,
}

impl ReadRefs {
    pub fn new(voltages: Vec<Voltage>) -> Result<Self> {
        if voltages.windows(2).any(|w| !(w[0] < w[1])) || voltages.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnsortedReferences);
        }
        Ok(ReadRefs { voltages })
    }

    pub fn voltages(&self) -> &[Voltage] {
        &self.voltages
    }

    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }

    /// Subset of references a read of `page` applies.
    pub fn page_subset(&self, map: &GrayMap, page: PageType) -> Vec<Voltage> {
        map.page_boundaries(page)
            .into_iter()
            .filter_map(|i| self.voltages.get(i).copied())
            .collect()
    }

    /// Copy with reference `i` replaced, or `None` if ordering would break.
    pub fn with(&self, i: usize, v: Voltage) -> Option<ReadRefs> {
        let mut out = self.voltages.clone();
        out[i] = v;
        ReadRefs::new(out).ok()
    }

    pub fn shifted(&self, dv: Voltage) -> ReadRefs {
        ReadRefs { voltages: self.voltages.iter().map(|v| v + dv).collect() }
    }
}

/// Bin index of `vth` against ascending `refs`. A voltage exactly at a
/// reference falls into the lower bin.
pub fn bin_of(vth: Voltage, refs: &[Voltage]) -> usize {
    refs.partition_point(|&r| r < vth)
}

/// Bit decoded from a bin over the page's own reference subset: each crossed
/// reference flips the bit relative to the lowest level.
pub fn page_bit(map: &GrayMap, page: PageType, page_bin: usize) -> u8 {
    map.bit(0, page) ^ (page_bin as u8 & 1)
}

/// Expected bit error probability of reading `page` with `refs`, assuming
/// every level is equally likely.
pub fn analytic_rber(dist: &DistributionSet, refs: &ReadRefs, map: &GrayMap, page: PageType) -> Result<f64> {
    let sub = refs.page_subset(map, page);
    if sub.is_empty() {
        return Err(Error::EmptyReferences(page));
    }
    let mut edges = Vec::with_capacity(sub.len() + 2);
    edges.push(f64::NEG_INFINITY);
    edges.extend_from_slice(&sub);
    edges.push(f64::INFINITY);
    let n = dist.states.len() as f64;
    let mut total = 0.0;
    for (level, s) in dist.states.iter().enumerate() {
        let want = map.bit(level, page);
        let mut p = 0.0;
        for j in 0..edges.len() - 1 {
            if page_bit(map, page, j) != want {
                p += s.mass(edges[j], edges[j + 1]);
            }
        }
        total += p / n;
    }
    Ok(total)
}

/// Analytic RBER averaged over every page type of the mode.
pub fn analytic_rber_all(dist: &DistributionSet, refs: &ReadRefs) -> Result<f64> {
    let map = dist.mode.gray();
    let pages = dist.mode.page_types();
    let mut sum = 0.0;
    for &p in pages {
        sum += analytic_rber(dist, refs, &map, p)?;
    }
    Ok(sum / pages.len() as f64)
}

/// Voltage in (a.mean, b.mean) where the two pdfs are equal.
pub fn optimal_ref(a: &StateDistribution, b: &StateDistribution) -> Result<Voltage> {
    if !(a.mean < b.mean) || a.stddev <= 0.0 || b.stddev <= 0.0 {
        return Err(Error::Degenerate(a.mean, b.mean));
    }
    let (m1, s1, m2, s2) = (a.mean, a.stddev, b.mean, b.stddev);
    if ((s1 - s2) / s1.max(s2)).abs() < 1e-12 {
        return Ok(0.5 * (m1 + m2));
    }
    // (v-m1)^2/s1^2 + 2 ln s1 = (v-m2)^2/s2^2 + 2 ln s2
    let qa = 1.0 / (s1 * s1) - 1.0 / (s2 * s2);
    let qb = -2.0 * (m1 / (s1 * s1) - m2 / (s2 * s2));
    let qc = m1 * m1 / (s1 * s1) - m2 * m2 / (s2 * s2) + 2.0 * (s1 / s2).ln();
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Err(Error::Degenerate(m1, m2));
    }
    let sq = disc.sqrt();
    // numerically stable pair of roots
    let q = -0.5 * (qb + qb.signum() * sq);
    let roots = [q / qa, if q != 0.0 { qc / q } else { f64::NAN }];
    roots
        .into_iter()
        .filter(|r| r.is_finite() && *r > m1 && *r < m2)
        .min_by(|x, y| {
            let mid = 0.5 * (m1 + m2);
            (x - mid).abs().total_cmp(&(y - mid).abs())
        })
        .ok_or(Error::Degenerate(m1, m2))
}

/// Pairwise pdf intersections of adjacent levels.
pub fn optimal_refs(dist: &DistributionSet) -> Result<ReadRefs> {
    let v = dist
        .states
        .windows(2)
        .map(|w| optimal_ref(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    ReadRefs::new(v)
}

/// Two-hypothesis Gaussian channel for one bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwgnModel {
    pub mu0: f64,
    pub mu1: f64,
    pub sigma: f64,
}

impl AwgnModel {
    /// Closed-form log P(bit 0 | y) / P(bit 1 | y) with equal priors.
    pub fn llr_at(&self, y: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (self.mu1 * self.mu1 - self.mu0 * self.mu0) / (2.0 * s2) + y * (self.mu0 - self.mu1) / s2
    }

    pub fn crossing(&self) -> f64 {
        0.5 * (self.mu0 + self.mu1)
    }
}

/// Representative voltage of a bin: the midpoint of its bounding references;
/// the unbounded outer bins use the nearest state mean.
pub fn bin_representative(bin: usize, refs: &[Voltage], model: &AwgnModel) -> f64 {
    let lo_mean = model.mu0.min(model.mu1);
    let hi_mean = model.mu0.max(model.mu1);
    if refs.is_empty() {
        return 0.5 * (lo_mean + hi_mean);
    }
    if bin == 0 {
        lo_mean
    } else if bin >= refs.len() {
        hi_mean
    } else {
        0.5 * (refs[bin - 1] + refs[bin])
    }
}

pub fn llr(bin: usize, model: &AwgnModel, refs: &[Voltage]) -> Result<f64> {
    if !(model.sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be positive, got {}", model.sigma)));
    }
    Ok(model.llr_at(bin_representative(bin, refs, model)))
}

pub fn sample_vth<R: Rng + ?Sized>(s: &StateDistribution, rng: &mut R) -> Voltage {
    if s.stddev <= 0.0 {
        return s.mean;
    }
    let z: f64 = rng.sample(StandardNormal);
    s.mean + s.stddev * z
}

/// `n` draws from `s` with one uniform per equal-probability stratum, pushed
/// through the inverse CDF. Unbiased, with far lower variance of the sample
/// moments than independent draws.
pub fn sample_stratified<R: Rng + ?Sized>(s: &StateDistribution, n: usize, rng: &mut R) -> Vec<Voltage> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let inv_n = 1.0 / n as f64;
    (0..n)
        .map(|i| {
            let u: f64 = rng.random();
            let p = ((i as f64 + u) * inv_n).clamp(1e-300, 1.0 - 1e-16);
            s.mean + s.stddev * unit.inverse_cdf(p)
        })
        .collect()
}
