//! Controller-side mitigation: read-retry, reference voltage search, NAC,
//! refresh, pass-through voltage tuning, multi-rate ECC, cell-level
//! downgrade and write-hotness classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::{MONTH, WEEK, YEAR};
use crate::degradation::{ChannelModel, DegradationState};
use crate::ecc::{PageCodec, PageDecode};
use crate::error::{Error, Result};
use crate::flash::{BlockConfig, FlashBlock, PageAddr, PartialState};
use crate::voltage::{upper_tail, CellMode, DistributionSet, PageType, ReadRefs, Voltage};

/// Physical bounds of the normalized voltage scale.
pub const VOLTAGE_MIN: Voltage = -256.0;
pub const VOLTAGE_MAX: Voltage = 512.0;
pub const BOLTZMANN_EV: f64 = 8.617_333_262e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrySchedule {
    sets: Vec<ReadRefs>,
}

impl RetrySchedule {
    pub fn new(sets: Vec<ReadRefs>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Parameter("retry schedule is empty".into()));
        }
        Ok(RetrySchedule { sets })
    }

    /// `attempts` reads starting at `initial`, each shifted down by `step`.
    pub fn downward(initial: &ReadRefs, step: f64, attempts: usize) -> Result<Self> {
        Self::new((0..attempts).map(|i| initial.shifted(-(i as f64) * step)).collect())
    }

    pub fn sets(&self) -> &[ReadRefs] {
        &self.sets
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RetryOutcome {
    Corrected { decode: PageDecode, attempts: usize, refs: ReadRefs },
    Exhausted { attempts: usize },
}

impl RetryOutcome {
    pub fn attempts(&self) -> usize {
        match self {
            RetryOutcome::Corrected { attempts, .. } | RetryOutcome::Exhausted { attempts } => *attempts,
        }
    }
}

pub fn read_retry(
    block: &mut FlashBlock,
    wl: usize,
    page: PageType,
    schedule: &RetrySchedule,
    codec: &dyn PageCodec,
) -> Result<RetryOutcome> {
    for (i, refs) in schedule.sets.iter().enumerate() {
        let raw = block.read_page(wl, page, refs)?;
        if let Some(decode) = codec.decode(&raw.bits)? {
            return Ok(RetryOutcome::Corrected { decode, attempts: i + 1, refs: refs.clone() });
        }
    }
    Ok(RetryOutcome::Exhausted { attempts: schedule.sets.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockVoltageState {
    pub v_initial: ReadRefs,
    pub vpass: Voltage,
    pub last_optimized: f64,
}

impl BlockVoltageState {
    pub fn new(v_initial: ReadRefs, now: f64) -> Result<Self> {
        check_scale(&v_initial)?;
        Ok(BlockVoltageState { v_initial, vpass: VOLTAGE_MAX, last_optimized: now })
    }

    /// Read-retry after a sampling pass only needs to move downward.
    pub fn retry_schedule(&self, step: f64, attempts: usize) -> Result<RetrySchedule> {
        RetrySchedule::downward(&self.v_initial, step, attempts)
    }
}

fn check_scale(refs: &ReadRefs) -> Result<()> {
    if refs.voltages().iter().any(|v| !(VOLTAGE_MIN..=VOLTAGE_MAX).contains(v)) {
        return Err(Error::Parameter(format!("references outside [{VOLTAGE_MIN}, {VOLTAGE_MAX}]")));
    }
    Ok(())
}

/// Search interval of each reference: between the adjacent fresh state means.
pub fn nominal_brackets(channel: &ChannelModel, mode: CellMode) -> Result<Vec<(Voltage, Voltage)>> {
    let d = channel.distribution_at(mode, &DegradationState::FRESH)?;
    Ok(d.states.windows(2).map(|w| (w[0].mean, w[1].mean)).collect())
}

/// Order in which references are searched: halve the level range first,
/// then each half.
fn halving_order(levels: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(levels - 1);
    let mut queue = std::collections::VecDeque::from([(0usize, levels)]);
    while let Some((lo, hi)) = queue.pop_front() {
        if hi - lo < 2 {
            continue;
        }
        let mid = (lo + hi) / 2;
        out.push(mid - 1);
        queue.push_back((lo, mid));
        queue.push_back((mid, hi));
    }
    out
}

/// Disparity-based reference approximation for scrambled data: reference
/// `i` is placed where a fraction `(i + 1) / levels` of the cells read below
/// it. `fraction_below(v)` performs one sensing at `v`.
pub fn disparity_vref_search<F>(mut fraction_below: F, brackets: &[(Voltage, Voltage)], tolerance: f64) -> Result<ReadRefs>
where
    F: FnMut(Voltage) -> Result<f64>,
{
    let levels = brackets.len() + 1;
    let mut found: Vec<Option<Voltage>> = vec![None; brackets.len()];
    for i in halving_order(levels) {
        let target = (i + 1) as f64 / levels as f64;
        let left = found[..i].iter().rev().flatten().next().copied();
        let right = found[i + 1..].iter().flatten().next().copied();
        let mut lo = left.map_or(brackets[i].0, |l| l.max(brackets[i].0));
        let mut hi = right.map_or(brackets[i].1, |r| r.min(brackets[i].1));
        if lo >= hi {
            return Err(Error::Disparity(format!("empty search interval for reference {i}")));
        }
        let (f_lo, f_hi) = (fraction_below(lo)?, fraction_below(hi)?);
        if target < f_lo - tolerance || target > f_hi + tolerance {
            return Err(Error::Disparity(format!(
                "ratio {target:.4} unreachable for reference {i}: [{f_lo:.4}, {f_hi:.4}] over [{lo:.1}, {hi:.1}]"
            )));
        }
        let v = loop {
            let mid = 0.5 * (lo + hi);
            let f = fraction_below(mid)?;
            if (f - target).abs() <= tolerance || hi - lo < 1.0 {
                break mid;
            }
            if f < target {
                lo = mid;
            } else {
                hi = mid;
            }
        };
        found[i] = Some(v);
    }
    ReadRefs::new(found.into_iter().map(|v| v.expect("every reference searched")).collect())
}

/// Fraction of a wordline's cells that sense below `v` (one read each call).
pub fn wordline_fraction_reader(block: &mut FlashBlock, wl: usize) -> impl FnMut(Voltage) -> Result<f64> + '_ {
    move |v| {
        let bins = block.sense(wl, &[v])?;
        Ok(bins.iter().filter(|&&b| b == 0).count() as f64 / bins.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoptSearch {
    pub refs: ReadRefs,
    pub errors: usize,
    pub evaluations: usize,
}

/// Per-reference hill descent then ascent in `dv` steps, keeping a move only
/// when the corrected-error count strictly drops. `error_count` returns
/// `None` for an uncorrectable read.
pub fn sampling_vopt_discovery<F>(initial: &ReadRefs, dv: f64, mut error_count: F) -> Result<VoptSearch>
where
    F: FnMut(&ReadRefs) -> Result<Option<usize>>,
{
    if !(dv > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {dv}")));
    }
    let mut evaluations = 1;
    let mut best = error_count(initial)?
        .ok_or_else(|| Error::State("initial references are not ECC-correctable".into()))?;
    let mut refs = initial.clone();
    for i in 0..refs.len() {
        for dir in [-1.0, 1.0] {
            let mut moved = false;
            loop {
                let v = refs.voltages()[i] + dir * dv;
                let Some(cand) = refs.with(i, v) else { break };
                evaluations += 1;
                match error_count(&cand)? {
                    Some(e) if e < best => {
                        best = e;
                        refs = cand;
                        moved = true;
                    }
                    _ => break,
                }
            }
            if moved {
                break;
            }
        }
    }
    Ok(VoptSearch { refs, errors: best, evaluations })
}

/// Corrected-error count of a fully programmed wordline: every page read at
/// `refs` and decoded; `None` if any page is uncorrectable.
pub fn wordline_error_count(block: &mut FlashBlock, wl: usize, refs: &ReadRefs, codec: &dyn PageCodec) -> Result<Option<usize>> {
    let mut total = 0;
    for &page in block.mode().page_types() {
        let raw = block.read_page(wl, page, refs)?;
        match codec.decode(&raw.bits)? {
            Some(d) => total += d.corrected,
            None => return Ok(None),
        }
    }
    Ok(Some(total))
}

/// Sampling-based V_opt discovery on the block's last fully programmed
/// wordline. Falls back to a disparity search when the current `v_initial`
/// is uncorrectable.
pub fn discover_block_vopt(
    block: &mut FlashBlock,
    state: &mut BlockVoltageState,
    codec: &dyn PageCodec,
    dv: f64,
) -> Result<VoptSearch> {
    let wl = (0..block.wordlines())
        .rev()
        .find(|&w| block.partial_state(w) == PartialState::FullyProgrammed)
        .ok_or_else(|| Error::State("block has no fully programmed wordline".into()))?;
    let mut start = state.v_initial.clone();
    if wordline_error_count(block, wl, &start, codec)?.is_none() {
        let brackets = nominal_brackets(block.channel(), block.mode())?;
        start = disparity_vref_search(wordline_fraction_reader(block, wl), &brackets, 0.0)?;
    }
    let found = sampling_vopt_discovery(&start, dv, |r| wordline_error_count(block, wl, r, codec))?;
    check_scale(&found.refs)?;
    state.v_initial = found.refs.clone();
    state.last_optimized = block.now();
    Ok(found)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NacFailure {
    /// The wordline above is absent or not fully programmed.
    NoNeighbor,
    NeighborUnreadable(PageType),
    Exhausted { classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum NacOutcome {
    Corrected { decode: PageDecode, classes_used: usize },
    Failed(NacFailure),
}

/// Expected program shift of each neighbour level relative to ER.
pub fn nac_class_shifts(block: &FlashBlock) -> Result<Vec<f64>> {
    let d = block
        .channel()
        .distribution_at(block.mode(), &DegradationState::new(block.pe_cycles(), 0.0, 0))?;
    let er = d.states[0].mean;
    Ok(d.states.iter().map(|s| s.mean - er).collect())
}

/// Neighbor-cell-assisted correction. The wordline above is read and
/// corrected first; victim cells are then re-read class by class (neighbour
/// ER, P1, ...) with references raised by `k_wordline` times the class shift,
/// retrying ECC after each class.
pub fn nac_correct(
    block: &mut FlashBlock,
    wl: usize,
    page: PageType,
    refs: &ReadRefs,
    codec: &dyn PageCodec,
    k_wordline: f64,
    max_classes: usize,
) -> Result<NacOutcome> {
    let above = wl + 1;
    if above >= block.wordlines() || block.partial_state(above) != PartialState::FullyProgrammed {
        return Ok(NacOutcome::Failed(NacFailure::NoNeighbor));
    }
    let gray = block.gray().clone();
    let mut codes = vec![0u8; block.bitlines()];
    for &p in block.mode().page_types() {
        let raw = block.read_page(above, p, refs)?;
        let Some(d) = codec.decode(&raw.bits)? else {
            return Ok(NacOutcome::Failed(NacFailure::NeighborUnreadable(p)));
        };
        let bits = codec.encode(&d.data)?;
        let pos = gray.bit_position(p).expect("page of this mode");
        for (c, &b) in codes.iter_mut().zip(&bits) {
            *c |= b << pos;
        }
    }
    let neighbor: Vec<usize> = codes.iter().map(|&c| gray.level_of(c)).collect();
    let shifts = nac_class_shifts(block)?;
    let classes = max_classes.min(shifts.len());
    let mut bits = block.read_page(wl, page, refs)?.bits;
    let pos = gray.bit_position(page).expect("page of this mode");
    for (class, shift) in shifts.iter().enumerate().take(classes) {
        let comp = refs.shifted(k_wordline * shift);
        let bins = block.sense(wl, comp.voltages())?;
        for ((b, &n), &bin) in bits.iter_mut().zip(&neighbor).zip(&bins) {
            if n == class {
                *b = (gray.code(bin as usize) >> pos) & 1;
            }
        }
        if let Some(decode) = codec.decode(&bits)? {
            return Ok(NacOutcome::Corrected { decode, classes_used: class + 1 });
        }
    }
    Ok(NacOutcome::Failed(NacFailure::Exhausted { classes }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshKind {
    None,
    Remapping,
    InPlace,
    Hybrid,
    ReadReclaim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefreshPolicy {
    pub kind: RefreshKind,
    /// Interval used when no adaptive table is configured.
    pub base_interval: f64,
    /// (minimum P/E count, interval) steps, ascending in P/E.
    pub adaptive: Option<Vec<(u32, f64)>>,
    pub activation_ev: f64,
    pub calibration_temp_k: f64,
    pub temp_range_k: (f64, f64),
    pub read_reclaim_threshold: u64,
    /// Hybrid: right-shift errors per cell at or below which the block is
    /// refreshed in place.
    pub hybrid_right_shift_rate: f64,
    /// In-place verify level: this many sigmas under each fresh state mean.
    pub vispp_verify_sigmas: f64,
    pub vispp_step: f64,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        RefreshPolicy {
            kind: RefreshKind::Remapping,
            base_interval: MONTH,
            adaptive: Some(default_adaptive_table()),
            activation_ev: 1.1,
            calibration_temp_k: 300.0,
            temp_range_k: (233.0, 398.0),
            read_reclaim_threshold: 50_000,
            hybrid_right_shift_rate: 5e-3,
            vispp_verify_sigmas: 1.0,
            vispp_step: 1.0,
        }
    }
}

pub fn default_adaptive_table() -> Vec<(u32, f64)> {
    vec![(0, YEAR), (1000, 3.0 * MONTH), (2000, MONTH), (3000, WEEK)]
}

impl RefreshPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_interval > 0.0) {
            return Err(Error::Parameter("refresh interval must be positive".into()));
        }
        if let Some(t) = &self.adaptive {
            if t.is_empty() || t.iter().any(|&(_, i)| !(i > 0.0)) {
                return Err(Error::Parameter("adaptive intervals must be positive".into()));
            }
            if t.windows(2).any(|w| w[0].0 >= w[1].0 || w[1].1 > w[0].1) {
                return Err(Error::Parameter(
                    "adaptive table must ascend in P/E with non-increasing intervals".into(),
                ));
            }
        }
        if !(self.calibration_temp_k > 0.0) || self.temp_range_k.0 >= self.temp_range_k.1 {
            return Err(Error::Parameter("bad temperature settings".into()));
        }
        Ok(())
    }
}

/// Arrhenius acceleration of charge loss at `temp_k` relative to `cal_k`.
pub fn arrhenius_factor(activation_ev: f64, cal_k: f64, temp_k: f64) -> f64 {
    (activation_ev / BOLTZMANN_EV * (1.0 / cal_k - 1.0 / temp_k)).exp()
}

pub fn adaptive_refresh_interval(pe_cycles: u32, temperature_k: f64, policy: &RefreshPolicy) -> Result<f64> {
    let (lo, hi) = policy.temp_range_k;
    if !(lo..=hi).contains(&temperature_k) {
        return Err(Error::Parameter(format!("temperature {temperature_k} K outside [{lo}, {hi}]")));
    }
    let base = match &policy.adaptive {
        Some(table) => table
            .iter()
            .rev()
            .find(|&&(pe, _)| pe_cycles >= pe)
            .map_or(table[0].1, |&(_, i)| i),
        None => policy.base_interval,
    };
    Ok(base / arrhenius_factor(policy.activation_ev, policy.calibration_temp_k, temperature_k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpassTuning {
    pub vpass: Voltage,
    pub margin: usize,
    /// Expected number of cells above `vpass`.
    pub expected_over: f64,
}

/// Lowest pass-through voltage whose expected count of cells above it (the
/// top state's upper tail over `cells / levels` cells) stays within the
/// leftover ECC margin.
pub fn tune_vpass(dist: &DistributionSet, cells: usize, ecc_capability: usize, worst_errors: usize) -> Result<VpassTuning> {
    let top = dist.states.last().expect("non-empty set");
    let pop = cells as f64 / dist.states.len() as f64;
    let over = |v: Voltage| pop * upper_tail((v - top.mean) / top.stddev);
    let margin = ecc_capability.saturating_sub(worst_errors);
    if margin == 0 || !(top.stddev > 0.0) {
        return Ok(VpassTuning { vpass: VOLTAGE_MAX, margin, expected_over: over(VOLTAGE_MAX) });
    }
    let p = margin as f64 / pop;
    let v = if p >= 0.5 {
        top.mean
    } else {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        (top.mean + top.stddev * unit.inverse_cdf(1.0 - p)).clamp(top.mean, VOLTAGE_MAX)
    };
    Ok(VpassTuning { vpass: v, margin, expected_over: over(v) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccEngine {
    pub rate: f64,
    /// Highest RBER this engine is used for.
    pub max_rber: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccEngineSet {
    engines: Vec<EccEngine>,
}

impl EccEngineSet {
    pub fn new(engines: Vec<EccEngine>) -> Result<Self> {
        if engines.is_empty() {
            return Err(Error::Parameter("no ECC engines".into()));
        }
        if engines.windows(2).any(|w| w[0].rate <= w[1].rate) {
            return Err(Error::Parameter("coding rates must strictly decrease".into()));
        }
        if engines.windows(2).any(|w| w[0].max_rber >= w[1].max_rber) {
            return Err(Error::Parameter("RBER thresholds must strictly increase".into()));
        }
        Ok(EccEngineSet { engines })
    }

    pub fn engines(&self) -> &[EccEngine] {
        &self.engines
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSelection {
    pub engine: usize,
    pub end_of_life: bool,
}

/// Weakest engine whose threshold exceeds the measured RBER, never weaker
/// than the one in use.
pub fn multirate_select(rber: f64, engines: &EccEngineSet, current: usize) -> RateSelection {
    let last = engines.engines.len() - 1;
    match engines.engines.iter().position(|e| rber < e.max_rber) {
        Some(i) => RateSelection { engine: i.max(current).min(last), end_of_life: false },
        None => RateSelection { engine: last, end_of_life: true },
    }
}

/// Switch an erased TLC block to 2 bits per cell over {ER, P3, P5, P7}.
pub fn downgrade_block(block: &mut FlashBlock) -> Result<()> {
    if !block.is_erased() {
        return Err(Error::State(format!("block {} must be erased before downgrade", block.id())));
    }
    block.set_mode(CellMode::TlcDowngraded)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmConfig {
    /// Stop adding pages once the hot set covers this share of writes.
    pub write_share: f64,
    /// A page is a hot candidate only with at least `skew` times the mean
    /// per-page write count.
    pub skew: f64,
    /// Upper bound on the hot set as a fraction of the footprint.
    pub max_hot_fraction: f64,
    /// Cool-down window in multiples of the refresh interval.
    pub cooldown_intervals: f64,
}

impl Default for WarmConfig {
    fn default() -> Self {
        WarmConfig { write_share: 0.95, skew: 10.0, max_hot_fraction: 0.02, cooldown_intervals: 2.0 }
    }
}

/// Hot flags from per-page write counts over the statistics window.
pub fn warm_manage(counts: &[u64], cfg: &WarmConfig) -> Vec<bool> {
    let mut hot = vec![false; counts.len()];
    let total: u64 = counts.iter().sum();
    if total == 0 || counts.is_empty() {
        return hot;
    }
    let mean = total as f64 / counts.len() as f64;
    let cap = (cfg.max_hot_fraction * counts.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut covered = 0u64;
    for &p in order.iter().take(cap) {
        if (counts[p] as f64) < cfg.skew * mean || covered as f64 >= cfg.write_share * total as f64 {
            break;
        }
        hot[p] = true;
        covered += counts[p];
    }
    hot
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshAction {
    Remap,
    InPlace,
    Deferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub time: f64,
    pub block: usize,
    pub action: RefreshAction,
    /// Pages rewritten for a remap, cells pulsed for in-place.
    pub cost: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefreshStats {
    pub host_reads: usize,
    pub uncorrectable_reads: usize,
    pub integrity_violations: usize,
    pub remaps: usize,
    pub remap_page_writes: usize,
    pub in_place: usize,
    pub pulsed_cells: usize,
    pub deferred: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefreshPoolConfig {
    pub block: BlockConfig,
    pub data_blocks: usize,
    pub spare_blocks: usize,
    pub initial_pe: u32,
    pub temperature_k: f64,
}

impl Default for RefreshPoolConfig {
    fn default() -> Self {
        RefreshPoolConfig {
            block: BlockConfig { wordlines: 16, bitlines: 4096, ..BlockConfig::default() },
            data_blocks: 4,
            spare_blocks: 2,
            initial_pe: 2000,
            temperature_k: 300.0,
        }
    }
}

struct LogicalBlock {
    phys: usize,
    /// Written data per page, in program order.
    pages: Vec<Vec<u8>>,
    last_refresh: f64,
    hot: bool,
}

/// A handful of logical blocks held on physical blocks with spares, used to
/// play refresh policies against retention over a time horizon. Host reads
/// go through frozen references and the page codec only.
pub struct RefreshPool<C: PageCodec> {
    cfg: RefreshPoolConfig,
    codec: C,
    blocks: Vec<FlashBlock>,
    logical: Vec<LogicalBlock>,
    free: Vec<usize>,
    refs: ReadRefs,
    verify: Vec<Voltage>,
    data_rng: ChaCha8Rng,
    now: f64,
    events: Vec<RefreshEvent>,
    stats: RefreshStats,
}

impl<C: PageCodec> RefreshPool<C> {
    pub fn new(cfg: RefreshPoolConfig, codec: C, channel: ChannelModel, seed: u64) -> Result<Self> {
        if codec.page_bits() != cfg.block.bitlines {
            return Err(Error::Parameter(format!(
                "codec page of {} bits on {} bitlines",
                codec.page_bits(),
                cfg.block.bitlines
            )));
        }
        let total = cfg.data_blocks + cfg.spare_blocks;
        let mut blocks = Vec::with_capacity(total);
        for id in 0..total {
            let mut b = FlashBlock::new(id, cfg.block.clone(), channel.clone(), seed)?;
            b.fast_forward_wear(cfg.initial_pe)?;
            blocks.push(b);
        }
        let mode = cfg.block.mode;
        let refs = channel.frozen_refs(mode);
        let fresh = channel.distribution_at(mode, &DegradationState::new(cfg.initial_pe, 0.0, 0))?;
        let verify = fresh.states.iter().map(|s| s.mean - s.stddev).collect();
        let mut pool = RefreshPool {
            codec,
            blocks,
            logical: Vec::with_capacity(cfg.data_blocks),
            free: (cfg.data_blocks..total).collect(),
            refs,
            verify,
            data_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            now: 0.0,
            events: Vec::new(),
            stats: RefreshStats::default(),
            cfg,
        };
        for lb in 0..pool.cfg.data_blocks {
            let pages = pool.random_pages();
            pool.program(lb, &pages)?;
            pool.logical.push(LogicalBlock { phys: lb, pages, last_refresh: 0.0, hot: false });
        }
        Ok(pool)
    }

    fn random_pages(&mut self) -> Vec<Vec<u8>> {
        let n = self.blocks[0].pages();
        let bits = self.codec.data_bits();
        (0..n).map(|_| (0..bits).map(|_| self.data_rng.random::<bool>() as u8).collect()).collect()
    }

    fn program(&mut self, phys: usize, pages: &[Vec<u8>]) -> Result<()> {
        let b = &mut self.blocks[phys];
        for data in pages {
            let (wl, page_type) = b.next_page().ok_or_else(|| Error::State("block full".into()))?;
            let bits = self.codec.encode(data)?;
            b.program_page(PageAddr { block: phys, wordline: wl, page_type }, &bits)?;
        }
        Ok(())
    }

    pub fn stats(&self) -> &RefreshStats {
        &self.stats
    }

    pub fn events(&self) -> &[RefreshEvent] {
        &self.events
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn block(&self, phys: usize) -> &FlashBlock {
        &self.blocks[phys]
    }

    pub fn physical_of(&self, lb: usize) -> usize {
        self.logical[lb].phys
    }

    pub fn set_hot(&mut self, lb: usize, hot: bool) {
        self.logical[lb].hot = hot;
    }

    pub fn advance(&mut self, seconds: f64) {
        self.now += seconds;
        for b in &mut self.blocks {
            b.advance_time(seconds);
        }
    }

    /// Read and decode one page; `None` when uncorrectable.
    fn read(&mut self, lb: usize, idx: usize) -> Result<Option<Vec<u8>>> {
        let phys = self.logical[lb].phys;
        let (wl, page) = self.blocks[phys].program_order()[idx];
        let raw = self.blocks[phys].read_page(wl, page, &self.refs)?;
        Ok(self.codec.decode(&raw.bits)?.map(|d| d.data))
    }

    /// Host-read every page once; returns the uncorrectable count.
    pub fn scan(&mut self) -> Result<usize> {
        let mut bad = 0;
        for lb in 0..self.logical.len() {
            for idx in 0..self.logical[lb].pages.len() {
                self.stats.host_reads += 1;
                match self.read(lb, idx)? {
                    None => bad += 1,
                    Some(d) if d != self.logical[lb].pages[idx] => self.stats.integrity_violations += 1,
                    Some(_) => {}
                }
            }
        }
        self.stats.uncorrectable_reads += bad;
        Ok(bad)
    }

    /// Right-shift errors (cells read above their corrected level) across the
    /// block, or `None` if a page cannot be corrected.
    fn right_shift_errors(&mut self, lb: usize) -> Result<Option<usize>> {
        let phys = self.logical[lb].phys;
        let b = &mut self.blocks[phys];
        let gray = b.gray().clone();
        let mut count = 0;
        for wl in 0..b.wordlines() {
            let mut codes = vec![0u8; b.bitlines()];
            let mut bins = Vec::new();
            for &p in b.mode().page_types() {
                let raw = b.read_page(wl, p, &self.refs)?;
                let Some(d) = self.codec.decode(&raw.bits)? else {
                    return Ok(None);
                };
                let pos = gray.bit_position(p).expect("page of mode");
                for (c, bit) in codes.iter_mut().zip(self.codec.encode(&d.data)?) {
                    *c |= bit << pos;
                }
                bins = raw.bins;
            }
            count += codes.iter().zip(&bins).filter(|(&c, &bin)| bin as usize > gray.level_of(c)).count();
        }
        Ok(Some(count))
    }

    fn remap(&mut self, lb: usize) -> Result<RefreshAction> {
        let Some(pos) = (0..self.free.len()).min_by_key(|&i| (self.blocks[self.free[i]].pe_cycles(), self.free[i])) else {
            self.stats.deferred += 1;
            return Ok(RefreshAction::Deferred);
        };
        let target = self.free.swap_remove(pos);
        let n = self.logical[lb].pages.len();
        let mut data = Vec::with_capacity(n);
        for idx in 0..n {
            match self.read(lb, idx)? {
                Some(d) => data.push(d),
                None => {
                    // Lost page: count it and carry the host copy forward.
                    self.stats.uncorrectable_reads += 1;
                    data.push(self.logical[lb].pages[idx].clone());
                }
            }
        }
        for (idx, d) in data.iter().enumerate() {
            if *d != self.logical[lb].pages[idx] {
                self.stats.integrity_violations += 1;
            }
        }
        self.program(target, &data)?;
        let old = self.logical[lb].phys;
        self.blocks[old].erase()?;
        self.free.push(old);
        self.logical[lb].phys = target;
        self.stats.remaps += 1;
        self.stats.remap_page_writes += n;
        Ok(RefreshAction::Remap)
    }

    fn in_place(&mut self, lb: usize, policy: &RefreshPolicy) -> Result<usize> {
        let phys = self.logical[lb].phys;
        let b = &mut self.blocks[phys];
        let fresh = b
            .channel()
            .distribution_at(b.mode(), &DegradationState::new(b.pe_cycles(), 0.0, 0))?;
        let verify: Vec<Voltage> = fresh
            .states
            .iter()
            .map(|s| s.mean - policy.vispp_verify_sigmas * s.stddev)
            .collect();
        self.verify = verify;
        let mut pulsed = 0;
        for wl in 0..b.wordlines() {
            pulsed += b.vispp_refresh(wl, &self.verify, policy.vispp_step)?;
        }
        self.stats.in_place += 1;
        self.stats.pulsed_cells += pulsed;
        Ok(pulsed)
    }

    /// Apply `policy` to logical block `lb` now.
    pub fn refresh(&mut self, lb: usize, policy: &RefreshPolicy) -> Result<Option<RefreshEvent>> {
        let (action, cost) = match policy.kind {
            RefreshKind::None => return Ok(None),
            RefreshKind::Remapping => (self.remap(lb)?, self.logical[lb].pages.len()),
            RefreshKind::InPlace => {
                let c = self.in_place(lb, policy)?;
                (RefreshAction::InPlace, c)
            }
            RefreshKind::Hybrid => {
                let cells = (self.cfg.block.wordlines * self.cfg.block.bitlines) as f64;
                match self.right_shift_errors(lb)? {
                    Some(n) if n as f64 <= policy.hybrid_right_shift_rate * cells => {
                        let c = self.in_place(lb, policy)?;
                        (RefreshAction::InPlace, c)
                    }
                    _ => (self.remap(lb)?, self.logical[lb].pages.len()),
                }
            }
            RefreshKind::ReadReclaim => {
                if self.blocks[self.logical[lb].phys].total_reads() <= policy.read_reclaim_threshold {
                    return Ok(None);
                }
                (self.remap(lb)?, self.logical[lb].pages.len())
            }
        };
        if action != RefreshAction::Deferred {
            self.logical[lb].last_refresh = self.now;
        }
        let ev = RefreshEvent { time: self.now, block: lb, action, cost };
        self.events.push(ev.clone());
        Ok(Some(ev))
    }

    /// Refresh every cold block whose interval has elapsed (read-reclaim
    /// checks read counts instead).
    pub fn maintain(&mut self, policy: &RefreshPolicy) -> Result<()> {
        for lb in 0..self.logical.len() {
            if self.logical[lb].hot {
                continue;
            }
            let due = match policy.kind {
                RefreshKind::None => false,
                RefreshKind::ReadReclaim => true,
                _ => {
                    let pe = self.blocks[self.logical[lb].phys].pe_cycles();
                    let interval = adaptive_refresh_interval(pe, self.cfg.temperature_k, policy)?;
                    self.now - self.logical[lb].last_refresh >= interval
                }
            };
            if due {
                self.refresh(lb, policy)?;
            }
        }
        Ok(())
    }

    /// Step time to `horizon`, refreshing then host-reading everything
    /// each `step`.
    pub fn run(&mut self, policy: &RefreshPolicy, horizon: f64, step: f64) -> Result<RefreshStats> {
        policy.validate()?;
        while self.now + step <= horizon + 1e-6 {
            self.advance(step);
            self.maintain(policy)?;
            self.scan()?;
        }
        Ok(self.stats.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bch::BchCode;
    use crate::calibration::{CalibrationTables, DAY};
    use crate::degradation::distribution_at;
    use crate::ecc::BchPageCodec;
    use crate::voltage::{analytic_rber_all, optimal_ref, optimal_refs, State, StateDistribution};

    fn mixture_fraction(d: &DistributionSet) -> impl FnMut(Voltage) -> Result<f64> + '_ {
        move |v| {
            let n = d.states.len() as f64;
            Ok(d.states.iter().map(|s| s.mass(f64::NEG_INFINITY, v)).sum::<f64>() / n)
        }
    }

    #[test]
    fn halving_order_matches_binary_split() {
        assert_eq!(halving_order(2), vec![0]);
        assert_eq!(halving_order(4), vec![1, 0, 2]);
        assert_eq!(halving_order(8), vec![3, 1, 5, 0, 2, 4, 6]);
    }

    #[test]
    fn disparity_on_symmetric_pair_hits_midpoint() {
        let d = DistributionSet::new(
            CellMode::Slc,
            vec![StateDistribution::new(State::Er, 0.0, 10.0), StateDistribution::new(State::P7, 100.0, 10.0)],
        )
        .unwrap();
        let r = disparity_vref_search(mixture_fraction(&d), &[(0.0, 100.0)], 1e-6).unwrap();
        assert!((r.voltages()[0] - 50.0).abs() <= 1.0);
    }

    #[test]
    fn disparity_on_fresh_mlc_states() {
        let ch = ChannelModel::builtin();
        let d = ch.distribution_at(CellMode::Mlc, &DegradationState::FRESH).unwrap();
        let br = nominal_brackets(&ch, CellMode::Mlc).unwrap();
        let r = disparity_vref_search(mixture_fraction(&d), &br, 0.0).unwrap();
        let opt = optimal_refs(&d).unwrap();
        // Equal-width neighbours: the balanced point is the pdf crossing.
        for i in 1..3 {
            assert!((r.voltages()[i] - opt.voltages()[i]).abs() <= 2.0, "ref {i}: {:?} vs {:?}", r, opt);
        }
        // ER is five times wider than P3, so equal tail mass sits right of
        // the pdf crossing.
        let miss = r.voltages()[0] - opt.voltages()[0];
        assert!(miss > 0.0 && miss < 5.0, "{miss}");
    }

    #[test]
    fn disparity_rejects_unbalanced_data() {
        let ch = ChannelModel::builtin();
        let d = ch.distribution_at(CellMode::Mlc, &DegradationState::FRESH).unwrap();
        // Every cell stores LSB = 0: only the two upper MLC levels are used.
        let upper = &d.states[2..];
        let frac = |v: Voltage| -> Result<f64> { Ok(upper.iter().map(|s| s.mass(f64::NEG_INFINITY, v)).sum::<f64>() / 2.0) };
        let br = nominal_brackets(&ch, CellMode::Mlc).unwrap();
        assert!(matches!(disparity_vref_search(frac, &br, 0.0), Err(Error::Disparity(_))));
    }

    /// Analytic expected error count of `cells` cells read at `refs`.
    fn expected_errors(d: &DistributionSet, refs: &ReadRefs, cells: f64) -> f64 {
        analytic_rber_all(d, refs).unwrap() * cells * d.mode.bits() as f64
    }

    #[test]
    fn sampling_discovery_stays_put_at_the_optimum() {
        let ch = ChannelModel::builtin();
        let d = ch.distribution_at(CellMode::Tlc, &DegradationState::FRESH).unwrap();
        let opt = optimal_refs(&d).unwrap();
        let count = |r: &ReadRefs| Ok(Some(expected_errors(&d, r, 1e9).round() as usize));
        let s = sampling_vopt_discovery(&opt, 2.0, count).unwrap();
        assert_eq!(s.refs, opt);
    }

    #[test]
    fn sampling_discovery_follows_retention_down() {
        let ch = ChannelModel::builtin();
        let d1 = ch.distribution_at(CellMode::Tlc, &DegradationState::FRESH).unwrap();
        let deg = DegradationState::new(0, MONTH, 1);
        let dm = ch.distribution_at(CellMode::Tlc, &deg).unwrap();
        let count = |r: &ReadRefs| Ok(Some(expected_errors(&dm, r, 1e9).round() as usize));
        let start = optimal_refs(&d1).unwrap();
        let s = sampling_vopt_discovery(&start, 2.0, count).unwrap();
        let oracle = optimal_ref(&dm.states[6], &dm.states[7]).unwrap();
        assert!(s.refs.voltages()[6] < start.voltages()[6]);
        assert!((s.refs.voltages()[6] - oracle).abs() <= 2.0);
        assert!(analytic_rber_all(&dm, &s.refs).unwrap() <= analytic_rber_all(&dm, &start).unwrap());
        // A coarse step still ends within one step of the oracle.
        let coarse = sampling_vopt_discovery(&start, 8.0, count).unwrap();
        for (i, w) in dm.states.windows(2).enumerate() {
            let o = optimal_ref(&w[0], &w[1]).unwrap();
            assert!((coarse.refs.voltages()[i] - o).abs() <= 8.0, "ref {i}");
        }
    }

    #[test]
    fn sampling_discovery_needs_a_correctable_start() {
        let r = ReadRefs::new(vec![0.0]).unwrap();
        assert!(sampling_vopt_discovery(&r, 2.0, |_| Ok(None)).is_err());
    }

    #[test]
    fn adaptive_interval_examples() {
        let p = RefreshPolicy::default();
        p.validate().unwrap();
        assert_eq!(adaptive_refresh_interval(100, 300.0, &p).unwrap(), YEAR);
        assert_eq!(adaptive_refresh_interval(3000, 300.0, &p).unwrap(), WEEK);
        assert_eq!(adaptive_refresh_interval(2000, 300.0, &p).unwrap(), MONTH);
        assert!(adaptive_refresh_interval(100, 330.0, &p).unwrap() < YEAR);
        assert!(adaptive_refresh_interval(100, 500.0, &p).is_err());
        let mut bad = p.clone();
        bad.adaptive = Some(vec![(0, WEEK), (1000, YEAR)]);
        assert!(bad.validate().is_err());
        assert!((arrhenius_factor(1.1, 300.0, 300.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vpass_tuning() {
        let ch = ChannelModel::builtin();
        let cells = 64 * 4096;
        let fresh = ch.distribution_at(CellMode::Tlc, &DegradationState::FRESH).unwrap();
        let t = tune_vpass(&fresh, cells, 40, 2).unwrap();
        assert!(t.vpass < 500.0 && t.expected_over <= 38.0 + 1e-9);
        let full = tune_vpass(&fresh, cells, 40, 40).unwrap();
        assert_eq!(full.vpass, VOLTAGE_MAX);
        let mut prev = 0.0;
        for ret in [DAY, WEEK, MONTH, 3.0 * MONTH, YEAR] {
            let d = ch.distribution_at(CellMode::Tlc, &DegradationState::new(0, ret, 1)).unwrap();
            let v = tune_vpass(&d, cells, 40, 2).unwrap().vpass;
            assert!(v > prev, "{ret}: {v}");
            prev = v;
        }
    }

    #[test]
    fn vpass_tail_count_on_samples() {
        let ch = ChannelModel::builtin();
        let d = ch.distribution_at(CellMode::Tlc, &DegradationState::FRESH).unwrap();
        let cells = 8 * 200_000;
        let t = tune_vpass(&d, cells, 30, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let top = d.states.last().unwrap();
        let over = (0..cells / 8).filter(|_| crate::voltage::sample_vth(top, &mut rng) > t.vpass).count();
        assert!((over as f64) <= t.margin as f64 + 3.0 * (t.margin as f64).sqrt());
    }

    #[test]
    fn multirate_ratchets() {
        let set = EccEngineSet::new(vec![
            EccEngine { rate: 0.90, max_rber: 1e-3 },
            EccEngine { rate: 0.88, max_rber: 2e-3 },
            EccEngine { rate: 0.86, max_rber: 3e-3 },
            EccEngine { rate: 0.84, max_rber: 4e-3 },
        ])
        .unwrap();
        assert_eq!(multirate_select(1e-4, &set, 0), RateSelection { engine: 0, end_of_life: false });
        assert_eq!(multirate_select(1.5e-3, &set, 0).engine, 1);
        assert_eq!(multirate_select(1e-4, &set, 1).engine, 1);
        assert_eq!(multirate_select(9e-3, &set, 1), RateSelection { engine: 3, end_of_life: true });
        assert!(EccEngineSet::new(vec![
            EccEngine { rate: 0.88, max_rber: 1e-3 },
            EccEngine { rate: 0.90, max_rber: 2e-3 },
        ])
        .is_err());
    }

    #[test]
    fn downgrade_widens_margins() {
        let tables = CalibrationTables::builtin();
        let deg = DegradationState::new(3000, YEAR, 1);
        let tlc = distribution_at(CellMode::Tlc, &deg, &tables).unwrap();
        let mlc = distribution_at(CellMode::TlcDowngraded, &deg, &tables).unwrap();
        let ch = ChannelModel::builtin();
        let r_tlc = analytic_rber_all(&tlc, &ch.frozen_refs(CellMode::Tlc)).unwrap();
        let r_mlc = analytic_rber_all(&mlc, &ch.frozen_refs(CellMode::TlcDowngraded)).unwrap();
        assert!(r_mlc < r_tlc);

        let mut b = FlashBlock::new(0, BlockConfig { wordlines: 4, bitlines: 64, ..Default::default() }, ch, 1).unwrap();
        b.program_random(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(downgrade_block(&mut b), Err(Error::State(_))));
        b.erase().unwrap();
        downgrade_block(&mut b).unwrap();
        assert_eq!(b.mode(), CellMode::TlcDowngraded);
    }

    #[test]
    fn warm_classification() {
        assert!(warm_manage(&vec![100; 1000], &WarmConfig::default()).iter().all(|h| !h));
        let mut counts = vec![1u64; 1000];
        for c in counts.iter_mut().take(10) {
            *c = 10_000;
        }
        let hot = warm_manage(&counts, &WarmConfig::default());
        assert_eq!(hot.iter().filter(|&&h| h).count(), 10);
        assert!(hot[..10].iter().all(|&h| h));
    }

    fn small_pool(seed: u64) -> RefreshPool<BchPageCodec> {
        let cfg = RefreshPoolConfig {
            block: BlockConfig { wordlines: 4, bitlines: 1023, ..BlockConfig::default() },
            data_blocks: 2,
            spare_blocks: 1,
            ..Default::default()
        };
        let codec = BchPageCodec::new(BchCode::new(10, 16).unwrap(), 1023).unwrap();
        RefreshPool::new(cfg, codec, ChannelModel::builtin(), seed).unwrap()
    }

    #[test]
    fn in_place_refresh_only_raises_programmed_cells() {
        let mut pool = small_pool(3);
        pool.advance(MONTH);
        let phys = pool.physical_of(0);
        let before: Vec<Vec<f64>> = (0..4).map(|wl| pool.block(phys).vth(wl).unwrap()).collect();
        let policy = RefreshPolicy { kind: RefreshKind::InPlace, ..Default::default() };
        let ev = pool.refresh(0, &policy).unwrap().unwrap();
        assert_eq!(ev.action, RefreshAction::InPlace);
        assert!(ev.cost > 0);
        let verify = pool.verify.clone();
        for wl in 0..4 {
            let after = pool.block(phys).vth(wl).unwrap();
            let levels = pool.block(phys).intended_levels(wl);
            let held = pool.block(phys).programmed_levels(wl);
            for (((b, a), &l), &h) in before[wl].iter().zip(&after).zip(&levels).zip(&held) {
                assert!(a >= b);
                if l == 0 {
                    assert_eq!(a, b);
                } else if h == Some(l) {
                    assert!(*a >= verify[l] - 1e-3);
                }
            }
        }
    }

    #[test]
    fn remap_moves_data_and_costs_an_erase() {
        let mut pool = small_pool(4);
        pool.advance(WEEK);
        let old = pool.physical_of(1);
        let pe = pool.block(old).pe_cycles();
        let ev = pool.refresh(1, &RefreshPolicy::default()).unwrap().unwrap();
        assert_eq!(ev.action, RefreshAction::Remap);
        assert_ne!(pool.physical_of(1), old);
        assert_eq!(pool.block(old).pe_cycles(), pe + 1);
        assert_eq!(pool.scan().unwrap(), 0);
        assert_eq!(pool.stats().integrity_violations, 0);
        // The erased source block becomes the next spare.
        let ev = pool.refresh(0, &RefreshPolicy::default()).unwrap().unwrap();
        assert_eq!(ev.action, RefreshAction::Remap);
        assert_eq!(pool.physical_of(0), old);
        let mut pool = small_pool(5);
        pool.free.clear();
        let ev = pool.refresh(0, &RefreshPolicy::default()).unwrap().unwrap();
        assert_eq!(ev.action, RefreshAction::Deferred);
    }

    #[test]
    fn hybrid_and_read_reclaim_rules() {
        let mut pool = small_pool(6);
        let policy = RefreshPolicy { kind: RefreshKind::Hybrid, hybrid_right_shift_rate: 1.0, ..Default::default() };
        assert_eq!(pool.refresh(0, &policy).unwrap().unwrap().action, RefreshAction::InPlace);
        let policy = RefreshPolicy { kind: RefreshKind::ReadReclaim, read_reclaim_threshold: 50_000, ..Default::default() };
        let phys = pool.physical_of(0);
        let done = pool.blocks[phys].total_reads();
        pool.blocks[phys].sibling_reads(0, 50_000 - done);
        assert!(pool.refresh(0, &policy).unwrap().is_none());
        pool.blocks[phys].sibling_reads(0, 1);
        assert_eq!(pool.refresh(0, &policy).unwrap().unwrap().action, RefreshAction::Remap);
    }
}
