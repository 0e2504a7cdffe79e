//! End-to-end read correction: hard decode, retry/NAC or soft decoding,
//! superpage parity, and the RFR/RDR rescue reads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::Mechanism;
use crate::degradation::{ChannelModel, DegradationState};
use crate::ecc::{BchPageCodec, LdpcPageCodec, PageCodec, PageDecode};
use crate::error::{Error, Result};
use crate::flash::{BlockConfig, FlashBlock, PageAddr};
use crate::ldpc::LlrSchedule;
use crate::mitigation::{nac_correct, NacFailure, NacOutcome};
use crate::voltage::{bin_of, DistributionSet, GrayMap, PageType, ReadRefs, Voltage};

#[derive(Clone, Debug)]
pub enum FlowCodec {
    Bch(BchPageCodec),
    Ldpc(LdpcPageCodec),
}

impl FlowCodec {
    fn inner(&self) -> &dyn PageCodec {
        match self {
            FlowCodec::Bch(c) => c,
            FlowCodec::Ldpc(c) => c,
        }
    }
}

impl PageCodec for FlowCodec {
    fn page_bits(&self) -> usize {
        self.inner().page_bits()
    }

    fn data_bits(&self) -> usize {
        self.inner().data_bits()
    }

    fn capability(&self) -> usize {
        self.inner().capability()
    }

    fn codewords(&self) -> usize {
        self.inner().codewords()
    }

    fn encode(&self, data: &[u8]) -> Result<Vec<u8>> {
        self.inner().encode(data)
    }

    fn decode(&self, raw: &[u8]) -> Result<Option<PageDecode>> {
        self.inner().decode(raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTiming {
    pub read_us: f64,
    pub soft_level_us: f64,
    pub decode_us: f64,
    pub parity_us: f64,
}

impl Default for FlowTiming {
    fn default() -> Self {
        FlowTiming { read_us: 80.0, soft_level_us: 100.0, decode_us: 10.0, parity_us: 10_000.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Total read-retry reads, the first at V_initial.
    pub retry_attempts: usize,
    pub retry_step: f64,
    pub nac: bool,
    /// Defaults to the block's coupling coefficient, else 0.06.
    pub nac_k_wordline: Option<f64>,
    pub nac_classes: usize,
    pub soft_levels: usize,
    /// Soft read spacing in units of the boundary's mean state sigma.
    pub soft_delta_sigmas: f64,
    pub parity: bool,
    pub timing: FlowTiming,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            retry_attempts: 5,
            retry_step: 4.0,
            nac: true,
            nac_k_wordline: None,
            nac_classes: 4,
            soft_levels: 5,
            soft_delta_sigmas: 0.5,
            parity: true,
            timing: FlowTiming::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStatus {
    CorrectedStage1,
    CorrectedStage2,
    CorrectedParity,
    Uncorrectable,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub hard_reads: usize,
    pub soft_reads: usize,
    pub decodes: usize,
    pub parity_runs: usize,
}

impl FlowCounts {
    pub fn reads(&self) -> usize {
        self.hard_reads + self.soft_reads
    }

    pub fn latency_us(&self, t: &FlowTiming) -> f64 {
        self.hard_reads as f64 * t.read_us
            + self.soft_reads as f64 * t.soft_level_us
            + self.decodes as f64 * t.decode_us
            + self.parity_runs as f64 * t.parity_us
    }

    fn add(&mut self, o: &FlowCounts) {
        self.hard_reads += o.hard_reads;
        self.soft_reads += o.soft_reads;
        self.decodes += o.decodes;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub status: FlowStatus,
    pub counts: FlowCounts,
    pub latency_us: f64,
    pub retry_attempts: usize,
    pub nac_classes: usize,
    pub soft_levels: usize,
    /// Decoder results rejected by the CRC check.
    pub crc_rejections: usize,
    #[serde(skip)]
    pub data: Option<Vec<u8>>,
}

impl FlowOutcome {
    /// Data corrected beyond stage 1 should be reprogrammed elsewhere.
    pub fn needs_relocation(&self) -> bool {
        matches!(self.status, FlowStatus::CorrectedStage2 | FlowStatus::CorrectedParity)
    }
}

/// One logical-block slice per die across `chips × dies`, with one die
/// holding the XOR of the others page by page.
pub struct Superpage {
    chips: usize,
    dies: usize,
    parity_die: Option<usize>,
    blocks: Vec<FlashBlock>,
    codec: FlowCodec,
    refs: Vec<ReadRefs>,
    /// Written data per die and page.
    truth: Vec<Vec<Vec<u8>>>,
    hgbb: Vec<bool>,
    seed: u64,
}

impl Superpage {
    pub fn new(
        chips: usize,
        dies: usize,
        parity: bool,
        cfg: BlockConfig,
        channel: ChannelModel,
        codec: FlowCodec,
        seed: u64,
    ) -> Result<Self> {
        let lbs = chips * dies;
        if lbs < 2 {
            return Err(Error::Parameter("a superpage needs at least two dies".into()));
        }
        if codec.page_bits() != cfg.bitlines {
            return Err(Error::Parameter(format!(
                "codec page of {} bits on {} bitlines",
                codec.page_bits(),
                cfg.bitlines
            )));
        }
        let refs = channel.frozen_refs(cfg.mode);
        let blocks = (0..lbs)
            .map(|d| FlashBlock::new(d, cfg.clone(), channel.clone(), seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Superpage {
            chips,
            dies,
            parity_die: parity.then_some(lbs - 1),
            blocks,
            codec,
            refs: vec![refs; lbs],
            truth: vec![Vec::new(); lbs],
            hgbb: vec![false; lbs],
            seed,
        })
    }

    pub fn geometry(&self) -> (usize, usize) {
        (self.chips, self.dies)
    }

    pub fn lbs(&self) -> usize {
        self.blocks.len()
    }

    pub fn parity_die(&self) -> Option<usize> {
        self.parity_die
    }

    pub fn data_dies(&self) -> Vec<usize> {
        (0..self.lbs()).filter(|&d| Some(d) != self.parity_die).collect()
    }

    pub fn codec(&self) -> &FlowCodec {
        &self.codec
    }

    pub fn block(&self, die: usize) -> &FlashBlock {
        &self.blocks[die]
    }

    pub fn block_mut(&mut self, die: usize) -> &mut FlashBlock {
        &mut self.blocks[die]
    }

    pub fn pages_written(&self) -> usize {
        self.truth[0].len()
    }

    pub fn truth(&self, die: usize, page: usize) -> &[u8] {
        &self.truth[die][page]
    }

    pub fn set_read_refs(&mut self, die: usize, refs: ReadRefs) {
        self.refs[die] = refs;
    }

    pub fn fast_forward_wear(&mut self, pe: u32) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.fast_forward_wear(pe))
    }

    pub fn advance_time(&mut self, seconds: f64) {
        for b in &mut self.blocks {
            b.advance_time(seconds);
        }
    }

    /// Erase every die's block. Hidden bad blocks stay bad.
    pub fn erase(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            b.erase()?;
        }
        for t in &mut self.truth {
            t.clear();
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.blocks[0].is_full()
    }

    pub fn pages(&self) -> usize {
        self.blocks[0].pages()
    }

    pub fn pe_cycles(&self) -> u32 {
        self.blocks[0].pe_cycles()
    }

    /// Mark a die's block as a hidden grown bad block: its reads return noise.
    pub fn inject_hgbb(&mut self, die: usize) {
        self.hgbb[die] = true;
    }

    /// Independent Bernoulli(`p`) hidden-bad-block draw per die.
    pub fn inject_hgbb_random<R: Rng + ?Sized>(&mut self, p: f64, rng: &mut R) -> usize {
        let mut n = 0;
        for d in 0..self.lbs() {
            if rng.random::<f64>() < p {
                self.hgbb[d] = true;
                n += 1;
            }
        }
        n
    }

    /// Program the next superpage page. `data` has one entry per data die.
    pub fn program_next(&mut self, data: &[Vec<u8>]) -> Result<usize> {
        let dies = self.data_dies();
        if data.len() != dies.len() {
            return Err(Error::Length { expected: dies.len(), got: data.len() });
        }
        let page = self.pages_written();
        let mut parity = vec![0u8; self.codec.data_bits()];
        for (&d, bits) in dies.iter().zip(data) {
            self.write(d, bits)?;
            for (p, &b) in parity.iter_mut().zip(bits) {
                *p ^= b;
            }
        }
        if let Some(pd) = self.parity_die {
            self.write(pd, &parity)?;
        }
        Ok(page)
    }

    fn write(&mut self, die: usize, data: &[u8]) -> Result<()> {
        let (wl, page_type) = self.blocks[die].next_page().ok_or_else(|| Error::State("superpage is full".into()))?;
        let bits = self.codec.encode(data)?;
        self.blocks[die].program_page(PageAddr { block: die, wordline: wl, page_type }, &bits)?;
        self.truth[die].push(data.to_vec());
        Ok(())
    }

    /// Fill every remaining page with random data.
    pub fn program_random<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let n = self.data_dies().len();
        let bits = self.codec.data_bits();
        while !self.blocks[0].is_full() {
            let data: Vec<Vec<u8>> = (0..n).map(|_| (0..bits).map(|_| rng.random::<bool>() as u8).collect()).collect();
            self.program_next(&data)?;
        }
        Ok(())
    }

    /// Whether the stored codeword bits of `page` XOR to zero across dies.
    pub fn parity_holds(&self, page: usize) -> bool {
        if self.parity_die.is_none() {
            return true;
        }
        let mut acc = vec![0u8; self.codec.page_bits()];
        let mut pad = 0u8;
        for b in &self.blocks {
            let (wl, pt) = b.program_order()[page];
            for (a, x) in acc.iter_mut().zip(b.written_bits(wl, pt)) {
                *a ^= x;
            }
            pad ^= 1;
        }
        // Padding bits are erased (1) on every die.
        let code_bits = match &self.codec {
            FlowCodec::Bch(c) => c.code().n() * c.codewords(),
            FlowCodec::Ldpc(c) => c.code().n() * c.codewords(),
        };
        acc[..code_bits].iter().all(|&a| a == 0) && acc[code_bits..].iter().all(|&a| a == pad)
    }

    fn location(&self, die: usize, page: usize) -> Result<(usize, PageType)> {
        if page >= self.pages_written() {
            return Err(Error::Parameter(format!("page {page} not written")));
        }
        Ok(self.blocks[die].program_order()[page])
    }

    fn noise_rng(&self, die: usize, page: usize, salt: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ 0xbad_b10c);
        r.set_stream(((die as u64) << 40) ^ ((page as u64) << 8) ^ salt);
        r
    }

    fn hard_read(&mut self, die: usize, page: usize, refs: &ReadRefs, salt: u64) -> Result<Vec<u8>> {
        let (wl, pt) = self.location(die, page)?;
        if self.hgbb[die] {
            let mut r = self.noise_rng(die, page, salt);
            return Ok((0..self.codec.page_bits()).map(|_| r.random::<bool>() as u8).collect());
        }
        Ok(self.blocks[die].read_page(wl, pt, refs)?.bits)
    }
}

/// XOR of equal-length bit vectors.
pub fn xor_pages<'a>(pages: impl IntoIterator<Item = &'a [u8]>) -> Vec<u8> {
    let mut it = pages.into_iter();
    let mut acc = it.next().map(<[u8]>::to_vec).unwrap_or_default();
    for p in it {
        for (a, &b) in acc.iter_mut().zip(p) {
            *a ^= b;
        }
    }
    acc
}

/// Whether parity reconstruction of LB `target` fails given which LBs of
/// the superpage failed on their own.
pub fn parity_fails(failed: &[bool], target: usize) -> bool {
    failed[target] && failed.iter().enumerate().any(|(i, &f)| f && i != target)
}

/// Soft-read schedule for one page: states tagged with the page bit, hard
/// references at the page's boundaries of `refs`.
pub fn page_schedule(
    dist: &DistributionSet,
    gray: &GrayMap,
    page: PageType,
    refs: &ReadRefs,
    levels: usize,
    delta_sigmas: f64,
    saturation: f32,
) -> Result<LlrSchedule> {
    let bounds = gray.page_boundaries(page);
    let hard: Vec<Voltage> = bounds.iter().map(|&b| refs.voltages()[b]).collect();
    let deltas: Vec<f64> = bounds
        .iter()
        .map(|&b| delta_sigmas * 0.5 * (dist.states[b].stddev + dist.states[b + 1].stddev))
        .collect();
    let states: Vec<_> = dist
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), gray.bit(i, page)))
        .collect();
    LlrSchedule::from_mixture(&states, &hard, &deltas, levels, saturation)
}

fn crc_ok(sp: &Superpage, die: usize, page: usize, d: &PageDecode) -> bool {
    d.data == sp.truth[die][page]
}

/// Stages 1 and 2 of the flow. Returns the accepted data (if any) and the
/// stage that produced it.
fn stages_one_two(sp: &mut Superpage, die: usize, page: usize, cfg: &FlowConfig, out: &mut FlowOutcome) -> Result<Option<(Vec<u8>, FlowStatus)>> {
    let refs = sp.refs[die].clone();
    let raw = sp.hard_read(die, page, &refs, 0)?;
    out.counts.hard_reads += 1;
    out.counts.decodes += 1;
    if let Some(d) = sp.codec.decode(&raw)? {
        if crc_ok(sp, die, page, &d) {
            return Ok(Some((d.data, FlowStatus::CorrectedStage1)));
        }
        out.crc_rejections += 1;
    }
    let (wl, pt) = sp.location(die, page)?;
    match sp.codec.clone() {
        FlowCodec::Bch(_) => {
            for i in 1..cfg.retry_attempts {
                out.retry_attempts = i;
                let r = refs.shifted(-(i as f64) * cfg.retry_step);
                let raw = sp.hard_read(die, page, &r, i as u64)?;
                out.counts.hard_reads += 1;
                out.counts.decodes += 1;
                if let Some(d) = sp.codec.decode(&raw)? {
                    if crc_ok(sp, die, page, &d) {
                        return Ok(Some((d.data, FlowStatus::CorrectedStage2)));
                    }
                    out.crc_rejections += 1;
                }
            }
            if cfg.nac && cfg.nac_classes > 0 && !sp.hgbb[die] {
                let block = &mut sp.blocks[die];
                let k = cfg
                    .nac_k_wordline
                    .or(block.config().coupling.map(|c| c.wordline))
                    .unwrap_or(0.06);
                let per_wl = block.mode().bits();
                let res = nac_correct(block, wl, pt, &refs, &sp.codec, k, cfg.nac_classes)?;
                let (reads, decodes) = match &res {
                    NacOutcome::Corrected { classes_used, .. } => (per_wl + 1 + classes_used, per_wl + classes_used),
                    NacOutcome::Failed(NacFailure::NoNeighbor) => (0, 0),
                    NacOutcome::Failed(NacFailure::NeighborUnreadable(p)) => {
                        let i = block.mode().page_types().iter().position(|x| x == p).expect("page of mode") + 1;
                        (i, i)
                    }
                    NacOutcome::Failed(NacFailure::Exhausted { classes }) => (per_wl + 1 + classes, per_wl + classes),
                };
                out.counts.hard_reads += reads;
                out.counts.decodes += decodes;
                if let NacOutcome::Corrected { decode, classes_used } = res {
                    out.nac_classes = classes_used;
                    if crc_ok(sp, die, page, &decode) {
                        return Ok(Some((decode.data, FlowStatus::CorrectedStage2)));
                    }
                    out.crc_rejections += 1;
                }
            }
        }
        FlowCodec::Ldpc(codec) => {
            if cfg.soft_levels < 2 {
                return Ok(None);
            }
            let block = &sp.blocks[die];
            let dist = block.channel().distribution_at(block.mode(), &block.degradation_of(wl))?;
            let sched = page_schedule(
                &dist,
                block.gray(),
                pt,
                &refs,
                cfg.soft_levels,
                cfg.soft_delta_sigmas,
                codec.config().saturation,
            )?;
            let obs: Vec<u16> = if sp.hgbb[die] {
                let mut r = sp.noise_rng(die, page, 1 << 20);
                (0..codec.page_bits()).map(|_| r.random_range(0..sched.fine_bins()) as u16).collect()
            } else {
                let block = &mut sp.blocks[die];
                let fine = sched.fine_references().to_vec();
                // One sense against every soft reference; levels then reveal
                // them progressively.
                block.sense(wl, &fine)?
            };
            for level in 1..sched.levels() {
                out.soft_levels = level;
                out.counts.soft_reads += 1;
                out.counts.decodes += 1;
                if let Some(d) = codec.decode_soft(&obs, &sched, level)? {
                    if crc_ok(sp, die, page, &d) {
                        return Ok(Some((d.data, FlowStatus::CorrectedStage2)));
                    }
                    out.crc_rejections += 1;
                }
            }
        }
    }
    Ok(None)
}

/// Recover one LB from its siblings: each sibling goes through stages 1–2
/// and the results are XORed with the parity LB.
pub fn parity_recover(sp: &mut Superpage, die: usize, page: usize, cfg: &FlowConfig) -> Result<(Option<Vec<u8>>, FlowCounts)> {
    let mut counts = FlowCounts::default();
    if sp.parity_die.is_none() {
        return Err(Error::State("superpage has no parity die".into()));
    }
    let mut acc: Option<Vec<u8>> = None;
    for d in (0..sp.lbs()).filter(|&d| d != die) {
        let mut sub = FlowOutcome::empty();
        let got = stages_one_two(sp, d, page, cfg, &mut sub)?;
        counts.add(&sub.counts);
        let Some((data, _)) = got else {
            return Ok((None, counts));
        };
        acc = Some(match acc {
            None => data,
            Some(a) => xor_pages([a.as_slice(), data.as_slice()]),
        });
    }
    Ok((acc, counts))
}

impl FlowOutcome {
    fn empty() -> Self {
        FlowOutcome {
            status: FlowStatus::Uncorrectable,
            counts: FlowCounts::default(),
            latency_us: 0.0,
            retry_attempts: 0,
            nac_classes: 0,
            soft_levels: 0,
            crc_rejections: 0,
            data: None,
        }
    }
}

/// Full correction flow for page `page` of die `die`.
pub fn correct_flow(sp: &mut Superpage, die: usize, page: usize, cfg: &FlowConfig) -> Result<FlowOutcome> {
    let mut out = FlowOutcome::empty();
    if let Some((data, status)) = stages_one_two(sp, die, page, cfg, &mut out)? {
        out.status = status;
        out.data = Some(data);
    } else if cfg.parity && sp.parity_die.is_some() {
        let (rec, counts) = parity_recover(sp, die, page, cfg)?;
        out.counts.add(&counts);
        out.counts.parity_runs += 1;
        if let Some(data) = rec {
            if data == sp.truth[die][page] {
                out.status = FlowStatus::CorrectedParity;
                out.data = Some(data);
            } else {
                out.crc_rejections += 1;
            }
        }
    }
    out.latency_us = out.counts.latency_us(&cfg.timing);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescueKind {
    /// RFR: extra retention, prone cells belong to the upper state.
    Retention,
    /// RDR: extra read disturb, prone cells belong to the lower state.
    Disturb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RescueConfig {
    pub window_sigmas: f64,
    /// Spacing of the voltage sweep that records per-cell positions.
    pub sweep_step: f64,
    pub disturb_reads: u64,
    /// Smallest expected relative shift of a boundary's two states for the
    /// boundary to be treated.
    pub min_contrast: f64,
}

impl Default for RescueConfig {
    fn default() -> Self {
        RescueConfig { window_sigmas: 1.5, sweep_step: 0.25, disturb_reads: 10_000, min_contrast: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RescueOutcome {
    Adjusted { bits: Vec<u8>, window_cells: usize, flipped: usize },
    NoAdjustment { bits: Vec<u8>, reason: String },
}

impl RescueOutcome {
    pub fn bits(&self) -> &[u8] {
        match self {
            RescueOutcome::Adjusted { bits, .. } | RescueOutcome::NoAdjustment { bits, .. } => bits,
        }
    }
}

fn median(v: &mut [i32]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] as f64 } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) as f64 })
}

/// RFR / RDR. Cells near each boundary of the page are located with a
/// voltage sweep, the block is aged (retention) or read-stressed (disturb),
/// and the sweep repeated. A cell read on the slow side whose shift reaches
/// the median shift of fast-side cells is moved to the fast side, and a
/// fast-side cell whose shift does not exceed the slow-side median is moved
/// to the slow side.
pub fn rescue(block: &mut FlashBlock, wl: usize, page: PageType, refs: &ReadRefs, kind: RescueKind, cfg: &RescueConfig) -> Result<RescueOutcome> {
    let mut bits = block.read_page(wl, page, refs)?.bits;
    let deg = block.degradation_of(wl);
    let dist = block.channel().distribution_at(block.mode(), &deg)?;
    let gray = block.gray().clone();

    // Per boundary: reference and the sweep grid covering its window.
    let mut windows = Vec::new();
    let mut grid: Vec<Voltage> = Vec::new();
    for b in gray.page_boundaries(page) {
        let r = refs.voltages()[b];
        let half = cfg.window_sigmas * 0.5 * (dist.states[b].stddev + dist.states[b + 1].stddev);
        let steps = (half / cfg.sweep_step).ceil() as i64;
        let pts: Vec<Voltage> = (-steps..=steps).map(|i| r + i as f64 * cfg.sweep_step).collect();
        windows.push((b, r, pts.clone()));
        grid.extend(pts);
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let before = block.sense(wl, &grid)?;

    let induced = match kind {
        RescueKind::Retention => {
            let keys = &block.channel().tables().table(Mechanism::Retention).keys;
            let Some(&next) = keys.iter().find(|&&k| k > deg.retention_s + 1e-6) else {
                return Ok(RescueOutcome::NoAdjustment { bits, reason: "no further retention key".into() });
            };
            block.advance_time(next - deg.retention_s.max(0.0));
            DegradationState { retention_s: next, ..deg }
        }
        RescueKind::Disturb => {
            let other = if wl > 0 { wl - 1 } else { wl + 1 };
            if other >= block.wordlines() {
                return Ok(RescueOutcome::NoAdjustment { bits, reason: "single-wordline block".into() });
            }
            block.sibling_reads(other, cfg.disturb_reads);
            DegradationState { read_disturbs: deg.read_disturbs + cfg.disturb_reads, ..deg }
        }
    };
    let expected = block.channel().distribution_at(block.mode(), &induced)?;
    let after = block.sense(wl, &grid)?;

    let mut window_cells = 0;
    let mut flipped = 0;
    let mut contrast = false;
    for (b, r, pts) in &windows {
        // Both mechanisms move the lower state up relative to the upper one;
        // boundaries where the model expects too little of that are skipped.
        let shift = |i: usize| expected.states[i].mean - dist.states[i].mean;
        if shift(*b) - shift(b + 1) < cfg.min_contrast {
            continue;
        }
        let lo_bin = bin_of(pts[0], &grid) + 1;
        let hi_bin = bin_of(*pts.last().expect("non-empty"), &grid);
        let ref_bin = bin_of(*r, &grid) + 1;
        // (cell, reads above the boundary, shift in the mechanism's direction)
        let cells: Vec<(usize, bool, i32)> = before
            .iter()
            .zip(&after)
            .enumerate()
            .filter(|(_, (&x, _))| (lo_bin..=hi_bin).contains(&(x as usize)))
            .map(|(i, (&x, &y))| {
                let s = y as i32 - x as i32;
                let m = if kind == RescueKind::Retention { -s } else { s };
                (i, x as usize >= ref_bin, m)
            })
            .collect();
        window_cells += cells.len();
        let fast_above = kind == RescueKind::Retention;
        let mut fast: Vec<i32> = cells.iter().filter(|c| c.1 == fast_above).map(|c| c.2).collect();
        let mut slow: Vec<i32> = cells.iter().filter(|c| c.1 != fast_above).map(|c| c.2).collect();
        let (Some(mf), Some(ms)) = (median(&mut fast), median(&mut slow)) else { continue };
        if mf <= ms {
            continue;
        }
        contrast = true;
        let bit_below = gray.bit(*b, page);
        let bit_above = gray.bit(b + 1, page);
        for &(i, above, m) in &cells {
            let on_fast = above == fast_above;
            let to_above = if on_fast && (m as f64) <= ms {
                Some(!fast_above)
            } else if !on_fast && (m as f64) >= mf {
                Some(fast_above)
            } else {
                None
            };
            if let Some(up) = to_above {
                let nb = if up { bit_above } else { bit_below };
                if bits[i] != nb {
                    bits[i] = nb;
                    flipped += 1;
                }
            }
        }
    }
    if window_cells == 0 {
        return Ok(RescueOutcome::NoAdjustment { bits, reason: "no cells in the susceptible window".into() });
    }
    if !contrast {
        return Ok(RescueOutcome::NoAdjustment { bits, reason: "insufficient shift contrast".into() });
    }
    Ok(RescueOutcome::Adjusted { bits, window_cells, flipped })
}

pub fn rfr(block: &mut FlashBlock, wl: usize, page: PageType, refs: &ReadRefs, cfg: &RescueConfig) -> Result<RescueOutcome> {
    rescue(block, wl, page, refs, RescueKind::Retention, cfg)
}

pub fn rdr(block: &mut FlashBlock, wl: usize, page: PageType, refs: &ReadRefs, cfg: &RescueConfig) -> Result<RescueOutcome> {
    rescue(block, wl, page, refs, RescueKind::Disturb, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bch::BchCode;
    use crate::calibration::{DAY, MONTH, YEAR};
    use crate::voltage::CellMode;

    fn bch_superpage(dies: usize, wordlines: usize, seed: u64) -> Superpage {
        let cfg = BlockConfig { wordlines, bitlines: 1023, ..BlockConfig::default() };
        let codec = FlowCodec::Bch(BchPageCodec::new(BchCode::new(10, 8).unwrap(), 1023).unwrap());
        let mut sp = Superpage::new(1, dies, true, cfg, ChannelModel::builtin(), codec, seed).unwrap();
        sp.program_random(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        sp
    }

    #[test]
    fn parity_invariant_and_xor_recovery() {
        let mut sp = bch_superpage(4, 2, 1);
        for p in 0..sp.pages_written() {
            assert!(sp.parity_holds(p));
        }
        let cfg = FlowConfig::default();
        sp.inject_hgbb(1);
        let out = correct_flow(&mut sp, 1, 2, &cfg).unwrap();
        assert_eq!(out.status, FlowStatus::CorrectedParity);
        assert_eq!(out.data.as_deref(), Some(sp.truth(1, 2)));
        assert!(out.latency_us >= 10_000.0);
        assert_eq!(out.latency_us, out.counts.latency_us(&cfg.timing));
        sp.inject_hgbb(2);
        let out = correct_flow(&mut sp, 1, 2, &cfg).unwrap();
        assert_eq!(out.status, FlowStatus::Uncorrectable);
        assert!(out.data.is_none());
    }

    #[test]
    fn clean_page_is_stage_one() {
        let mut sp = bch_superpage(2, 2, 2);
        sp.advance_time(DAY);
        let cfg = FlowConfig::default();
        let out = correct_flow(&mut sp, 0, 0, &cfg).unwrap();
        assert_eq!(out.status, FlowStatus::CorrectedStage1);
        assert_eq!(out.counts.reads(), 1);
        assert_eq!(out.latency_us, 80.0 + 10.0);
    }

    #[test]
    fn parity_fail_rule() {
        assert!(!parity_fails(&[false, false, false], 0));
        assert!(!parity_fails(&[true, false, false], 0));
        assert!(parity_fails(&[true, true, false], 0));
        assert!(!parity_fails(&[false, true, true], 0));
        assert_eq!(xor_pages([&[1u8, 0, 1][..], &[1, 1, 0][..]]), vec![0, 1, 1]);
    }

    #[test]
    fn ldpc_soft_levels_rescue_hard_failures() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let code = crate::ldpc::LdpcCode::construct(1024, 922, 3, &mut rng).unwrap();
        let codec = FlowCodec::Ldpc(LdpcPageCodec::new(code, Default::default(), 1024).unwrap());
        let cfg = BlockConfig { wordlines: 4, bitlines: 1024, ..BlockConfig::default() };
        let mut sp = Superpage::new(1, 2, true, cfg, ChannelModel::builtin(), codec, 7).unwrap();
        sp.fast_forward_wear(3000).unwrap();
        sp.program_random(&mut rng).unwrap();
        sp.advance_time(YEAR);
        let flow = FlowConfig { parity: false, ..Default::default() };
        let mut stage2 = 0;
        for page in 0..sp.pages_written() {
            let out = correct_flow(&mut sp, 0, page, &flow).unwrap();
            if out.status == FlowStatus::CorrectedStage2 {
                stage2 += 1;
                assert!(out.soft_levels >= 1);
                let expect = 80.0 + 10.0 + out.soft_levels as f64 * 110.0;
                assert!((out.latency_us - expect).abs() < 1e-9);
            }
            if out.status != FlowStatus::Uncorrectable {
                assert_eq!(out.data.as_deref(), Some(sp.truth(0, page)));
            }
        }
        assert!(stage2 > 0);
    }

    fn errors(a: &[u8], b: &[u8]) -> usize {
        a.iter().zip(b).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn rfr_reduces_retention_errors() {
        let ch = ChannelModel::builtin();
        let mut improved = 0;
        for seed in 0..10 {
            let cfg = BlockConfig { wordlines: 2, bitlines: 4096, ..BlockConfig::default() };
            let mut b = FlashBlock::new(0, cfg, ch.clone(), seed).unwrap();
            b.fast_forward_wear(3000).unwrap();
            b.program_random(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            b.advance_time(3.0 * MONTH);
            let refs = ch.frozen_refs(CellMode::Tlc);
            let truth = b.written_bits(0, PageType::Msb);
            let raw = b.read_page(0, PageType::Msb, &refs).unwrap().bits;
            let out = rfr(&mut b, 0, PageType::Msb, &refs, &RescueConfig::default()).unwrap();
            let RescueOutcome::Adjusted { bits, window_cells, .. } = out else { panic!("{out:?}") };
            assert!(window_cells > 0);
            // Nothing outside the windows changes.
            let n_changed = errors(&bits, &raw);
            assert!(n_changed <= window_cells);
            if errors(&bits, &truth) < errors(&raw, &truth) {
                improved += 1;
            }
        }
        assert!(improved >= 9, "{improved}");
    }

    #[test]
    fn rdr_reduces_disturb_errors() {
        let ch = ChannelModel::builtin();
        let mut improved = 0;
        for seed in 0..10 {
            let cfg = BlockConfig { wordlines: 2, bitlines: 4096, disturb_on_read: false, ..BlockConfig::default() };
            let mut b = FlashBlock::new(0, cfg, ch.clone(), seed).unwrap();
            b.fast_forward_wear(3000).unwrap();
            b.program_random(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            b.advance_time(DAY);
            b.inject_read_disturb(20_000);
            let refs = ch.frozen_refs(CellMode::Tlc);
            let truth = b.written_bits(1, PageType::Msb);
            let raw = b.read_page(1, PageType::Msb, &refs).unwrap().bits;
            let cfgr = RescueConfig::default();
            let out = rdr(&mut b, 1, PageType::Msb, &refs, &cfgr).unwrap();
            if errors(out.bits(), &truth) < errors(&raw, &truth) {
                improved += 1;
            }
        }
        assert!(improved >= 9, "{improved}");
    }

    #[test]
    fn empty_window_is_identity() {
        let ch = ChannelModel::builtin();
        let cfg = BlockConfig { wordlines: 2, bitlines: 64, ..BlockConfig::default() };
        let mut b = FlashBlock::new(0, cfg, ch.clone(), 1).unwrap();
        b.program_random(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // References far from every state put no cell inside the windows.
        let refs = ReadRefs::new(vec![-250.0, -240.0, -230.0, -220.0, -210.0, -200.0, -190.0]).unwrap();
        let raw = b.read_page(0, PageType::Lsb, &refs).unwrap().bits;
        let cfgr = RescueConfig { window_sigmas: 0.01, ..Default::default() };
        let out = rfr(&mut b, 0, PageType::Lsb, &refs, &cfgr).unwrap();
        assert!(matches!(out, RescueOutcome::NoAdjustment { .. }));
        assert_eq!(out.bits(), &raw[..]);
    }
}
