//! A small page-mapped flash translation layer: out-of-place writes, greedy
//! garbage collection, min-P/E wear leveling, WARM hot/cold pools, periodic
//! refresh, and workload generation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ecc::PageCodec;
use crate::error::{Error, Result};
use crate::mitigation::{warm_manage, WarmConfig};
use crate::recovery::{correct_flow, FlowConfig, FlowOutcome, FlowStatus, Superpage};

#[derive(Clone, Debug, PartialEq)]
pub struct MediaRead {
    /// `None` when the page could not be corrected.
    pub data: Option<Vec<u8>>,
    pub flows: Vec<FlowOutcome>,
}

/// Physical storage under the FTL. Pages of a block are programmed in order.
pub trait Media {
    fn blocks(&self) -> usize;
    fn pages_per_block(&self) -> usize;
    fn payload_len(&self) -> usize;
    fn program(&mut self, block: usize, page: usize, data: &[u8]) -> Result<()>;
    fn read(&mut self, block: usize, page: usize) -> Result<MediaRead>;
    fn erase(&mut self, block: usize) -> Result<()>;
}

/// Error-free storage.
pub struct MemoryMedia {
    ppb: usize,
    payload: usize,
    pages: Vec<Vec<Option<Vec<u8>>>>,
}

impl MemoryMedia {
    pub fn new(blocks: usize, pages_per_block: usize, payload_len: usize) -> Self {
        MemoryMedia { ppb: pages_per_block, payload: payload_len, pages: vec![vec![None; pages_per_block]; blocks] }
    }
}

impl Media for MemoryMedia {
    fn blocks(&self) -> usize {
        self.pages.len()
    }

    fn pages_per_block(&self) -> usize {
        self.ppb
    }

    fn payload_len(&self) -> usize {
        self.payload
    }

    fn program(&mut self, block: usize, page: usize, data: &[u8]) -> Result<()> {
        let slot = &mut self.pages[block][page];
        if slot.is_some() {
            return Err(Error::Reprogram(format!("block {block} page {page}")));
        }
        *slot = Some(data.to_vec());
        Ok(())
    }

    fn read(&mut self, block: usize, page: usize) -> Result<MediaRead> {
        Ok(MediaRead { data: self.pages[block][page].clone(), flows: Vec::new() })
    }

    fn erase(&mut self, block: usize) -> Result<()> {
        self.pages[block].fill(None);
        Ok(())
    }
}

/// Simulated flash: every FTL block is a superpage-striped set of dies, and
/// reads go through the full correction flow.
pub struct FlashMedia {
    superpages: Vec<Superpage>,
    flow: FlowConfig,
}

impl FlashMedia {
    pub fn new(superpages: Vec<Superpage>, flow: FlowConfig) -> Result<Self> {
        let Some(first) = superpages.first() else {
            return Err(Error::Parameter("no superpages".into()));
        };
        let ppb = first.pages();
        if superpages.iter().any(|s| s.pages() != ppb || s.lbs() != first.lbs()) {
            return Err(Error::Parameter("superpages must share geometry".into()));
        }
        Ok(FlashMedia { superpages, flow })
    }

    pub fn superpage(&self, i: usize) -> &Superpage {
        &self.superpages[i]
    }

    pub fn superpage_mut(&mut self, i: usize) -> &mut Superpage {
        &mut self.superpages[i]
    }
}

impl Media for FlashMedia {
    fn blocks(&self) -> usize {
        self.superpages.len()
    }

    fn pages_per_block(&self) -> usize {
        self.superpages[0].pages()
    }

    fn payload_len(&self) -> usize {
        let s = &self.superpages[0];
        s.data_dies().len() * s.codec().data_bits()
    }

    fn program(&mut self, block: usize, page: usize, data: &[u8]) -> Result<()> {
        if data.len() != self.payload_len() {
            return Err(Error::Length { expected: self.payload_len(), got: data.len() });
        }
        let sp = &mut self.superpages[block];
        if sp.pages_written() != page {
            return Err(Error::Sequence { expected: format!("page {}", sp.pages_written()), got: format!("page {page}") });
        }
        let chunk = sp.codec().data_bits();
        let parts: Vec<Vec<u8>> = data.chunks(chunk).map(<[u8]>::to_vec).collect();
        sp.program_next(&parts)?;
        Ok(())
    }

    fn read(&mut self, block: usize, page: usize) -> Result<MediaRead> {
        let cap = self.payload_len();
        let sp = &mut self.superpages[block];
        let mut data = Some(Vec::with_capacity(cap));
        let mut flows = Vec::new();
        for die in sp.data_dies() {
            let out = correct_flow(sp, die, page, &self.flow)?;
            match (&mut data, &out.data) {
                (Some(acc), Some(d)) => acc.extend_from_slice(d),
                _ => data = None,
            }
            flows.push(out);
        }
        Ok(MediaRead { data, flows })
    }

    fn erase(&mut self, block: usize) -> Result<()> {
        self.superpages[block].erase()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Cold,
    Hot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtlConfig {
    /// Logical pages exposed to the host.
    pub footprint: usize,
    /// GC runs while fewer free blocks than this remain.
    pub gc_watermark: usize,
    pub warm: Option<WarmConfig>,
    /// Host writes per WARM statistics window.
    pub warm_window: u64,
    /// Simulated seconds per host request.
    pub seconds_per_request: f64,
    /// Cold blocks older than this are rewritten. `None` disables refresh.
    pub refresh_interval: Option<f64>,
    /// Rewrite pages that needed more than a hard decode.
    pub relocate_on_recovery: bool,
}

impl Default for FtlConfig {
    fn default() -> Self {
        FtlConfig {
            footprint: 1024,
            gc_watermark: 2,
            warm: None,
            warm_window: 10_000,
            seconds_per_request: 0.0,
            refresh_interval: None,
            relocate_on_recovery: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FtlStats {
    pub host_writes: u64,
    pub host_reads: u64,
    pub gc_writes: u64,
    pub refresh_writes: u64,
    pub relocation_writes: u64,
    pub gc_runs: u64,
    pub erases: u64,
    pub uncorrectable_reads: u64,
}

impl FtlStats {
    pub fn background_writes(&self) -> u64 {
        self.gc_writes + self.refresh_writes + self.relocation_writes
    }

    pub fn write_amplification(&self) -> f64 {
        if self.host_writes == 0 {
            return 1.0;
        }
        (self.host_writes + self.background_writes()) as f64 / self.host_writes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostRead {
    pub data: Option<Vec<u8>>,
    /// The LBA was never written; `data` holds the erased pattern.
    pub unwritten: bool,
    pub status: Option<FlowStatus>,
}

#[derive(Clone, Debug)]
struct BlockInfo {
    pe: u32,
    written: usize,
    valid: usize,
    /// LBA last written to each page, kept after invalidation.
    lba: Vec<Option<u64>>,
    live: Vec<bool>,
    pool: Pool,
    opened_at: f64,
    open_seq: u64,
}

/// Block with the fewest P/E cycles, ties to the lowest id.
pub fn select_free_block(free: &[usize], pe: impl Fn(usize) -> u32) -> Option<usize> {
    free.iter().copied().min_by_key(|&b| (pe(b), b))
}

pub struct Ftl<M: Media> {
    cfg: FtlConfig,
    media: M,
    blocks: Vec<BlockInfo>,
    l2p: Vec<Option<(usize, usize)>>,
    free: Vec<usize>,
    open: [Option<usize>; 2],
    seq: u64,
    now: f64,
    stats: FtlStats,
    window_counts: Vec<u64>,
    hot_until: Vec<u64>,
}

impl<M: Media> Ftl<M> {
    pub fn new(media: M, cfg: FtlConfig) -> Result<Self> {
        let ppb = media.pages_per_block();
        let n = media.blocks();
        if cfg.footprint == 0 || ppb == 0 {
            return Err(Error::Config("footprint and block size must be positive".into()));
        }
        let reserve = (cfg.gc_watermark + 2) * ppb;
        if n * ppb < cfg.footprint + reserve {
            return Err(Error::Capacity(format!(
                "{} physical pages cannot hold {} logical pages plus the GC reserve",
                n * ppb,
                cfg.footprint
            )));
        }
        let blocks = (0..n)
            .map(|_| BlockInfo {
                pe: 0,
                written: 0,
                valid: 0,
                lba: vec![None; ppb],
                live: vec![false; ppb],
                pool: Pool::Cold,
                opened_at: 0.0,
                open_seq: 0,
            })
            .collect();
        Ok(Ftl {
            l2p: vec![None; cfg.footprint],
            window_counts: vec![0; cfg.footprint],
            hot_until: vec![0; cfg.footprint],
            free: (0..n).collect(),
            open: [None, None],
            seq: 0,
            now: 0.0,
            stats: FtlStats::default(),
            blocks,
            media,
            cfg,
        })
    }

    pub fn stats(&self) -> &FtlStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = FtlStats::default();
    }

    pub fn media(&self) -> &M {
        &self.media
    }

    pub fn media_mut(&mut self) -> &mut M {
        &mut self.media
    }

    pub fn config(&self) -> &FtlConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn pe_counts(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.pe).collect()
    }

    pub fn is_hot(&self, lba: u64) -> bool {
        self.cfg.warm.is_some() && self.hot_until[lba as usize] > self.stats.host_writes
    }

    /// (valid, invalid, free) page counts over the whole device.
    pub fn page_accounting(&self) -> (usize, usize, usize) {
        let ppb = self.media.pages_per_block();
        let valid: usize = self.blocks.iter().map(|b| b.valid).sum();
        let written: usize = self.blocks.iter().map(|b| b.written).sum();
        (valid, written - valid, self.blocks.len() * ppb - written)
    }

    /// Invalid pages still holding older copies of `lba`.
    pub fn stale_copies(&self, lba: u64) -> usize {
        self.blocks
            .iter()
            .map(|b| b.lba[..b.written].iter().zip(&b.live).filter(|(l, &v)| **l == Some(lba) && !v).count())
            .sum()
    }

    fn check_lba(&self, lba: u64) -> Result<usize> {
        let i = lba as usize;
        if i >= self.cfg.footprint {
            return Err(Error::Parameter(format!("LBA {lba} beyond footprint {}", self.cfg.footprint)));
        }
        Ok(i)
    }

    fn take_free(&mut self, pool: Pool) -> Result<usize> {
        let b = select_free_block(&self.free, |b| self.blocks[b].pe)
            .ok_or_else(|| Error::Capacity("no free block".into()))?;
        self.free.retain(|&x| x != b);
        self.seq += 1;
        let info = &mut self.blocks[b];
        info.pool = pool;
        info.opened_at = self.now;
        info.open_seq = self.seq;
        Ok(b)
    }

    fn append(&mut self, pool: Pool, lba: usize, data: &[u8]) -> Result<()> {
        let ppb = self.media.pages_per_block();
        let slot = pool as usize;
        let b = match self.open[slot] {
            Some(b) if self.blocks[b].written < ppb => b,
            _ => {
                let b = self.take_free(pool)?;
                self.open[slot] = Some(b);
                b
            }
        };
        let page = self.blocks[b].written;
        self.media.program(b, page, data)?;
        let info = &mut self.blocks[b];
        info.written += 1;
        info.valid += 1;
        info.lba[page] = Some(lba as u64);
        info.live[page] = true;
        self.l2p[lba] = Some((b, page));
        Ok(())
    }

    fn invalidate(&mut self, lba: usize) {
        if let Some((b, p)) = self.l2p[lba].take() {
            self.blocks[b].live[p] = false;
            self.blocks[b].valid -= 1;
        }
    }

    fn is_open(&self, b: usize) -> bool {
        self.open.contains(&Some(b))
    }

    fn closed_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.blocks.len()).filter(|&b| self.blocks[b].written > 0 && !self.is_open(b))
    }

    /// Greedy victim (most invalid pages); inside an active WARM hot pool,
    /// the oldest hot block.
    fn select_victim(&self, pool: Pool) -> Option<usize> {
        if self.cfg.warm.is_some() && pool == Pool::Hot {
            let hot = self
                .closed_blocks()
                .filter(|&b| self.blocks[b].pool == Pool::Hot)
                .min_by_key(|&b| self.blocks[b].open_seq);
            if hot.is_some() {
                return hot;
            }
        }
        self.closed_blocks()
            .max_by_key(|&b| (self.blocks[b].written - self.blocks[b].valid, std::cmp::Reverse(b)))
    }

    /// Move every valid page out of `b`, then erase it. Returns pages moved.
    fn evacuate(&mut self, b: usize) -> Result<usize> {
        let pool = self.blocks[b].pool;
        let mut moved = 0;
        for p in 0..self.blocks[b].written {
            if !self.blocks[b].live[p] {
                continue;
            }
            let lba = self.blocks[b].lba[p].expect("live page has an LBA") as usize;
            let r = self.media.read(b, p)?;
            let data = match r.data {
                Some(d) => d,
                None => {
                    self.stats.uncorrectable_reads += 1;
                    return Err(Error::State(format!("uncorrectable page {p} of block {b} during migration")));
                }
            };
            self.invalidate(lba);
            self.append(pool, lba, &data)?;
            moved += 1;
        }
        self.media.erase(b)?;
        let info = &mut self.blocks[b];
        info.pe += 1;
        info.written = 0;
        info.valid = 0;
        info.lba.fill(None);
        info.live.fill(false);
        self.free.push(b);
        self.stats.erases += 1;
        Ok(moved)
    }

    /// One greedy GC pass. Returns the number of migrated pages.
    pub fn garbage_collect(&mut self, pool: Pool) -> Result<usize> {
        let victim = self.select_victim(pool).ok_or_else(|| Error::Capacity("no block to collect".into()))?;
        let info = &self.blocks[victim];
        if info.written == info.valid && self.free.is_empty() {
            return Err(Error::Capacity("no reclaimable block".into()));
        }
        let moved = self.evacuate(victim)?;
        self.stats.gc_runs += 1;
        self.stats.gc_writes += moved as u64;
        Ok(moved)
    }

    fn ensure_free(&mut self, pool: Pool) -> Result<()> {
        let mut guard = 0;
        while self.free.len() < self.cfg.gc_watermark {
            self.garbage_collect(pool)?;
            guard += 1;
            if guard > 4 * self.blocks.len() {
                return Err(Error::Capacity("garbage collection makes no progress".into()));
            }
        }
        Ok(())
    }

    fn classify(&mut self, lba: usize) -> Pool {
        let Some(warm) = self.cfg.warm else { return Pool::Cold };
        self.window_counts[lba] += 1;
        if self.stats.host_writes > 0 && self.stats.host_writes % self.cfg.warm_window == 0 {
            let hot = warm_manage(&self.window_counts, &warm);
            let until = self.stats.host_writes + (warm.cooldown_intervals * self.cfg.warm_window as f64) as u64;
            for (i, h) in hot.iter().enumerate() {
                if *h {
                    self.hot_until[i] = until;
                }
            }
            self.window_counts.fill(0);
        }
        if self.hot_until[lba] > self.stats.host_writes {
            Pool::Hot
        } else {
            Pool::Cold
        }
    }

    fn tick(&mut self) -> Result<()> {
        self.now += self.cfg.seconds_per_request;
        let Some(interval) = self.cfg.refresh_interval else { return Ok(()) };
        let due = |f: &Self, b: usize| {
            let info = &f.blocks[b];
            info.written > 0
                && !f.is_open(b)
                && info.valid > 0
                && f.now - info.opened_at >= interval
                && !(f.cfg.warm.is_some() && info.pool == Pool::Hot)
        };
        let candidates: Vec<usize> = (0..self.blocks.len()).filter(|&b| due(self, b)).collect();
        for b in candidates {
            // Keep the GC reserve intact before rewriting; GC may have
            // recycled the block meanwhile.
            self.ensure_free(self.blocks[b].pool)?;
            if !due(self, b) {
                continue;
            }
            let moved = self.evacuate(b)?;
            self.stats.refresh_writes += moved as u64;
        }
        Ok(())
    }

    pub fn host_write(&mut self, lba: u64, data: &[u8]) -> Result<()> {
        let i = self.check_lba(lba)?;
        if data.len() != self.media.payload_len() {
            return Err(Error::Length { expected: self.media.payload_len(), got: data.len() });
        }
        self.stats.host_writes += 1;
        let pool = self.classify(i);
        self.invalidate(i);
        self.ensure_free(pool)?;
        self.append(pool, i, data)?;
        self.tick()
    }

    pub fn host_read(&mut self, lba: u64) -> Result<HostRead> {
        let i = self.check_lba(lba)?;
        self.stats.host_reads += 1;
        let Some((b, p)) = self.l2p[i] else {
            self.tick()?;
            return Ok(HostRead { data: Some(vec![1; self.media.payload_len()]), unwritten: true, status: None });
        };
        let r = self.media.read(b, p)?;
        let status = r
            .flows
            .iter()
            .map(|f| f.status)
            .max_by_key(|s| match s {
                FlowStatus::CorrectedStage1 => 0,
                FlowStatus::CorrectedStage2 => 1,
                FlowStatus::CorrectedParity => 2,
                FlowStatus::Uncorrectable => 3,
            });
        if r.data.is_none() {
            self.stats.uncorrectable_reads += 1;
        } else if self.cfg.relocate_on_recovery && r.flows.iter().any(FlowOutcome::needs_relocation) {
            let pool = self.blocks[b].pool;
            let data = r.data.clone().expect("checked");
            self.invalidate(i);
            self.ensure_free(pool)?;
            self.append(pool, i, &data)?;
            self.stats.relocation_writes += 1;
        }
        self.tick()?;
        Ok(HostRead { data: r.data, unwritten: false, status })
    }

    /// Replay a request stream; writes carry `payload(lba, version)`.
    pub fn run(&mut self, requests: &[Request], mut payload: impl FnMut(u64, u64) -> Vec<u8>) -> Result<()> {
        let mut version = 0u64;
        for r in requests {
            for l in r.lba..r.lba + r.length.max(1) as u64 {
                match r.op {
                    Op::Write => {
                        version += 1;
                        let d = payload(l, version);
                        self.host_write(l, &d)?;
                    }
                    Op::Read => {
                        self.host_read(l)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    #[serde(alias = "W", alias = "w")]
    Write,
    #[serde(alias = "R", alias = "r")]
    Read,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub lba: u64,
    pub length: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    Uniform,
    /// Zipf over a random permutation of the footprint. `theta: None` tunes
    /// the exponent so `hot_fraction` of the pages take `hot_share` of writes.
    Zipf { theta: Option<f64>, hot_fraction: f64, hot_share: f64 },
    Trace { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub footprint: u64,
    pub requests: usize,
    pub read_fraction: f64,
}

/// Share of accesses to the top `top` of `n` ranks under Zipf(`theta`).
pub fn zipf_top_share(n: usize, top: usize, theta: f64) -> f64 {
    let w = |k: usize| (k as f64).powf(-theta);
    let head: f64 = (1..=top).map(w).sum();
    let all: f64 = head + (top + 1..=n).map(w).sum::<f64>();
    head / all
}

/// Exponent for which the top `hot_fraction` of `n` pages takes `share`.
pub fn zipf_theta_for(n: usize, hot_fraction: f64, share: f64) -> Result<f64> {
    let top = ((hot_fraction * n as f64).round() as usize).max(1);
    if top >= n || !(0.0 < share && share < 1.0) {
        return Err(Error::Parameter("hot set must be a strict subset with share in (0,1)".into()));
    }
    let (mut lo, mut hi) = (0.0, 8.0);
    if zipf_top_share(n, top, hi) < share {
        return Err(Error::Parameter(format!("share {share} unreachable with {top} of {n} pages")));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if zipf_top_share(n, top, mid) < share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Inverse-CDF Zipf sampler over ranks `0..n`.
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, theta: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|k| {
                acc += (k as f64).powf(-theta);
                acc
            })
            .collect();
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        ZipfSampler { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<Request>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_trace<W: Write>(out: W, requests: &[Request]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in requests {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Workload {
    pub fn generate(&self, seed: u64) -> Result<Vec<Request>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.footprint as usize;
        let op = |rng: &mut ChaCha8Rng| if rng.random::<f64>() < self.read_fraction { Op::Read } else { Op::Write };
        match &self.kind {
            WorkloadKind::Uniform => Ok((0..self.requests)
                .map(|_| {
                    let o = op(&mut rng);
                    Request { op: o, lba: rng.random_range(0..self.footprint), length: 1 }
                })
                .collect()),
            WorkloadKind::Zipf { theta, hot_fraction, hot_share } => {
                let theta = match theta {
                    Some(t) => *t,
                    None => zipf_theta_for(n, *hot_fraction, *hot_share)?,
                };
                let z = ZipfSampler::new(n, theta);
                let mut perm: Vec<u64> = (0..self.footprint).collect();
                perm.shuffle(&mut rng);
                Ok((0..self.requests)
                    .map(|_| {
                        let o = op(&mut rng);
                        Request { op: o, lba: perm[z.sample(&mut rng)], length: 1 }
                    })
                    .collect())
            }
            WorkloadKind::Trace { path } => {
                let reqs = read_trace(std::fs::File::open(path)?)?;
                if let Some(r) = reqs.iter().find(|r| r.lba + r.length.max(1) as u64 > self.footprint) {
                    return Err(Error::Parameter(format!("trace request {r:?} outside footprint")));
                }
                Ok(reqs)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaMeasurement {
    pub op: f64,
    pub wa: f64,
    pub stats: FtlStats,
    pub pe_spread: u32,
}

/// Fill the footprint, run `warmup` uniform writes, then measure WA over
/// `measure` more. Physical capacity follows from `op`.
pub fn measure_uniform_wa(footprint: usize, pages_per_block: usize, op: f64, warmup: usize, measure: usize, seed: u64) -> Result<WaMeasurement> {
    let physical = (footprint as f64 * (1.0 + op)).ceil() as usize;
    let blocks = physical.div_ceil(pages_per_block);
    let media = MemoryMedia::new(blocks, pages_per_block, 1);
    let mut ftl = Ftl::new(media, FtlConfig { footprint, ..Default::default() })?;
    for l in 0..footprint as u64 {
        ftl.host_write(l, &[0])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..warmup {
        ftl.host_write(rng.random_range(0..footprint as u64), &[0])?;
    }
    ftl.reset_stats();
    for _ in 0..measure {
        ftl.host_write(rng.random_range(0..footprint as u64), &[0])?;
    }
    let pe = ftl.pe_counts();
    Ok(WaMeasurement {
        op,
        wa: ftl.stats().write_amplification(),
        stats: ftl.stats().clone(),
        pe_spread: pe.iter().max().copied().unwrap_or(0) - pe.iter().min().copied().unwrap_or(0),
    })
}

/// Background writes (GC plus refresh) of a skewed workload with and
/// without WARM on otherwise identical drives.
pub fn warm_comparison(cfg: &FtlConfig, blocks: usize, pages_per_block: usize, requests: &[Request]) -> Result<(FtlStats, FtlStats)> {
    let run = |warm: Option<WarmConfig>| -> Result<FtlStats> {
        let media = MemoryMedia::new(blocks, pages_per_block, 1);
        let mut ftl = Ftl::new(media, FtlConfig { warm, ..cfg.clone() })?;
        for l in 0..cfg.footprint as u64 {
            ftl.host_write(l, &[0])?;
        }
        ftl.reset_stats();
        ftl.run(requests, |_, _| vec![0])?;
        Ok(ftl.stats().clone())
    };
    Ok((run(None)?, run(Some(cfg.warm.unwrap_or_default()))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_ftl(blocks: usize, ppb: usize, footprint: usize) -> Ftl<MemoryMedia> {
        Ftl::new(MemoryMedia::new(blocks, ppb, 8), FtlConfig { footprint, ..Default::default() }).unwrap()
    }

    fn token(lba: u64, v: u64) -> Vec<u8> {
        (lba ^ (v << 20)).to_le_bytes().to_vec()
    }

    #[test]
    fn write_read_and_unwritten() {
        let mut f = mem_ftl(16, 8, 64);
        f.host_write(3, &token(3, 1)).unwrap();
        assert_eq!(f.host_read(3).unwrap().data, Some(token(3, 1)));
        let r = f.host_read(4).unwrap();
        assert!(r.unwritten);
        assert_eq!(r.data, Some(vec![1; 8]));
        assert!(f.host_write(64, &token(0, 0)).is_err());
    }

    #[test]
    fn overwrites_leave_stale_copies() {
        let mut f = mem_ftl(16, 8, 64);
        for v in 0..5 {
            f.host_write(7, &token(7, v)).unwrap();
        }
        assert_eq!(f.stale_copies(7), 4);
        assert_eq!(f.stats().gc_runs, 0);
        let (v, i, fr) = f.page_accounting();
        assert_eq!((v, i, fr), (1, 4, 16 * 8 - 5));
    }

    #[test]
    fn fully_invalid_victim_moves_nothing() {
        let mut f = mem_ftl(8, 4, 8);
        for v in 0..2 {
            for l in 0..4 {
                f.host_write(l, &token(l, v)).unwrap();
            }
        }
        // Block 0 holds only stale copies now.
        assert_eq!(f.garbage_collect(Pool::Cold).unwrap(), 0);
    }

    #[test]
    fn free_block_selection() {
        let pe = [5u32, 2, 9, 2];
        assert_eq!(select_free_block(&[0, 1, 2], |b| pe[b]), Some(1));
        assert_eq!(select_free_block(&[3, 1], |b| pe[b]), Some(1));
        assert_eq!(select_free_block(&[], |b| pe[b]), None);
    }

    #[test]
    fn capacity_checked() {
        assert!(Ftl::new(MemoryMedia::new(4, 4, 1), FtlConfig { footprint: 16, ..Default::default() }).is_err());
    }

    #[test]
    fn wa_falls_with_op() {
        let lo = measure_uniform_wa(4096, 64, 0.10, 40_000, 40_000, 1).unwrap();
        let hi = measure_uniform_wa(4096, 64, 0.50, 40_000, 40_000, 1).unwrap();
        assert!(lo.wa > hi.wa && hi.wa >= 1.0, "{} {}", lo.wa, hi.wa);
        let huge = measure_uniform_wa(4096, 64, 3.0, 40_000, 40_000, 1).unwrap();
        assert!((huge.wa - 1.0).abs() <= 0.02, "{}", huge.wa);
    }

    #[test]
    fn uniform_counts_within_poisson() {
        let w = Workload { kind: WorkloadKind::Uniform, footprint: 100, requests: 10_000, read_fraction: 0.0 };
        let reqs = w.generate(3).unwrap();
        let mut c = [0u32; 100];
        for r in &reqs {
            c[r.lba as usize] += 1;
        }
        assert!(c.iter().all(|&x| (x as f64 - 100.0).abs() <= 40.0));
        assert_eq!(reqs, w.generate(3).unwrap());
    }

    #[test]
    fn zipf_hot_set_takes_the_share() {
        let n = 10_000;
        let theta = zipf_theta_for(n, 0.01, 0.95).unwrap();
        assert!((zipf_top_share(n, 100, theta) - 0.95).abs() < 1e-6);
        let w = Workload {
            kind: WorkloadKind::Zipf { theta: None, hot_fraction: 0.01, hot_share: 0.95 },
            footprint: n as u64,
            requests: 200_000,
            read_fraction: 0.0,
        };
        let reqs = w.generate(1).unwrap();
        let mut c = vec![0u64; n];
        for r in &reqs {
            c[r.lba as usize] += 1;
        }
        c.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = c[..100].iter().sum();
        assert!(top as f64 / 200_000.0 >= 0.94);
    }

    #[test]
    fn trace_round_trip() {
        let reqs = vec![
            Request { op: Op::Write, lba: 1, length: 2 },
            Request { op: Op::Read, lba: 5, length: 1 },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &reqs).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), reqs);
        let alt = "op,lba,length\nW,3,1\nr,4,2\n";
        let got = read_trace(alt.as_bytes()).unwrap();
        assert_eq!(got[0].op, Op::Write);
        assert_eq!(got[1], Request { op: Op::Read, lba: 4, length: 2 });
    }

    #[test]
    fn warm_captures_hot_pages() {
        let n = 2000;
        let w = Workload {
            kind: WorkloadKind::Zipf { theta: None, hot_fraction: 0.01, hot_share: 0.95 },
            footprint: n,
            requests: 60_000,
            read_fraction: 0.0,
        };
        let reqs = w.generate(2).unwrap();
        let mut f = Ftl::new(
            MemoryMedia::new(48, 64, 1),
            FtlConfig { footprint: n as usize, warm: Some(WarmConfig::default()), warm_window: 5_000, ..Default::default() },
        )
        .unwrap();
        f.run(&reqs, |_, _| vec![0]).unwrap();
        let hot_writes = reqs[40_000..].iter().filter(|r| f.is_hot(r.lba)).count();
        assert!(hot_writes as f64 / 20_000.0 >= 0.9, "{hot_writes}");
    }
}
