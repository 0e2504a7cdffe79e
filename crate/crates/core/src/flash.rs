//! Monte Carlo cell array. Each cell keeps a program-noise latent drawn when
//! it is programmed and two susceptibility latents (retention, disturb) fixed
//! for the life of the block; its threshold voltage at any moment is the
//! calibrated state distribution at the wordline's degradation evaluated at
//! those latents, plus any interference or refresh offset it has collected.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::degradation::{CellCoeffs, ChannelModel, CouplingCoefficients, DegradationState};
use crate::error::{Error, Result};
use crate::voltage::{bin_of, CellMode, GrayMap, PageType, ReadRefs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramMode {
    OneShot,
    TwoStep,
    FoggyFine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sequencing {
    BadSequence,
    ShadowMlc,
    ShadowTlc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialState {
    Erased,
    LsbProgrammed,
    BinaryFoggy,
    FullyProgrammed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageAddr {
    pub block: usize,
    pub wordline: usize,
    pub page_type: PageType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub wordlines: usize,
    pub bitlines: usize,
    pub mode: CellMode,
    pub program_mode: ProgramMode,
    pub sequencing: Sequencing,
    pub endurance: u32,
    /// Explicit cell-to-cell coupling. Off by default because the calibrated
    /// distributions already include average interference.
    pub coupling: Option<CouplingCoefficients>,
    pub disturb_on_read: bool,
    /// Test hook: multiplies the spread of the ER and temporary states.
    pub internal_sigma_scale: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            wordlines: 64,
            bitlines: 4096,
            mode: CellMode::Tlc,
            program_mode: ProgramMode::OneShot,
            sequencing: Sequencing::BadSequence,
            endurance: 3000,
            coupling: None,
            disturb_on_read: true,
            internal_sigma_scale: 1.0,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wordlines == 0 || self.bitlines == 0 {
            return Err(Error::Config("block geometry must be non-empty".into()));
        }
        if self.endurance == 0 {
            return Err(Error::Config("endurance must be positive".into()));
        }
        check_modes(self.mode, self.program_mode, self.sequencing)
    }
}

fn check_modes(mode: CellMode, pm: ProgramMode, seq: Sequencing) -> Result<()> {
    let bits = mode.bits();
    match pm {
        ProgramMode::TwoStep if bits != 2 => {
            return Err(Error::Config(format!("two-step programming needs a 2-bit mode, not {mode:?}")))
        }
        ProgramMode::FoggyFine if bits != 3 => {
            return Err(Error::Config(format!("foggy-fine programming needs TLC, not {mode:?}")))
        }
        _ => {}
    }
    match seq {
        Sequencing::ShadowMlc if bits != 2 => Err(Error::Config("shadow_mlc sequencing needs a 2-bit mode".into())),
        Sequencing::ShadowTlc if bits != 3 => Err(Error::Config("shadow_tlc sequencing needs TLC".into())),
        _ => Ok(()),
    }
}

/// Page programming order as (wordline, page type) pairs; position in the
/// list is the page number.
pub fn page_program_order(seq: Sequencing, mode: CellMode, wordlines: usize) -> Vec<(usize, PageType)> {
    let pages = mode.page_types();
    let n = wordlines;
    let mut out = Vec::with_capacity(n * pages.len());
    match (seq, pages.len()) {
        (_, 1) | (Sequencing::BadSequence, _) => {
            for w in 0..n {
                for &p in pages {
                    out.push((w, p));
                }
            }
        }
        (Sequencing::ShadowMlc, _) => {
            // LSB of wordline i+1 goes before MSB of wordline i
            out.push((0, PageType::Lsb));
            for w in 0..n {
                if w + 1 < n {
                    out.push((w + 1, PageType::Lsb));
                }
                out.push((w, PageType::Msb));
            }
        }
        (Sequencing::ShadowTlc, _) => {
            // diagonal sweep: LSB(i+2), CSB(i+1), MSB(i)
            for d in 0..n + 2 {
                if d < n {
                    out.push((d, PageType::Lsb));
                }
                if d >= 1 && d - 1 < n {
                    out.push((d - 1, PageType::Csb));
                }
                if d >= 2 && d - 2 < n {
                    out.push((d - 2, PageType::Msb));
                }
            }
        }
    }
    out
}

/// Aggregate interference received by one wordline from one program step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceEvent {
    pub victim_wordline: usize,
    pub aggressor_wordline: usize,
    pub aggressor_page: PageType,
    pub victim_fully_programmed: bool,
    pub mean_shift: f64,
    pub total_shift: f64,
}

#[derive(Clone, Debug, Default)]
struct WordlineState {
    programmed: u8,
    t_prog: f64,
    reads_at_prog: u64,
    own_reads: u64,
    own_at_prog: u64,
    extra_disturb: u64,
}

#[derive(Clone, Debug)]
pub struct PageRead {
    pub bits: Vec<u8>,
    pub bins: Vec<u16>,
}

// distribution ids beyond the mode's levels
const TP: u8 = 8;
const BINARY: u8 = 9;
const FOGGY: u8 = 10; // 10 + group, group 1..=3
const N_SHAPES: usize = 14;

pub struct FlashBlock {
    id: usize,
    cfg: BlockConfig,
    channel: ChannelModel,
    rng: ChaCha8Rng,
    mode: CellMode,
    pending_mode: Option<CellMode>,
    gray: GrayMap,
    pe: u32,
    now: f64,
    order: Vec<(usize, PageType)>,
    cursor: usize,
    z: Vec<f32>,
    wr: Vec<f32>,
    wd: Vec<f32>,
    offset: Vec<f32>,
    shape: Vec<u8>,
    data: Vec<u8>,
    wls: Vec<WordlineState>,
    reads_total: u64,
    buffer: HashMap<(usize, PageType), Vec<u8>>,
    log: Vec<InterferenceEvent>,
}

impl FlashBlock {
    pub fn new(id: usize, cfg: BlockConfig, channel: ChannelModel, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cells = cfg.wordlines * cfg.bitlines;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let draw = |n: usize, r: &mut ChaCha8Rng| -> Vec<f32> {
            (0..n).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect()
        };
        let wr = draw(cells, &mut rng);
        let wd = draw(cells, &mut rng);
        let z = draw(cells, &mut rng);
        let mode = cfg.mode;
        Ok(FlashBlock {
            id,
            order: page_program_order(cfg.sequencing, mode, cfg.wordlines),
            gray: mode.gray(),
            mode,
            pending_mode: None,
            channel,
            rng,
            pe: 0,
            now: 0.0,
            cursor: 0,
            z,
            wr,
            wd,
            offset: vec![0.0; cells],
            shape: vec![0; cells],
            data: vec![all_ones(mode); cells],
            wls: vec![WordlineState::default(); cfg.wordlines],
            reads_total: 0,
            buffer: HashMap::new(),
            log: Vec::new(),
            cfg,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn mode(&self) -> CellMode {
        self.mode
    }

    pub fn gray(&self) -> &GrayMap {
        &self.gray
    }

    pub fn wordlines(&self) -> usize {
        self.cfg.wordlines
    }

    pub fn bitlines(&self) -> usize {
        self.cfg.bitlines
    }

    pub fn pe_cycles(&self) -> u32 {
        self.pe
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn pages(&self) -> usize {
        self.order.len()
    }

    pub fn program_order(&self) -> &[(usize, PageType)] {
        &self.order
    }

    pub fn interference_log(&self) -> &[InterferenceEvent] {
        &self.log
    }

    pub fn total_reads(&self) -> u64 {
        self.reads_total
    }

    pub fn is_erased(&self) -> bool {
        self.cursor == 0
    }

    pub fn is_full(&self) -> bool {
        self.cursor == self.order.len()
    }

    pub fn partial_state(&self, wl: usize) -> PartialState {
        let done = self.wls[wl].programmed.count_ones() as usize;
        match done {
            0 => PartialState::Erased,
            d if d == self.mode.bits() => PartialState::FullyProgrammed,
            1 => PartialState::LsbProgrammed,
            _ => PartialState::BinaryFoggy,
        }
    }

    pub fn is_programmed(&self, wl: usize, page: PageType) -> bool {
        match self.mode.page_slot(page) {
            Some(s) => self.wls[wl].programmed & (1 << s) != 0,
            None => false,
        }
    }

    pub fn next_page(&self) -> Option<(usize, PageType)> {
        self.order.get(self.cursor).copied()
    }

    pub fn advance_time(&mut self, seconds: f64) {
        self.now += seconds.max(0.0);
    }

    /// Jump the wear counter without simulating each cycle.
    pub fn fast_forward_wear(&mut self, pe_cycles: u32) -> Result<()> {
        if pe_cycles > self.cfg.endurance {
            return Err(Error::WornOut(self.cfg.endurance));
        }
        self.pe = pe_cycles;
        Ok(())
    }

    /// Switch cell mode at the next erase (or now, if already erased).
    pub fn set_mode(&mut self, mode: CellMode) -> Result<()> {
        check_modes(mode, self.cfg.program_mode, self.cfg.sequencing)?;
        if !self.is_erased() {
            return Err(Error::State("cell mode can only change on an erased block".into()));
        }
        self.apply_mode(mode);
        Ok(())
    }

    fn apply_mode(&mut self, mode: CellMode) {
        self.mode = mode;
        self.gray = mode.gray();
        self.order = page_program_order(self.cfg.sequencing, mode, self.cfg.wordlines);
        self.data.fill(all_ones(mode));
    }

    pub fn schedule_mode(&mut self, mode: CellMode) -> Result<()> {
        check_modes(mode, self.cfg.program_mode, self.cfg.sequencing)?;
        self.pending_mode = Some(mode);
        Ok(())
    }

    pub fn erase(&mut self) -> Result<()> {
        if self.pe >= self.cfg.endurance {
            return Err(Error::WornOut(self.pe));
        }
        for z in self.z.iter_mut() {
            *z = self.rng.sample::<f64, _>(StandardNormal) as f32;
        }
        self.offset.fill(0.0);
        self.shape.fill(0);
        self.pe += 1;
        self.cursor = 0;
        for w in self.wls.iter_mut() {
            *w = WordlineState { t_prog: self.now, reads_at_prog: self.reads_total, ..Default::default() };
        }
        self.buffer.clear();
        self.log.clear();
        if let Some(m) = self.pending_mode.take() {
            self.apply_mode(m);
        } else {
            self.data.fill(all_ones(self.mode));
        }
        Ok(())
    }

    pub fn degradation_of(&self, wl: usize) -> DegradationState {
        let w = &self.wls[wl];
        let others = (self.reads_total - w.reads_at_prog) - (w.own_reads - w.own_at_prog);
        DegradationState {
            pe_cycles: self.pe,
            retention_s: self.now - w.t_prog,
            read_disturbs: others + w.extra_disturb,
        }
    }

    fn shape_coeffs(&self, deg: &DegradationState) -> Result<[CellCoeffs; N_SHAPES]> {
        let pts = self.channel.points(deg)?;
        let states = self.mode.table_states();
        let k = self.cfg.internal_sigma_scale;
        let mut c = [CellCoeffs::default(); N_SHAPES];
        for (i, s) in states.iter().enumerate() {
            c[i] = pts[s.index()].coeffs();
        }
        let scale = |mut x: CellCoeffs| {
            x.k_prog *= k;
            x.k_ret *= k;
            x.k_dist *= k;
            x
        };
        c[0] = scale(c[0]);
        if self.mode.bits() == 2 {
            // temporary state between the two middle levels
            let mut tp = c[1];
            tp.mean = 0.5 * (c[1].mean + c[2].mean);
            c[TP as usize] = scale(tp);
        }
        if self.mode.bits() == 3 {
            let mut b = c[3];
            b.mean = 0.5 * (c[3].mean + c[4].mean);
            c[BINARY as usize] = scale(b);
            for g in 1..=3usize {
                let lo = c[2 * g];
                let mut f = lo;
                f.mean = lo.mean - 0.5 * lo.stddev();
                c[FOGGY as usize + g] = scale(f);
            }
        }
        Ok(c)
    }

    fn range(&self, wl: usize) -> std::ops::Range<usize> {
        wl * self.cfg.bitlines..(wl + 1) * self.cfg.bitlines
    }

    /// Current analog threshold voltages of a wordline.
    pub fn vth(&self, wl: usize) -> Result<Vec<f64>> {
        let c = self.shape_coeffs(&self.degradation_of(wl))?;
        Ok(self.range(wl).map(|i| self.cell_vth(&c, i)).collect())
    }

    #[inline]
    fn cell_vth(&self, c: &[CellCoeffs; N_SHAPES], i: usize) -> f64 {
        c[self.shape[i] as usize].vth(self.z[i], self.wr[i], self.wd[i]) + self.offset[i] as f64
    }

    /// Level each cell of the wordline was meant to hold (ground truth data).
    pub fn intended_levels(&self, wl: usize) -> Vec<usize> {
        self.range(wl).map(|i| self.gray.level_of(self.data[i])).collect()
    }

    /// Level each cell physically holds (differs from the intent after a
    /// program error).
    pub fn programmed_levels(&self, wl: usize) -> Vec<Option<usize>> {
        let levels = self.mode.levels() as u8;
        self.range(wl).map(|i| (self.shape[i] < levels).then_some(self.shape[i] as usize)).collect()
    }

    pub fn written_bits(&self, wl: usize, page: PageType) -> Vec<u8> {
        let pos = self.gray.bit_position(page).expect("page type in mode");
        self.range(wl).map(|i| (self.data[i] >> pos) & 1).collect()
    }

    pub fn program_page(&mut self, addr: PageAddr, bits: &[u8]) -> Result<()> {
        let (wl, page) = (addr.wordline, addr.page_type);
        if wl >= self.cfg.wordlines {
            return Err(Error::Parameter(format!("wordline {wl} out of range")));
        }
        let slot = self
            .mode
            .page_slot(page)
            .ok_or_else(|| Error::Parameter(format!("{page:?} page absent in {:?}", self.mode)))?;
        if bits.len() != self.cfg.bitlines {
            return Err(Error::Length { expected: self.cfg.bitlines, got: bits.len() });
        }
        if self.wls[wl].programmed & (1 << slot) != 0 {
            return Err(Error::Reprogram(format!("wordline {wl} {page:?}")));
        }
        match self.next_page() {
            Some(next) if next == (wl, page) => {}
            next => {
                return Err(Error::Sequence { expected: format!("{next:?}"), got: format!("{:?}", (wl, page)) });
            }
        }

        let aged = self.shape_coeffs(&self.degradation_of(wl))?;
        let coeffs = self.shape_coeffs(&DegradationState::new(self.pe, 0.0, 0))?;
        let range = self.range(wl);
        let before: Vec<f64> = if self.cfg.coupling.is_some() {
            range.clone().map(|i| self.cell_vth(&coeffs, i)).collect()
        } else {
            Vec::new()
        };

        let pos = self.gray.bit_position(page).expect("slot implies position");
        for (j, i) in range.clone().enumerate() {
            self.data[i] = (self.data[i] & !(1 << pos)) | ((bits[j] & 1) << pos);
        }
        let done = self.wls[wl].programmed | (1 << slot);
        let last = done.count_ones() as usize == self.mode.bits();
        let levels = self.mode.levels() as u8;

        // decide the new shape of every cell on the wordline
        let mut new_shape: Vec<u8> = self.shape[range.clone()].to_vec();
        match (self.cfg.program_mode, self.mode.bits()) {
            (ProgramMode::TwoStep, 2) => {
                if page == PageType::Lsb {
                    for (j, s) in new_shape.iter_mut().enumerate() {
                        if bits[j] & 1 == 0 {
                            *s = TP;
                        }
                    }
                } else {
                    // internal LSB re-read against the ER/TP midpoint
                    let internal = 0.5 * (aged[0].mean + aged[TP as usize].mean);
                    for (j, i) in range.clone().enumerate() {
                        let v = self.cell_vth(&aged, i);
                        let lsb = if v > internal { 0 } else { 1 };
                        let code = ((bits[j] & 1) << 1) | lsb;
                        new_shape[j] = self.gray.level_of(code) as u8;
                    }
                }
            }
            (ProgramMode::FoggyFine, 3) if !last => {
                for (j, i) in range.clone().enumerate() {
                    let code = self.data[i];
                    new_shape[j] = match page {
                        PageType::Lsb => {
                            if code & 1 == 0 {
                                BINARY
                            } else {
                                0
                            }
                        }
                        _ => {
                            let level = foggy_group(code);
                            if level == 0 {
                                0
                            } else {
                                FOGGY + level
                            }
                        }
                    };
                }
                self.buffer.insert((wl, page), bits.iter().map(|b| b & 1).collect());
            }
            _ => {
                if last {
                    for (j, i) in range.clone().enumerate() {
                        new_shape[j] = self.gray.level_of(self.data[i]) as u8;
                    }
                } else {
                    self.buffer.insert((wl, page), bits.iter().map(|b| b & 1).collect());
                }
            }
        }
        debug_assert!(new_shape.iter().all(|&s| (s as usize) < N_SHAPES && (s < levels || s >= TP)));

        for (j, i) in range.clone().enumerate() {
            let fresh = self.rng.sample::<f64, _>(StandardNormal) as f32;
            if new_shape[j] != self.shape[i] {
                self.shape[i] = new_shape[j];
                self.z[i] = fresh;
                self.offset[i] = 0.0;
            }
        }
        if last {
            self.buffer.retain(|k, _| k.0 != wl);
        }

        let w = &mut self.wls[wl];
        w.programmed = done;
        w.t_prog = self.now;
        w.reads_at_prog = self.reads_total;
        w.own_at_prog = w.own_reads;
        w.extra_disturb = 0;
        self.cursor += 1;

        if let Some(k) = self.cfg.coupling {
            let after: Vec<f64> = range.clone().map(|i| self.cell_vth(&coeffs, i)).collect();
            let dv: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            self.couple(wl, page, &dv, &k);
        }
        Ok(())
    }

    fn couple(&mut self, wl: usize, page: PageType, dv: &[f64], k: &CouplingCoefficients) {
        let nb = self.cfg.bitlines;
        let full = self.mode.bits() as u32;
        for victim in [wl.wrapping_sub(1), wl + 1] {
            if victim >= self.cfg.wordlines || self.wls[victim].programmed == 0 {
                continue;
            }
            let base = victim * nb;
            let mut total = 0.0;
            for b in 0..nb {
                let mut s = k.wordline * dv[b];
                if b > 0 {
                    s += k.diagonal * dv[b - 1];
                }
                if b + 1 < nb {
                    s += k.diagonal * dv[b + 1];
                }
                self.offset[base + b] += s as f32;
                total += s;
            }
            self.log.push(InterferenceEvent {
                victim_wordline: victim,
                aggressor_wordline: wl,
                aggressor_page: page,
                victim_fully_programmed: self.wls[victim].programmed.count_ones() == full,
                mean_shift: total / nb as f64,
                total_shift: total,
            });
        }
    }

    fn note_read(&mut self, wl: usize, count: u64) {
        if self.cfg.disturb_on_read {
            self.reads_total += count;
            self.wls[wl].own_reads += count;
        }
    }

    /// Read one page with a full reference set (one voltage per level
    /// boundary). Returns the decoded bits and each cell's level bin.
    pub fn read_page(&mut self, wl: usize, page: PageType, refs: &ReadRefs) -> Result<PageRead> {
        if refs.len() + 1 != self.mode.levels() {
            return Err(Error::Parameter(format!(
                "{:?} read needs {} references, got {}",
                self.mode,
                self.mode.levels() - 1,
                refs.len()
            )));
        }
        let pos = self
            .gray
            .bit_position(page)
            .ok_or_else(|| Error::Parameter(format!("{page:?} page absent in {:?}", self.mode)))?;
        let deg = self.degradation_of(wl);
        let c = self.shape_coeffs(&deg)?;
        let r = refs.voltages();
        let mut bins = Vec::with_capacity(self.cfg.bitlines);
        for i in self.range(wl) {
            bins.push(bin_of(self.cell_vth(&c, i), r) as u16);
        }
        let state = self.partial_state(wl);
        let bits: Vec<u8> = if state == PartialState::FullyProgrammed {
            bins.iter().map(|&b| (self.gray.code(b as usize) >> pos) & 1).collect()
        } else if let Some(buf) = self.buffer.get(&(wl, page)) {
            buf.clone()
        } else if state == PartialState::LsbProgrammed
            && page == PageType::Lsb
            && self.cfg.program_mode == ProgramMode::TwoStep
        {
            let internal = 0.5 * (c[0].mean + c[TP as usize].mean);
            self.range(wl).map(|i| u8::from(self.cell_vth(&c, i) <= internal)).collect()
        } else {
            vec![1; self.cfg.bitlines]
        };
        self.note_read(wl, 1);
        Ok(PageRead { bits, bins })
    }

    /// Sense a wordline against arbitrary ascending voltages; one read op.
    pub fn sense(&mut self, wl: usize, voltages: &[f64]) -> Result<Vec<u16>> {
        if voltages.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::UnsortedReferences);
        }
        let c = self.shape_coeffs(&self.degradation_of(wl))?;
        let out = self.range(wl).map(|i| bin_of(self.cell_vth(&c, i), voltages) as u16).collect();
        self.note_read(wl, 1);
        Ok(out)
    }

    /// Account `count` reads that target wordline `wl`: every other wordline
    /// of the block collects the disturb.
    pub fn sibling_reads(&mut self, wl: usize, count: u64) {
        self.reads_total += count;
        self.wls[wl].own_reads += count;
    }

    /// Add disturb to every wordline (reads applied elsewhere in the chip).
    pub fn inject_read_disturb(&mut self, count: u64) {
        for w in self.wls.iter_mut() {
            w.extra_disturb += count;
        }
    }

    /// V-ISPP: raise cells below `verify[level]` to that level, in `step`
    /// increments. Never lowers a cell. Returns the number of cells pulsed.
    pub fn vispp_refresh(&mut self, wl: usize, verify: &[f64], step: f64) -> Result<usize> {
        if self.partial_state(wl) != PartialState::FullyProgrammed {
            return Ok(0);
        }
        let c = self.shape_coeffs(&self.degradation_of(wl))?;
        let mut pulsed = 0;
        for i in self.range(wl) {
            let level = self.gray.level_of(self.data[i]);
            if level == 0 || self.shape[i] as usize != level {
                continue;
            }
            let v = self.cell_vth(&c, i);
            if v < verify[level] {
                let pulses = ((verify[level] - v) / step).ceil().max(1.0);
                self.offset[i] += (pulses * step) as f32;
                pulsed += 1;
            }
        }
        Ok(pulsed)
    }

    /// Program every page in sequence with random balanced data.
    pub fn program_random(&mut self, data_rng: &mut impl Rng) -> Result<()> {
        while let Some((wl, page)) = self.next_page() {
            let bits: Vec<u8> = (0..self.cfg.bitlines).map(|_| data_rng.random::<bool>() as u8).collect();
            self.program_page(PageAddr { block: self.id, wordline: wl, page_type: page }, &bits)?;
        }
        Ok(())
    }

    /// Debug dump: one CSV row per cell.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "wordline,bitline,intended_level,shape,vth")?;
        for wl in 0..self.cfg.wordlines {
            let v = self.vth(wl)?;
            for (b, i) in self.range(wl).enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{:.4}",
                    wl,
                    b,
                    self.gray.level_of(self.data[i]),
                    self.shape[i],
                    v[b]
                )?;
            }
        }
        Ok(())
    }
}

fn all_ones(mode: CellMode) -> u8 {
    ((1u16 << mode.bits()) - 1) as u8
}

/// Foggy target group for TLC: index of the consecutive level pair selected
/// by the (CSB, LSB) bits; 0 is the erased pair.
fn foggy_group(code: u8) -> u8 {
    match code & 0b011 {
        0b011 => 0,
        0b001 => 1,
        0b000 => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::DAY;
    use crate::degradation::ProcessNode;
    use crate::voltage::{analytic_rber, State, StateDistribution};

    fn block(cfg: BlockConfig, seed: u64) -> FlashBlock {
        FlashBlock::new(0, cfg, ChannelModel::builtin(), seed).unwrap()
    }

    fn addr(wl: usize, p: PageType) -> PageAddr {
        PageAddr { block: 0, wordline: wl, page_type: p }
    }

    #[test]
    fn shadow_mlc_numbering() {
        let o = page_program_order(Sequencing::ShadowMlc, CellMode::Mlc, 4);
        use PageType::*;
        assert_eq!(
            o,
            vec![(0, Lsb), (1, Lsb), (0, Msb), (2, Lsb), (1, Msb), (3, Lsb), (2, Msb), (3, Msb)]
        );
        for (i, &(w, p)) in o.iter().enumerate() {
            match p {
                Lsb if w > 0 => assert_eq!(i, 2 * w - 1),
                Msb if w + 1 < 4 => assert_eq!(i, 2 * w + 2),
                _ => {}
            }
        }
    }

    #[test]
    fn orders_are_permutations() {
        for (seq, mode) in [
            (Sequencing::BadSequence, CellMode::Mlc),
            (Sequencing::ShadowMlc, CellMode::Mlc),
            (Sequencing::ShadowTlc, CellMode::Tlc),
            (Sequencing::BadSequence, CellMode::Tlc),
        ] {
            for n in 1..8 {
                let o = page_program_order(seq, mode, n);
                let mut seen = std::collections::HashSet::new();
                for &(w, p) in &o {
                    assert!(w < n);
                    assert!(seen.insert((w, p)));
                }
                assert_eq!(seen.len(), n * mode.bits());
            }
        }
        use PageType::*;
        assert_eq!(
            page_program_order(Sequencing::BadSequence, CellMode::Mlc, 2),
            vec![(0, Lsb), (0, Msb), (1, Lsb), (1, Msb)]
        );
        assert_eq!(
            &page_program_order(Sequencing::ShadowTlc, CellMode::Tlc, 4)[..6],
            &[(0, Lsb), (1, Lsb), (0, Csb), (2, Lsb), (1, Csb), (0, Msb)]
        );
    }

    #[test]
    fn erase_statistics_and_wearout() {
        let cfg = BlockConfig { wordlines: 16, endurance: 3, ..Default::default() };
        let mut b = block(cfg, 1);
        b.erase().unwrap();
        let v: Vec<f64> = (0..16).flat_map(|w| b.vth(w).unwrap()).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean + 110.0).abs() < 4.0 * 45.9 / n.sqrt() + 0.01, "{mean}");
        assert!((sd - 45.9).abs() < 1.0, "{sd}");
        b.erase().unwrap();
        b.erase().unwrap();
        assert!(matches!(b.erase(), Err(Error::WornOut(3))));
    }

    #[test]
    fn erase_resets_cursor() {
        let mut b = block(BlockConfig { wordlines: 4, bitlines: 64, ..Default::default() }, 2);
        b.program_page(addr(0, PageType::Lsb), &vec![0; 64]).unwrap();
        assert_eq!(b.cursor(), 1);
        b.erase().unwrap();
        assert_eq!(b.cursor(), 0);
        assert!(b.is_erased());
    }

    #[test]
    fn sequencing_and_reprogram_errors() {
        let mut b = block(BlockConfig { wordlines: 4, bitlines: 8, ..Default::default() }, 3);
        assert!(matches!(b.program_page(addr(1, PageType::Lsb), &[0; 8]), Err(Error::Sequence { .. })));
        b.program_page(addr(0, PageType::Lsb), &[0; 8]).unwrap();
        assert!(matches!(b.program_page(addr(0, PageType::Lsb), &[0; 8]), Err(Error::Reprogram(_))));
        assert!(matches!(b.program_page(addr(0, PageType::Csb), &[0; 4]), Err(Error::Length { .. })));
    }

    #[test]
    fn all_ones_lsb_keeps_cells_erased() {
        let cfg = BlockConfig {
            wordlines: 4,
            bitlines: 1024,
            mode: CellMode::Mlc,
            program_mode: ProgramMode::TwoStep,
            sequencing: Sequencing::ShadowMlc,
            ..Default::default()
        };
        let mut b = block(cfg, 4);
        b.program_page(addr(0, PageType::Lsb), &vec![1; 1024]).unwrap();
        assert!(b.programmed_levels(0).iter().all(|l| *l == Some(0)));
        assert!(b.vth(0).unwrap().iter().all(|v| *v < 100.0));
    }

    #[test]
    fn noiseless_channel_reads_back_exactly() {
        let mut t = crate::CalibrationTables::builtin();
        for row in t.pe.stddevs.iter_mut().chain(t.retention.stddevs.iter_mut()).chain(t.disturb.stddevs.iter_mut()) {
            for s in row.iter_mut() {
                *s = 1e-6;
            }
        }
        let ch = ChannelModel::new(std::sync::Arc::new(t), false);
        let refs = ch.frozen_refs(CellMode::Tlc);
        let cfg = BlockConfig { wordlines: 8, bitlines: 256, ..Default::default() };
        let mut b = FlashBlock::new(0, cfg, ch, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        b.program_random(&mut rng).unwrap();
        for wl in 0..8 {
            for &p in CellMode::Tlc.page_types() {
                let r = b.read_page(wl, p, &refs).unwrap();
                assert_eq!(r.bits, b.written_bits(wl, p));
            }
        }
    }

    #[test]
    fn interference_hits_lower_wordline_by_wordline_coefficient() {
        let k = CouplingCoefficients::for_node(ProcessNode::Nm1x);
        let cfg = BlockConfig {
            wordlines: 3,
            bitlines: 512,
            mode: CellMode::Mlc,
            program_mode: ProgramMode::TwoStep,
            sequencing: Sequencing::BadSequence,
            coupling: Some(k),
            ..Default::default()
        };
        let mut b = block(cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2 {
            let (w, p) = b.next_page().unwrap();
            let bits: Vec<u8> = (0..512).map(|_| rng.random::<bool>() as u8).collect();
            b.program_page(addr(w, p), &bits).unwrap();
        }
        // WL0 fully programmed; program WL1 LSB then MSB and compare per cell
        b.program_page(addr(1, PageType::Lsb), &vec![0; 512]).unwrap();
        let v0 = b.vth(0).unwrap();
        let v1 = b.vth(1).unwrap();
        let bits: Vec<u8> = (0..512).map(|_| rng.random::<bool>() as u8).collect();
        b.program_page(addr(1, PageType::Msb), &bits).unwrap();
        let w0 = b.vth(0).unwrap();
        let w1 = b.vth(1).unwrap();
        let dv: Vec<f64> = w1.iter().zip(&v1).map(|(a, c)| a - c).collect();
        for i in 0..512 {
            let mut want = k.wordline * dv[i];
            if i > 0 {
                want += k.diagonal * dv[i - 1];
            }
            if i + 1 < 512 {
                want += k.diagonal * dv[i + 1];
            }
            assert!((w0[i] - v0[i] - want).abs() < 1e-3, "cell {i}");
        }
        let ev = b.interference_log().last().unwrap();
        assert_eq!((ev.victim_wordline, ev.aggressor_wordline, ev.aggressor_page), (0, 1, PageType::Msb));
        assert!(ev.victim_fully_programmed);
    }

    #[test]
    fn two_step_program_errors_follow_overlap() {
        let k = 5.0;
        let cfg = BlockConfig {
            wordlines: 8,
            bitlines: 8192,
            mode: CellMode::Mlc,
            program_mode: ProgramMode::TwoStep,
            sequencing: Sequencing::BadSequence,
            internal_sigma_scale: k,
            ..Default::default()
        };
        let mut b = block(cfg, 7);
        let mut hits = 0usize;
        let mut er = 0usize;
        for wl in 0..8 {
            b.program_page(addr(wl, PageType::Lsb), &vec![1; 8192]).unwrap();
            b.program_page(addr(wl, PageType::Msb), &vec![1; 8192]).unwrap();
            for l in b.programmed_levels(wl) {
                er += 1;
                if l == Some(3) {
                    hits += 1;
                }
            }
        }
        let ch = ChannelModel::builtin();
        let p = ch.points(&DegradationState::new(0, DAY, 1)).unwrap();
        let er_d = StateDistribution::new(State::Er, p[0].mean, p[0].stddev * k);
        let tp_mean = 0.5 * (p[State::P3.index()].mean + p[State::P5.index()].mean);
        let internal = 0.5 * (er_d.mean + tp_mean);
        let oracle = er_d.mass(internal, f64::INFINITY);
        let frac = hits as f64 / er as f64;
        let se = (oracle * (1.0 - oracle) / er as f64).sqrt();
        assert!((frac - oracle).abs() < 4.0 * se, "{frac} vs {oracle}");
    }

    #[test]
    fn fresh_read_matches_analytic() {
        let cfg = BlockConfig { wordlines: 64, bitlines: 4096, ..Default::default() };
        let mut b = block(cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.program_random(&mut rng).unwrap();
        let ch = ChannelModel::builtin();
        let refs = ch.frozen_refs(CellMode::Tlc);
        let map = CellMode::Tlc.gray();
        for &p in CellMode::Tlc.page_types() {
            let mut errors = 0usize;
            let mut n = 0usize;
            for wl in 0..64 {
                let r = b.read_page(wl, p, &refs).unwrap();
                let w = b.written_bits(wl, p);
                errors += r.bits.iter().zip(&w).filter(|(a, c)| a != c).count();
                n += w.len();
            }
            let d = ch.distribution_at(CellMode::Tlc, &b.degradation_of(0)).unwrap();
            let a = analytic_rber(&d, &refs, &map, p).unwrap();
            let got = errors as f64 / n as f64;
            let sd = (a / n as f64).sqrt();
            assert!((got - a).abs() < 4.0 * sd + 2e-5, "{p:?}: {got} vs {a}");
        }
    }
}
