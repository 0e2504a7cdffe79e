//! Systematic LDPC codes with a flooding min-sum decoder and multi-read
//! soft-decision schedules.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voltage::{bin_of, AwgnModel, StateDistribution, Voltage};

#[derive(Clone, Debug)]
pub struct LdpcCode {
    n: usize,
    k: usize,
    /// Parity-check rows as sorted column indices.
    rows: Vec<Vec<usize>>,
    check_ptr: Vec<usize>,
    edge_var: Vec<u32>,
    /// Parity bit `k + i` is the XOR of the message bits selected by `a[i]`.
    a: Vec<Vec<u64>>,
}

impl LdpcCode {
    /// Random regular code with `column_weight` ones per column and no
    /// 4-cycles. Columns are reordered so the right square block of H is
    /// invertible.
    pub fn construct<R: Rng + ?Sized>(n: usize, k: usize, column_weight: usize, rng: &mut R) -> Result<Self> {
        const ATTEMPTS: usize = 200;
        if k == 0 || k >= n || column_weight < 2 || column_weight > n - k {
            return Err(Error::Parameter(format!(
                "infeasible LDPC parameters n={n} k={k} column weight {column_weight}"
            )));
        }
        let m = n - k;
        // Every column consumes C(w, 2) distinct check pairs.
        if n * column_weight * (column_weight - 1) > m * (m - 1) {
            return Err(Error::Parameter(format!(
                "n={n} columns of weight {column_weight} cannot avoid 4-cycles with {m} checks"
            )));
        }
        let cap = (n * column_weight).div_ceil(m);
        for _ in 0..ATTEMPTS {
            let Some(cols) = place_columns(n, m, column_weight, cap, rng) else {
                continue;
            };
            let mut rows = vec![Vec::new(); m];
            for (j, c) in cols.iter().enumerate() {
                for &r in c {
                    rows[r].push(j);
                }
            }
            if let Ok(code) = Self::from_parity_check(n, rows) {
                return Ok(code);
            }
        }
        Err(Error::Construction(ATTEMPTS))
    }

    /// Build from explicit parity-check rows (column indices). When the last
    /// `m` columns are not already independent the columns are reordered, so
    /// check [`parity_check_rows`](Self::parity_check_rows) for the layout in use.
    pub fn from_parity_check(n: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let m = rows.len();
        if m == 0 || m >= n {
            return Err(Error::Parameter(format!("{m} checks for {n} bits")));
        }
        let words = n.div_ceil(64);
        let mut dense: Vec<Vec<u64>> = vec![vec![0; words]; m];
        for (i, r) in rows.iter().enumerate() {
            for &c in r {
                if c >= n {
                    return Err(Error::Parameter(format!("column {c} out of range")));
                }
                dense[i][c / 64] ^= 1 << (c % 64);
            }
        }
        // Reduced row echelon form, pivoting from the rightmost column.
        let mut pivots = Vec::with_capacity(m);
        let mut rank = 0;
        for c in (0..n).rev() {
            if rank == m {
                break;
            }
            let (w, b) = (c / 64, 1u64 << (c % 64));
            let Some(p) = (rank..m).find(|&r| dense[r][w] & b != 0) else {
                continue;
            };
            dense.swap(rank, p);
            let pivot_row = dense[rank].clone();
            for (r, row) in dense.iter_mut().enumerate() {
                if r != rank && row[w] & b != 0 {
                    for (x, y) in row.iter_mut().zip(&pivot_row) {
                        *x ^= y;
                    }
                }
            }
            pivots.push(c);
            rank += 1;
        }
        if rank < m {
            return Err(Error::Parameter(format!("parity-check matrix has rank {rank} < {m}")));
        }
        let k = n - m;
        // Pivot columns keep their relative order; row i of the reduced
        // matrix becomes the identity row for parity bit k + i.
        let mut by_col: Vec<usize> = (0..m).collect();
        by_col.sort_by_key(|&r| pivots[r]);
        let dense: Vec<Vec<u64>> = by_col.iter().map(|&r| dense[r].clone()).collect();
        pivots.sort_unstable();
        let mut is_pivot = vec![false; n];
        for &c in &pivots {
            is_pivot[c] = true;
        }
        // order[new] = old column
        let mut order: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
        order.extend(pivots.iter().copied());
        let mut new_of = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            new_of[old] = new;
        }
        let kw = k.div_ceil(64);
        let a = dense
            .iter()
            .map(|row| {
                let mut out = vec![0u64; kw];
                for (j, &old) in order[..k].iter().enumerate() {
                    if row[old / 64] >> (old % 64) & 1 == 1 {
                        out[j / 64] |= 1 << (j % 64);
                    }
                }
                out
            })
            .collect();
        let rows: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| {
                let mut v: Vec<usize> = r.iter().map(|&c| new_of[c]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let mut check_ptr = vec![0];
        let mut edge_var = Vec::new();
        for r in &rows {
            edge_var.extend(r.iter().map(|&c| c as u32));
            check_ptr.push(edge_var.len());
        }
        Ok(LdpcCode { n, k, rows, check_ptr, edge_var, a })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn parity_check_rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn column_weights(&self) -> Vec<usize> {
        let mut w = vec![0; self.n];
        for &v in &self.edge_var {
            w[v as usize] += 1;
        }
        w
    }

    /// True when no two checks share more than one bit.
    pub fn is_four_cycle_free(&self) -> bool {
        let m = self.rows.len();
        let mut seen = vec![u32::MAX; m * m];
        for j in 0..self.n {
            let checks: Vec<usize> = (0..m).filter(|&i| self.rows[i].binary_search(&j).is_ok()).collect();
            for (x, &a) in checks.iter().enumerate() {
                for &b in &checks[x + 1..] {
                    if seen[a * m + b] != u32::MAX {
                        return false;
                    }
                    seen[a * m + b] = j as u32;
                }
            }
        }
        true
    }

    pub fn syndrome(&self, word: &[u8]) -> Vec<u8> {
        self.rows.iter().map(|r| r.iter().fold(0, |acc, &c| acc ^ (word[c] & 1))).collect()
    }

    pub fn is_codeword(&self, word: &[u8]) -> bool {
        word.len() == self.n && self.syndrome(word).iter().all(|&s| s == 0)
    }

    pub fn encode(&self, msg: &[u8]) -> Result<Vec<u8>> {
        if msg.len() != self.k {
            return Err(Error::Length { expected: self.k, got: msg.len() });
        }
        let mut packed = vec![0u64; self.k.div_ceil(64)];
        for (i, &b) in msg.iter().enumerate() {
            packed[i / 64] |= ((b & 1) as u64) << (i % 64);
        }
        let mut cw: Vec<u8> = msg.iter().map(|b| b & 1).collect();
        cw.extend(self.a.iter().map(|row| {
            let ones: u32 = row.iter().zip(&packed).map(|(x, y)| (x & y).count_ones()).sum();
            (ones & 1) as u8
        }));
        Ok(cw)
    }

    /// `iters` flooding min-sum iterations with no early exit; returns the
    /// a-posteriori LLRs.
    pub fn min_sum_posteriors(&self, llr: &[f32], iters: usize, cfg: &LdpcConfig) -> Result<Vec<f32>> {
        self.check_len(llr.len())?;
        let mut st = MinSum::new(self, llr, cfg);
        for _ in 0..iters {
            st.iterate(self, llr, cfg);
        }
        Ok(st.total)
    }

    /// Single-level decode of channel LLRs. Returns (success, hard word,
    /// iterations run).
    pub fn decode_llr(&self, llr: &[f32], cfg: &LdpcConfig) -> Result<(bool, Vec<u8>, usize)> {
        self.check_len(llr.len())?;
        let mut st = MinSum::new(self, llr, cfg);
        let mut hard = vec![0u8; self.n];
        st.harden(&mut hard);
        if self.syndrome_zero(&hard) {
            return Ok((true, hard, 0));
        }
        for it in 1..=cfg.max_iters {
            st.iterate(self, llr, cfg);
            st.harden(&mut hard);
            if self.syndrome_zero(&hard) {
                return Ok((true, hard, it));
            }
        }
        Ok((false, hard, cfg.max_iters))
    }

    /// Multi-level soft decode. `observations` holds each bit's bin index
    /// against the finest reference set of `schedule`.
    pub fn decode(&self, observations: &[u16], schedule: &LlrSchedule, cfg: &LdpcConfig) -> Result<LdpcResult> {
        self.check_len(observations.len())?;
        let fine = schedule.fine_bins();
        if let Some(&b) = observations.iter().find(|&&b| b as usize >= fine) {
            return Err(Error::Parameter(format!("observation bin {b} exceeds {fine} bins")));
        }
        let levels = cfg.max_levels.min(schedule.levels()).max(1);
        let mut iterations = Vec::with_capacity(levels);
        let mut llr = vec![0f32; self.n];
        let mut hard = Vec::new();
        for level in 0..levels {
            let table = &schedule.tables[level];
            for (l, &o) in llr.iter_mut().zip(observations) {
                *l = table[o as usize];
            }
            let (ok, word, its) = self.decode_llr(&llr, cfg)?;
            iterations.push(its);
            hard = word;
            if ok {
                return Ok(LdpcResult {
                    status: LdpcStatus::Success,
                    message: hard[..self.k].to_vec(),
                    codeword: hard,
                    iterations,
                    levels_used: level + 1,
                });
            }
        }
        Ok(LdpcResult {
            status: LdpcStatus::LevelExhausted,
            message: hard[..self.k].to_vec(),
            codeword: hard,
            iterations,
            levels_used: levels,
        })
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.n {
            return Err(Error::Length { expected: self.n, got });
        }
        Ok(())
    }

    fn syndrome_zero(&self, hard: &[u8]) -> bool {
        self.check_ptr.windows(2).all(|w| {
            self.edge_var[w[0]..w[1]].iter().fold(0u8, |acc, &v| acc ^ hard[v as usize]) == 0
        })
    }

    pub fn write_alist<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.rows.len();
        let mut cols = vec![Vec::new(); self.n];
        for (i, r) in self.rows.iter().enumerate() {
            for &c in r {
                cols[c].push(i);
            }
        }
        let max_col = cols.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let join = |v: Vec<String>| v.join(" ");
        writeln!(out, "{} {}", self.n, m)?;
        writeln!(out, "{max_col} {max_row}")?;
        writeln!(out, "{}", join(cols.iter().map(|c| c.len().to_string()).collect()))?;
        writeln!(out, "{}", join(self.rows.iter().map(|r| r.len().to_string()).collect()))?;
        for (list, width) in [(&cols, max_col), (&self.rows, max_row)] {
            for entry in list.iter() {
                let mut v: Vec<String> = entry.iter().map(|x| (x + 1).to_string()).collect();
                v.resize(width, "0".into());
                writeln!(out, "{}", join(v))?;
            }
        }
        Ok(())
    }

    pub fn read_alist<R: BufRead>(input: R) -> Result<Self> {
        let mut nums = Vec::new();
        for line in input.lines() {
            for tok in line?.split_whitespace() {
                nums.push(tok.parse::<usize>().map_err(|e| Error::Parameter(format!("alist: {e}")))?);
            }
        }
        let bad = || Error::Parameter("alist: truncated".into());
        let mut it = nums.into_iter();
        let mut next = || it.next().ok_or_else(bad);
        let (n, m) = (next()?, next()?);
        let (max_col, max_row) = (next()?, next()?);
        for _ in 0..n + m {
            next()?;
        }
        for _ in 0..n * max_col {
            next()?;
        }
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            let mut r = Vec::new();
            for _ in 0..max_row {
                let c = next()?;
                if c > 0 {
                    r.push(c - 1);
                }
            }
            rows.push(r);
        }
        Self::from_parity_check(n, rows)
    }
}

/// Greedy column placement avoiding any reuse of a row pair.
fn place_columns<R: Rng + ?Sized>(n: usize, m: usize, w: usize, cap: usize, rng: &mut R) -> Option<Vec<Vec<usize>>> {
    let mut load = vec![0usize; m];
    let mut used = vec![false; m * m];
    let mut cols = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..n {
        order.shuffle(rng);
        order.sort_by_key(|&r| load[r]);
        let mut chosen: Vec<usize> = Vec::with_capacity(w);
        for &r in &order {
            if load[r] >= cap {
                break;
            }
            if chosen.iter().all(|&c| !used[c * m + r]) {
                chosen.push(r);
                if chosen.len() == w {
                    break;
                }
            }
        }
        if chosen.len() < w {
            return None;
        }
        for (x, &a) in chosen.iter().enumerate() {
            load[a] += 1;
            for &b in &chosen[x + 1..] {
                used[a * m + b] = true;
                used[b * m + a] = true;
            }
        }
        chosen.sort_unstable();
        cols.push(chosen);
    }
    Some(cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdpcConfig {
    pub max_iters: usize,
    pub max_levels: usize,
    /// Offset subtracted from check-node magnitudes; zero is plain min-sum.
    pub offset: f32,
    pub saturation: f32,
}

impl Default for LdpcConfig {
    fn default() -> Self {
        LdpcConfig { max_iters: 20, max_levels: 5, offset: 0.0, saturation: 25.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LdpcStatus {
    Success,
    LevelExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdpcResult {
    pub status: LdpcStatus,
    pub message: Vec<u8>,
    pub codeword: Vec<u8>,
    /// Min-sum iterations run at each level tried.
    pub iterations: Vec<usize>,
    pub levels_used: usize,
}

impl LdpcResult {
    pub fn is_success(&self) -> bool {
        self.status == LdpcStatus::Success
    }
}

struct MinSum {
    q: Vec<f32>,
    r: Vec<f32>,
    total: Vec<f32>,
}

impl MinSum {
    fn new(code: &LdpcCode, llr: &[f32], cfg: &LdpcConfig) -> Self {
        let s = cfg.saturation;
        MinSum {
            q: code.edge_var.iter().map(|&v| llr[v as usize].clamp(-s, s)).collect(),
            r: vec![0.0; code.edge_var.len()],
            total: llr.iter().map(|l| l.clamp(-s, s)).collect(),
        }
    }

    fn iterate(&mut self, code: &LdpcCode, llr: &[f32], cfg: &LdpcConfig) {
        let s = cfg.saturation;
        for w in code.check_ptr.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mut sign = false;
            let (mut m1, mut m2, mut at) = (f32::INFINITY, f32::INFINITY, lo);
            for e in lo..hi {
                let q = self.q[e];
                sign ^= q < 0.0;
                let a = q.abs();
                if a < m1 {
                    m2 = m1;
                    m1 = a;
                    at = e;
                } else if a < m2 {
                    m2 = a;
                }
            }
            let (m1, m2) = ((m1 - cfg.offset).max(0.0), (m2 - cfg.offset).max(0.0));
            for e in lo..hi {
                let mag = if e == at { m2 } else { m1 };
                let neg = sign ^ (self.q[e] < 0.0);
                self.r[e] = if neg { -mag } else { mag };
            }
        }
        for (t, &l) in self.total.iter_mut().zip(llr) {
            *t = l.clamp(-s, s);
        }
        for (e, &v) in code.edge_var.iter().enumerate() {
            self.total[v as usize] += self.r[e];
        }
        for (e, &v) in code.edge_var.iter().enumerate() {
            self.q[e] = (self.total[v as usize] - self.r[e]).clamp(-s, s);
        }
    }

    fn harden(&self, out: &mut [u8]) {
        for (b, &t) in out.iter_mut().zip(&self.total) {
            *b = (t < 0.0) as u8;
        }
    }
}

/// Reference sets and per-bin LLR tables for successive read levels. Each
/// level reads at every reference of the previous one plus new ones.
#[derive(Clone, Debug, PartialEq)]
pub struct LlrSchedule {
    levels: Vec<Vec<Voltage>>,
    llrs: Vec<Vec<f32>>,
    /// Per level, LLR indexed by the bin of the finest reference set.
    tables: Vec<Vec<f32>>,
}

impl LlrSchedule {
    pub fn new(levels: Vec<Vec<Voltage>>, llrs: Vec<Vec<f32>>) -> Result<Self> {
        if levels.is_empty() || levels.len() != llrs.len() {
            return Err(Error::Parameter("schedule needs one LLR table per level".into()));
        }
        for (i, (refs, l)) in levels.iter().zip(&llrs).enumerate() {
            if refs.is_empty() || refs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::UnsortedReferences);
            }
            if l.len() != refs.len() + 1 {
                return Err(Error::Length { expected: refs.len() + 1, got: l.len() });
            }
            if i > 0 {
                let prev = &levels[i - 1];
                if refs.len() <= prev.len() || prev.iter().any(|r| !refs.contains(r)) {
                    return Err(Error::Parameter(format!("level {} does not refine level {i}", i + 1)));
                }
            }
        }
        let fine = levels.last().expect("non-empty");
        let tables = levels
            .iter()
            .zip(&llrs)
            .map(|(refs, l)| {
                (0..=fine.len())
                    .map(|b| {
                        let bin = if b == 0 { 0 } else { refs.partition_point(|&r| r <= fine[b - 1]) };
                        l[bin]
                    })
                    .collect()
            })
            .collect();
        Ok(LlrSchedule { levels, llrs, tables })
    }

    /// Soft references around each hard reference, added one per level in
    /// the order -d, +d, -2d, +2d, ... for every hard reference at once.
    pub fn soft_reference_levels(hard: &[Voltage], deltas: &[f64], levels: usize) -> Vec<Vec<Voltage>> {
        let mut out = Vec::with_capacity(levels);
        let mut cur: Vec<Voltage> = hard.to_vec();
        out.push(cur.clone());
        for l in 1..levels {
            let step = l.div_ceil(2) as f64;
            let sign = if l % 2 == 1 { -1.0 } else { 1.0 };
            for (h, d) in hard.iter().zip(deltas) {
                cur.push(h + sign * step * d);
            }
            cur.sort_by(f64::total_cmp);
            cur.dedup();
            out.push(cur.clone());
        }
        out
    }

    /// Schedule for a bit carried by a mixture of equally likely states,
    /// each tagged with the bit value it stores.
    pub fn from_mixture(states: &[(StateDistribution, u8)], hard: &[Voltage], deltas: &[f64], levels: usize, saturation: f32) -> Result<Self> {
        if hard.len() != deltas.len() || hard.is_empty() || levels == 0 {
            return Err(Error::Parameter("one delta per hard reference and at least one level".into()));
        }
        let refs = Self::soft_reference_levels(hard, deltas, levels);
        let llrs = refs
            .iter()
            .map(|r| (0..=r.len()).map(|b| mixture_llr(states, r, b, saturation)).collect())
            .collect();
        Self::new(refs, llrs)
    }

    /// Two-state Gaussian channel: hard reference at the crossing, soft
    /// offsets in quarters of the mean gap.
    pub fn awgn(model: &AwgnModel, levels: usize, saturation: f32) -> Result<Self> {
        if !(model.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", model.sigma)));
        }
        let states = [
            (StateDistribution::new(crate::voltage::State::Er, model.mu0, model.sigma), 0u8),
            (StateDistribution::new(crate::voltage::State::P7, model.mu1, model.sigma), 1u8),
        ];
        let delta = (model.mu1 - model.mu0).abs() / 4.0;
        Self::from_mixture(&states, &[model.crossing()], &[delta], levels, saturation)
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn references(&self, level: usize) -> &[Voltage] {
        &self.levels[level]
    }

    pub fn llr_table(&self, level: usize) -> &[f32] {
        &self.llrs[level]
    }

    pub fn fine_references(&self) -> &[Voltage] {
        self.levels.last().expect("non-empty")
    }

    pub fn fine_bins(&self) -> usize {
        self.fine_references().len() + 1
    }

    /// Bin of a sensed voltage against the finest reference set.
    pub fn observe(&self, vth: Voltage) -> u16 {
        bin_of(vth, self.fine_references()) as u16
    }

    /// Channel LLR of a fine bin as seen at `level`.
    pub fn llr(&self, level: usize, fine_bin: u16) -> f32 {
        self.tables[level][fine_bin as usize]
    }
}

fn mixture_llr(states: &[(StateDistribution, u8)], refs: &[Voltage], bin: usize, saturation: f32) -> f32 {
    let lo = if bin == 0 { f64::NEG_INFINITY } else { refs[bin - 1] };
    let hi = if bin == refs.len() { f64::INFINITY } else { refs[bin] };
    let (mut p0, mut p1) = (0.0, 0.0);
    for (s, b) in states {
        let m = s.mass(lo, hi);
        if *b == 0 {
            p0 += m;
        } else {
            p1 += m;
        }
    }
    let l = match (p0 > 0.0, p1 > 0.0) {
        (true, true) => (p0 / p1).ln(),
        (true, false) => f64::INFINITY,
        (false, true) => f64::NEG_INFINITY,
        (false, false) => 0.0,
    };
    (l as f32).clamp(-saturation, saturation)
}

/// Read latency of a soft decode that used `levels` read levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftReadTiming {
    pub hard_us: f64,
    pub per_soft_level_us: f64,
}

impl Default for SoftReadTiming {
    fn default() -> Self {
        SoftReadTiming { hard_us: 80.0, per_soft_level_us: 100.0 }
    }
}

impl SoftReadTiming {
    pub fn latency_us(&self, levels: usize) -> f64 {
        if levels == 0 {
            return 0.0;
        }
        self.hard_us + self.per_soft_level_us * (levels - 1) as f64
    }
}
