//! Page-level ECC: a flash page holds several codewords back to back.

use std::sync::Arc;

use crate::bch::{BchCode, BchOutcome};
use crate::error::{Error, Result};
use crate::ldpc::{LdpcCode, LdpcConfig, LlrSchedule};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageDecode {
    pub data: Vec<u8>,
    /// Bits flipped by the decoder across the whole page.
    pub corrected: usize,
    /// Largest per-codeword correction.
    pub worst_codeword: usize,
}

pub trait PageCodec {
    fn page_bits(&self) -> usize;
    fn data_bits(&self) -> usize;
    /// Correctable errors per codeword.
    fn capability(&self) -> usize;
    fn codewords(&self) -> usize;
    fn encode(&self, data: &[u8]) -> Result<Vec<u8>>;
    /// `None` when any codeword fails to decode.
    fn decode(&self, raw: &[u8]) -> Result<Option<PageDecode>>;
}

/// BCH codewords packed into a page; spare tail bits stay erased (1).
#[derive(Clone, Debug)]
pub struct BchPageCodec {
    code: Arc<BchCode>,
    page_bits: usize,
    codewords: usize,
}

impl BchPageCodec {
    pub fn new(code: BchCode, page_bits: usize) -> Result<Self> {
        let codewords = page_bits / code.n();
        if codewords == 0 {
            return Err(Error::Parameter(format!("page of {page_bits} bits cannot hold a {}-bit codeword", code.n())));
        }
        Ok(BchPageCodec { code: Arc::new(code), page_bits, codewords })
    }

    pub fn code(&self) -> &BchCode {
        &self.code
    }
}

impl PageCodec for BchPageCodec {
    fn page_bits(&self) -> usize {
        self.page_bits
    }

    fn data_bits(&self) -> usize {
        self.codewords * self.code.k()
    }

    fn capability(&self) -> usize {
        self.code.t()
    }

    fn codewords(&self) -> usize {
        self.codewords
    }

    fn encode(&self, data: &[u8]) -> Result<Vec<u8>> {
        if data.len() != self.data_bits() {
            return Err(Error::Length { expected: self.data_bits(), got: data.len() });
        }
        let mut page = Vec::with_capacity(self.page_bits);
        for chunk in data.chunks(self.code.k()) {
            page.extend(self.code.encode(chunk)?);
        }
        page.resize(self.page_bits, 1);
        Ok(page)
    }

    fn decode(&self, raw: &[u8]) -> Result<Option<PageDecode>> {
        if raw.len() != self.page_bits {
            return Err(Error::Length { expected: self.page_bits, got: raw.len() });
        }
        let n = self.code.n();
        let mut out = PageDecode { data: Vec::with_capacity(self.data_bits()), corrected: 0, worst_codeword: 0 };
        for c in 0..self.codewords {
            match self.code.decode(&raw[c * n..(c + 1) * n])? {
                BchOutcome::Decoded { message, flipped } => {
                    out.data.extend(message);
                    out.corrected += flipped.len();
                    out.worst_codeword = out.worst_codeword.max(flipped.len());
                }
                BchOutcome::Failure(_) => return Ok(None),
            }
        }
        Ok(Some(out))
    }
}

/// LDPC codewords packed into a page. Hard decoding feeds saturated
/// LLRs; soft decoding takes fine-bin observations and a read schedule.
#[derive(Clone, Debug)]
pub struct LdpcPageCodec {
    code: Arc<LdpcCode>,
    cfg: LdpcConfig,
    page_bits: usize,
    codewords: usize,
}

impl LdpcPageCodec {
    pub fn new(code: LdpcCode, cfg: LdpcConfig, page_bits: usize) -> Result<Self> {
        let codewords = page_bits / code.n();
        if codewords == 0 {
            return Err(Error::Parameter(format!("page of {page_bits} bits cannot hold a {}-bit codeword", code.n())));
        }
        Ok(LdpcPageCodec { code: Arc::new(code), cfg, page_bits, codewords })
    }

    pub fn code(&self) -> &LdpcCode {
        &self.code
    }

    pub fn config(&self) -> &LdpcConfig {
        &self.cfg
    }

    fn decode_with(&self, llr_of: impl Fn(usize) -> f32, raw: &[u8]) -> Result<Option<PageDecode>> {
        let n = self.code.n();
        let k = self.code.k();
        let mut out = PageDecode { data: Vec::with_capacity(self.data_bits()), corrected: 0, worst_codeword: 0 };
        let mut llr = vec![0f32; n];
        for c in 0..self.codewords {
            for (j, l) in llr.iter_mut().enumerate() {
                *l = llr_of(c * n + j);
            }
            let (ok, word, _) = self.code.decode_llr(&llr, &self.cfg)?;
            if !ok {
                return Ok(None);
            }
            let flipped = word.iter().zip(&raw[c * n..(c + 1) * n]).filter(|(a, b)| a != b).count();
            out.data.extend_from_slice(&word[..k]);
            out.corrected += flipped;
            out.worst_codeword = out.worst_codeword.max(flipped);
        }
        Ok(Some(out))
    }

    /// Decode at one level of `schedule`; `observations` are fine bins per
    /// page bit. Corrections are counted against the level's hard decision.
    pub fn decode_soft(&self, observations: &[u16], schedule: &LlrSchedule, level: usize) -> Result<Option<PageDecode>> {
        if observations.len() != self.page_bits {
            return Err(Error::Length { expected: self.page_bits, got: observations.len() });
        }
        if level >= schedule.levels() {
            return Err(Error::Parameter(format!("level {level} beyond {} levels", schedule.levels())));
        }
        let hard: Vec<u8> = observations.iter().map(|&o| (schedule.llr(level, o) < 0.0) as u8).collect();
        self.decode_with(|i| schedule.llr(level, observations[i]), &hard)
    }
}

impl PageCodec for LdpcPageCodec {
    fn page_bits(&self) -> usize {
        self.page_bits
    }

    fn data_bits(&self) -> usize {
        self.codewords * self.code.k()
    }

    /// LDPC has no fixed bound; reports zero.
    fn capability(&self) -> usize {
        0
    }

    fn codewords(&self) -> usize {
        self.codewords
    }

    fn encode(&self, data: &[u8]) -> Result<Vec<u8>> {
        if data.len() != self.data_bits() {
            return Err(Error::Length { expected: self.data_bits(), got: data.len() });
        }
        let mut page = Vec::with_capacity(self.page_bits);
        for chunk in data.chunks(self.code.k()) {
            page.extend(self.code.encode(chunk)?);
        }
        page.resize(self.page_bits, 1);
        Ok(page)
    }

    fn decode(&self, raw: &[u8]) -> Result<Option<PageDecode>> {
        if raw.len() != self.page_bits {
            return Err(Error::Length { expected: self.page_bits, got: raw.len() });
        }
        let sat = self.cfg.saturation;
        self.decode_with(|i| if raw[i] == 0 { sat } else { -sat }, raw)
    }
}
