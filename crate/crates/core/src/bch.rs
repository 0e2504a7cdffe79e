//! Binary BCH codes over GF(2^m).
//!
//! Codeword bit `i` is the coefficient of `x^(n-1-i)`, so the message
//! occupies bits `0..k` and the check bits follow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Primitive polynomials with the fewest terms for each supported degree.
pub fn primitive_poly(m: u32) -> Option<u32> {
    Some(match m {
        3 => 0xB,
        4 => 0x13,
        5 => 0x25,
        6 => 0x43,
        7 => 0x83,
        8 => 0x11D,
        9 => 0x211,
        10 => 0x409,
        11 => 0x805,
        12 => 0x1053,
        13 => 0x201B,
        14 => 0x4443,
        15 => 0x8003,
        16 => 0x1100B,
        _ => return None,
    })
}

#[derive(Clone, Debug)]
pub struct GaloisField {
    m: u32,
    n: u32,
    exp: Vec<u32>,
    log: Vec<u32>,
}

impl GaloisField {
    pub fn new(m: u32, poly: u32) -> Result<Self> {
        if !(2..=16).contains(&m) || poly >> m != 1 {
            return Err(Error::Parameter(format!("bad field polynomial {poly:#x} for m={m}")));
        }
        let n = (1u32 << m) - 1;
        let mut exp = vec![0u32; 2 * n as usize];
        let mut log = vec![0u32; n as usize + 1];
        let mut x = 1u32;
        for i in 0..n {
            if i > 0 && x == 1 {
                return Err(Error::Parameter(format!("{poly:#x} is not primitive")));
            }
            exp[i as usize] = x;
            log[x as usize] = i;
            x <<= 1;
            if x >> m != 0 {
                x ^= poly;
            }
        }
        if x != 1 {
            return Err(Error::Parameter(format!("{poly:#x} is not primitive")));
        }
        for i in n..2 * n {
            exp[i as usize] = exp[(i - n) as usize];
        }
        Ok(GaloisField { m, n, exp, log })
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn order(&self) -> u32 {
        self.n
    }

    /// alpha^e for any integer exponent.
    pub fn alpha(&self, e: i64) -> u32 {
        self.exp[e.rem_euclid(self.n as i64) as usize]
    }

    pub fn log(&self, a: u32) -> Option<u32> {
        (a != 0).then(|| self.log[a as usize])
    }

    #[inline]
    pub fn mul(&self, a: u32, b: u32) -> u32 {
        if a == 0 || b == 0 {
            0
        } else {
            self.exp[(self.log[a as usize] + self.log[b as usize]) as usize]
        }
    }

    #[inline]
    pub fn div(&self, a: u32, b: u32) -> u32 {
        assert!(b != 0, "division by zero in GF(2^m)");
        if a == 0 {
            0
        } else {
            self.exp[(self.log[a as usize] + self.n - self.log[b as usize]) as usize]
        }
    }

    pub fn inv(&self, a: u32) -> u32 {
        self.div(1, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BchParams {
    pub m: u32,
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub poly: u32,
}

impl BchParams {
    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn parity_bits(&self) -> usize {
        self.n - self.k
    }
}

/// Per-stage latency constants of the hardware decoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BchTiming {
    pub t_syn: f64,
    pub t_berl: f64,
    pub t_chien: f64,
}

impl Default for BchTiming {
    fn default() -> Self {
        BchTiming { t_syn: 1.0, t_berl: 1.0, t_chien: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeFailure {
    /// The error locator has more roots than the code can correct.
    DegreeExceedsT { degree: usize },
    /// Chien search found fewer roots than the locator degree.
    MissingRoots { degree: usize, roots: usize },
    ResidualSyndrome,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BchOutcome {
    /// A codeword was reached. With more than `t` raw errors this may be a
    /// different codeword than the one written, so treat it as an estimate.
    Decoded { message: Vec<u8>, flipped: Vec<usize> },
    Failure(DecodeFailure),
}

impl BchOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, BchOutcome::Decoded { .. })
    }

    pub fn message(&self) -> Option<&[u8]> {
        match self {
            BchOutcome::Decoded { message, .. } => Some(message),
            BchOutcome::Failure(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BchCode {
    params: BchParams,
    gf: GaloisField,
    /// Generator coefficients, index = power.
    generator: Vec<u8>,
    /// Generator without its leading term, packed little-endian by power.
    gen_words: Vec<u64>,
}

impl BchCode {
    pub fn new(m: u32, t: usize) -> Result<Self> {
        let poly = primitive_poly(m).ok_or_else(|| Error::Parameter(format!("unsupported field degree m={m}")))?;
        Self::with_poly(m, t, poly)
    }

    pub fn with_poly(m: u32, t: usize, poly: u32) -> Result<Self> {
        let gf = GaloisField::new(m, poly)?;
        let n = gf.order() as usize;
        if t == 0 || 2 * t >= n {
            return Err(Error::Parameter(format!("t={t} out of range for n={n}")));
        }
        // LCM of the minimal polynomials of alpha^1 .. alpha^2t.
        let mut covered = vec![false; n];
        let mut g: Vec<u32> = vec![1];
        for i in 1..=2 * t {
            if covered[i % n] {
                continue;
            }
            let mut e = i % n;
            loop {
                covered[e] = true;
                let root = gf.alpha(e as i64);
                let mut next = vec![0u32; g.len() + 1];
                for (d, &c) in g.iter().enumerate() {
                    next[d + 1] ^= c;
                    next[d] ^= gf.mul(c, root);
                }
                g = next;
                e = (e * 2) % n;
                if e == i % n {
                    break;
                }
            }
        }
        debug_assert!(g.iter().all(|&c| c <= 1));
        let generator: Vec<u8> = g.iter().map(|&c| c as u8).collect();
        let r = generator.len() - 1;
        if r >= n {
            return Err(Error::Parameter(format!("t={t} leaves no message bits for n={n}")));
        }
        let mut gen_words = vec![0u64; r.div_ceil(64)];
        for (p, &c) in generator[..r].iter().enumerate() {
            if c == 1 {
                gen_words[p / 64] |= 1 << (p % 64);
            }
        }
        Ok(BchCode {
            params: BchParams { m, n, k: n - r, t, poly },
            gf,
            generator,
            gen_words,
        })
    }

    pub fn params(&self) -> &BchParams {
        &self.params
    }

    pub fn field(&self) -> &GaloisField {
        &self.gf
    }

    pub fn generator(&self) -> &[u8] {
        &self.generator
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn t(&self) -> usize {
        self.params.t
    }

    pub fn encode(&self, msg: &[u8]) -> Result<Vec<u8>> {
        let BchParams { n, k, .. } = self.params;
        if msg.len() != k {
            return Err(Error::Length { expected: k, got: msg.len() });
        }
        let r = n - k;
        let words = self.gen_words.len();
        let top = (r - 1) / 64;
        let top_bit = (r - 1) % 64;
        let top_mask = if r % 64 == 0 { u64::MAX } else { (1u64 << (r % 64)) - 1 };
        let mut reg = vec![0u64; words];
        for &b in msg {
            let fb = (b & 1) as u64 ^ ((reg[top] >> top_bit) & 1);
            for w in (0..words).rev() {
                let carry = if w > 0 { reg[w - 1] >> 63 } else { 0 };
                reg[w] = (reg[w] << 1) | carry;
            }
            reg[top] &= top_mask;
            if fb == 1 {
                for (a, g) in reg.iter_mut().zip(&self.gen_words) {
                    *a ^= g;
                }
            }
        }
        let mut cw = Vec::with_capacity(n);
        cw.extend(msg.iter().map(|b| b & 1));
        for j in 0..r {
            let p = r - 1 - j;
            cw.push(((reg[p / 64] >> (p % 64)) & 1) as u8);
        }
        Ok(cw)
    }

    /// Syndromes S_1 .. S_2t of a received word.
    pub fn syndromes(&self, word: &[u8]) -> Result<Vec<u32>> {
        let n = self.params.n;
        if word.len() != n {
            return Err(Error::Length { expected: n, got: word.len() });
        }
        let t2 = 2 * self.params.t;
        let mut s = vec![0u32; t2 + 1];
        let order = self.gf.order() as usize;
        for (i, &b) in word.iter().enumerate() {
            if b & 1 == 0 {
                continue;
            }
            let p = n - 1 - i;
            for j in (1..=t2).step_by(2) {
                s[j] ^= self.gf.exp[(j * p) % order];
            }
        }
        for j in (2..=t2).step_by(2) {
            s[j] = self.gf.mul(s[j / 2], s[j / 2]);
        }
        s.remove(0);
        Ok(s)
    }

    pub fn is_codeword(&self, word: &[u8]) -> Result<bool> {
        Ok(self.syndromes(word)?.iter().all(|&s| s == 0))
    }

    /// Error locator polynomial via Berlekamp-Massey, index = power.
    fn locator(&self, s: &[u32]) -> (Vec<u32>, usize) {
        let gf = &self.gf;
        let t2 = s.len();
        let mut c = vec![0u32; t2 + 1];
        let mut b = vec![0u32; t2 + 1];
        c[0] = 1;
        b[0] = 1;
        let mut l = 0usize;
        let mut shift = 1usize;
        let mut bd = 1u32;
        for r in 0..t2 {
            let mut d = s[r];
            for i in 1..=l.min(r) {
                d ^= gf.mul(c[i], s[r - i]);
            }
            if d == 0 {
                shift += 1;
                continue;
            }
            let coef = gf.div(d, bd);
            let prev = c.clone();
            for i in 0..=t2 - shift {
                if b[i] != 0 {
                    c[i + shift] ^= gf.mul(coef, b[i]);
                }
            }
            if 2 * l <= r {
                l = r + 1 - l;
                b = prev;
                bd = d;
                shift = 1;
            } else {
                shift += 1;
            }
        }
        c.truncate(l + 1);
        (c, l)
    }

    fn is_root_at(&self, sigma: &[u32], pos: usize) -> bool {
        // X = alpha^p for the bit at position pos; roots are X^-1.
        let order = self.gf.order() as usize;
        let p = self.params.n - 1 - pos;
        let step = (order - p % order) % order;
        let mut acc = sigma[0];
        let mut e = 0usize;
        for &c in &sigma[1..] {
            e += step;
            if e >= order {
                e -= order;
            }
            if c != 0 {
                acc ^= self.gf.mul(c, self.gf.exp[e]);
            }
        }
        acc == 0
    }

    pub fn decode(&self, received: &[u8]) -> Result<BchOutcome> {
        let BchParams { n, k, t, .. } = self.params;
        let s = self.syndromes(received)?;
        if s.iter().all(|&x| x == 0) {
            return Ok(BchOutcome::Decoded { message: received[..k].iter().map(|b| b & 1).collect(), flipped: vec![] });
        }
        let (sigma, degree) = self.locator(&s);
        if degree > t {
            return Ok(BchOutcome::Failure(DecodeFailure::DegreeExceedsT { degree }));
        }
        let mut flipped = Vec::with_capacity(degree);
        for pos in 0..k {
            if self.is_root_at(&sigma, pos) {
                flipped.push(pos);
            }
        }
        // Errors confined to check bits still need locating to confirm the
        // locator splits; only then is the data estimate trustworthy.
        if flipped.len() < degree {
            for pos in k..n {
                if self.is_root_at(&sigma, pos) {
                    flipped.push(pos);
                    if flipped.len() == degree {
                        break;
                    }
                }
            }
        }
        if flipped.len() != degree {
            return Ok(BchOutcome::Failure(DecodeFailure::MissingRoots { degree, roots: flipped.len() }));
        }
        let mut word: Vec<u8> = received.iter().map(|b| b & 1).collect();
        for &p in &flipped {
            word[p] ^= 1;
        }
        if !self.is_codeword(&word)? {
            return Ok(BchOutcome::Failure(DecodeFailure::ResidualSyndrome));
        }
        word.truncate(k);
        Ok(BchOutcome::Decoded { message: word, flipped })
    }

    /// Decoder latency for `errors` raw bit errors with a Chien search that
    /// evaluates `parallelism` positions per step.
    pub fn decode_latency(&self, errors: usize, parallelism: usize, timing: &BchTiming) -> Result<f64> {
        decode_latency(&self.params, errors, parallelism, timing)
    }
}

pub fn decode_latency(params: &BchParams, errors: usize, parallelism: usize, timing: &BchTiming) -> Result<f64> {
    if parallelism == 0 {
        return Err(Error::Parameter("Chien parallelism must be at least 1".into()));
    }
    if errors > params.t {
        return Err(Error::Parameter(format!(
            "latency undefined for {errors} errors beyond t={}",
            params.t
        )));
    }
    if errors == 0 {
        return Ok(timing.t_syn);
    }
    let iterations = (params.t + errors) as f64 / 2.0;
    Ok(timing.t_syn + iterations * timing.t_berl + params.k as f64 / parallelism as f64 * timing.t_chien)
}
