//! Closed-form reliability and lifetime models, and RBER→UBER curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalDist};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::bch::BchCode;
use crate::error::{Error, Result};
use crate::ldpc::{LdpcCode, LdpcConfig, LlrSchedule};
use crate::voltage::AwgnModel;

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Probability that more than `t` of `l` bits flip at rate `ber`.
pub fn p_ecfr(l: usize, t: usize, ber: f64) -> f64 {
    if ber <= 0.0 || t >= l {
        return 0.0;
    }
    if ber >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (ber.ln(), (-ber).ln_1p());
    let log_sum = |ks: std::ops::RangeInclusive<usize>| {
        let terms: Vec<f64> = ks.map(|k| ln_choose(l, k) + k as f64 * lp + (l - k) as f64 * lq).collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    // Sum whichever tail is small so the result keeps its precision near 1.
    if (t as f64) < l as f64 * ber {
        -log_sum(0..=t).exp_m1().max(-1.0)
    } else {
        log_sum(t + 1..=l).exp().min(1.0)
    }
}

/// Failure probability of a logical-block access: hidden bad block, or any
/// of its `k` codewords failing.
pub fn p_lbfail(p_hgbb: f64, p_ecfr: f64, k: u32) -> f64 {
    let any = -(k as f64 * (-p_ecfr).ln_1p()).exp_m1();
    p_hgbb + (1.0 - p_hgbb) * any
}

/// Superpage parity failure: the LB fails along with at least one of the
/// other `c·d − 1`.
pub fn p_parity(p_lbfail: f64, c: usize, d: usize) -> Result<f64> {
    let lbs = c * d;
    if lbs < 2 {
        return Err(Error::Parameter(format!("superpage of {lbs} LBs has no parity")));
    }
    Ok(p_lbfail * -(((lbs - 1) as f64) * (-p_lbfail).ln_1p()).exp_m1())
}

pub fn overprovisioning(pba: f64, lba: f64) -> Result<f64> {
    if !(lba > 0.0) || pba < lba {
        return Err(Error::Config(format!("PBA {pba} must be at least LBA {lba} > 0")));
    }
    Ok((pba - lba) / lba)
}

/// OP left after ECC parity (`rate`) and a superpage parity share.
pub fn table1_op(raw: f64, advertised: f64, rate: f64, parity_fraction: f64) -> Result<f64> {
    if !(0.0 < rate && rate < 1.0) || !(0.0..1.0).contains(&parity_fraction) {
        return Err(Error::Parameter("rate in (0,1) and parity fraction in [0,1)".into()));
    }
    let usable = raw * rate * (1.0 - parity_fraction);
    if usable < advertised {
        return Err(Error::Config(format!("usable {usable:.4} below advertised {advertised}")));
    }
    Ok((usable - advertised) / advertised)
}

/// Parity share implied by an observed OP for a given rate.
pub fn implied_parity_fraction(raw: f64, advertised: f64, rate: f64, op: f64) -> f64 {
    1.0 - advertised * (1.0 + op) / (raw * rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub rate: f64,
    pub parity: bool,
    pub op: f64,
}

/// The four ECC/parity configurations of a 2.4 TB raw, 2.0 TB drive.
pub fn table1(parity_fraction: f64) -> Result<Vec<Table1Row>> {
    [(0.93, false), (0.93, true), (0.90, false), (0.90, true)]
        .into_iter()
        .map(|(rate, parity)| {
            let op = table1_op(2.4, 2.0, rate, if parity { parity_fraction } else { 0.0 })?;
            Ok(Table1Row { rate, parity, op })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccConfig {
    pub codeword_bits: usize,
    pub t: usize,
    pub rate: f64,
    pub superpage_parity: bool,
}

impl EccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.rate && self.rate < 1.0) {
            return Err(Error::Parameter(format!("coding rate {} outside (0, 1)", self.rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    pub pba: f64,
    pub lba: f64,
    pub pec: f64,
    pub dwpd: f64,
    pub wa: f64,
    pub r_compress: f64,
    pub chips: usize,
    pub dies: usize,
    pub codewords_per_lb: u32,
    pub p_hgbb: f64,
}

impl DriveConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.pba, self.lba, self.pec, self.dwpd, self.wa, self.r_compress];
        if pos.iter().any(|v| !(*v > 0.0)) || self.chips == 0 || self.dies == 0 || self.codewords_per_lb == 0 {
            return Err(Error::Parameter("drive parameters must be positive".into()));
        }
        if self.pba < self.lba {
            return Err(Error::Config("PBA must be at least LBA".into()));
        }
        Ok(())
    }

    pub fn op(&self) -> f64 {
        (self.pba - self.lba) / self.lba
    }
}

/// Years until `pec` cycles are consumed.
pub fn lifetime_years(pec: f64, op: f64, dwpd: f64, wa: f64, r_compress: f64) -> Result<f64> {
    let den = 365.0 * dwpd * wa * r_compress;
    if !(den > 0.0) {
        return Err(Error::Parameter("DWPD, WA and compression ratio must be positive".into()));
    }
    Ok(pec * (1.0 + op) / den)
}

pub fn lifetime(drive: &DriveConfig) -> Result<f64> {
    drive.validate()?;
    lifetime_years(drive.pec, drive.op(), drive.dwpd, drive.wa, drive.r_compress)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub pec: f64,
    pub op: f64,
    pub wa: f64,
}

/// Lifetime summed over the P/E segments served by each ECC engine.
pub fn multirate_lifetime(segments: &[RateSegment], dwpd: f64, r_compress: f64) -> Result<f64> {
    segments.iter().map(|s| lifetime_years(s.pec, s.op, dwpd, s.wa, r_compress)).sum()
}

/// Share of extra reads when soft decoding runs for every page holding a
/// failed hard-decoded codeword.
pub fn soft_read_overhead(hard_failure_rate: f64, codewords_per_page: usize, extra_reads: usize) -> f64 {
    hard_failure_rate * codewords_per_page as f64 * extra_reads as f64
}

/// Largest RBER at which an (l, t) code's failure rate stays below `target`.
pub fn bch_rber_threshold(l: usize, t: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-12f64, 0.5f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if p_ecfr(l, t, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UberPoint {
    pub rber: f64,
    pub uber: f64,
    pub frames: u64,
    pub failures: u64,
    /// Binomial standard error of `uber`.
    pub stderr: f64,
}

impl UberPoint {
    fn measured(rber: f64, frames: u64, failures: u64, n: usize) -> Self {
        let p = failures as f64 / frames.max(1) as f64;
        UberPoint {
            rber,
            uber: p / n as f64,
            frames,
            failures,
            stderr: (p * (1.0 - p) / frames.max(1) as f64).sqrt() / n as f64,
        }
    }
}

/// Analytic BCH curve from the binomial failure model.
pub fn bch_uber_analytic(n: usize, t: usize, grid: &[f64]) -> Vec<UberPoint> {
    grid.iter()
        .map(|&r| UberPoint { rber: r, uber: p_ecfr(n, t, r) / n as f64, frames: 0, failures: 0, stderr: 0.0 })
        .collect()
}

/// Monte Carlo frame error of a BCH code over a binary symmetric channel.
pub fn bch_frame_error<R: Rng + ?Sized>(code: &BchCode, rber: f64, rng: &mut R) -> Result<bool> {
    let msg: Vec<u8> = (0..code.k()).map(|_| rng.random::<bool>() as u8).collect();
    let mut word = code.encode(&msg)?;
    for b in word.iter_mut() {
        if rng.random::<f64>() < rber {
            *b ^= 1;
        }
    }
    Ok(code.decode(&word)?.message() != Some(&msg[..]))
}

/// Two-level AWGN channel (±1) whose hard-read error rate is `rber`.
pub fn awgn_for_rber(rber: f64) -> Result<AwgnModel> {
    if !(0.0 < rber && rber < 0.5) {
        return Err(Error::Parameter(format!("rber {rber} outside (0, 0.5)")));
    }
    let q = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(1.0 - rber);
    Ok(AwgnModel { mu0: -1.0, mu1: 1.0, sigma: 1.0 / q })
}

/// Sends one random codeword through the AWGN channel and decodes it with up
/// to `schedule.levels()` read levels. Returns the number of levels the
/// decode needed, or `None` if it failed (including a wrong codeword).
pub fn ldpc_frame_levels<R: Rng + ?Sized>(
    code: &LdpcCode,
    model: &AwgnModel,
    schedule: &LlrSchedule,
    cfg: &LdpcConfig,
    rng: &mut R,
) -> Result<Option<usize>> {
    let msg: Vec<u8> = (0..code.k()).map(|_| rng.random::<bool>() as u8).collect();
    let cw = code.encode(&msg)?;
    let noise = NormalDist::new(0.0, model.sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let obs: Vec<u16> = cw
        .iter()
        .map(|&b| {
            let mu = if b == 0 { model.mu0 } else { model.mu1 };
            schedule.observe(mu + noise.sample(rng))
        })
        .collect();
    let res = code.decode(&obs, schedule, cfg)?;
    Ok((res.is_success() && res.message == msg).then_some(res.levels_used))
}

/// Frame errors of one LDPC code at each max-level setting `1..=levels`,
/// from a single decode per frame.
pub fn ldpc_level_fer(code: &LdpcCode, rber: f64, levels: usize, frames: u64, cfg: &LdpcConfig, seed: u64) -> Result<Vec<UberPoint>> {
    let model = awgn_for_rber(rber)?;
    let schedule = LlrSchedule::awgn(&model, levels, cfg.saturation)?;
    let cfg = LdpcConfig { max_levels: levels, ..*cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = vec![0u64; levels];
    for _ in 0..frames {
        let used = ldpc_frame_levels(code, &model, &schedule, &cfg, &mut rng)?;
        for (l, f) in fails.iter_mut().enumerate() {
            if used.is_none_or(|u| u > l + 1) {
                *f += 1;
            }
        }
    }
    Ok(fails.into_iter().map(|f| UberPoint::measured(rber, frames, f, code.n())).collect())
}

/// Monte Carlo UBER curve of an LDPC code decoded with up to `levels` read
/// levels.
pub fn ldpc_uber_curve(code: &LdpcCode, grid: &[f64], levels: usize, frames: u64, cfg: &LdpcConfig, seed: u64) -> Result<Vec<UberPoint>> {
    grid.iter()
        .enumerate()
        .map(|(i, &r)| {
            if r == 0.0 {
                return Ok(UberPoint::measured(0.0, frames, 0, code.n()));
            }
            Ok(ldpc_level_fer(code, r, levels, frames, cfg, seed.wrapping_add(i as u64))?[levels - 1])
        })
        .collect()
}

/// Monte Carlo UBER curve of a BCH code.
pub fn bch_uber_curve(code: &BchCode, grid: &[f64], frames: u64, seed: u64) -> Result<Vec<UberPoint>> {
    grid.iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut f = 0;
            for _ in 0..frames {
                f += bch_frame_error(code, r, &mut rng)? as u64;
            }
            Ok(UberPoint::measured(r, frames, f, code.n()))
        })
        .collect()
}

/// Monte Carlo of LB failure and superpage parity failure with `lbs` LBs,
/// each failing independently with probability `p`. Returns (LB failure
/// rate, parity failure rate of LB 0).
pub fn parity_monte_carlo(p: f64, lbs: usize, trials: u64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lb, mut par) = (0u64, 0u64);
    let mut failed = vec![false; lbs];
    for _ in 0..trials {
        for f in failed.iter_mut() {
            *f = rng.random::<f64>() < p;
        }
        lb += failed[0] as u64;
        par += crate::recovery::parity_fails(&failed, 0) as u64;
    }
    (lb as f64 / trials as f64, par as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_ecfr(l: usize, t: usize, p: f64) -> f64 {
        (0u32..1 << l)
            .filter(|m| m.count_ones() as usize > t)
            .map(|m| p.powi(m.count_ones() as i32) * (1.0 - p).powi((l - m.count_ones() as usize) as i32))
            .sum()
    }

    #[test]
    fn ecfr_against_enumeration() {
        assert_eq!(p_ecfr(100, 3, 0.0), 0.0);
        assert!((p_ecfr(3, 0, 0.5) - 0.875).abs() < 1e-12);
        assert!((p_ecfr(7, 1, 0.1) - 0.149_694_1).abs() < 1e-6);
        for (l, t, p) in [(7, 1, 0.1), (12, 2, 0.03), (15, 4, 0.2), (10, 0, 1e-3)] {
            let b = brute_ecfr(l, t, p);
            assert!((p_ecfr(l, t, p) - b).abs() <= 1e-12 * b.max(1e-300) + 1e-15, "{l},{t},{p}");
        }
    }

    #[test]
    fn ecfr_monotone() {
        let mut prev = 0.0;
        for i in 1..40 {
            let v = p_ecfr(1023, 8, i as f64 * 1e-4);
            assert!(v >= prev);
            prev = v;
        }
        assert!(p_ecfr(2000, 8, 1e-3) > p_ecfr(1023, 8, 1e-3));
        assert!(p_ecfr(1023, 9, 1e-3) < p_ecfr(1023, 8, 1e-3));
    }

    #[test]
    fn lb_and_parity_formulas() {
        assert!((p_lbfail(0.0, 1e-3, 1) - 1e-3).abs() < 1e-15);
        assert_eq!(p_lbfail(1.0, 0.3, 4), 1.0);
        let v = p_lbfail(1e-4, 1e-3, 8);
        let direct = 1e-4 + (1.0 - 1e-4) * (1.0 - (1.0f64 - 1e-3).powi(8));
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 8.0712e-3).abs() < 1e-7);
        assert_eq!(p_parity(0.0, 4, 8).unwrap(), 0.0);
        assert!((p_parity(0.2, 1, 2).unwrap() - 0.04).abs() < 1e-15);
        let p = p_parity(1e-3, 4, 8).unwrap();
        assert!((p - 1e-3 * (1.0 - 0.999f64.powi(31))).abs() < 1e-15);
        assert!((p - 3.05e-5).abs() < 0.01e-5);
        assert!(p_parity(0.1, 1, 1).is_err());
    }

    #[test]
    fn table1_and_parity_share() {
        let rows = table1(1.0 / 32.0).unwrap();
        let want = [11.6, 8.1, 8.0, 4.6];
        for (r, w) in rows.iter().zip(want) {
            assert!((r.op * 100.0 - w).abs() < 0.05, "{r:?}");
        }
        // Each parity row, solved for its share, agrees with 1/32 to the
        // precision the OP percentages carry.
        for (rate, op) in [(0.93, 0.081), (0.90, 0.046)] {
            let f = implied_parity_fraction(2.4, 2.0, rate, op);
            assert!((f - 1.0 / 32.0).abs() < 5e-4, "{f}");
        }
        assert_eq!(overprovisioning(5.0, 5.0).unwrap(), 0.0);
        assert!(overprovisioning(4.0, 5.0).is_err());
        assert!(table1_op(2.0, 2.0, 0.9, 0.0).is_err());
    }

    #[test]
    fn lifetime_examples() {
        let y = lifetime_years(3000.0, 0.2, 1.0, 1.0, 1.0).unwrap();
        assert!((y - 3600.0 / 365.0).abs() < 1e-12);
        assert!((lifetime_years(3000.0, 0.2, 2.0, 1.0, 1.0).unwrap() - y / 2.0).abs() < 1e-12);
        let seg = RateSegment { pec: 3000.0, op: 0.2, wa: 1.0 };
        assert!((multirate_lifetime(&[seg], 1.0, 1.0).unwrap() - y).abs() < 1e-12);
        let three = multirate_lifetime(&[seg; 3], 1.0, 1.0).unwrap();
        assert!((three - 3.0 * y).abs() < 1e-9);
        assert!(lifetime_years(3000.0, 0.2, 0.0, 1.0, 1.0).is_err());
        let d = DriveConfig {
            pba: 1.2,
            lba: 1.0,
            pec: 3000.0,
            dwpd: 1.0,
            wa: 1.0,
            r_compress: 1.0,
            chips: 4,
            dies: 8,
            codewords_per_lb: 8,
            p_hgbb: 0.0,
        };
        assert!((lifetime(&d).unwrap() - y).abs() < 1e-9);
    }

    #[test]
    fn soft_overhead_example() {
        assert!((soft_read_overhead(1e-4, 4, 7) - 0.0028).abs() < 1e-15);
    }

    #[test]
    fn bch_threshold_and_curve() {
        let r = bch_rber_threshold(1023, 8, 1e-4);
        assert!((p_ecfr(1023, 8, r) - 1e-4).abs() < 1e-8);
        let pts = bch_uber_analytic(1023, 8, &[0.0, r]);
        assert_eq!(pts[0].uber, 0.0);
        assert!((pts[1].uber - 1e-4 / 1023.0).abs() < 1e-11);
    }

    #[test]
    fn bch_monte_carlo_within_three_sigma() {
        let code = BchCode::new(8, 4).unwrap();
        let rber = 0.01;
        let pts = bch_uber_curve(&code, &[rber], 4000, 5).unwrap();
        let p = p_ecfr(code.n(), code.t(), rber);
        let measured = pts[0].failures as f64 / 4000.0;
        let sigma = (p * (1.0 - p) / 4000.0).sqrt();
        assert!((measured - p).abs() <= 3.0 * sigma, "{measured} vs {p}");
    }

    #[test]
    fn awgn_rber_round_trip() {
        let m = awgn_for_rber(1e-2).unwrap();
        let q = crate::voltage::upper_tail(1.0 / m.sigma);
        assert!((q - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn parity_monte_carlo_small() {
        let (lb, par) = parity_monte_carlo(0.05, 4, 200_000, 1);
        assert!((lb - 0.05).abs() < 0.003);
        let want = p_parity(0.05, 1, 4).unwrap();
        assert!((par - want).abs() < 4.0 * (want / 200_000.0).sqrt());
    }
}
