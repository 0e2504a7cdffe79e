use std::collections::HashMap;

use flashsim_core::analytics::{multirate_lifetime, p_ecfr, p_lbfail, p_parity, RateSegment};
use flashsim_core::bch::{BchCode, BchOutcome};
use flashsim_core::ftl::{Ftl, FtlConfig, MemoryMedia};
use flashsim_core::ldpc::{LdpcCode, LdpcConfig, LlrSchedule};
use flashsim_core::mitigation::{adaptive_refresh_interval, multirate_select, EccEngine, EccEngineSet, RefreshPolicy};
use flashsim_core::voltage::{analytic_rber_all, optimal_refs};
use flashsim_core::{AwgnModel, CellMode, ChannelModel, DegradationState, ReadRefs, MONTH, YEAR};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bch_corrects_up_to_t(m in 4u32..=8, t in 1usize..=4, seed: u64) {
        let code = BchCode::new(m, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msg: Vec<u8> = (0..code.k()).map(|_| rng.random::<bool>() as u8).collect();
        let cw = code.encode(&msg).unwrap();
        prop_assert_eq!(&cw[..code.k()], &msg[..]);
        prop_assert!(code.syndromes(&cw).unwrap().iter().all(|&s| s == 0));
        let w = rng.random_range(0..=t);
        let mut injected: Vec<usize> = rand::seq::index::sample(&mut rng, code.n(), w).into_vec();
        let mut rx = cw.clone();
        for &i in &injected {
            rx[i] ^= 1;
        }
        match code.decode(&rx).unwrap() {
            BchOutcome::Decoded { message, mut flipped } => {
                prop_assert_eq!(message, msg);
                flipped.sort_unstable();
                injected.sort_unstable();
                prop_assert_eq!(flipped, injected);
            }
            BchOutcome::Failure(f) => prop_assert!(false, "{:?}", f),
        }
    }

    #[test]
    fn bch_success_means_codeword(m in 5u32..=7, t in 1usize..=3, extra in 1usize..=6, seed: u64) {
        let code = BchCode::new(m, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msg: Vec<u8> = (0..code.k()).map(|_| rng.random::<bool>() as u8).collect();
        let mut rx = code.encode(&msg).unwrap();
        for i in rand::seq::index::sample(&mut rng, code.n(), t + extra) {
            rx[i] ^= 1;
        }
        if let BchOutcome::Decoded { flipped, message } = code.decode(&rx).unwrap() {
            for i in flipped {
                rx[i] ^= 1;
            }
            prop_assert!(code.is_codeword(&rx).unwrap());
            prop_assert_eq!(code.encode(&message).unwrap(), rx);
        }
    }

    #[test]
    fn ldpc_success_means_zero_syndrome(seed: u64, flips in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code = LdpcCode::construct(512, 416, 3, &mut rng).unwrap();
        prop_assert!(code.is_four_cycle_free());
        let msg: Vec<u8> = (0..code.k()).map(|_| rng.random::<bool>() as u8).collect();
        let cw = code.encode(&msg).unwrap();
        prop_assert!(code.is_codeword(&cw));
        let mut llr: Vec<f32> = cw.iter().map(|&b| if b == 0 { 4.0 } else { -4.0 }).collect();
        for i in rand::seq::index::sample(&mut rng, code.n(), flips) {
            llr[i] = -llr[i] * 0.5;
        }
        let (ok, word, _) = code.decode_llr(&llr, &LdpcConfig::default()).unwrap();
        prop_assert_eq!(ok, code.is_codeword(&word));
    }

    #[test]
    fn soft_levels_refine(hard in prop::collection::vec(-200.0f64..200.0, 1..8), delta in 0.5f64..20.0, levels in 1usize..7) {
        let mut hard = hard;
        hard.sort_by(f64::total_cmp);
        hard.dedup();
        let deltas = vec![delta; hard.len()];
        let refs = LlrSchedule::soft_reference_levels(&hard, &deltas, levels);
        prop_assert_eq!(refs.len(), levels);
        for w in refs.windows(2) {
            prop_assert!(w[0].iter().all(|v| w[1].contains(v)));
            prop_assert!(w[1].len() >= w[0].len());
        }
    }

    #[test]
    fn llr_sign_and_magnitude(mu0 in -5.0f64..0.0, gap in 0.1f64..5.0, sigma in 0.1f64..3.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let m = AwgnModel { mu0, mu1: mu0 + gap, sigma };
        let c = m.crossing();
        prop_assert!(m.llr_at(c).abs() < 1e-9 * (1.0 + m.llr_at(mu0).abs()));
        prop_assert!(m.llr_at(c - a - 1e-3) > 0.0);
        prop_assert!(m.llr_at(c + a + 1e-3) < 0.0);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(m.llr_at(c - far).abs() >= m.llr_at(c - near).abs());
    }

    #[test]
    fn optimal_refs_beat_perturbed(pe in 0u32..=3000, ret_days in 1.0f64..365.0, idx in 0usize..7, dv in -15.0f64..15.0) {
        let ch = ChannelModel::builtin();
        let d = ch.distribution_at(CellMode::Tlc, &DegradationState::new(pe, ret_days * 86_400.0, 1)).unwrap();
        let opt = optimal_refs(&d).unwrap();
        if let Some(other) = opt.with(idx, opt.voltages()[idx] + dv) {
            prop_assert!(analytic_rber_all(&d, &opt).unwrap() <= analytic_rber_all(&d, &other).unwrap() + 1e-15);
        }
    }

    #[test]
    fn rber_grows_with_spread(k in 1.0f64..2.0) {
        let ch = ChannelModel::builtin();
        let d = ch.distribution_at(CellMode::Tlc, &DegradationState::new(1000, MONTH, 1)).unwrap();
        let refs = ch.frozen_refs(CellMode::Tlc);
        prop_assert!(analytic_rber_all(&d.scaled(k), &refs).unwrap() >= analytic_rber_all(&d, &refs).unwrap());
    }

    #[test]
    fn failure_probabilities(l in 8usize..2048, t in 0usize..40, ber in 1e-6f64..0.05, dber in 1e-7f64..1e-2) {
        let p = p_ecfr(l, t, ber);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(p_ecfr(l, t, ber + dber) >= p - 1e-12);
        prop_assert!(p_ecfr(l + 1, t, ber) >= p - 1e-12);
        prop_assert!(p_ecfr(l, t + 1, ber) <= p + 1e-12);
        let lb = p_lbfail(1e-4, p, 4);
        prop_assert!((0.0..=1.0).contains(&lb) && lb >= 1e-4 && lb >= p);
        prop_assert!(p_parity(lb, 4, 8).unwrap() <= lb);
    }

    #[test]
    fn multirate_additivity(n in 1usize..10, pec in 100.0f64..5000.0, op in 0.05f64..0.5) {
        let seg = RateSegment { pec, op, wa: 2.0 };
        let one = multirate_lifetime(&[seg], 1.0, 1.0).unwrap();
        let many = multirate_lifetime(&vec![seg; n], 1.0, 1.0).unwrap();
        prop_assert!((many - n as f64 * one).abs() <= 1e-9 * many.max(1.0));
    }

    #[test]
    fn multirate_ratchets(rbers in prop::collection::vec(1e-5f64..1e-2, 1..30)) {
        let set = EccEngineSet::new(vec![
            EccEngine { rate: 0.95, max_rber: 5e-4 },
            EccEngine { rate: 0.93, max_rber: 1e-3 },
            EccEngine { rate: 0.90, max_rber: 5e-3 },
        ]).unwrap();
        let mut cur = 0;
        for r in rbers {
            let next = multirate_select(r, &set, cur).engine;
            prop_assert!(next >= cur);
            cur = next;
        }
    }

    #[test]
    fn refresh_interval_shrinks_with_wear(a in 0u32..5000, b in 0u32..5000) {
        let p = RefreshPolicy::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (il, ih) = (adaptive_refresh_interval(lo, 300.0, &p).unwrap(), adaptive_refresh_interval(hi, 300.0, &p).unwrap());
        prop_assert!(ih > 0.0 && ih <= il && il <= YEAR);
    }
}

#[derive(Clone, Debug)]
enum Action {
    Write(u64, u8),
    Read(u64),
    Gc,
}

fn action(footprint: u64) -> impl Strategy<Value = Action> {
    prop_oneof![
        6 => (0..footprint, any::<u8>()).prop_map(|(l, v)| Action::Write(l, v)),
        3 => (0..footprint).prop_map(Action::Read),
        1 => Just(Action::Gc),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ftl_reads_last_write(ops in prop::collection::vec(action(96), 1..1500), warm: bool) {
        let (blocks, ppb) = (16, 8);
        let cfg = FtlConfig {
            footprint: 96,
            warm: warm.then(Default::default),
            warm_window: 200,
            seconds_per_request: 3600.0,
            refresh_interval: Some(2.0 * 86_400.0),
            ..Default::default()
        };
        let mut ftl = Ftl::new(MemoryMedia::new(blocks, ppb, 2), cfg).unwrap();
        let mut model: HashMap<u64, Vec<u8>> = HashMap::new();
        for op in ops {
            match op {
                Action::Write(l, v) => {
                    let data = vec![v, l as u8];
                    ftl.host_write(l, &data).unwrap();
                    model.insert(l, data);
                }
                Action::Read(l) => {
                    let r = ftl.host_read(l).unwrap();
                    match model.get(&l) {
                        Some(d) => {
                            prop_assert!(!r.unwritten);
                            prop_assert_eq!(r.data.as_ref(), Some(d));
                        }
                        None => prop_assert!(r.unwritten),
                    }
                }
                Action::Gc => {
                    let _ = ftl.garbage_collect(flashsim_core::ftl::Pool::Cold);
                }
            }
            let (valid, invalid, free) = ftl.page_accounting();
            prop_assert_eq!(valid + invalid + free, blocks * ppb);
            prop_assert_eq!(valid, model.len());
        }
        for (l, d) in &model {
            let r = ftl.host_read(*l).unwrap();
            prop_assert_eq!(r.data.as_ref(), Some(d));
        }
        let s = ftl.stats();
        if s.host_writes > 0 {
            prop_assert!(s.write_amplification() >= 1.0);
        }
    }
}

#[test]
fn fresh_references_are_ordered() {
    let ch = ChannelModel::builtin();
    for mode in [CellMode::Slc, CellMode::Mlc, CellMode::Tlc] {
        let r: ReadRefs = ch.frozen_refs(mode);
        assert!(r.voltages().windows(2).all(|w| w[0] < w[1]));
        let gray = mode.gray();
        for l in 1..gray.levels() {
            assert_eq!((gray.code(l) ^ gray.code(l - 1)).count_ones(), 1, "{mode:?} level {l}");
        }
    }
}
