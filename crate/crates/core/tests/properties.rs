mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylecomp::oldm::{DiscrepancyMemory, MemoryConfig};
use stylecomp::pseudo::pseudo_rows;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn ema_softmax_updates_stay_inside_the_contributing_norm_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (l, c) = (4, 6);
    let mut cfg = MemoryConfig::new(l, 5, c);
    cfg.lambda = 0.3;
    cfg.gamma = 0.3;
    let mut mem = DiscrepancyMemory::new(cfg).unwrap();
    let (mut src_max, mut tgt_max, mut disc_max) = (0.0f64, 0.0f64, 0.0f64);
    let tol = 1e-12;

    for step in 0..10_000 {
        let f: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let scores = random_scores(&mut rng, 1, l, 4.0);
        let top = (0..l).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        if step % 3 == 0 {
            src_max = src_max.max(norm(&f));
            mem.update_category_keys_rows(&f, &scores, &[top]).unwrap();
        } else {
            let cat = &mem.categories()[top];
            if cat.key_initialized {
                let d: Vec<f64> = cat.key.iter().zip(&f).map(|(a, b)| a - b).collect();
                tgt_max = tgt_max.max(norm(&f));
                disc_max = disc_max.max(norm(&d));
            }
            mem.update_instance_and_discrepancy_rows(&f, &scores).unwrap();
        }
        for cat in mem.categories() {
            if cat.key_initialized {
                assert!(norm(&cat.key) <= src_max + tol, "step {step}: key");
            }
            for s in cat.filled() {
                assert!(norm(&s.instance_key) <= tgt_max + tol, "step {step}: instance key");
                assert!(norm(&s.discrepancy) <= disc_max + tol, "step {step}: discrepancy");
            }
        }
    }
    assert!(mem.filled_slots() > 0);
}

#[test]
fn compensation_matches_naive_loops_under_every_top_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for l in 1..=5 {
        for k in 1..=l {
            let mut cfg = MemoryConfig::new(l, 3, 4);
            cfg.top_k = k;
            let mem = random_memory(&mut rng, cfg, 0.6);
            let f: Vec<f64> = (0..30 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = random_scores(&mut rng, 30, l, 2.0);
            let got = mem.compensate_rows(&f, &s).unwrap();
            let want = naive_compensate(&mem, &f, &s);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "l={l} k={k}");
            }
        }
    }
}

fn score_rows(l: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, l), 1..40).prop_map(|rows| {
        rows.into_iter()
            .flat_map(|r| {
                let z: f64 = r.iter().sum::<f64>() + 1e-3;
                let mut r: Vec<f64> = r.iter().map(|v| v / z).collect();
                // Put the rounding slack on the last channel so rows sum to 1.
                let rest: f64 = r[..r.len() - 1].iter().sum();
                *r.last_mut().unwrap() = 1.0 - rest;
                r
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn raising_gamma_only_removes_labels(scores in score_rows(4), g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = pseudo_rows(&scores, 4, lo).unwrap();
        let b = pseudo_rows(&scores, 4, hi).unwrap();
        for p in 0..a.ignore.len() {
            if a.ignore[p] == 1.0 {
                prop_assert_eq!(b.ignore[p], 1.0);
            }
            if b.ignore[p] == 0.0 {
                prop_assert_eq!(&a.targets[p * 4..p * 4 + 4], &b.targets[p * 4..p * 4 + 4]);
            }
        }
    }

    #[test]
    fn rejected_target_pixels_leave_memory_untouched(seed in any::<u64>(), gamma in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = MemoryConfig::new(3, 4, 5);
        cfg.gamma = gamma;
        let mut mem = random_memory(&mut rng, cfg, 0.5);
        let before = memory_bits(&mem);
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = random_scores(&mut rng, 1, 3, 1.0);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mem.update_instance_and_discrepancy_rows(&f, &s).unwrap();
        if max <= gamma {
            prop_assert_eq!(memory_bits(&mem), before);
        }
    }
}
