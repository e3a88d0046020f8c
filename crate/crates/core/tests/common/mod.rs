//! Oracles shared by the integration tests. Everything here is written
//! independently of the library code it checks.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stylecomp::ablation::PseudoSource;
use stylecomp::oldm::{DiscrepancyMemory, MemoryConfig, Slot};
use stylecomp::segnet::{Dimensions, NetworkParams};
use stylecomp::tensor::{DenseArray, Tape, Var};
use stylecomp::training::{record_loss, Batch, MemoryUse};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn with_entry(a: &DenseArray, i: usize, delta: f64) -> DenseArray {
    let mut d = a.data().to_vec();
    d[i] += delta;
    DenseArray::new(a.shape().to_vec(), d).unwrap()
}

/// Largest relative error between reverse-mode gradients and central
/// differences of the scalar function `f` over every entry of `inputs`.
pub fn fd_check<F>(inputs: &[DenseArray], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let root = f(&tape, &vars);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            grads
                .get(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; a.len()])
        })
        .collect();

    let eval = |arrays: &[DenseArray]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&tape, &vars);
        let v = out.value().data()[0];
        v
    };

    let mut worst: f64 = 0.0;
    for (k, a) in inputs.iter().enumerate() {
        for i in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[k] = with_entry(a, i, FD_STEP);
            let mut minus = inputs.to_vec();
            minus[k] = with_entry(a, i, -FD_STEP);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

/// Random memory with a random subset of filled slots and initialized keys.
pub fn random_memory(rng: &mut ChaCha8Rng, config: MemoryConfig, fill_prob: f64) -> DiscrepancyMemory {
    let c = config.dim;
    let mut mem = DiscrepancyMemory::new(config).unwrap();
    for cat in mem.categories_mut() {
        cat.key_initialized = rng.random_bool(0.8);
        cat.key = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        for slot in cat.slots.iter_mut() {
            *slot = Slot {
                instance_key: (0..c).map(|_| rng.random_range(-2.0..2.0)).collect(),
                discrepancy: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                filled: rng.random_bool(fill_prob),
            };
        }
    }
    mem
}

/// Random probability rows `[n×l]`.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, l: usize, sharpness: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * l);
    for _ in 0..n {
        let logits: Vec<f64> = (0..l).map(|_| sharpness * rng.random_range(-1.0..1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / z));
    }
    out
}

/// Per-pixel, per-category, per-slot recomputation of compensation with
/// category grouping and softmax slot weights.
pub fn naive_compensate(mem: &DiscrepancyMemory, features: &[f64], scores: &[f64]) -> Vec<f64> {
    let cfg = mem.config();
    let (c, l, k) = (cfg.dim, cfg.categories, cfg.top_k);
    let n = features.len() / c;
    let mut out = features.to_vec();
    for p in 0..n {
        let f = &features[p * c..(p + 1) * c];
        let s = &scores[p * l..(p + 1) * l];
        // Top-k categories: repeatedly take the first maximum not yet used.
        let mut chosen: Vec<usize> = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for cat in 0..l {
                if chosen.contains(&cat) {
                    continue;
                }
                match best {
                    Some(b) if s[cat] <= s[b] => {}
                    _ => best = Some(cat),
                }
            }
            chosen.push(best.unwrap());
        }
        let mut total = vec![0.0; c];
        for &cat in &chosen {
            let slots: Vec<&Slot> = mem.categories()[cat].slots.iter().filter(|s| s.filled).collect();
            if slots.is_empty() {
                continue;
            }
            let mut raw = Vec::new();
            for slot in &slots {
                let mut d = 0.0;
                for j in 0..c {
                    d += slot.instance_key[j] * f[j];
                }
                raw.push(d / (c as f64).sqrt());
            }
            let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|r| (r - m).exp()).sum();
            for (slot, r) in slots.iter().zip(&raw) {
                let w = (r - m).exp() / z;
                for j in 0..c {
                    total[j] += w * slot.discrepancy[j];
                }
            }
        }
        for j in 0..c {
            out[p * c + j] += total[j] / k as f64;
        }
    }
    out
}

/// Exact equality of every stored float, by bit pattern.
pub fn memory_bits(mem: &DiscrepancyMemory) -> Vec<u64> {
    let mut bits = Vec::new();
    for cat in mem.categories() {
        bits.extend(cat.key.iter().map(|v| v.to_bits()));
        bits.push(cat.key_initialized as u64);
        for s in &cat.slots {
            bits.extend(s.instance_key.iter().map(|v| v.to_bits()));
            bits.extend(s.discrepancy.iter().map(|v| v.to_bits()));
            bits.push(s.filled as u64);
        }
    }
    bits
}

/// Central-difference check of the full training objective with respect
/// to every network parameter, memory held fixed.
pub fn composed_loss_check(rng: &mut ChaCha8Rng, pseudo: PseudoSource) -> f64 {
    let dims = Dimensions {
        input: rng.random_range(2..5),
        hidden: rng.random_range(2..6),
        feature: rng.random_range(2..5),
        categories: rng.random_range(2..5),
    };
    let mut params = NetworkParams::zeros(dims).unwrap();
    for t in params.tensors_mut() {
        *t = uniform(rng, &t.shape().to_vec(), -1.0, 1.0);
    }
    let n = rng.random_range(2..7);
    let source = Batch {
        inputs: uniform(rng, &[n, dims.input], -2.0, 2.0),
        labels: Some((0..n).map(|_| rng.random_range(0..dims.categories)).collect()),
    };
    let target = Batch {
        inputs: uniform(rng, &[n, dims.input], -2.0, 2.0),
        labels: None,
    };
    let mut mc = MemoryConfig::new(dims.categories, rng.random_range(1..4), dims.feature);
    mc.top_k = rng.random_range(1..=dims.categories);
    let memory = random_memory(rng, mc, 0.7);
    let gamma = 1.0 / dims.categories as f64;

    let loss = |p: &NetworkParams| -> f64 {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let g = record_loss(&tape, &bound, &source, Some(&target), MemoryUse::Fixed(&memory), pseudo, gamma)
            .unwrap();
        let v = g.total.value().data()[0];
        v
    };

    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let graph = record_loss(&tape, &bound, &source, Some(&target), MemoryUse::Fixed(&memory), pseudo, gamma)
        .unwrap();
    let grads = bound.collect_gradients(&tape.backward(graph.total).unwrap()).unwrap();

    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.tensors_mut()[k] = with_entry(params.tensors()[k], i, FD_STEP);
            *minus.tensors_mut()[k] = with_entry(params.tensors()[k], i, -FD_STEP);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}
