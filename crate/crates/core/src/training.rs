//! Supervision and the training loop.
//!
//! One step records a fresh tape and runs, in order: source encode/decode
//! and the ground-truth loss; the category-key update; target encode and
//! intermediate-head scores; the instance/discrepancy update; compensation,
//! decoding and pseudo annotation; the pseudo losses on head and decoder;
//! one backward pass on the sum; one SGD-with-momentum update. Memory
//! writes use the features of the current (pre-update) parameters. During
//! warmup only the first and last parts run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{PseudoSource, Variant};
use crate::error::{Error, Result};
use crate::eval::{domain_gap, ClassMeans, EvalReport, IouAccumulator};
use crate::labels::LabelGrid;
use crate::oldm::{DiscrepancyMemory, MemoryConfig, UpdateCounts, UpdateMode, WeightNorm};
use crate::pseudo::pseudo_rows;
use crate::segnet::{BoundParams, Dimensions, HeadInit, NetworkParams, ScoreMap};
use crate::synthdata::{make_benchmark, Benchmark, BenchmarkConfig, SceneSample, SynthConfig, UnlabeledScene};
use crate::tensor::{softmax_rows, DenseArray, Tape, Var};

/// Named random substreams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    Data = 1,
    Init = 2,
    Training = 3,
}

pub fn substream_rng(seed: u64, stream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed of the benchmark generated for a run seed.
pub fn data_seed(seed: u64) -> u64 {
    use rand::RngCore;
    substream_rng(seed, Substream::Data).next_u64()
}

/// Flat run configuration. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,

    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub categories: usize,
    pub head_init: HeadInit,

    pub slots: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub top_k: usize,
    pub update_mode: UpdateMode,
    pub weight_norm: WeightNorm,
    pub variant: Variant,

    pub source_scenes: usize,
    pub target_train_scenes: usize,
    pub target_test_scenes: usize,
    pub open_test_scenes: usize,
    /// Source scenes used for the class means in the domain-gap metric.
    pub gap_source_scenes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub target_subdomains: usize,
    pub open_subdomains: usize,
    pub min_style_separation: f64,
    pub sigma_inst: f64,
    pub sigma_pix: f64,
    pub base_scale: f64,
    pub source_style_scale: f64,
    pub subdomain_shift_scale: f64,
    pub category_shift_scale: f64,
    pub scale_spread: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = Dimensions::default();
        let synth = SynthConfig::default();
        TrainConfig {
            seed: 0,
            epochs: 12,
            warmup_epochs: 5,
            source_batch: 8,
            target_batch: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            input_dim: dims.input,
            hidden_dim: dims.hidden,
            feature_dim: dims.feature,
            categories: dims.categories,
            head_init: HeadInit::default(),
            slots: 8,
            lambda: 0.05,
            gamma: 0.8,
            top_k: 2,
            update_mode: UpdateMode::Ema,
            weight_norm: WeightNorm::Softmax,
            variant: Variant::DEFAULT,
            source_scenes: 2000,
            target_train_scenes: 2000,
            target_test_scenes: 400,
            open_test_scenes: 400,
            gap_source_scenes: 400,
            grid_height: synth.height,
            grid_width: synth.width,
            target_subdomains: synth.target_subdomains,
            open_subdomains: synth.open_subdomains,
            min_style_separation: synth.min_style_separation,
            sigma_inst: synth.sigma_inst,
            sigma_pix: synth.sigma_pix,
            base_scale: synth.base_scale,
            source_style_scale: synth.source_style_scale,
            subdomain_shift_scale: synth.subdomain_shift_scale,
            category_shift_scale: synth.category_shift_scale,
            scale_spread: synth.scale_spread,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> Dimensions {
        Dimensions {
            input: self.input_dim,
            hidden: self.hidden_dim,
            feature: self.feature_dim,
            categories: self.categories,
        }
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            categories: self.categories,
            slots: self.slots,
            dim: self.feature_dim,
            lambda: self.lambda,
            gamma: self.gamma,
            top_k: self.top_k,
            update_mode: self.update_mode,
            weight_norm: self.weight_norm,
            strategy: self.variant.spec().strategy,
        }
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            seed: data_seed(self.seed),
            source: self.source_scenes,
            target_train: self.target_train_scenes,
            target_test: self.target_test_scenes,
            open_test: self.open_test_scenes,
            synth: SynthConfig {
                categories: self.categories,
                input_dim: self.input_dim,
                height: self.grid_height,
                width: self.grid_width,
                base_scale: self.base_scale,
                source_style_scale: self.source_style_scale,
                subdomain_shift_scale: self.subdomain_shift_scale,
                category_shift_scale: self.category_shift_scale,
                scale_spread: self.scale_spread,
                target_subdomains: self.target_subdomains,
                open_subdomains: self.open_subdomains,
                min_style_separation: self.min_style_separation,
                sigma_inst: self.sigma_inst,
                sigma_pix: self.sigma_pix,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("source_batch", self.source_batch),
            ("target_batch", self.target_batch),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("source_scenes", self.source_scenes),
            ("target_train_scenes", self.target_train_scenes),
            ("target_test_scenes", self.target_test_scenes),
            ("gap_source_scenes", self.gap_source_scenes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!("{} must be below epochs ({})", self.warmup_epochs, self.epochs),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if self.gap_source_scenes > self.source_scenes {
            return Err(Error::config("gap_source_scenes", "exceeds source_scenes"));
        }
        self.memory_config().validate()?;
        self.benchmark_config().synth.validate()?;
        Ok(())
    }
}

/// Loss terms of one step or an epoch average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gt_loss: f64,
    pub pse_intermediate: f64,
    pub pse_final: f64,
}

impl LossBreakdown {
    fn from_parts(gt_loss: f64, pse_intermediate: f64, pse_final: f64) -> Self {
        LossBreakdown {
            total: gt_loss + pse_intermediate + pse_final,
            gt_loss,
            pse_intermediate,
            pse_final,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.gt_loss, self.pse_intermediate, self.pse_final]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn one_hot_rows(labels: &[usize], categories: usize) -> Result<DenseArray> {
    let mut data = vec![0.0; labels.len() * categories];
    for (row, &l) in labels.iter().enumerate() {
        if l >= categories {
            return Err(Error::Validation(format!("label {l} outside 0..{categories}")));
        }
        data[row * categories + l] = 1.0;
    }
    DenseArray::new(vec![labels.len(), categories], data)
}

/// Pixel-mean cross entropy of decoder logits `[n×L]` against labels.
pub fn loss_gt<'t>(tape: &'t Tape, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let categories = logits.value().shape()[1];
    let targets = one_hot_rows(labels, categories)?;
    let keep = DenseArray::zeros(&[labels.len()])?;
    tape.softmax_cross_entropy(logits, &targets, &keep)
}

/// `CE(head, Y) + CE(decoder on compensated features, Y)` over pixels
/// that are not ignored. Returns the sum node and the two term nodes.
pub fn loss_pse<'t>(
    tape: &'t Tape,
    head_logits: Var<'t>,
    comp_logits: Var<'t>,
    targets: &DenseArray,
    ignore: &DenseArray,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let inter = tape.softmax_cross_entropy(head_logits, targets, ignore)?;
    let fin = tape.softmax_cross_entropy(comp_logits, targets, ignore)?;
    Ok((inter.add(fin)?, inter, fin))
}

/// Pixels of a batch flattened into rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseArray,
    /// Present for labeled batches only.
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn labeled(scenes: &[&SceneSample]) -> Result<Self> {
        let mut labels = Vec::new();
        for s in scenes {
            labels.extend_from_slice(&s.labels.labels);
        }
        Ok(Batch {
            inputs: stack(scenes.iter().map(|s| &s.inputs))?,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(scenes: &[&UnlabeledScene]) -> Result<Self> {
        Ok(Batch {
            inputs: stack(scenes.iter().map(|s| &s.inputs))?,
            labels: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.inputs.shape()[0]
    }
}

fn stack<'a>(grids: impl Iterator<Item = &'a DenseArray>) -> Result<DenseArray> {
    let mut data = Vec::new();
    let mut dim = 0;
    for g in grids {
        dim = g.shape()[g.rank() - 1];
        data.extend_from_slice(g.data());
    }
    if dim == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let rows = data.len() / dim;
    DenseArray::new(vec![rows, dim], data)
}

/// How a loss evaluation may touch the memory.
#[derive(Debug)]
pub enum MemoryUse<'m> {
    /// No memory: compensation is the identity.
    Disabled,
    /// Read-only; used for gradient checks and evaluation.
    Fixed(&'m DiscrepancyMemory),
    /// Memorization updates run before compensation.
    Learn(&'m mut DiscrepancyMemory),
}

/// Counts reported by one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounts {
    pub category_key_updates: usize,
    pub instance: UpdateCounts,
    pub pseudo_labeled: usize,
}

/// Nodes of one recorded loss.
pub struct StepGraph<'t> {
    pub total: Var<'t>,
    pub losses: LossBreakdown,
    pub counts: StepCounts,
}

/// Records the full objective for one (source, target) batch pair.
///
/// With `target = None` (warmup) only the ground-truth term is built.
pub fn record_loss<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    source: &Batch,
    target: Option<&Batch>,
    mut memory: MemoryUse<'_>,
    pseudo: PseudoSource,
    gamma: f64,
) -> Result<StepGraph<'t>> {
    let labels = source
        .labels
        .as_deref()
        .ok_or_else(|| Error::Contract("source batch needs labels".into()))?;
    let mut counts = StepCounts::default();
    let fs = params.encode(tape.constant(source.inputs.clone()))?;
    let logits_s = params.decode_logits(fs)?;
    let gt = loss_gt(tape, logits_s, labels)?;
    let gt_value = gt.value().data()[0];

    let Some(target) = target else {
        return Ok(StepGraph {
            total: gt,
            losses: LossBreakdown::from_parts(gt_value, 0.0, 0.0),
            counts,
        });
    };

    let categories = logits_s.value().shape()[1];
    if let MemoryUse::Learn(mem) = &mut memory {
        let probs = softmax_rows(logits_s.value().data(), categories);
        counts.category_key_updates =
            mem.update_category_keys_rows(fs.value().data(), &probs, labels)?;
    }

    let ft = params.encode(tape.constant(target.inputs.clone()))?;
    let head = params.head_logits(ft)?;
    let head_probs = softmax_rows(head.value().data(), categories);

    if let MemoryUse::Learn(mem) = &mut memory {
        counts.instance = mem.update_instance_and_discrepancy_rows(ft.value().data(), &head_probs)?;
    }
    let mem: Option<&DiscrepancyMemory> = match &memory {
        MemoryUse::Disabled => None,
        MemoryUse::Fixed(m) => Some(m),
        MemoryUse::Learn(m) => Some(m),
    };
    let compensated = match mem {
        Some(m) => {
            let plan = m.plan(ft.value().data(), &head_probs)?;
            plan.record(tape, ft)?
        }
        None => ft,
    };
    let comp_logits = params.decode_logits(compensated)?;

    let source_probs = match pseudo {
        PseudoSource::None => {
            return Ok(StepGraph {
                total: gt,
                losses: LossBreakdown::from_parts(gt_value, 0.0, 0.0),
                counts,
            })
        }
        PseudoSource::Intermediate => head_probs,
        PseudoSource::Final => softmax_rows(comp_logits.value().data(), categories),
    };
    let rows = pseudo_rows(&source_probs, categories, gamma)?;
    counts.pseudo_labeled = rows.labeled();
    let n = target.rows();
    let targets = DenseArray::new(vec![n, categories], rows.targets)?;
    let ignore = DenseArray::new(vec![n], rows.ignore)?;
    let (pse, inter, fin) = loss_pse(tape, head, comp_logits, &targets, &ignore)?;
    let total = gt.add(pse)?;
    let losses = LossBreakdown::from_parts(gt_value, inter.value().data()[0], fin.value().data()[0]);
    Ok(StepGraph {
        total,
        losses,
        counts,
    })
}

/// SGD with heavy-ball momentum: `v <- mu v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, params: &NetworkParams) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &[DenseArray]) -> Result<()> {
        for ((p, v), g) in params.tensors_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(v.iter_mut())
                .zip(g.data())
                .map(|((&pv, vv), &gv)| {
                    *vv = self.momentum * *vv + gv;
                    pv - self.learning_rate * *vv
                })
                .collect();
            *p = DenseArray::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// One optimisation step; returns the losses and memory/pseudo counts.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut NetworkParams,
    optimizer: &mut Sgd,
    memory: Option<&mut DiscrepancyMemory>,
    source: &Batch,
    target: &Batch,
    warmup: bool,
    pseudo: PseudoSource,
    gamma: f64,
) -> Result<(LossBreakdown, StepCounts)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let use_memory = match memory {
        Some(m) => MemoryUse::Learn(m),
        None => MemoryUse::Disabled,
    };
    let graph = record_loss(
        &tape,
        &bound,
        source,
        (!warmup).then_some(target),
        use_memory,
        pseudo,
        gamma,
    )?;
    let grads = tape.backward(graph.total)?;
    let grads = bound.collect_gradients(&grads)?;
    optimizer.step(params, &grads)?;
    Ok((graph.losses, graph.counts))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub gt_loss: f64,
    pub pse_intermediate: f64,
    pub pse_final: f64,
    pub total: f64,
    pub miou_target: f64,
    pub domain_gap: f64,
    /// Source pixels accepted into category keys.
    pub key_updates: usize,
    /// Target pixels accepted into instance slots.
    pub instance_updates: usize,
    /// Target pixels that received a pseudo label.
    pub pseudo_labeled: usize,
}

pub const METRICS_HEADER: &str =
    "epoch,gt_loss,pse_intermediate,pse_final,total,miou_target,domain_gap";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch, m.gt_loss, m.pse_intermediate, m.pse_final, m.total, m.miou_target, m.domain_gap
        ));
    }
    out
}

/// Source class means of encoder features, the reference for the gap metric.
pub fn source_feature_means(params: &NetworkParams, scenes: &[SceneSample]) -> Result<ClassMeans> {
    let dims = params.dims();
    let mut means = ClassMeans::new(dims.categories, dims.feature);
    for chunk in scenes.chunks(64) {
        let batch = Batch::labeled(&chunk.iter().collect::<Vec<_>>())?;
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let f = p.encode(tape.constant(batch.inputs.clone()))?;
        means.add_rows(f.value().data(), batch.labels.as_deref().unwrap_or_default())?;
    }
    Ok(means)
}

/// Per-pixel predictions (decoder on compensated features when a memory
/// is given) and the raw and compensated target features.
pub struct Inference {
    pub predictions: Vec<LabelGrid>,
    pub raw_means: ClassMeans,
    pub compensated_means: ClassMeans,
}

pub fn infer(
    params: &NetworkParams,
    memory: Option<&DiscrepancyMemory>,
    scenes: &[SceneSample],
) -> Result<Inference> {
    let dims = params.dims();
    let mut raw_means = ClassMeans::new(dims.categories, dims.feature);
    let mut compensated_means = ClassMeans::new(dims.categories, dims.feature);
    let mut predictions = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(64) {
        let batch = Batch::labeled(&chunk.iter().collect::<Vec<_>>())?;
        let labels = batch.labels.as_deref().unwrap_or_default();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let f = p.encode(tape.constant(batch.inputs.clone()))?;
        let fv = f.value().clone();
        raw_means.add_rows(fv.data(), labels)?;
        let fc = match memory {
            Some(m) => {
                let head = p.head_logits(f)?;
                let probs = softmax_rows(head.value().data(), dims.categories);
                let comp = m.compensate_rows(fv.data(), &probs)?;
                DenseArray::new(fv.shape().to_vec(), comp)?
            }
            None => fv,
        };
        compensated_means.add_rows(fc.data(), labels)?;
        let logits = p.decode_logits(tape.constant(fc))?;
        let per_scene = chunk[0].labels.len();
        let l = dims.categories;
        let scores = ScoreMap::raw(logits.value().clone().reshape(&[batch.rows(), 1, l])?)?;
        let labels_flat = scores.argmax();
        for (scene, preds) in chunk.iter().zip(labels_flat.chunks(per_scene)) {
            predictions.push(LabelGrid::new(scene.height(), scene.width(), preds.to_vec())?);
        }
    }
    Ok(Inference {
        predictions,
        raw_means,
        compensated_means,
    })
}

/// mIoU and domain gaps on a labeled split.
pub fn evaluate(
    params: &NetworkParams,
    memory: Option<&DiscrepancyMemory>,
    scenes: &[SceneSample],
    source_means: &ClassMeans,
) -> Result<EvalReport> {
    let inference = infer(params, memory, scenes)?;
    let mut acc = IouAccumulator::new(params.dims().categories);
    for (p, s) in inference.predictions.iter().zip(scenes) {
        acc.add(p, &s.labels)?;
    }
    let mut report = acc.report();
    report.domain_gap_before = Some(domain_gap(&inference.raw_means, source_means)?.gap);
    report.domain_gap_after = Some(domain_gap(&inference.compensated_means, source_means)?.gap);
    Ok(report)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub memory: Option<DiscrepancyMemory>,
    pub history: Vec<EpochMetrics>,
}

/// Warmup epochs on source only, then joint epochs with memory and pseudo
/// supervision. Deterministic given the config.
pub fn train(
    cfg: &TrainConfig,
    bench: &Benchmark,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.variant.spec();
    let mut params = NetworkParams::init_with_head(
        cfg.dims(),
        cfg.head_init,
        &mut substream_rng(cfg.seed, Substream::Init),
    )?;
    let mut optimizer = Sgd::new(cfg.learning_rate, cfg.momentum, &params);
    let mut memory = spec
        .memory
        .then(|| DiscrepancyMemory::new(cfg.memory_config()))
        .transpose()?;
    let mut order_rng = substream_rng(cfg.seed, Substream::Training);
    let gap_source = &bench.source[..cfg.gap_source_scenes.min(bench.source.len())];

    let mut src_order: Vec<usize> = (0..bench.source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..bench.target_train.len()).collect();
    let steps = bench.source.len().div_ceil(cfg.source_batch);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let warmup = epoch < cfg.warmup_epochs;
        src_order.shuffle(&mut order_rng);
        tgt_order.shuffle(&mut order_rng);
        let mut sum = LossBreakdown::default();
        let mut counts = StepCounts::default();
        for step in 0..steps {
            let s_idx = &src_order[step * cfg.source_batch..((step + 1) * cfg.source_batch).min(src_order.len())];
            let t_start = (step * cfg.target_batch) % tgt_order.len();
            let t_idx: Vec<usize> = (0..cfg.target_batch)
                .map(|i| tgt_order[(t_start + i) % tgt_order.len()])
                .collect();
            let source = Batch::labeled(&s_idx.iter().map(|&i| &bench.source[i]).collect::<Vec<_>>())?;
            let target =
                Batch::unlabeled(&t_idx.iter().map(|&i| &bench.target_train[i]).collect::<Vec<_>>())?;
            let result = train_step(
                &mut params,
                &mut optimizer,
                memory.as_mut(),
                &source,
                &target,
                warmup,
                spec.pseudo,
                cfg.gamma,
            );
            let (losses, step_counts) = match result {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: what,
                    })
                }
                Err(e) => return Err(e),
            };
            if !losses.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{losses:?}"),
                });
            }
            counts.category_key_updates += step_counts.category_key_updates;
            counts.instance += step_counts.instance;
            counts.pseudo_labeled += step_counts.pseudo_labeled;
            sum.gt_loss += losses.gt_loss;
            sum.pse_intermediate += losses.pse_intermediate;
            sum.pse_final += losses.pse_final;
        }
        let k = steps as f64;
        let avg = LossBreakdown::from_parts(sum.gt_loss / k, sum.pse_intermediate / k, sum.pse_final / k);
        let source_means = source_feature_means(&params, gap_source)?;
        let report = evaluate(&params, memory.as_ref(), &bench.target_test, &source_means)?;
        let metrics = EpochMetrics {
            epoch,
            gt_loss: avg.gt_loss,
            pse_intermediate: avg.pse_intermediate,
            pse_final: avg.pse_final,
            total: avg.total,
            miou_target: report.miou,
            domain_gap: report.domain_gap_after.unwrap_or(f64::NAN),
            key_updates: counts.category_key_updates,
            instance_updates: counts.instance.accepted,
            pseudo_labeled: counts.pseudo_labeled,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    if let Some(m) = memory.as_mut() {
        m.freeze();
    }
    Ok(TrainOutcome {
        params,
        memory,
        history,
    })
}

/// A trained run with its final evaluation on both test splits.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: NetworkParams,
    pub memory: Option<DiscrepancyMemory>,
    pub history: Vec<EpochMetrics>,
    pub target: EvalReport,
    pub open: EvalReport,
}

/// Builds the benchmark, trains, and evaluates on target and open splits.
pub fn run(cfg: &TrainConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    cfg.validate()?;
    let bench = make_benchmark(&cfg.benchmark_config())?;
    run_on(cfg, &bench, on_epoch)
}

pub fn run_on(
    cfg: &TrainConfig,
    bench: &Benchmark,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    let out = train(cfg, bench, on_epoch)?;
    let gap_source = &bench.source[..cfg.gap_source_scenes.min(bench.source.len())];
    let source_means = source_feature_means(&out.params, gap_source)?;
    let target = evaluate(&out.params, out.memory.as_ref(), &bench.target_test, &source_means)?;
    let open = if bench.open_test.is_empty() {
        target.clone()
    } else {
        evaluate(&out.params, out.memory.as_ref(), &bench.open_test, &source_means)?
    };
    Ok(RunOutcome {
        params: out.params,
        memory: out.memory,
        history: out.history,
        target,
        open,
    })
}
