//! Object-level discrepancy memory.
//!
//! For every category `l` the memory keeps a source-domain category key
//! `A_l` and `M` slots, each pairing a target-domain instance key `N_{l,m}`
//! with a discrepancy vector `D_{l,m}` that estimates `A_l - F_t` for target
//! features resembling `N_{l,m}`.
//!
//! Two memorization updates write into it:
//! [`DiscrepancyMemory::update_category_keys`] (source features whose
//! decoder prediction matches ground truth) and
//! [`DiscrepancyMemory::update_instance_and_discrepancy`] (target features
//! whose intermediate-head confidence exceeds `gamma`). Compensation reads
//! it: each target feature gets the similarity-weighted discrepancies of its
//! top-K categories averaged and added on.
//!
//! Slots are filled one by one with the first accepted features and only
//! then updated; empty slots never take part in weighting or compensation.
//!
//! Memory contents are plain data. The differentiable compensation node
//! built by [`CompensationPlan::record`] propagates gradients into the
//! query features only.

use serde::{Deserialize, Serialize};

use crate::cluster::lloyd;
use crate::error::{Error, Result};
use crate::labels::LabelGrid;
use crate::segnet::{FeatureMap, ScoreMap};
use crate::tensor::{argmax, softmax_into, DenseArray, Tape, Var};

pub const SNAPSHOT_VERSION: u32 = 1;
const KMEANS_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Running average: `x <- (1 - a) x + a v`.
    Ema,
    /// Literal accumulation: `x <- x + a v`.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    Softmax,
    Raw,
}

/// Source of the category key used in `D = A - F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKeys {
    /// Running key across all batches.
    Global,
    /// Mean of the current batch's accepted features, overwritten each batch.
    Local,
    /// Mean of the category's filled instance keys; no source update.
    MeanInstances,
}

/// What slot weights are computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKeys {
    /// Similarity to the instance keys.
    Instance,
    /// No keys: every slot weighs `1/M`.
    MeanDiscrepancy,
    /// Similarity to the discrepancy vectors themselves.
    DiscrepancySimilarity,
}

/// How many full slots an accepted target feature updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotUpdate {
    All,
    /// Only the highest-weight slot.
    Top1,
    /// The `ceil(M/2)` highest-weight slots.
    TopHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancySource {
    Stored,
    /// `A_l - N_{l,m}` in place of the stored discrepancy.
    KeyDifference,
}

/// How slots are partitioned into the sets compensation chooses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One set per category, chosen by the top-K head scores.
    Category,
    /// Every filled slot in a single set.
    Merged,
    /// `L` k-means clusters over instance keys, chosen by centroid similarity.
    KMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationWeights {
    Similarity,
    /// Unweighted mean of the set's discrepancies.
    Uniform,
}

/// Mechanism switches; the default is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub category_keys: CategoryKeys,
    pub slot_keys: SlotKeys,
    pub slot_update: SlotUpdate,
    pub discrepancy: DiscrepancySource,
    pub grouping: Grouping,
    pub compensation: CompensationWeights,
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy {
            category_keys: CategoryKeys::Global,
            slot_keys: SlotKeys::Instance,
            slot_update: SlotUpdate::All,
            discrepancy: DiscrepancySource::Stored,
            grouping: Grouping::Category,
            compensation: CompensationWeights::Similarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub categories: usize,
    pub slots: usize,
    pub dim: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub top_k: usize,
    pub update_mode: UpdateMode,
    pub weight_norm: WeightNorm,
    pub strategy: Strategy,
}

impl MemoryConfig {
    pub fn new(categories: usize, slots: usize, dim: usize) -> Self {
        MemoryConfig {
            categories,
            slots,
            dim,
            lambda: 0.05,
            gamma: 0.8,
            top_k: 2,
            update_mode: UpdateMode::Ema,
            weight_norm: WeightNorm::Softmax,
            strategy: Strategy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 {
            return Err(Error::config("categories", "must be positive"));
        }
        if self.slots == 0 {
            return Err(Error::config("slots", "must be positive"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config("lambda", format!("{} is not positive", self.lambda)));
        }
        if self.update_mode == UpdateMode::Ema && self.lambda > 1.0 {
            return Err(Error::config("lambda", "ema mode needs lambda in (0, 1]"));
        }
        check_gamma(self.gamma)?;
        if self.top_k == 0 || self.top_k > self.categories {
            return Err(Error::config(
                "top_k",
                format!("{} not in 1..={}", self.top_k, self.categories),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("gamma", format!("{gamma} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub instance_key: Vec<f64>,
    pub discrepancy: Vec<f64>,
    pub filled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMemory {
    pub key: Vec<f64>,
    pub key_initialized: bool,
    pub slots: Vec<Slot>,
}

impl CategoryMemory {
    pub fn filled(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter().filter(|s| s.filled)
    }

    pub fn filled_count(&self) -> usize {
        self.filled().count()
    }
}

/// Per-slot weights of one query against one set of slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotWeights(pub Vec<f64>);

impl SlotWeights {
    /// `key·query / sqrt(C)` for each key, then optionally a softmax.
    pub fn compute<'a>(
        keys: impl IntoIterator<Item = &'a [f64]>,
        query: &[f64],
        norm: WeightNorm,
    ) -> Self {
        let scale = (query.len() as f64).sqrt();
        let raw: Vec<f64> = keys.into_iter().map(|k| dot(k, query) / scale).collect();
        match norm {
            WeightNorm::Raw => SlotWeights(raw),
            WeightNorm::Softmax => {
                let mut w = vec![0.0; raw.len()];
                if !raw.is_empty() {
                    softmax_into(&raw, &mut w);
                }
                SlotWeights(w)
            }
        }
    }

    pub fn uniform(n: usize) -> Self {
        SlotWeights(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Bookkeeping returned by the instance/discrepancy update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    /// Pixels that passed the confidence gate and wrote into memory.
    pub accepted: usize,
    /// Confident pixels skipped because their category key was not set yet.
    pub rejected: usize,
    /// Slot writes, counting a fill as one write.
    pub slot_writes: usize,
}

impl std::ops::AddAssign for UpdateCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.accepted += rhs.accepted;
        self.rejected += rhs.rejected;
        self.slot_writes += rhs.slot_writes;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyMemory {
    config: MemoryConfig,
    categories: Vec<CategoryMemory>,
    frozen: bool,
}

impl DiscrepancyMemory {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let categories = (0..config.categories)
            .map(|_| CategoryMemory {
                key: vec![0.0; c],
                key_initialized: false,
                slots: (0..config.slots)
                    .map(|_| Slot {
                        instance_key: vec![0.0; c],
                        discrepancy: vec![0.0; c],
                        filled: false,
                    })
                    .collect(),
            })
            .collect();
        Ok(DiscrepancyMemory {
            config,
            categories,
            frozen: false,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn categories(&self) -> &[CategoryMemory] {
        &self.categories
    }

    /// Direct write access for tests and tooling; bypasses the gates.
    pub fn categories_mut(&mut self) -> &mut [CategoryMemory] {
        &mut self.categories
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the memory read-only; every later update fails.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn filled_slots(&self) -> usize {
        self.categories.iter().map(|c| c.filled_count()).sum()
    }

    fn check_writable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::State("memory is frozen; updates are disabled".into()));
        }
        Ok(())
    }

    fn check_features(&self, n: usize, features: &[f64], scores: &[f64]) -> Result<()> {
        if features.len() != n * self.config.dim {
            return Err(Error::Dimension {
                op: "memory features",
                left: vec![n, self.config.dim],
                right: vec![features.len()],
            });
        }
        if scores.len() != n * self.config.categories {
            return Err(Error::Dimension {
                op: "memory scores",
                left: vec![n, self.config.categories],
                right: vec![scores.len()],
            });
        }
        Ok(())
    }

    /// Category key used when computing discrepancies for category `l`,
    /// or `None` when it is not available yet.
    fn effective_key(&self, l: usize, fallback: &[f64]) -> Option<Vec<f64>> {
        let cat = &self.categories[l];
        match self.config.strategy.category_keys {
            CategoryKeys::Global | CategoryKeys::Local => {
                cat.key_initialized.then(|| cat.key.clone())
            }
            CategoryKeys::MeanInstances => {
                let filled: Vec<&Slot> = cat.filled().collect();
                if filled.is_empty() {
                    Some(fallback.to_vec())
                } else {
                    Some(mean_of(filled.iter().map(|s| s.instance_key.as_slice())))
                }
            }
        }
    }

    /// Source-side update of the category keys from `H×W` maps.
    pub fn update_category_keys(
        &mut self,
        features: &FeatureMap,
        scores: &ScoreMap,
        gt: &LabelGrid,
    ) -> Result<usize> {
        scores.require_normalized("update_category_keys")?;
        let n = features.height() * features.width();
        if gt.len() != n || scores.height() * scores.width() != n {
            return Err(Error::Dimension {
                op: "update_category_keys",
                left: vec![features.height(), features.width()],
                right: vec![gt.height, gt.width],
            });
        }
        self.update_category_keys_rows(features.values().data(), scores.values().data(), &gt.labels)
    }

    /// Row form of [`Self::update_category_keys`]: `features` is `[n×C]`,
    /// `scores` the decoder's `[n×L]` probabilities.
    pub fn update_category_keys_rows(
        &mut self,
        features: &[f64],
        scores: &[f64],
        labels: &[usize],
    ) -> Result<usize> {
        self.check_writable()?;
        let (c, l_count) = (self.config.dim, self.config.categories);
        self.check_features(labels.len(), features, scores)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= l_count) {
            return Err(Error::Validation(format!("label {bad} outside 0..{l_count}")));
        }
        if self.config.strategy.category_keys == CategoryKeys::MeanInstances {
            return Ok(0);
        }
        let lambda = self.config.lambda;
        let mut accepted = 0;
        let mut batch_sum = vec![vec![0.0; c]; l_count];
        let mut batch_count = vec![0usize; l_count];

        for ((f, s), &label) in features
            .chunks_exact(c)
            .zip(scores.chunks_exact(l_count))
            .zip(labels)
        {
            if argmax(s) != label {
                continue;
            }
            accepted += 1;
            match self.config.strategy.category_keys {
                CategoryKeys::Local => {
                    batch_count[label] += 1;
                    add_scaled(&mut batch_sum[label], 1.0, f);
                }
                _ => {
                    let cat = &mut self.categories[label];
                    if !cat.key_initialized {
                        cat.key.copy_from_slice(f);
                        cat.key_initialized = true;
                    } else {
                        blend(&mut cat.key, f, lambda, self.config.update_mode);
                    }
                }
            }
        }
        if self.config.strategy.category_keys == CategoryKeys::Local {
            for (l, (sum, &count)) in batch_sum.iter().zip(&batch_count).enumerate() {
                if count > 0 {
                    let cat = &mut self.categories[l];
                    for (k, s) in cat.key.iter_mut().zip(sum) {
                        *k = s / count as f64;
                    }
                    cat.key_initialized = true;
                }
            }
        }
        Ok(accepted)
    }

    /// Target-side update of instance keys and discrepancies from `H×W`
    /// maps and intermediate-head scores.
    pub fn update_instance_and_discrepancy(
        &mut self,
        features: &FeatureMap,
        scores: &ScoreMap,
    ) -> Result<UpdateCounts> {
        scores.require_normalized("update_instance_and_discrepancy")?;
        self.update_instance_and_discrepancy_rows(features.values().data(), scores.values().data())
    }

    pub fn update_instance_and_discrepancy_rows(
        &mut self,
        features: &[f64],
        scores: &[f64],
    ) -> Result<UpdateCounts> {
        self.check_writable()?;
        check_gamma(self.config.gamma)?;
        let (c, l_count) = (self.config.dim, self.config.categories);
        let n = scores.len() / l_count;
        self.check_features(n, features, scores)?;
        let mut counts = UpdateCounts::default();

        for (f, s) in features.chunks_exact(c).zip(scores.chunks_exact(l_count)) {
            let l = argmax(s);
            if s[l] <= self.config.gamma {
                continue;
            }
            let Some(key) = self.effective_key(l, f) else {
                counts.rejected += 1;
                continue;
            };
            counts.accepted += 1;
            counts.slot_writes += self.absorb(l, f, &key);
        }
        Ok(counts)
    }

    /// Writes one accepted target feature into category `l`'s slots and
    /// returns the number of slots written.
    fn absorb(&mut self, l: usize, f: &[f64], key: &[f64]) -> usize {
        let MemoryConfig {
            lambda,
            update_mode,
            weight_norm,
            strategy,
            ..
        } = self.config;
        let cat = &mut self.categories[l];

        if let Some(slot) = cat.slots.iter_mut().find(|s| !s.filled) {
            slot.instance_key.copy_from_slice(f);
            for ((d, a), x) in slot.discrepancy.iter_mut().zip(key).zip(f) {
                *d = a - x;
            }
            slot.filled = true;
            return 1;
        }

        let weights = match strategy.slot_keys {
            SlotKeys::Instance => SlotWeights::compute(
                cat.slots.iter().map(|s| s.instance_key.as_slice()),
                f,
                weight_norm,
            ),
            SlotKeys::DiscrepancySimilarity => SlotWeights::compute(
                cat.slots.iter().map(|s| s.discrepancy.as_slice()),
                f,
                weight_norm,
            ),
            SlotKeys::MeanDiscrepancy => SlotWeights::uniform(cat.slots.len()),
        };
        let selected = select_slots(weights.as_slice(), strategy.slot_update);
        let target: Vec<f64> = key.iter().zip(f).map(|(a, x)| a - x).collect();
        for &m in &selected {
            let w = weights.0[m];
            let slot = &mut cat.slots[m];
            match update_mode {
                UpdateMode::Ema => {
                    blend(&mut slot.instance_key, f, lambda * w, UpdateMode::Ema);
                    blend(&mut slot.discrepancy, &target, lambda * w, UpdateMode::Ema);
                }
                UpdateMode::Additive => {
                    add_scaled(&mut slot.instance_key, w, f);
                    add_scaled(&mut slot.discrepancy, w, &target);
                }
            }
        }
        selected.len()
    }

    /// Compensated features for an `H×W` map. Never mutates the memory.
    pub fn compensate(&self, features: &FeatureMap, scores: &ScoreMap) -> Result<FeatureMap> {
        scores.require_normalized("compensate")?;
        if scores.height() != features.height() || scores.width() != features.width() {
            return Err(Error::Dimension {
                op: "compensate",
                left: features.values().shape().to_vec(),
                right: scores.values().shape().to_vec(),
            });
        }
        let plan = self.plan(features.values().data(), scores.values().data())?;
        let delta = plan.delta(features.values().data());
        let out: Vec<f64> = features
            .values()
            .data()
            .iter()
            .zip(&delta)
            .map(|(f, d)| f + d)
            .collect();
        FeatureMap::new(DenseArray::new(features.values().shape().to_vec(), out)?)
    }

    /// Row form of [`Self::compensate`]; returns `features + delta`.
    pub fn compensate_rows(&self, features: &[f64], scores: &[f64]) -> Result<Vec<f64>> {
        let plan = self.plan(features, scores)?;
        let delta = plan.delta(features);
        Ok(features.iter().zip(&delta).map(|(f, d)| f + d).collect())
    }

    /// Resolves, for each query row, which slot sets compensate it.
    pub fn plan(&self, features: &[f64], scores: &[f64]) -> Result<CompensationPlan> {
        let cfg = &self.config;
        let (c, l_count) = (cfg.dim, cfg.categories);
        if cfg.top_k > l_count {
            return Err(Error::config("top_k", format!("{} exceeds {l_count} categories", cfg.top_k)));
        }
        let n = scores.len() / l_count;
        self.check_features(n, features, scores)?;
        let strategy = cfg.strategy;
        let weighting = if strategy.compensation == CompensationWeights::Uniform
            || strategy.slot_keys == SlotKeys::MeanDiscrepancy
        {
            Weighting::Uniform
        } else {
            Weighting::Similarity(cfg.weight_norm)
        };

        // Every filled slot with its similarity key and compensation value.
        let mut pool: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
        for (l, cat) in self.categories.iter().enumerate() {
            let key = self.effective_key(l, &[]);
            for slot in cat.filled() {
                let sim_key = match strategy.slot_keys {
                    SlotKeys::DiscrepancySimilarity => slot.discrepancy.clone(),
                    _ => slot.instance_key.clone(),
                };
                let value = match (strategy.discrepancy, &key) {
                    (DiscrepancySource::Stored, _) => slot.discrepancy.clone(),
                    (DiscrepancySource::KeyDifference, Some(a)) if a.len() == c => {
                        a.iter().zip(&slot.instance_key).map(|(a, n)| a - n).collect()
                    }
                    (DiscrepancySource::KeyDifference, _) => vec![0.0; c],
                };
                pool.push((l, sim_key, value));
            }
        }

        let mut groups: Vec<SlotGroup> = Vec::new();
        let selection: Vec<Vec<usize>>;
        let divisor;
        match strategy.grouping {
            Grouping::Category => {
                groups = (0..l_count).map(|_| SlotGroup::default()).collect();
                for (l, k, v) in &pool {
                    groups[*l].push(k, v);
                }
                selection = scores
                    .chunks_exact(l_count)
                    .map(|s| top_k_indices(s, cfg.top_k))
                    .collect();
                divisor = cfg.top_k;
            }
            Grouping::Merged => {
                let mut g = SlotGroup::default();
                for (_, k, v) in &pool {
                    g.push(k, v);
                }
                groups.push(g);
                selection = vec![vec![0]; n];
                divisor = 1;
            }
            Grouping::KMeans => {
                let k = l_count.min(pool.len());
                divisor = cfg.top_k;
                if k == 0 {
                    selection = vec![Vec::new(); n];
                } else {
                    let inst: Vec<f64> = self
                        .categories
                        .iter()
                        .flat_map(|cat| cat.filled().flat_map(|s| s.instance_key.iter().copied()))
                        .collect();
                    let clusters = lloyd(&inst, c, k, KMEANS_MAX_ITER);
                    groups = (0..k).map(|_| SlotGroup::default()).collect();
                    for ((_, key, v), &a) in pool.iter().zip(&clusters.assignment) {
                        groups[a].push(key, v);
                    }
                    let scale = (c as f64).sqrt();
                    let take = cfg.top_k.min(k);
                    selection = features
                        .chunks_exact(c)
                        .map(|f| {
                            let sims: Vec<f64> = clusters
                                .centroids
                                .chunks_exact(c)
                                .map(|centroid| dot(centroid, f) / scale)
                                .collect();
                            top_k_indices(&sims, take)
                        })
                        .collect();
                }
            }
        }
        Ok(CompensationPlan {
            dim: c,
            groups,
            selection,
            divisor: divisor as f64,
            weighting,
        })
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            version: SNAPSHOT_VERSION,
            categories: self.config.categories,
            slots: self.config.slots,
            dim: self.config.dim,
            hyperparams: Hyperparams {
                lambda: self.config.lambda,
                gamma: self.config.gamma,
                top_k: self.config.top_k,
                update_mode: self.config.update_mode,
                weight_norm: self.config.weight_norm,
                strategy: self.config.strategy,
            },
            per_category: self
                .categories
                .iter()
                .map(|cat| CategoryRecord {
                    key: cat.key.clone(),
                    key_initialized: cat.key_initialized,
                    slots: cat
                        .slots
                        .iter()
                        .map(|s| SlotRecord {
                            instance_key: s.instance_key.clone(),
                            discrepancy: s.discrepancy.clone(),
                            filled: s.filled,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn restore(record: &MemorySnapshot) -> Result<Self> {
        if record.version != SNAPSHOT_VERSION {
            return Err(Error::Validation(format!(
                "memory snapshot version {} (expected {SNAPSHOT_VERSION})",
                record.version
            )));
        }
        let h = &record.hyperparams;
        let config = MemoryConfig {
            categories: record.categories,
            slots: record.slots,
            dim: record.dim,
            lambda: h.lambda,
            gamma: h.gamma,
            top_k: h.top_k,
            update_mode: h.update_mode,
            weight_norm: h.weight_norm,
            strategy: h.strategy,
        };
        let mut mem = DiscrepancyMemory::new(config)?;
        if record.per_category.len() != config.categories {
            return Err(Error::Validation(format!(
                "snapshot lists {} categories, header says {}",
                record.per_category.len(),
                config.categories
            )));
        }
        let c = config.dim;
        let ok = |v: &[f64]| v.len() == c && v.iter().all(|x| x.is_finite());
        for (l, (cat, rec)) in mem.categories.iter_mut().zip(&record.per_category).enumerate() {
            if !ok(&rec.key) || rec.slots.len() != config.slots {
                return Err(Error::Validation(format!("category {l} record is malformed")));
            }
            cat.key.copy_from_slice(&rec.key);
            cat.key_initialized = rec.key_initialized;
            for (m, (slot, srec)) in cat.slots.iter_mut().zip(&rec.slots).enumerate() {
                if !ok(&srec.instance_key) || !ok(&srec.discrepancy) {
                    return Err(Error::Validation(format!("slot ({l}, {m}) is malformed")));
                }
                slot.instance_key.copy_from_slice(&srec.instance_key);
                slot.discrepancy.copy_from_slice(&srec.discrepancy);
                slot.filled = srec.filled;
            }
        }
        Ok(mem)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::restore(&serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy)]
enum Weighting {
    Similarity(WeightNorm),
    Uniform,
}

#[derive(Debug, Clone, Default)]
struct SlotGroup {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl SlotGroup {
    fn push(&mut self, key: &[f64], value: &[f64]) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.len += 1;
    }
}

/// Frozen per-row set selection plus the slot data it refers to.
///
/// Holding the plan fixed makes compensation a smooth function of the
/// query features, which is what the training graph differentiates.
#[derive(Debug, Clone)]
pub struct CompensationPlan {
    dim: usize,
    groups: Vec<SlotGroup>,
    selection: Vec<Vec<usize>>,
    divisor: f64,
    weighting: Weighting,
}

impl CompensationPlan {
    pub fn rows(&self) -> usize {
        self.selection.len()
    }

    fn weights(&self, group: &SlotGroup, f: &[f64]) -> Vec<f64> {
        match self.weighting {
            Weighting::Uniform => vec![1.0 / group.len as f64; group.len],
            Weighting::Similarity(norm) => {
                SlotWeights::compute(group.keys.chunks_exact(self.dim), f, norm).0
            }
        }
    }

    /// Compensation offsets `[n×C]` for the query rows.
    pub fn delta(&self, features: &[f64]) -> Vec<f64> {
        let c = self.dim;
        let mut out = vec![0.0; features.len()];
        for ((f, o), sel) in features
            .chunks_exact(c)
            .zip(out.chunks_exact_mut(c))
            .zip(&self.selection)
        {
            for &g in sel {
                let group = &self.groups[g];
                if group.len == 0 {
                    continue;
                }
                let w = self.weights(group, f);
                for (wm, v) in w.iter().zip(group.values.chunks_exact(c)) {
                    add_scaled(o, wm / self.divisor, v);
                }
            }
        }
        out
    }

    /// Vector-Jacobian product of [`Self::delta`] with respect to the
    /// query rows.
    pub fn delta_vjp(&self, features: &[f64], upstream: &[f64]) -> Vec<f64> {
        let c = self.dim;
        let scale = (c as f64).sqrt();
        let mut out = vec![0.0; features.len()];
        let Weighting::Similarity(norm) = self.weighting else {
            return out;
        };
        for (((f, g), o), sel) in features
            .chunks_exact(c)
            .zip(upstream.chunks_exact(c))
            .zip(out.chunks_exact_mut(c))
            .zip(&self.selection)
        {
            for &gi in sel {
                let group = &self.groups[gi];
                if group.len == 0 {
                    continue;
                }
                // a_m = g·V_m / divisor is d(loss)/d(w_m)
                let a: Vec<f64> = group
                    .values
                    .chunks_exact(c)
                    .map(|v| dot(g, v) / self.divisor)
                    .collect();
                let ds: Vec<f64> = match norm {
                    WeightNorm::Raw => a,
                    WeightNorm::Softmax => {
                        let w = self.weights(group, f);
                        let mean: f64 = w.iter().zip(&a).map(|(w, a)| w * a).sum();
                        w.iter().zip(&a).map(|(w, a)| w * (a - mean)).collect()
                    }
                };
                for (d, k) in ds.iter().zip(group.keys.chunks_exact(c)) {
                    add_scaled(o, d / scale, k);
                }
            }
        }
        out
    }

    /// Records `F + delta(F)` on the tape. Gradients reach `features`
    /// through both the identity path and the slot weights; memory
    /// contents stay constant.
    pub fn record<'t>(self, tape: &'t Tape, features: Var<'t>) -> Result<Var<'t>> {
        let value = features.value().clone();
        let shape = value.shape().to_vec();
        let delta = self.delta(value.data());
        let out: Vec<f64> = value.data().iter().zip(&delta).map(|(f, d)| f + d).collect();
        let out = DenseArray::new(shape.clone(), out)?;
        let inputs = value.into_data();
        tape.custom(
            &[features],
            out,
            Box::new(move |upstream: &DenseArray| {
                let mut g = self.delta_vjp(&inputs, upstream.data());
                for (gv, u) in g.iter_mut().zip(upstream.data()) {
                    *gv += u;
                }
                vec![DenseArray::from_parts(shape.clone(), g)]
            }),
        )
    }
}

/// Indices of the `k` largest entries, highest first; ties to the lowest index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn select_slots(weights: &[f64], mode: SlotUpdate) -> Vec<usize> {
    match mode {
        SlotUpdate::All => (0..weights.len()).collect(),
        SlotUpdate::Top1 => top_k_indices(weights, 1),
        SlotUpdate::TopHalf => top_k_indices(weights, weights.len().div_ceil(2)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_scaled(acc: &mut [f64], s: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

fn blend(acc: &mut [f64], v: &[f64], rate: f64, mode: UpdateMode) {
    match mode {
        UpdateMode::Ema => {
            for (a, x) in acc.iter_mut().zip(v) {
                *a = (1.0 - rate) * *a + rate * x;
            }
        }
        UpdateMode::Additive => add_scaled(acc, rate, v),
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        add_scaled(&mut acc, 1.0, r);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Versioned JSON form of the memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub version: u32,
    #[serde(rename = "L")]
    pub categories: usize,
    #[serde(rename = "M")]
    pub slots: usize,
    #[serde(rename = "C")]
    pub dim: usize,
    pub hyperparams: Hyperparams,
    #[serde(rename = "categories")]
    pub per_category: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda: f64,
    pub gamma: f64,
    #[serde(rename = "K")]
    pub top_k: usize,
    pub update_mode: UpdateMode,
    pub weight_norm: WeightNorm,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    #[serde(rename = "A")]
    pub key: Vec<f64>,
    pub key_initialized: bool,
    pub slots: Vec<SlotRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    #[serde(rename = "N")]
    pub instance_key: Vec<f64>,
    #[serde(rename = "D")]
    pub discrepancy: Vec<f64>,
    pub filled: bool,
}
