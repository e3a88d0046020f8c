//! Files written by a run: checkpoint, manifest and split evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, IouAccumulator};
use crate::labels::LabelGrid;
use crate::oldm::{DiscrepancyMemory, MemorySnapshot};
use crate::segnet::NetworkParams;
use crate::synthdata::{make_benchmark, DomainTag, SceneSample};
use crate::training::{evaluate, infer, source_feature_means, RunOutcome, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MEMORY_FILE: &str = "memory.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_FILE: &str = "ablation_results.csv";

/// Trained parameters, the final memory and the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub memory: Option<MemorySnapshot>,
}

impl Checkpoint {
    pub fn from_outcome(config: &TrainConfig, outcome: &RunOutcome) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            params: outcome.params.clone(),
            memory: outcome.memory.as_ref().map(|m| m.snapshot()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Reads and checks a checkpoint. Anything unreadable is `Corrupt`.
    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| corrupt(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("version {}", ckpt.version)));
        }
        ckpt.config.validate().map_err(|e| corrupt(e.to_string()))?;
        ckpt.params.validate().map_err(|e| corrupt(e.to_string()))?;
        if ckpt.params.dims() != ckpt.config.dims() {
            return Err(corrupt("parameter shapes disagree with config".into()));
        }
        if let Some(m) = &ckpt.memory {
            DiscrepancyMemory::restore(m).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(ckpt)
    }

    /// The stored memory, restored and frozen.
    pub fn frozen_memory(&self) -> Result<Option<DiscrepancyMemory>> {
        self.memory
            .as_ref()
            .map(|m| DiscrepancyMemory::restore(m).map(DiscrepancyMemory::frozen))
            .transpose()
    }
}

/// Labeled test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Target,
    Open,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(EvalSplit::Target),
            "open" => Ok(EvalSplit::Open),
            _ => Err(Error::config("split", format!("`{s}` is not one of target, open"))),
        }
    }
}

/// Result of evaluating a checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: EvalSplit,
    pub scenes: usize,
    /// Domains present in the split.
    pub domains: Vec<DomainTag>,
    /// Domains seen unlabeled during training.
    pub training_domains: Vec<DomainTag>,
    pub report: EvalReport,
}

fn domains_of<'a>(tags: impl Iterator<Item = &'a DomainTag>) -> Vec<DomainTag> {
    let mut out: Vec<DomainTag> = Vec::new();
    for t in tags {
        if !out.contains(t) {
            out.push(*t);
        }
    }
    out.sort();
    out
}

/// Rebuilds the checkpoint's benchmark and evaluates with frozen memory.
/// Also returns the per-scene predictions.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    split: EvalSplit,
) -> Result<(SplitEvaluation, Vec<LabelGrid>)> {
    let cfg = &ckpt.config;
    let bench = make_benchmark(&cfg.benchmark_config())?;
    let memory = ckpt.frozen_memory()?;
    let scenes: &[SceneSample] = match split {
        EvalSplit::Target => &bench.target_test,
        EvalSplit::Open => &bench.open_test,
    };
    if scenes.is_empty() {
        return Err(Error::config("split", format!("{split:?} split has no scenes")));
    }
    let gap_source = &bench.source[..cfg.gap_source_scenes.min(bench.source.len())];
    let source_means = source_feature_means(&ckpt.params, gap_source)?;
    let report = evaluate(&ckpt.params, memory.as_ref(), scenes, &source_means)?;
    let predictions = infer(&ckpt.params, memory.as_ref(), scenes)?.predictions;
    let eval = SplitEvaluation {
        split,
        scenes: scenes.len(),
        domains: domains_of(scenes.iter().map(|s| &s.domain)),
        training_domains: domains_of(bench.target_train.iter().map(|s| &s.domain)),
        report,
    };
    Ok((eval, predictions))
}

/// Recomputes an mIoU report from dumped predictions.
pub fn recompute_report(predictions: &[LabelGrid], scenes: &[SceneSample], categories: usize) -> Result<EvalReport> {
    let mut acc = IouAccumulator::new(categories);
    for (p, s) in predictions.iter().zip(scenes) {
        acc.add(p, &s.labels)?;
    }
    Ok(acc.report())
}

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub data_seed: u64,
    pub config: TrainConfig,
    pub outputs: BTreeMap<String, String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            data_seed: config.benchmark_config().seed,
            config: config.clone(),
            outputs: BTreeMap::new(),
            timings_seconds: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
