//! Variant registry and the paired ablation harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oldm::{
    CategoryKeys, CompensationWeights, DiscrepancySource, Grouping, SlotKeys, SlotUpdate,
    Strategy,
};
use crate::training::{run, TrainConfig};

/// Where pseudo annotations come from, if anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    /// No pseudo supervision; source ground truth only.
    None,
    /// From the intermediate head on uncompensated features.
    Intermediate,
    /// From the decoder on compensated features.
    Final,
}

macro_rules! variants {
    ($($v:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Variant { $($v),* }

        impl Variant {
            pub const ALL: &'static [Variant] = &[$(Variant::$v),*];

            pub fn name(self) -> &'static str {
                match self { $(Variant::$v => $name),* }
            }
        }
    };
}

variants! {
    WoOldm => "wo_oldm",
    MeanInstances => "mean_instances",
    LocalKeys => "local_keys",
    GlobalKeys => "global_keys",
    MeanDiscrepancyUpdate => "mean_discrepancy_update",
    DiscrepancySimilarity => "discrepancy_similarity",
    Top1Update => "top1_update",
    Top50Update => "top50_update",
    FullUpdate => "full_update",
    KeyDiscrepancy => "key_discrepancy",
    MergedSets => "merged_sets",
    MultisetsKmeans => "multisets_kmeans",
    MultisetsCategory => "multisets_category",
    MeanDiscrepancyComp => "mean_discrepancy_comp",
    InstanceSimilarityComp => "instance_similarity_comp",
    WoPseudo => "wo_pseudo",
    PseudoIntermediate => "pseudo_intermediate",
    PseudoFinal => "pseudo_final",
}

/// Resolved behaviour of one variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub memory: bool,
    pub strategy: Strategy,
    pub pseudo: PseudoSource,
}

impl Variant {
    pub const DEFAULT: Variant = Variant::FullUpdate;

    pub fn registry() -> &'static [Variant] {
        Self::ALL
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|v| v.name()).collect()
    }

    /// True when the variant behaves exactly like the full method.
    pub fn is_default_alias(self) -> bool {
        self.spec() == Variant::DEFAULT.spec()
    }

    pub fn spec(self) -> VariantSpec {
        let mut s = Strategy::default();
        let mut memory = true;
        let mut pseudo = PseudoSource::Final;
        match self {
            Variant::WoOldm => memory = false,
            Variant::MeanInstances => s.category_keys = CategoryKeys::MeanInstances,
            Variant::LocalKeys => s.category_keys = CategoryKeys::Local,
            Variant::MeanDiscrepancyUpdate => s.slot_keys = SlotKeys::MeanDiscrepancy,
            Variant::DiscrepancySimilarity => s.slot_keys = SlotKeys::DiscrepancySimilarity,
            Variant::Top1Update => s.slot_update = SlotUpdate::Top1,
            Variant::Top50Update => s.slot_update = SlotUpdate::TopHalf,
            Variant::KeyDiscrepancy => s.discrepancy = DiscrepancySource::KeyDifference,
            Variant::MergedSets => s.grouping = Grouping::Merged,
            Variant::MultisetsKmeans => s.grouping = Grouping::KMeans,
            Variant::MeanDiscrepancyComp => s.compensation = CompensationWeights::Uniform,
            Variant::WoPseudo => pseudo = PseudoSource::None,
            Variant::PseudoIntermediate => pseudo = PseudoSource::Intermediate,
            Variant::GlobalKeys
            | Variant::FullUpdate
            | Variant::MultisetsCategory
            | Variant::InstanceSimilarityComp
            | Variant::PseudoFinal => {}
        }
        VariantSpec {
            memory,
            strategy: s,
            pseudo,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!("unknown variant `{s}`; valid: {}", Variant::names().join(", ")),
                )
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub miou_target: f64,
    pub miou_open: f64,
    pub domain_gap: f64,
    /// Paired difference against the default variant with the same seed.
    pub delta_vs_default: Option<f64>,
    pub seconds: f64,
}

pub const ABLATION_HEADER: &str =
    "variant,seed,miou_target,miou_open,domain_gap,delta_vs_default,seconds";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.variant,
            self.seed,
            self.miou_target,
            self.miou_open,
            self.domain_gap,
            self.delta_vs_default.map_or(String::new(), |d| d.to_string()),
            self.seconds
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Trains and evaluates every (variant, seed) pair on the same config.
///
/// Variants that alias the default reuse its run for the same seed. The
/// default variant is always trained so paired differences are available.
pub fn run_ablation_suite(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut default_row: Option<AblationRow> = None;
        let run_one = |variant: Variant| -> Result<AblationRow> {
            let cfg = TrainConfig {
                seed,
                variant,
                ..base.clone()
            };
            let started = Instant::now();
            let outcome = run(&cfg, |_| {})?;
            Ok(AblationRow {
                variant,
                seed,
                miou_target: outcome.target.miou,
                miou_open: outcome.open.miou,
                domain_gap: outcome.target.domain_gap_after.unwrap_or(f64::NAN),
                delta_vs_default: None,
                seconds: started.elapsed().as_secs_f64(),
            })
        };
        for &variant in variants {
            let mut row = if variant.is_default_alias() {
                if default_row.is_none() {
                    default_row = Some(run_one(Variant::DEFAULT)?);
                }
                AblationRow {
                    variant,
                    ..default_row.clone().expect("default run")
                }
            } else {
                run_one(variant)?
            };
            if default_row.is_none() {
                default_row = Some(run_one(Variant::DEFAULT)?);
            }
            let reference = default_row.as_ref().expect("default run").miou_target;
            row.delta_vs_default = Some(row.miou_target - reference);
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
