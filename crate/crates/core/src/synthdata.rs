//! Synthetic compound-domain scenes.
//!
//! A scene is a grid of pixel vectors: a background category plus 3 to 8
//! non-overlapping rectangles, each an object instance of a random
//! category. A pixel of category `l` in domain `d` is
//!
//! ```text
//! B_l + shift_d(l) ⊙ scale_d(l) + jitter(instance) + noise(pixel)
//! ```
//!
//! where `B_l` is the category's base embedding, the shift/scale pair is the
//! domain's style for that category, the jitter is drawn once per instance
//! and the noise once per pixel. The source domain has one style; the
//! target domain is a mixture of several subdomain styles, and open
//! subdomains carry styles never seen during training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelGrid;
use crate::tensor::DenseArray;

const MIN_INSTANCES: usize = 3;
const MAX_INSTANCES: usize = 8;
const MIN_SIDE: usize = 2;
const MAX_SIDE: usize = 6;
const PLACEMENT_TRIES: usize = 200;
const SPEC_RESAMPLE_TRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "subdomain")]
pub enum DomainTag {
    Source,
    Target(usize),
    Open(usize),
}

/// Knobs of the generator. Everything downstream is a pure function of
/// this plus a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub categories: usize,
    pub input_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Std of the base category embeddings.
    pub base_scale: f64,
    /// Std of the source domain's per-category style.
    pub source_style_scale: f64,
    /// Std of a subdomain's style component shared by all categories.
    pub subdomain_shift_scale: f64,
    /// Std of a subdomain's per-category style component.
    pub category_shift_scale: f64,
    /// Style scale factors are drawn uniformly from `[1 - s, 1 + s]`.
    pub scale_spread: f64,
    pub target_subdomains: usize,
    pub open_subdomains: usize,
    pub min_style_separation: f64,
    pub sigma_inst: f64,
    pub sigma_pix: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 5,
            input_dim: 8,
            height: 16,
            width: 16,
            base_scale: 1.0,
            source_style_scale: 0.1,
            subdomain_shift_scale: 0.8,
            category_shift_scale: 0.0,
            scale_spread: 0.0,
            target_subdomains: 3,
            open_subdomains: 2,
            min_style_separation: 1.0,
            sigma_inst: 0.3,
            sigma_pix: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::config("categories", "need a background and one object category"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("height", "grid must be non-empty"));
        }
        if self.target_subdomains == 0 {
            return Err(Error::config("target_subdomains", "must be positive"));
        }
        for (name, v) in [
            ("base_scale", self.base_scale),
            ("source_style_scale", self.source_style_scale),
            ("subdomain_shift_scale", self.subdomain_shift_scale),
            ("category_shift_scale", self.category_shift_scale),
            ("scale_spread", self.scale_spread),
            ("min_style_separation", self.min_style_separation),
            ("sigma_inst", self.sigma_inst),
            ("sigma_pix", self.sigma_pix),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("{v} must be finite and >= 0")));
            }
        }
        if self.scale_spread >= 1.0 {
            return Err(Error::config("scale_spread", "must be below 1"));
        }
        Ok(())
    }
}

/// Per-category style of one domain: pixels get `shift ⊙ scale` added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub shift: Vec<Vec<f64>>,
    pub scale: Vec<Vec<f64>>,
}

impl Style {
    pub fn offset(&self, category: usize) -> Vec<f64> {
        self.shift[category]
            .iter()
            .zip(&self.scale[category])
            .map(|(s, k)| s * k)
            .collect()
    }

    /// Largest per-category distance between two styles' offsets.
    pub fn separation(&self, other: &Style) -> f64 {
        (0..self.shift.len())
            .map(|l| l2(&self.offset(l), &other.offset(l)))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub config: SynthConfig,
    pub base: Vec<Vec<f64>>,
    pub source: Style,
    pub target: Vec<Style>,
    pub open: Vec<Style>,
}

impl DomainSpec {
    /// Draws embeddings and styles. Subdomain styles are resampled until
    /// every pair (target and open alike) is at least
    /// `min_style_separation` apart in some category.
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d) = (config.categories, config.input_dim);
        let base = gaussian_rows(&mut rng, l, d, config.base_scale);
        let source = Style {
            shift: gaussian_rows(&mut rng, l, d, config.source_style_scale),
            scale: vec![vec![1.0; d]; l],
        };
        let mut styles: Vec<Style> = Vec::new();
        let wanted = config.target_subdomains + config.open_subdomains;
        while styles.len() < wanted {
            let mut placed = false;
            for _ in 0..SPEC_RESAMPLE_TRIES {
                let candidate = draw_subdomain(&mut rng, config);
                if styles
                    .iter()
                    .all(|s| s.separation(&candidate) >= config.min_style_separation)
                {
                    styles.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::config(
                    "min_style_separation",
                    "could not draw subdomain styles that far apart",
                ));
            }
        }
        let open = styles.split_off(config.target_subdomains);
        Ok(DomainSpec {
            config: config.clone(),
            base,
            source,
            target: styles,
            open,
        })
    }

    pub fn style(&self, domain: DomainTag) -> Result<&Style> {
        match domain {
            DomainTag::Source => Ok(&self.source),
            DomainTag::Target(i) => self
                .target
                .get(i)
                .ok_or_else(|| Error::config("domain", format!("no target subdomain {i}"))),
            DomainTag::Open(i) => self
                .open
                .get(i)
                .ok_or_else(|| Error::config("domain", format!("no open subdomain {i}"))),
        }
    }

    /// Noise-free pixel mean of category `l` in `domain`.
    pub fn class_mean(&self, domain: DomainTag, category: usize) -> Result<Vec<f64>> {
        let off = self.style(domain)?.offset(category);
        Ok(self.base[category].iter().zip(&off).map(|(b, o)| b + o).collect())
    }
}

fn draw_subdomain(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Style {
    let (l, d) = (config.categories, config.input_dim);
    let common: Vec<f64> = (0..d)
        .map(|_| config.subdomain_shift_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let shift = (0..l)
        .map(|_| {
            common
                .iter()
                .map(|c| c + config.category_shift_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let s = config.scale_spread;
    let scale = (0..l)
        .map(|_| {
            (0..d)
                .map(|_| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 })
                .collect()
        })
        .collect();
    Style { shift, scale }
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A generated scene with full ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub seed: u64,
    pub domain: DomainTag,
    /// `H×W×D_in`.
    pub inputs: DenseArray,
    pub labels: LabelGrid,
    pub instances: LabelGrid,
}

/// A target training scene: inputs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledScene {
    pub seed: u64,
    pub domain: DomainTag,
    pub inputs: DenseArray,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let d = self.inputs.shape()[2];
        let start = (y * self.width() + x) * d;
        &self.inputs.data()[start..start + d]
    }

    pub fn without_labels(&self) -> UnlabeledScene {
        UnlabeledScene {
            seed: self.seed,
            domain: self.domain,
            inputs: self.inputs.clone(),
        }
    }
}

/// Generates one scene. Layout (rectangles, categories) depends only on
/// the seed, so two domains rendered with the same seed share a layout.
pub fn generate_scene(spec: &DomainSpec, domain: DomainTag, seed: u64) -> Result<SceneSample> {
    let cfg = &spec.config;
    let (h, w, d) = (cfg.height, cfg.width, cfg.input_dim);
    let style = spec.style(domain)?;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::config("height", format!("{h}×{w} grid cannot hold an instance")));
    }

    let mut layout_rng = ChaCha8Rng::seed_from_u64(seed);
    layout_rng.set_stream(1);
    let mut labels = LabelGrid::filled(h, w, 0)?;
    let mut instances = LabelGrid::filled(h, w, 0)?;
    let mut inst_category = vec![0usize];
    let wanted = layout_rng.random_range(MIN_INSTANCES..=MAX_INSTANCES);
    for _ in 0..PLACEMENT_TRIES {
        if inst_category.len() - 1 == wanted {
            break;
        }
        let rh = layout_rng.random_range(MIN_SIDE..=MAX_SIDE.min(h));
        let rw = layout_rng.random_range(MIN_SIDE..=MAX_SIDE.min(w));
        let y0 = layout_rng.random_range(0..=h - rh);
        let x0 = layout_rng.random_range(0..=w - rw);
        let category = layout_rng.random_range(1..cfg.categories);
        let free = (y0..y0 + rh).all(|y| (x0..x0 + rw).all(|x| instances.get(y, x) == 0));
        if !free {
            continue;
        }
        let id = inst_category.len();
        inst_category.push(category);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                instances.set(y, x, id);
                labels.set(y, x, category);
            }
        }
    }
    if inst_category.len() - 1 < MIN_INSTANCES {
        return Err(Error::config(
            "height",
            format!("{h}×{w} grid too small to place {MIN_INSTANCES} instances"),
        ));
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(2);
    let inst_noise = Normal::new(0.0, cfg.sigma_inst).expect("validated sigma");
    let pix_noise = Normal::new(0.0, cfg.sigma_pix).expect("validated sigma");
    let means: Vec<Vec<f64>> = inst_category
        .iter()
        .map(|&l| {
            let off = style.offset(l);
            spec.base[l].iter().zip(&off).map(|(b, o)| b + o).collect()
        })
        .collect();
    let jitter: Vec<Vec<f64>> = (0..inst_category.len())
        .map(|_| (0..d).map(|_| inst_noise.sample(&mut noise_rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for &id in &instances.labels {
        for (m, j) in means[id].iter().zip(&jitter[id]) {
            data.push(m + j + pix_noise.sample(&mut noise_rng));
        }
    }
    Ok(SceneSample {
        seed,
        domain,
        inputs: DenseArray::new(vec![h, w, d], data)?,
        labels,
        instances,
    })
}

/// Per-pixel maximum-likelihood labels given the generator's parameters.
///
/// Every category has the same isotropic pixel covariance, so the ML
/// decision is the nearest class mean of the scene's domain.
pub fn bayes_oracle(spec: &DomainSpec, sample: &SceneSample) -> Result<LabelGrid> {
    let means: Vec<Vec<f64>> = (0..spec.config.categories)
        .map(|l| spec.class_mean(sample.domain, l))
        .collect::<Result<_>>()?;
    let d = spec.config.input_dim;
    let labels = sample
        .inputs
        .data()
        .chunks_exact(d)
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (l, m) in means.iter().enumerate() {
                let dist: f64 = p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = l;
                }
            }
            best
        })
        .collect();
    LabelGrid::new(sample.height(), sample.width(), labels)
}

/// Split sizes and the master seed of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub source: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub open_test: usize,
    pub synth: SynthConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 0,
            source: 2000,
            target_train: 2000,
            target_test: 400,
            open_test: 400,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetTest,
    OpenTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Source, Split::TargetTrain, Split::TargetTest, Split::OpenTest];

    fn id(self) -> u64 {
        match self {
            Split::Source => 1,
            Split::TargetTrain => 2,
            Split::TargetTest => 3,
            Split::OpenTest => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
            Split::OpenTest => "open_test",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed for `index` within `split`. XOR with a fixed word and
/// `splitmix64` are both bijections, so distinct (split, index) pairs never
/// share a seed.
pub fn scene_seed(master: u64, split: Split, index: usize) -> u64 {
    let key = (split.id() << 48) | index as u64;
    splitmix64(key ^ splitmix64(master))
}

/// Seed of the domain spec (embeddings and styles) for a master seed.
pub fn spec_seed(master: u64) -> u64 {
    splitmix64(master ^ 0x5EED_0F_DA7A)
}

fn domain_for(split: Split, index: usize, cfg: &SynthConfig) -> DomainTag {
    match split {
        Split::Source => DomainTag::Source,
        Split::TargetTrain | Split::TargetTest => DomainTag::Target(index % cfg.target_subdomains),
        Split::OpenTest => DomainTag::Open(index % cfg.open_subdomains.max(1)),
    }
}

/// The four splits. Target training scenes carry no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub spec: DomainSpec,
    pub source: Vec<SceneSample>,
    pub target_train: Vec<UnlabeledScene>,
    pub target_test: Vec<SceneSample>,
    pub open_test: Vec<SceneSample>,
}

pub fn make_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    config.synth.validate()?;
    if config.open_test > 0 && config.synth.open_subdomains == 0 {
        return Err(Error::config("open_subdomains", "open split requested without open subdomains"));
    }
    let spec = DomainSpec::generate(&config.synth, spec_seed(config.seed))?;
    let split = |s: Split, n: usize| -> Result<Vec<SceneSample>> {
        (0..n)
            .map(|i| generate_scene(&spec, domain_for(s, i, &config.synth), scene_seed(config.seed, s, i)))
            .collect()
    };
    let source = split(Split::Source, config.source)?;
    let target_train = split(Split::TargetTrain, config.target_train)?
        .iter()
        .map(SceneSample::without_labels)
        .collect();
    let target_test = split(Split::TargetTest, config.target_test)?;
    let open_test = split(Split::OpenTest, config.open_test)?;
    Ok(Benchmark {
        config: config.clone(),
        spec,
        source,
        target_train,
        target_test,
        open_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub version: u32,
    pub config: BenchmarkConfig,
    pub spec_seed: u64,
    /// Per split: (scene seed, domain) in file order.
    pub splits: BTreeMap<Split, Vec<(u64, DomainTag)>>,
}

impl Benchmark {
    pub fn manifest(&self) -> BenchmarkManifest {
        let mut splits = BTreeMap::new();
        splits.insert(Split::Source, self.source.iter().map(|s| (s.seed, s.domain)).collect());
        splits.insert(
            Split::TargetTrain,
            self.target_train.iter().map(|s| (s.seed, s.domain)).collect(),
        );
        splits.insert(Split::TargetTest, self.target_test.iter().map(|s| (s.seed, s.domain)).collect());
        splits.insert(Split::OpenTest, self.open_test.iter().map(|s| (s.seed, s.domain)).collect());
        BenchmarkManifest {
            version: 1,
            config: self.config.clone(),
            spec_seed: spec_seed(self.config.seed),
            splits,
        }
    }

    /// Writes `manifest.json` and one JSON file per scene under `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let scenes = dir.join("scenes");
        fs::create_dir_all(&scenes)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        let write = |split: Split, i: usize, text: String| {
            fs::write(scenes.join(format!("{}_{i:05}.json", split.name())), text)
        };
        for (i, s) in self.source.iter().enumerate() {
            write(Split::Source, i, serde_json::to_string(s)?)?;
        }
        for (i, s) in self.target_train.iter().enumerate() {
            write(Split::TargetTrain, i, serde_json::to_string(s)?)?;
        }
        for (i, s) in self.target_test.iter().enumerate() {
            write(Split::TargetTest, i, serde_json::to_string(s)?)?;
        }
        for (i, s) in self.open_test.iter().enumerate() {
            write(Split::OpenTest, i, serde_json::to_string(s)?)?;
        }
        Ok(())
    }

    /// Regenerates a benchmark from an exported manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let manifest: BenchmarkManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        let bench = make_benchmark(&manifest.config)?;
        if bench.manifest() != manifest {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                reason: "manifest does not match its own regeneration".into(),
            });
        }
        Ok(bench)
    }

    /// Reads the scene files written by [`Benchmark::export`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BenchmarkManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let spec = DomainSpec::generate(&manifest.config.synth, manifest.spec_seed)?;
        let read = |split: Split, i: usize| -> Result<String> {
            Ok(fs::read_to_string(
                dir.join("scenes").join(format!("{}_{i:05}.json", split.name())),
            )?)
        };
        let count = |s: Split| manifest.splits.get(&s).map_or(0, Vec::len);
        let labeled = |s: Split| -> Result<Vec<SceneSample>> {
            (0..count(s)).map(|i| Ok(serde_json::from_str(&read(s, i)?)?)).collect()
        };
        Ok(Benchmark {
            config: manifest.config.clone(),
            spec,
            source: labeled(Split::Source)?,
            target_train: (0..count(Split::TargetTrain))
                .map(|i| Ok(serde_json::from_str(&read(Split::TargetTrain, i)?)?))
                .collect::<Result<_>>()?,
            target_test: labeled(Split::TargetTest)?,
            open_test: labeled(Split::OpenTest)?,
        })
    }
}
