//! Per-pixel segmentation network: encoder, intermediate head and decoder.
//!
//! Every layer acts on one pixel's vector at a time (a 1×1 convolution), so
//! a batch of scenes is flattened to an `[n×D]` matrix before it reaches the
//! tape and reshaped back to `H×W×·` afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, DenseArray, Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub categories: usize,
}

impl Default for Dimensions {
    fn default() -> Self {
        Dimensions {
            input: 8,
            hidden: 32,
            feature: 16,
            categories: 5,
        }
    }
}

/// One affine layer, `y = x·W + b`, with `W` stored `[in×out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

impl Affine {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Affine {
            weight: DenseArray::new(vec![fan_in, fan_out], data)?,
            bias: DenseArray::zeros(&[1, fan_out])?,
        })
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Affine {
            weight: DenseArray::zeros(&[fan_in, fan_out])?,
            bias: DenseArray::zeros(&[1, fan_out])?,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Initialization of the intermediate head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Glorot,
    /// All-zero weights: uniform scores until the head has been trained.
    #[default]
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub encoder: [Affine; 2],
    pub head: Affine,
    pub decoder: [Affine; 2],
}

impl NetworkParams {
    /// Uniform Glorot weights, zero biases.
    pub fn init(dims: Dimensions, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_head(dims, HeadInit::Glorot, rng)
    }

    /// As [`NetworkParams::init`], with a choice for the intermediate head.
    /// The head weights are drawn either way, so the other layers do not
    /// depend on the choice.
    pub fn init_with_head(dims: Dimensions, head_init: HeadInit, rng: &mut impl Rng) -> Result<Self> {
        let Dimensions {
            input,
            hidden,
            feature,
            categories,
        } = dims;
        Ok(NetworkParams {
            encoder: [
                Affine::glorot(input, hidden, rng)?,
                Affine::glorot(hidden, feature, rng)?,
            ],
            head: match head_init {
                HeadInit::Glorot => Affine::glorot(feature, categories, rng)?,
                HeadInit::Zeros => {
                    Affine::glorot(feature, categories, rng)?;
                    Affine::zeros(feature, categories)?
                }
            },
            decoder: [
                Affine::glorot(feature, hidden, rng)?,
                Affine::glorot(hidden, categories, rng)?,
            ],
        })
    }

    pub fn zeros(dims: Dimensions) -> Result<Self> {
        Ok(NetworkParams {
            encoder: [
                Affine::zeros(dims.input, dims.hidden)?,
                Affine::zeros(dims.hidden, dims.feature)?,
            ],
            head: Affine::zeros(dims.feature, dims.categories)?,
            decoder: [
                Affine::zeros(dims.feature, dims.hidden)?,
                Affine::zeros(dims.hidden, dims.categories)?,
            ],
        })
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions {
            input: self.encoder[0].fan_in(),
            hidden: self.encoder[0].fan_out(),
            feature: self.encoder[1].fan_out(),
            categories: self.head.fan_out(),
        }
    }

    /// Checks the layer chain is internally consistent.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let chain = [
            (&self.encoder[0], d.input, d.hidden, "encoder[0]"),
            (&self.encoder[1], d.hidden, d.feature, "encoder[1]"),
            (&self.head, d.feature, d.categories, "head"),
            (&self.decoder[0], d.feature, d.hidden, "decoder[0]"),
            (&self.decoder[1], d.hidden, d.categories, "decoder[1]"),
        ];
        for (layer, i, o, name) in chain {
            if layer.weight.shape() != [i, o] || layer.bias.shape() != [1, o] {
                return Err(Error::config(
                    name,
                    format!(
                        "expected weight [{i}, {o}] and bias [1, {o}], got {:?} and {:?}",
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Flat list of all parameter arrays in a fixed order.
    pub fn tensors(&self) -> [&DenseArray; 10] {
        [
            &self.encoder[0].weight,
            &self.encoder[0].bias,
            &self.encoder[1].weight,
            &self.encoder[1].bias,
            &self.head.weight,
            &self.head.bias,
            &self.decoder[0].weight,
            &self.decoder[0].bias,
            &self.decoder[1].weight,
            &self.decoder[1].bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseArray; 10] {
        let [e0, e1] = &mut self.encoder;
        let [d0, d1] = &mut self.decoder;
        [
            &mut e0.weight,
            &mut e0.bias,
            &mut e1.weight,
            &mut e1.bias,
            &mut self.head.weight,
            &mut self.head.bias,
            &mut d0.weight,
            &mut d0.bias,
            &mut d1.weight,
            &mut d1.bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let leaf = |a: &DenseArray| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let bind = |l: &Affine| BoundAffine {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        BoundParams {
            tape,
            encoder: [bind(&self.encoder[0]), bind(&self.encoder[1])],
            head: bind(&self.head),
            decoder: [bind(&self.decoder[0]), bind(&self.decoder[1])],
            dims: self.dims(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundAffine<'t> {
    /// `x·W + 1·b`; the bias is spread over rows through a ones column so
    /// the tape never needs broadcasting.
    pub fn forward(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let rows = x.value().shape()[0];
        let ones = tape.constant(DenseArray::filled(&[rows, 1], 1.0)?);
        x.matmul(self.weight)?.add(ones.matmul(self.bias)?)
    }
}

/// Network parameters recorded on one tape.
#[derive(Debug)]
pub struct BoundParams<'t> {
    tape: &'t Tape,
    pub encoder: [BoundAffine<'t>; 2],
    pub head: BoundAffine<'t>,
    pub decoder: [BoundAffine<'t>; 2],
    dims: Dimensions,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> [Var<'t>; 10] {
        [
            self.encoder[0].weight,
            self.encoder[0].bias,
            self.encoder[1].weight,
            self.encoder[1].bias,
            self.head.weight,
            self.head.bias,
            self.decoder[0].weight,
            self.decoder[0].bias,
            self.decoder[1].weight,
            self.decoder[1].bias,
        ]
    }

    /// Pixel rows `[n×D_in]` to features `[n×C]`.
    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        let cols = x.value().shape()[1];
        if cols != self.dims.input {
            return Err(Error::config(
                "input_dim",
                format!("pixels have {cols} channels, encoder expects {}", self.dims.input),
            ));
        }
        let h = self.encoder[0].forward(self.tape, x)?.relu()?;
        self.encoder[1].forward(self.tape, h)
    }

    /// Features `[n×C]` to intermediate-head logits `[n×L]`.
    pub fn head_logits(&self, f: Var<'t>) -> Result<Var<'t>> {
        self.check_features(&f)?;
        self.head.forward(self.tape, f)
    }

    /// Features `[n×C]` to decoder logits `[n×L]`.
    pub fn decode_logits(&self, f: Var<'t>) -> Result<Var<'t>> {
        self.check_features(&f)?;
        let h = self.decoder[0].forward(self.tape, f)?.relu()?;
        self.decoder[1].forward(self.tape, h)
    }

    fn check_features(&self, f: &Var<'t>) -> Result<()> {
        let cols = f.value().shape()[1];
        if cols != self.dims.feature {
            return Err(Error::config(
                "feature_dim",
                format!("features have {cols} channels, expected {}", self.dims.feature),
            ));
        }
        Ok(())
    }

    /// Gradients in [`NetworkParams::tensors`] order; missing entries are zero.
    pub fn collect_gradients(&self, grads: &Gradients) -> Result<Vec<DenseArray>> {
        self.vars()
            .iter()
            .map(|v| match grads.get(*v) {
                Some(g) => Ok(g.clone()),
                None => DenseArray::zeros(&v.shape()),
            })
            .collect()
    }
}

/// Per-pixel features, `H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: DenseArray,
}

impl FeatureMap {
    pub fn new(values: DenseArray) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape {
                shape: values.shape().to_vec(),
                reason: "feature map must be H×W×C".into(),
            });
        }
        Ok(FeatureMap { values })
    }

    pub fn from_rows(height: usize, width: usize, rows: DenseArray) -> Result<Self> {
        let c = rows.shape()[rows.rank() - 1];
        Self::new(rows.reshape(&[height, width, c])?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.channels();
        let start = (y * self.width() + x) * c;
        &self.values.data()[start..start + c]
    }

    /// Flattened `[H·W × C]` view.
    pub fn rows(&self) -> Result<DenseArray> {
        self.values
            .clone()
            .reshape(&[self.height() * self.width(), self.channels()])
    }
}

/// Per-pixel category scores, `H×W×L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    values: DenseArray,
    normalized: bool,
}

impl ScoreMap {
    /// Wraps probabilities, verifying each pixel lies on the simplex.
    pub fn normalized(values: DenseArray) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape {
                shape: values.shape().to_vec(),
                reason: "score map must be H×W×L".into(),
            });
        }
        let l = values.shape()[2];
        for (i, row) in values.data().chunks_exact(l).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Contract(format!(
                    "pixel {i} scores are not a probability vector (sum {s})"
                )));
            }
        }
        Ok(ScoreMap {
            values,
            normalized: true,
        })
    }

    /// Wraps raw logits; consumers that need probabilities will reject it.
    pub fn raw(values: DenseArray) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape {
                shape: values.shape().to_vec(),
                reason: "score map must be H×W×L".into(),
            });
        }
        Ok(ScoreMap {
            values,
            normalized: false,
        })
    }

    /// Softmax over `[n×L]` logits reshaped to `H×W×L`.
    pub fn from_logits(height: usize, width: usize, logits: &DenseArray) -> Result<Self> {
        let l = logits.shape()[logits.rank() - 1];
        let probs = softmax_rows(logits.data(), l);
        Ok(ScoreMap {
            values: DenseArray::new(vec![height, width, l], probs)?,
            normalized: true,
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn require_normalized(&self, op: &str) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op} requires softmax-normalized scores")))
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn categories(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let l = self.categories();
        let start = (y * self.width() + x) * l;
        &self.values.data()[start..start + l]
    }

    /// Per-pixel argmax as zero-based category indices, ties to the lowest.
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .data()
            .chunks_exact(self.categories())
            .map(crate::tensor::argmax)
            .collect()
    }
}

fn grid_rows(inputs: &DenseArray) -> Result<(usize, usize, DenseArray)> {
    match inputs.shape() {
        &[h, w, d] => Ok((h, w, inputs.clone().reshape(&[h * w, d])?)),
        other => Err(Error::Shape {
            shape: other.to_vec(),
            reason: "input grid must be H×W×D".into(),
        }),
    }
}

/// Encoder applied to an `H×W×D_in` input grid.
pub fn encode(params: &NetworkParams, inputs: &DenseArray) -> Result<FeatureMap> {
    let (h, w, rows) = grid_rows(inputs)?;
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let f = p.encode(tape.constant(rows))?;
    let out = f.value().clone();
    FeatureMap::from_rows(h, w, out)
}

/// Intermediate segmentation head, softmax-normalized.
pub fn head_scores(params: &NetworkParams, features: &FeatureMap) -> Result<ScoreMap> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let logits = p.head_logits(tape.constant(features.rows()?))?;
    let out = ScoreMap::from_logits(features.height(), features.width(), &logits.value());
    out
}

/// Decoder, softmax-normalized.
pub fn decode(params: &NetworkParams, features: &FeatureMap) -> Result<ScoreMap> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let logits = p.decode_logits(tape.constant(features.rows()?))?;
    let out = ScoreMap::from_logits(features.height(), features.width(), &logits.value());
    out
}
