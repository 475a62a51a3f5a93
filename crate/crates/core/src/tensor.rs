//! Dense tensors, affine layers and deterministic forward evaluation.
//!
//! Everything here is immutable after construction. Forward passes are pure
//! functions of the model and the input, so they can be called from many
//! threads at once.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::LayerSpecs;

/// Dense row-major array of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {pos} is {}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }
}

/// Element-wise nonlinearity applied after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

/// sqrt(2 / pi), the tanh-approximation GELU constant.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
            }
        }
    }

    /// Derivative at `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::InvalidInput(format!(
                "unknown activation `{other}` (expected identity, relu or gelu)"
            ))),
        }
    }
}

/// `out = W x + b` for a row-major `out_dim x in_dim` weight. Accumulates
/// left to right so every caller sees the same rounding.
#[inline]
pub(crate) fn affine_into(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &weight[i * in_dim..(i + 1) * in_dim];
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o = acc + bias[i];
    }
}

/// Sum of squared differences. Shared by every error measurement so that
/// independent evaluation paths produce bit-identical numbers.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// One affine + nonlinearity layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "weight must be rank 2, got shape {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match weight rows {}",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn weight_data_mut(&mut self) -> &mut [f64] {
        &mut self.weight.data
    }

    pub(crate) fn bias_data_mut(&mut self) -> &mut [f64] {
        &mut self.bias.data
    }

    /// Pre-activation and post-activation output for an explicit weight buffer.
    pub(crate) fn eval_with(&self, weight: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = vec![0.0; self.out_dim()];
        affine_into(weight, self.bias.data(), x, &mut pre);
        let post = pre.iter().map(|&z| self.activation.apply(z)).collect();
        (pre, post)
    }

    pub(crate) fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with(self.weight.data(), x).1
    }
}

/// Ordered stack of layers. The first `encoder_len` layers form the
/// trainable encoder prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct Model {
    layers: Vec<Layer>,
    encoder_len: usize,
}

impl Model {
    pub fn new(layers: Vec<Layer>, encoder_len: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("model needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if encoder_len >= layers.len() {
            return Err(Error::InvalidInput(format!(
                "encoder_len {encoder_len} must be smaller than the layer count {}",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            encoder_len,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &[f64], expected: usize) -> Result<()> {
        if x.len() != expected {
            return Err(Error::Shape(format!(
                "input has {} values, layer expects {expected}",
                x.len()
            )));
        }
        Ok(())
    }

    /// Post-activation output of every layer, in order.
    pub fn forward_full_precision(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.forward_range(0..self.n_layers(), x)
    }

    /// Runs only `layers[range]`, feeding `x` into the first of them.
    pub fn forward_range(&self, range: Range<usize>, x: &Tensor) -> Result<Vec<Tensor>> {
        if range.start >= range.end || range.end > self.n_layers() {
            return Err(Error::OutOfRange(format!(
                "layer range {range:?} for a {}-layer model",
                self.n_layers()
            )));
        }
        self.check_input(x.data(), self.layers[range.start].in_dim())?;
        let mut outputs = Vec::with_capacity(range.len());
        let mut current = x.data().to_vec();
        for layer in &self.layers[range] {
            current = layer.eval(&current);
            outputs.push(Tensor::from_vec_unchecked(current.clone()));
        }
        Ok(outputs)
    }

    /// Post-activation output of every layer with fake-quantized weights and
    /// inputs. `specs[k].activation` quantizes the input of layer `k`, so the
    /// raw input is quantized by the first layer's spec and each layer's
    /// output is quantized by the next layer's spec before use. The final
    /// output is returned unquantized.
    pub fn forward_quantized(&self, x: &Tensor, specs: &[LayerSpecs]) -> Result<Vec<Tensor>> {
        Ok(self
            .forward_quantized_trace(x, specs)?
            .outputs
            .into_iter()
            .map(Tensor::from_vec_unchecked)
            .collect())
    }

    pub(crate) fn forward_quantized_trace(
        &self,
        x: &Tensor,
        specs: &[LayerSpecs],
    ) -> Result<QuantizedTrace> {
        if specs.len() != self.n_layers() {
            return Err(Error::InvalidInput(format!(
                "expected {} layer specs, got {}",
                self.n_layers(),
                specs.len()
            )));
        }
        self.check_input(x.data(), self.input_dim())?;
        let weights: Vec<Vec<f64>> = self
            .layers
            .iter()
            .zip(specs)
            .map(|(l, s)| s.weight.quantize_slice(l.weight.data()))
            .collect();
        Ok(self.trace_with_weights(x.data(), specs, &weights))
    }

    pub(crate) fn trace_with_weights(
        &self,
        x: &[f64],
        specs: &[LayerSpecs],
        weights: &[Vec<f64>],
    ) -> QuantizedTrace {
        let n = self.n_layers();
        let mut trace = QuantizedTrace {
            pre_activations: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let xq = specs[k].activation.quantize_slice(&current);
            let (pre, post) = layer.eval_with(&weights[k], &xq);
            trace.pre_activations.push(pre);
            current = post.clone();
            trace.outputs.push(post);
        }
        trace
    }
}

pub(crate) struct QuantizedTrace {
    pub pre_activations: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    layers: Vec<LayerFile>,
    encoder_len: usize,
}

impl TryFrom<ModelFile> for Model {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                Layer::new(
                    Tensor::matrix(&l.weight)?,
                    Tensor::vector(l.bias)?,
                    l.activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers, file.encoder_len)
    }
}

impl From<Model> for ModelFile {
    fn from(model: Model) -> Self {
        let layers = model
            .layers
            .into_iter()
            .map(|l| LayerFile {
                weight: l
                    .weight
                    .data
                    .chunks(l.weight.shape[1])
                    .map(<[f64]>::to_vec)
                    .collect(),
                bias: l.bias.data,
                activation: l.activation,
            })
            .collect();
        ModelFile {
            layers,
            encoder_len: model.encoder_len,
        }
    }
}

/// Calibration inputs plus the seed that produced or subsampled them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationFile", into = "CalibrationFile")]
pub struct CalibrationSet {
    samples: Vec<Tensor>,
    seed: u64,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Tensor>, seed: u64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidInput("calibration set is empty".into()))?;
        let shape = first.shape().to_vec();
        if samples.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(Error::Shape("calibration samples differ in shape".into()));
        }
        Ok(Self { samples, seed })
    }

    pub fn from_vectors(samples: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(Tensor::vector)
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, seed)
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].len()
    }

    /// Short identifier used to tag results computed on this set.
    pub fn id(&self) -> String {
        format!("calib(seed={},n={})", self.seed, self.samples.len())
    }

    /// Contiguous sub-batch sharing this set's seed.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        Self::new(self.samples[range].to_vec(), self.seed)
    }

    pub(crate) fn check_model(&self, model: &Model) -> Result<()> {
        if self.input_dim() != model.input_dim() {
            return Err(Error::Shape(format!(
                "calibration samples have {} values, model expects {}",
                self.input_dim(),
                model.input_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    seed: u64,
    samples: Vec<Vec<f64>>,
}

impl TryFrom<CalibrationFile> for CalibrationSet {
    type Error = Error;

    fn try_from(file: CalibrationFile) -> Result<Self> {
        CalibrationSet::from_vectors(file.samples, file.seed)
    }
}

impl From<CalibrationSet> for CalibrationFile {
    fn from(set: CalibrationSet) -> Self {
        CalibrationFile {
            seed: set.seed,
            samples: set.samples.into_iter().map(Tensor::into_data).collect(),
        }
    }
}
