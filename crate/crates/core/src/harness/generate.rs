//! Seeded model and calibration-set generation.
//!
//! The random stream is `ChaCha8Rng::seed_from_u64(seed)` sampled with
//! `rand_distr::StandardNormal`, consumed layer by layer: all weights of a
//! layer in row-major order, then its biases. Weights are scaled by
//! `sqrt(gain / in_dim)` with gain 2 for ReLU/GELU layers and 1 otherwise;
//! biases by `BIAS_SCALE`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, CalibrationSet, Layer, Model, Tensor};

pub const BIAS_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Layer widths including the input: `[in, h1, ..., out]`.
    pub dims: Vec<usize>,
    /// Nonlinearity of every layer but the last.
    pub activation: Activation,
    pub output_activation: Activation,
    pub encoder_len: usize,
    pub seed: u64,
    /// Build an exact identity model instead of sampling weights.
    pub identity: bool,
}

impl ModelSpec {
    pub fn random(dims: Vec<usize>, seed: u64) -> Self {
        Self {
            dims,
            activation: Activation::Relu,
            output_activation: Activation::Identity,
            encoder_len: 0,
            seed,
            identity: false,
        }
    }
}

pub(crate) fn init_gain(act: Activation) -> f64 {
    match act {
        Activation::Identity => 1.0,
        Activation::Relu | Activation::Gelu => 2.0,
    }
}

pub fn generate_model(spec: &ModelSpec) -> Result<Model> {
    if spec.dims.len() < 2 || spec.dims.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "dims {:?} need at least two positive widths",
            spec.dims
        )));
    }
    let n = spec.dims.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(n);
    for k in 0..n {
        let (in_dim, out_dim) = (spec.dims[k], spec.dims[k + 1]);
        let layer = if spec.identity {
            if in_dim != out_dim {
                return Err(Error::Shape(format!(
                    "identity model needs equal widths, got {:?}",
                    spec.dims
                )));
            }
            let mut w = vec![0.0; in_dim * in_dim];
            for i in 0..in_dim {
                w[i * in_dim + i] = 1.0;
            }
            Layer::new(
                Tensor::new(vec![in_dim, in_dim], w)?,
                Tensor::vector(vec![0.0; in_dim])?,
                Activation::Identity,
            )?
        } else {
            let act = if k + 1 == n {
                spec.output_activation
            } else {
                spec.activation
            };
            let scale = (init_gain(act) / in_dim as f64).sqrt();
            let w: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..out_dim)
                .map(|_| BIAS_SCALE * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Layer::new(
                Tensor::new(vec![out_dim, in_dim], w)?,
                Tensor::vector(b)?,
                act,
            )?
        };
        layers.push(layer);
    }
    Model::new(layers, spec.encoder_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputDistribution {
    #[default]
    Normal,
    /// Student-t with 3 degrees of freedom, for outlier-heavy inputs.
    StudentT,
}

impl InputDistribution {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "student-t" => Ok(Self::StudentT),
            other => Err(Error::InvalidInput(format!(
                "unknown distribution `{other}` (expected normal or student-t)"
            ))),
        }
    }
}

pub fn generate_calibration(
    dim: usize,
    count: usize,
    seed: u64,
    dist: InputDistribution,
) -> Result<CalibrationSet> {
    if dim == 0 || count == 0 {
        return Err(Error::InvalidInput(
            "calibration needs positive dim and count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = StudentT::new(3.0).expect("valid degrees of freedom");
    let samples = (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| match dist {
                    InputDistribution::Normal => rng.sample::<f64, _>(StandardNormal),
                    InputDistribution::StudentT => student.sample(&mut rng),
                })
                .collect()
        })
        .collect();
    CalibrationSet::from_vectors(samples, seed)
}
