//! Shared fixtures and scalar oracles. The oracles are written without
//! calling the library's arithmetic so they can check it.
#![allow(dead_code)]

use blockptq::harness::generate::{
    generate_calibration, generate_model, InputDistribution, ModelSpec,
};
use blockptq::quantizer::{LayerSpecs, RoundingSpec};
use blockptq::tensor::{Activation, CalibrationSet, Model};

pub fn model(dims: &[usize], seed: u64) -> Model {
    generate_model(&ModelSpec::random(dims.to_vec(), seed)).unwrap()
}

pub fn encoder_model(dims: &[usize], encoder_len: usize, seed: u64) -> Model {
    let spec = ModelSpec {
        encoder_len,
        ..ModelSpec::random(dims.to_vec(), seed)
    };
    generate_model(&spec).unwrap()
}

pub fn calib(dim: usize, count: usize, seed: u64) -> CalibrationSet {
    generate_calibration(dim, count, seed, InputDistribution::Normal).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Nearest rounding point by scanning every level; exact ties go to the even
/// code.
pub fn quantize(spec: &RoundingSpec, x: f64) -> f64 {
    let (l, u) = (spec.lower(), spec.upper());
    let m = spec.levels();
    let step = (u - l) / (m - 1) as f64;
    let c = if x < l {
        l
    } else if x > u {
        u
    } else {
        x
    };
    let point = |i: usize| if i == m - 1 { u } else { l + i as f64 * step };
    let mut best = 0;
    for i in 1..m {
        let (di, db) = ((c - point(i)).abs(), (c - point(best)).abs());
        if di < db || (di == db && i % 2 == 0) {
            best = i;
        }
    }
    point(best)
}

pub fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Identity => z,
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh())
        }
    }
}

/// Per-layer (pre, post) outputs by explicit loops. With `specs`, weights and
/// layer inputs are fake-quantized first.
pub fn forward(
    model: &Model,
    x: &[f64],
    specs: Option<&[LayerSpecs]>,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut current = x.to_vec();
    for (k, layer) in model.layers().iter().enumerate() {
        let (rows, cols) = (layer.out_dim(), layer.in_dim());
        let w = layer.weight().data();
        let input: Vec<f64> = match specs {
            Some(s) => current
                .iter()
                .map(|&v| quantize(&s[k].activation, v))
                .collect(),
            None => current.clone(),
        };
        let mut pre = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = layer.bias().data()[i];
            for j in 0..cols {
                let wij = match specs {
                    Some(s) => quantize(&s[k].weight, w[i * cols + j]),
                    None => w[i * cols + j],
                };
                acc += wij * input[j];
            }
            pre[i] = acc;
        }
        let post: Vec<f64> = pre
            .iter()
            .map(|&z| activate(layer.activation(), z))
            .collect();
        current = post.clone();
        out.push((pre, post));
    }
    out
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Post-activation squared error of every layer, summed over `calib`.
pub fn layer_errors(model: &Model, specs: &[LayerSpecs], calib: &CalibrationSet) -> Vec<f64> {
    let mut totals = vec![0.0; model.n_layers()];
    for x in calib.samples() {
        let q = forward(model, x.data(), Some(specs));
        let r = forward(model, x.data(), None);
        for k in 0..totals.len() {
            totals[k] += sq_dist(&q[k].1, &r[k].1);
        }
    }
    totals
}

/// Softmax over the levels of `spec` of `-(clip(x) - q_m)^2 / t`.
pub fn soft_probs(spec: &RoundingSpec, x: f64, t: f64) -> Vec<f64> {
    let (l, u) = (spec.lower(), spec.upper());
    let m = spec.levels();
    let step = (u - l) / (m - 1) as f64;
    let c = x.max(l).min(u);
    let logits: Vec<f64> = (0..m)
        .map(|i| {
            let q = if i == m - 1 { u } else { l + i as f64 * step };
            -(c - q) * (c - q) / t
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn shannon(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Exact lossless specs for integer-valued data in `[lo, hi]`.
pub fn integer_spec(bits: u32, lo: f64, hi: f64) -> RoundingSpec {
    RoundingSpec::new(bits, lo, hi, 1.0).unwrap()
}
