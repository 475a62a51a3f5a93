//! Encoder-prefix optimization.
//!
//! The first `encoder_len` layers are fine-tuned with plain gradient descent
//! against
//!
//! ```text
//! L = L_reg + lambda1 * L_ent + lambda2 * L_err
//! L_reg = sum_s |a_n - t|^2
//! L_ent = sum_{k < n-1} w_k * D(k, k+1)
//! L_err = sum_s |a_v - r_v| + eta * |a_n - r_n|
//! ```
//!
//! where `a` is the quantized path, `r` the full-precision path of the
//! current model, `t` the task targets, `v = encoder_len` and `D` the
//! pairwise dependency from [`crate::dependency`]. The weights `w_k` are the
//! batch-mean norms of `dE/da_k` with `E = |a_n - r_n|^2`, taken on the
//! quantized path and held constant within an epoch.
//!
//! Quantizers are straight-through: the gradient passes unchanged where the
//! value lies inside `[lower, upper]` and is zero elsewhere, for weights and
//! activations alike. Inside `D`, the rounded code of each element is
//! treated as fixed. The finite-difference arm reproduces exactly this
//! surrogate by freezing every rounding residual `Q(x) - clip(x)` and code
//! at the base point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dependency::pairwise_dependency;
use crate::error::{Error, Result};
use crate::quantizer::{LayerSpecs, RoundingSpec, SoftQuantizer};
use crate::tensor::{squared_distance, CalibrationSet, Layer, Model};

/// Central-difference step of the finite-difference oracle.
pub const FD_STEP: f64 = 1e-6;

/// Largest number of single-sample forward passes a finite-difference
/// evaluation may take.
pub const FD_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    #[default]
    Analytic,
    FiniteDifference,
}

impl GradMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "finite-difference" | "fd" => Ok(Self::FiniteDifference),
            other => Err(Error::InvalidInput(format!(
                "unknown grad mode `{other}` (expected analytic or finite-difference)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeoConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_mode: GradMode,
    /// Soft-quantizer temperature; `None` uses each spec's interval.
    pub temperature: Option<f64>,
}

impl Default for VeoConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            eta: 0.5,
            epochs: 10,
            batch: 8,
            lr: 1e-3,
            grad_mode: GradMode::Analytic,
            temperature: None,
        }
    }
}

impl VeoConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!(
                    "{name} must be finite and >= 0, got {v}"
                )))
            }
        };
        nonneg("lambda1", self.lambda1)?;
        nonneg("lambda2", self.lambda2)?;
        nonneg("eta", self.eta)?;
        nonneg("lr", self.lr)?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidInput(
                "epochs and batch must be at least 1".into(),
            ));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// `weights[k]` weighs the dependency term whose first tensor is the input of
/// layer `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianWeights {
    pub weights: Vec<f64>,
}

/// Gradient with respect to the encoder layers' parameters, row-major like
/// the weights themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradient {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl EncoderGradient {
    pub fn zeros(model: &Model) -> Self {
        let enc = &model.layers()[..model.encoder_len()];
        Self {
            weight: enc.iter().map(|l| vec![0.0; l.weight().len()]).collect(),
            bias: enc.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let pairs = self
            .weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .zip(other.weight.iter().chain(&other.bias));
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Weights then biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub reg: EncoderGradient,
    pub ent: EncoderGradient,
    pub err: EncoderGradient,
}

impl LossGradients {
    fn zeros(model: &Model) -> Self {
        let z = EncoderGradient::zeros(model);
        Self {
            reg: z.clone(),
            ent: z.clone(),
            err: z,
        }
    }

    fn add(&mut self, other: &Self) {
        self.reg.add_scaled(&other.reg, 1.0);
        self.ent.add_scaled(&other.ent, 1.0);
        self.err.add_scaled(&other.err, 1.0);
    }

    pub fn total(&self, cfg: &VeoConfig) -> EncoderGradient {
        let mut g = self.reg.clone();
        g.add_scaled(&self.ent, cfg.lambda1);
        g.add_scaled(&self.err, cfg.lambda2);
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub ent: f64,
    pub err: f64,
    pub total: f64,
}

/// One row of the loss trace; epoch 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    #[serde(rename = "L_reg")]
    pub reg: f64,
    #[serde(rename = "L_ent")]
    pub ent: f64,
    #[serde(rename = "L_err")]
    pub err: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct VeoOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// Full-precision outputs of `model`, the default regression targets.
pub fn teacher_targets(model: &Model, calib: &CalibrationSet) -> Vec<Vec<f64>> {
    calib
        .samples()
        .iter()
        .map(|x| {
            fp_pass(model, x.data())
                .a
                .pop()
                .expect("at least one layer")
        })
        .collect()
}

fn check_specs(model: &Model, specs: &[LayerSpecs]) -> Result<()> {
    if specs.len() != model.n_layers() {
        return Err(Error::InvalidInput(format!(
            "expected {} layer specs, got {}",
            model.n_layers(),
            specs.len()
        )));
    }
    Ok(())
}

fn check_targets(model: &Model, calib: &CalibrationSet, targets: &[Vec<f64>]) -> Result<()> {
    if targets.len() != calib.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} calibration samples",
            targets.len(),
            calib.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != model.output_dim()) {
        return Err(Error::Shape(format!(
            "target has {} values, model output has {}",
            t.len(),
            model.output_dim()
        )));
    }
    Ok(())
}

fn require_encoder(model: &Model) -> Result<()> {
    if model.encoder_len() == 0 {
        return Err(Error::InvalidInput(
            "model has no encoder layers (encoder_len = 0)".into(),
        ));
    }
    Ok(())
}

/// Activations of one forward pass. `a[k]` is the input of layer `k` and
/// `a[n]` the model output; `xq[k]` is what layer `k` actually consumed.
struct Pass {
    a: Vec<Vec<f64>>,
    xq: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn fp_pass(model: &Model, x: &[f64]) -> Pass {
    let n = model.n_layers();
    let mut pass = Pass {
        a: Vec::with_capacity(n + 1),
        xq: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
    };
    pass.a.push(x.to_vec());
    for layer in model.layers() {
        let input = pass.a.last().expect("non-empty").clone();
        let (pre, post) = layer.eval_with(layer.weight().data(), &input);
        pass.xq.push(input);
        pass.pre.push(pre);
        pass.a.push(post);
    }
    pass
}

/// Quantized weights and their straight-through masks.
struct QuantizedWeights {
    values: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

impl QuantizedWeights {
    fn new(model: &Model, specs: &[LayerSpecs]) -> Self {
        let (values, mask) = model
            .layers()
            .iter()
            .zip(specs)
            .map(|(l, s)| {
                let w = l.weight().data();
                (
                    s.weight.quantize_slice(w),
                    w.iter().map(|&v| s.weight.contains(v)).collect(),
                )
            })
            .unzip();
        Self { values, mask }
    }
}

/// Quantized forward pass; `quantize(k, x)` maps layer `k`'s raw input to
/// what it consumes.
fn quantized_pass_with(
    model: &Model,
    weights: &[Vec<f64>],
    x: &[f64],
    quantize: impl Fn(usize, &[f64]) -> Vec<f64>,
) -> Pass {
    let n = model.n_layers();
    let mut pass = Pass {
        a: Vec::with_capacity(n + 1),
        xq: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
    };
    pass.a.push(x.to_vec());
    for (k, layer) in model.layers().iter().enumerate() {
        let xq = quantize(k, &pass.a[k]);
        let (pre, post) = layer.eval_with(&weights[k], &xq);
        pass.xq.push(xq);
        pass.pre.push(pre);
        pass.a.push(post);
    }
    pass
}

fn quantized_pass(model: &Model, specs: &[LayerSpecs], weights: &[Vec<f64>], x: &[f64]) -> Pass {
    quantized_pass_with(model, weights, x, |k, a| {
        specs[k].activation.quantize_slice(a)
    })
}

/// Path-specific pieces of the reverse pass.
struct Backprop<'a> {
    weights: &'a [Vec<f64>],
    /// Straight-through masks; `None` on the full-precision path.
    weight_mask: Option<&'a [Vec<bool>]>,
    input_specs: Option<&'a [LayerSpecs]>,
}

impl Backprop<'_> {
    /// Reverse accumulation from per-tensor seeds (`seeds[k]` is added at
    /// `a[k]`). Encoder parameter gradients accumulate into `grad`; returns
    /// the total gradient at every `a[k]`.
    fn run(
        &self,
        model: &Model,
        pass: &Pass,
        seeds: &[Vec<f64>],
        grad: &mut EncoderGradient,
    ) -> Vec<Vec<f64>> {
        let n = model.n_layers();
        let enc = model.encoder_len();
        let mut out = vec![Vec::new(); n + 1];
        let mut g = seeds[n].clone();
        out[n] = g.clone();
        for k in (0..n).rev() {
            let layer = &model.layers()[k];
            let in_dim = layer.in_dim();
            let act = layer.activation();
            let g_pre: Vec<f64> = g
                .iter()
                .zip(&pass.pre[k])
                .map(|(gi, &z)| gi * act.derivative(z))
                .collect();
            if k < enc {
                for (i, gp) in g_pre.iter().enumerate() {
                    for j in 0..in_dim {
                        let idx = i * in_dim + j;
                        let pass_through = self.weight_mask.is_none_or(|m| m[k][idx]);
                        if pass_through {
                            grad.weight[k][idx] += gp * pass.xq[k][j];
                        }
                    }
                    grad.bias[k][i] += gp;
                }
            }
            let w = &self.weights[k];
            let mut gx = vec![0.0; in_dim];
            for (i, gp) in g_pre.iter().enumerate() {
                for (j, gxj) in gx.iter_mut().enumerate() {
                    *gxj += w[i * in_dim + j] * gp;
                }
            }
            if let Some(specs) = self.input_specs {
                for (gxj, &a) in gx.iter_mut().zip(&pass.a[k]) {
                    if !specs[k].activation.contains(a) {
                        *gxj = 0.0;
                    }
                }
            }
            for (gxj, s) in gx.iter_mut().zip(&seeds[k]) {
                *gxj += s;
            }
            out[k] = gx.clone();
            g = gx;
        }
        out
    }
}

fn zero_seeds(pass: &Pass) -> Vec<Vec<f64>> {
    pass.a.iter().map(|a| vec![0.0; a.len()]).collect()
}

/// Gradient of `|a - b|` with respect to `a`; zero when `a == b`.
fn norm_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let norm = squared_distance(a, b).sqrt();
    if norm == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().zip(b).map(|(x, y)| (x - y) / norm).collect()
}

/// Dependency contribution of one sample with its gradients with respect to
/// layer `k`'s raw input and, through the full-precision transfer, its
/// parameters.
struct DependencyGrad {
    d_input: Vec<f64>,
    d_weight: Vec<f64>,
    d_bias: Vec<f64>,
}

fn dependency_grad(
    layer: &Layer,
    here: &SoftQuantizer,
    next: &SoftQuantizer,
    a: &[f64],
    xq: &[f64],
    codes: &[u32],
) -> DependencyGrad {
    let len_a = a.len() as f64;
    let mut weight = 0.0;
    let mut d_weight_da = Vec::with_capacity(a.len());
    for (&x, &c) in a.iter().zip(codes) {
        let (p, dp) = here.prob_with_grad(x, c);
        weight += p;
        d_weight_da.push(dp / len_a);
    }
    weight /= len_a;
    let (pre, u) = layer.eval_with(layer.weight().data(), xq);
    let len_u = u.len() as f64;
    let mut h = 0.0;
    let mut g_pre = Vec::with_capacity(u.len());
    for (&ui, &zi) in u.iter().zip(&pre) {
        let sp = next.entropy_with_grad(ui);
        h += sp.entropy;
        g_pre.push(weight * sp.d_entropy / len_u * layer.activation().derivative(zi));
    }
    h /= len_u;
    let in_dim = layer.in_dim();
    let w = layer.weight().data();
    let mut d_input: Vec<f64> = d_weight_da.iter().map(|d| d * h).collect();
    for (j, dj) in d_input.iter_mut().enumerate() {
        if !here.spec().contains(a[j]) {
            continue;
        }
        let mut acc = 0.0;
        for (i, gp) in g_pre.iter().enumerate() {
            acc += w[i * in_dim + j] * gp;
        }
        *dj += acc;
    }
    let mut d_weight = vec![0.0; w.len()];
    for (i, gp) in g_pre.iter().enumerate() {
        for j in 0..in_dim {
            d_weight[i * in_dim + j] = gp * xq[j];
        }
    }
    DependencyGrad {
        d_input,
        d_weight,
        d_bias: g_pre,
    }
}

/// `w_k = mean_s |dE_s / da_k|` with `E_s = |a_n - r_n|^2`.
pub fn jacobian_weights(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    mode: GradMode,
) -> Result<JacobianWeights> {
    check_specs(model, specs)?;
    calib.check_model(model)?;
    let n = model.n_layers();
    let qw = QuantizedWeights::new(model, specs);
    let per_sample: Vec<Vec<f64>> = match mode {
        GradMode::Analytic => calib
            .samples()
            .par_iter()
            .map(|x| {
                let q = quantized_pass(model, specs, &qw.values, x.data());
                let r = fp_pass(model, x.data());
                let mut seeds = zero_seeds(&q);
                seeds[n] = q.a[n]
                    .iter()
                    .zip(&r.a[n])
                    .map(|(a, b)| 2.0 * (a - b))
                    .collect();
                let back = Backprop {
                    weights: &qw.values,
                    weight_mask: Some(&qw.mask),
                    input_specs: Some(specs),
                };
                let mut scratch = EncoderGradient::zeros(model);
                let g = back.run(model, &q, &seeds, &mut scratch);
                g[..n]
                    .iter()
                    .map(|gk| gk.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            })
            .collect(),
        GradMode::FiniteDifference => {
            let coords: usize = model.layers().iter().map(Layer::in_dim).sum();
            check_fd_budget(2 * coords * calib.len())?;
            let frozen = Surrogate::capture(model, specs, calib);
            calib
                .samples()
                .par_iter()
                .enumerate()
                .map(|(s, x)| frozen.jacobian_norms(model, specs, s, x.data()))
                .collect()
        }
    };
    let mut weights = vec![0.0; n];
    for row in &per_sample {
        for (w, v) in weights.iter_mut().zip(row) {
            *w += v;
        }
    }
    for w in &mut weights {
        *w /= calib.len() as f64;
    }
    Ok(JacobianWeights { weights })
}

fn check_fd_budget(passes: usize) -> Result<()> {
    if passes > FD_BUDGET {
        return Err(Error::InvalidInput(format!(
            "finite differences need {passes} forward passes, budget is {FD_BUDGET}"
        )));
    }
    Ok(())
}

/// `sum_{k < n-1} w_k * D(k, k+1)`.
pub fn entropy_loss(
    model: &Model,
    specs: &[LayerSpecs],
    weights: &JacobianWeights,
    calib: &CalibrationSet,
    temperature: Option<f64>,
) -> Result<f64> {
    check_specs(model, specs)?;
    if weights.weights.len() != model.n_layers() {
        return Err(Error::InvalidInput(format!(
            "expected {} Jacobian weights, got {}",
            model.n_layers(),
            weights.weights.len()
        )));
    }
    let mut total = 0.0;
    for k in 0..model.n_layers().saturating_sub(1) {
        let w = weights.weights[k];
        if w != 0.0 {
            total += w * pairwise_dependency(model, k, specs, calib, temperature)?;
        }
    }
    Ok(total)
}

/// `sum_s |a_v - r_v| + eta * |a_n - r_n|` with `v = encoder_len`.
pub fn err_loss(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    eta: f64,
) -> Result<f64> {
    require_encoder(model)?;
    check_specs(model, specs)?;
    calib.check_model(model)?;
    let (v, n) = (model.encoder_len(), model.n_layers());
    let qw = QuantizedWeights::new(model, specs);
    let mut total = 0.0;
    for x in calib.samples() {
        let q = quantized_pass(model, specs, &qw.values, x.data());
        let r = fp_pass(model, x.data());
        total += squared_distance(&q.a[v], &r.a[v]).sqrt()
            + eta * squared_distance(&q.a[n], &r.a[n]).sqrt();
    }
    Ok(total)
}

/// `sum_s |a_n - t_s|^2` on the quantized path.
pub fn reg_loss(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    targets: &[Vec<f64>],
) -> Result<f64> {
    check_specs(model, specs)?;
    calib.check_model(model)?;
    check_targets(model, calib, targets)?;
    let n = model.n_layers();
    let qw = QuantizedWeights::new(model, specs);
    Ok(calib
        .samples()
        .iter()
        .zip(targets)
        .map(|(x, t)| squared_distance(&quantized_pass(model, specs, &qw.values, x.data()).a[n], t))
        .sum())
}

pub fn total_loss(
    model: &Model,
    specs: &[LayerSpecs],
    weights: &JacobianWeights,
    calib: &CalibrationSet,
    targets: &[Vec<f64>],
    cfg: &VeoConfig,
) -> Result<LossBreakdown> {
    let reg = reg_loss(model, specs, calib, targets)?;
    let ent = entropy_loss(model, specs, weights, calib, cfg.temperature)?;
    let err = err_loss(model, specs, calib, cfg.eta)?;
    Ok(LossBreakdown {
        reg,
        ent,
        err,
        total: reg + cfg.lambda1 * ent + cfg.lambda2 * err,
    })
}

/// Analytic gradients of the three loss components with respect to the
/// encoder parameters.
pub fn loss_gradients(
    model: &Model,
    specs: &[LayerSpecs],
    weights: &JacobianWeights,
    calib: &CalibrationSet,
    targets: &[Vec<f64>],
    cfg: &VeoConfig,
) -> Result<LossGradients> {
    require_encoder(model)?;
    check_specs(model, specs)?;
    calib.check_model(model)?;
    check_targets(model, calib, targets)?;
    let (v, n) = (model.encoder_len(), model.n_layers());
    let qw = QuantizedWeights::new(model, specs);
    let softs = soft_quantizers(specs, cfg.temperature)?;
    let batch = calib.len() as f64;
    let per_sample: Vec<LossGradients> = calib
        .samples()
        .par_iter()
        .zip(targets)
        .map(|(x, t)| {
            let q = quantized_pass(model, specs, &qw.values, x.data());
            let r = fp_pass(model, x.data());
            let quantized = Backprop {
                weights: &qw.values,
                weight_mask: Some(&qw.mask),
                input_specs: Some(specs),
            };
            let fp_weights: Vec<Vec<f64>> = model
                .layers()
                .iter()
                .map(|l| l.weight().data().to_vec())
                .collect();
            let full = Backprop {
                weights: &fp_weights,
                weight_mask: None,
                input_specs: None,
            };
            let mut out = LossGradients::zeros(model);

            let mut seeds = zero_seeds(&q);
            seeds[n] = q.a[n].iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect();
            quantized.run(model, &q, &seeds, &mut out.reg);

            let mut q_seeds = zero_seeds(&q);
            let mut r_seeds = zero_seeds(&r);
            let gv = norm_grad(&q.a[v], &r.a[v]);
            let gn = norm_grad(&q.a[n], &r.a[n]);
            for (i, g) in gv.iter().enumerate() {
                q_seeds[v][i] += g;
                r_seeds[v][i] -= g;
            }
            for (i, g) in gn.iter().enumerate() {
                q_seeds[n][i] += cfg.eta * g;
                r_seeds[n][i] -= cfg.eta * g;
            }
            quantized.run(model, &q, &q_seeds, &mut out.err);
            full.run(model, &r, &r_seeds, &mut out.err);

            let mut e_seeds = zero_seeds(&q);
            for k in 0..n - 1 {
                let scale = weights.weights[k] / batch;
                if scale == 0.0 {
                    continue;
                }
                let (here, next) = (&softs[k], &softs[k + 1]);
                let codes: Vec<u32> = q.a[k].iter().map(|&a| here.spec().code(a)).collect();
                let dg = dependency_grad(&model.layers()[k], here, next, &q.a[k], &q.xq[k], &codes);
                for (s, d) in e_seeds[k].iter_mut().zip(&dg.d_input) {
                    *s += scale * d;
                }
                if k < v {
                    for (g, d) in out.ent.weight[k].iter_mut().zip(&dg.d_weight) {
                        *g += scale * d;
                    }
                    for (g, d) in out.ent.bias[k].iter_mut().zip(&dg.d_bias) {
                        *g += scale * d;
                    }
                }
            }
            quantized.run(model, &q, &e_seeds, &mut out.ent);
            out
        })
        .collect();
    let mut total = LossGradients::zeros(model);
    for g in &per_sample {
        total.add(g);
    }
    Ok(total)
}

fn soft_quantizers(specs: &[LayerSpecs], temperature: Option<f64>) -> Result<Vec<SoftQuantizer>> {
    specs
        .iter()
        .map(|s| SoftQuantizer::new(s.activation, temperature))
        .collect()
}

/// Rounding residuals and codes frozen at a base point, turning every
/// quantizer into `clip(x) + residual`.
struct Surrogate {
    /// `[sample][layer][element]`
    input_residual: Vec<Vec<Vec<f64>>>,
    codes: Vec<Vec<Vec<u32>>>,
    weight_residual: Vec<Vec<f64>>,
}

fn residual(spec: &RoundingSpec, xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| spec.quantize(x) - spec.clip(x))
        .collect()
}

impl Surrogate {
    fn capture(model: &Model, specs: &[LayerSpecs], calib: &CalibrationSet) -> Self {
        let qw = QuantizedWeights::new(model, specs);
        let mut input_residual = Vec::with_capacity(calib.len());
        let mut codes = Vec::with_capacity(calib.len());
        for x in calib.samples() {
            let q = quantized_pass(model, specs, &qw.values, x.data());
            input_residual.push(
                (0..model.n_layers())
                    .map(|k| residual(&specs[k].activation, &q.a[k]))
                    .collect(),
            );
            codes.push(
                (0..model.n_layers())
                    .map(|k| {
                        q.a[k]
                            .iter()
                            .map(|&a| specs[k].activation.code(a))
                            .collect()
                    })
                    .collect(),
            );
        }
        let weight_residual = model
            .layers()
            .iter()
            .zip(specs)
            .map(|(l, s)| residual(&s.weight, l.weight().data()))
            .collect();
        Self {
            input_residual,
            codes,
            weight_residual,
        }
    }

    fn weights(&self, model: &Model, specs: &[LayerSpecs]) -> Vec<Vec<f64>> {
        model
            .layers()
            .iter()
            .zip(specs)
            .zip(&self.weight_residual)
            .map(|((l, s), res)| {
                l.weight()
                    .data()
                    .iter()
                    .zip(res)
                    .map(|(&w, r)| s.weight.clip(w) + r)
                    .collect()
            })
            .collect()
    }

    fn quantize(&self, spec: &RoundingSpec, s: usize, k: usize, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.input_residual[s][k])
            .map(|(&x, r)| spec.clip(x) + r)
            .collect()
    }

    fn pass(
        &self,
        model: &Model,
        specs: &[LayerSpecs],
        weights: &[Vec<f64>],
        s: usize,
        x: &[f64],
    ) -> Pass {
        quantized_pass_with(model, weights, x, |k, a| {
            self.quantize(&specs[k].activation, s, k, a)
        })
    }

    /// `|dE/da_k|` for every layer input of sample `s` by central differences.
    fn jacobian_norms(&self, model: &Model, specs: &[LayerSpecs], s: usize, x: &[f64]) -> Vec<f64> {
        let n = model.n_layers();
        let weights = self.weights(model, specs);
        let base = self.pass(model, specs, &weights, s, x);
        let reference = fp_pass(model, x).a.pop().expect("at least one layer");
        let error_from = |k: usize, a: &[f64]| {
            let mut current = a.to_vec();
            for (j, layer) in model.layers().iter().enumerate().skip(k) {
                let xq = self.quantize(&specs[j].activation, s, j, &current);
                current = layer.eval_with(&weights[j], &xq).1;
            }
            squared_distance(&current, &reference)
        };
        (0..n)
            .map(|k| {
                let mut sq = 0.0;
                for i in 0..base.a[k].len() {
                    let mut plus = base.a[k].clone();
                    let mut minus = base.a[k].clone();
                    plus[i] += FD_STEP;
                    minus[i] -= FD_STEP;
                    let g = (error_from(k, &plus) - error_from(k, &minus)) / (2.0 * FD_STEP);
                    sq += g * g;
                }
                sq.sqrt()
            })
            .collect()
    }

    fn losses(
        &self,
        model: &Model,
        specs: &[LayerSpecs],
        softs: &[SoftQuantizer],
        jacobian: &JacobianWeights,
        calib: &CalibrationSet,
        targets: &[Vec<f64>],
        eta: f64,
    ) -> [f64; 3] {
        let (v, n) = (model.encoder_len(), model.n_layers());
        let weights = self.weights(model, specs);
        let mut reg = 0.0;
        let mut err = 0.0;
        let mut dep = vec![0.0; n.saturating_sub(1)];
        for (s, (x, t)) in calib.samples().iter().zip(targets).enumerate() {
            let q = self.pass(model, specs, &weights, s, x.data());
            let r = fp_pass(model, x.data());
            reg += squared_distance(&q.a[n], t);
            err += squared_distance(&q.a[v], &r.a[v]).sqrt()
                + eta * squared_distance(&q.a[n], &r.a[n]).sqrt();
            for (k, d) in dep.iter_mut().enumerate() {
                let here = &softs[k];
                let mut w = 0.0;
                for (&a, &c) in q.a[k].iter().zip(&self.codes[s][k]) {
                    w += here.prob_with_grad(a, c).0;
                }
                w /= q.a[k].len() as f64;
                let u = model.layers()[k].eval(&q.xq[k]);
                *d += w * softs[k + 1].total_entropy(&u) / u.len() as f64;
            }
        }
        let ent = dep
            .iter()
            .zip(&jacobian.weights)
            .map(|(d, w)| w * d / calib.len() as f64)
            .sum();
        [reg, ent, err]
    }
}

/// Central-difference gradients of the straight-through surrogate, the
/// oracle for [`loss_gradients`]. Tiny models only.
pub fn finite_difference_gradients(
    model: &Model,
    specs: &[LayerSpecs],
    weights: &JacobianWeights,
    calib: &CalibrationSet,
    targets: &[Vec<f64>],
    cfg: &VeoConfig,
) -> Result<LossGradients> {
    require_encoder(model)?;
    check_specs(model, specs)?;
    calib.check_model(model)?;
    check_targets(model, calib, targets)?;
    let enc = model.encoder_len();
    let params: Vec<(usize, bool, usize)> = (0..enc)
        .flat_map(|k| {
            let layer = &model.layers()[k];
            (0..layer.weight().len())
                .map(move |i| (k, true, i))
                .chain((0..layer.out_dim()).map(move |i| (k, false, i)))
        })
        .collect();
    check_fd_budget(2 * params.len() * calib.len())?;
    let frozen = Surrogate::capture(model, specs, calib);
    let softs = soft_quantizers(specs, cfg.temperature)?;
    let eval = |k: usize, is_weight: bool, i: usize, delta: f64| {
        let mut m = model.clone();
        let layer = &mut m.layers_mut()[k];
        if is_weight {
            layer.weight_data_mut()[i] += delta;
        } else {
            layer.bias_data_mut()[i] += delta;
        }
        frozen.losses(&m, specs, &softs, weights, calib, targets, cfg.eta)
    };
    let diffs: Vec<[f64; 3]> = params
        .par_iter()
        .map(|&(k, is_weight, i)| {
            let plus = eval(k, is_weight, i, FD_STEP);
            let minus = eval(k, is_weight, i, -FD_STEP);
            [0, 1, 2].map(|c| (plus[c] - minus[c]) / (2.0 * FD_STEP))
        })
        .collect();
    let mut out = LossGradients::zeros(model);
    for (&(k, is_weight, i), d) in params.iter().zip(&diffs) {
        for (grad, value) in [&mut out.reg, &mut out.ent, &mut out.err]
            .into_iter()
            .zip(d)
        {
            if is_weight {
                grad.weight[k][i] = *value;
            } else {
                grad.bias[k][i] = *value;
            }
        }
    }
    Ok(out)
}

fn apply_step(model: &mut Model, grad: &EncoderGradient, lr: f64) -> bool {
    let mut finite = true;
    for (k, layer) in model
        .layers_mut()
        .iter_mut()
        .enumerate()
        .take(grad.weight.len())
    {
        for (w, g) in layer.weight_data_mut().iter_mut().zip(&grad.weight[k]) {
            *w -= lr * g;
            finite &= w.is_finite();
        }
        for (b, g) in layer.bias_data_mut().iter_mut().zip(&grad.bias[k]) {
            *b -= lr * g;
            finite &= b.is_finite();
        }
    }
    finite
}

/// Gradient descent on the encoder layers. Batches are taken in calibration
/// order; Jacobian weights are recomputed once per epoch. Each trace row is
/// evaluated on the whole calibration set.
pub fn optimize_encoder(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    targets: &[Vec<f64>],
    cfg: &VeoConfig,
) -> Result<VeoOutcome> {
    cfg.validate()?;
    require_encoder(model)?;
    check_specs(model, specs)?;
    calib.check_model(model)?;
    check_targets(model, calib, targets)?;
    let mut current = model.clone();
    let mut jac = jacobian_weights(&current, specs, calib, cfg.grad_mode)?;
    let start = total_loss(&current, specs, &jac, calib, targets, cfg)?;
    let row = |epoch: usize, l: LossBreakdown| TraceRow {
        epoch,
        reg: l.reg,
        ent: l.ent,
        err: l.err,
        total: l.total,
    };
    let mut trace = vec![row(0, start)];
    let diverged = |epoch: usize, loss: f64| Error::Diverged {
        epoch,
        loss,
        initial: start.total,
    };
    for epoch in 1..=cfg.epochs {
        let mut offset = 0;
        while offset < calib.len() {
            let end = (offset + cfg.batch).min(calib.len());
            let batch = calib.slice(offset..end)?;
            let grads = match cfg.grad_mode {
                GradMode::Analytic => {
                    loss_gradients(&current, specs, &jac, &batch, &targets[offset..end], cfg)?
                }
                GradMode::FiniteDifference => finite_difference_gradients(
                    &current,
                    specs,
                    &jac,
                    &batch,
                    &targets[offset..end],
                    cfg,
                )?,
            };
            if !apply_step(&mut current, &grads.total(cfg), cfg.lr) {
                return Err(diverged(epoch, f64::NAN));
            }
            offset = end;
        }
        jac = jacobian_weights(&current, specs, calib, cfg.grad_mode)?;
        let l = total_loss(&current, specs, &jac, calib, targets, cfg)?;
        if !l.total.is_finite() || (start.total > 1e-12 && l.total > 10.0 * start.total) {
            return Err(diverged(epoch, l.total));
        }
        trace.push(row(epoch, l));
    }
    Ok(VeoOutcome {
        model: current,
        trace,
    })
}
