//! Rounding-function search over percentile candidates.
//!
//! Every layer owns one candidate choice that fixes both its weight spec and
//! the spec quantizing its input activation. Weight bounds are percentiles of
//! the (static) weight tensor; activation bounds are percentiles of the
//! layer's input over the whole calibration batch, taken on the quantized
//! path with all upstream choices frozen.
//!
//! Three strategies are provided:
//!
//! * [`search_layerwise`]: greedy, each layer minimizes its own output error.
//! * [`search_blockwise`]: each block of a [`BlockPartition`] is searched
//!   exhaustively against the error at its last layer, blocks in order.
//! * [`global_oracle`]: exhaustive scan of every combination against the
//!   final output error. Written as a separate enumeration so it can serve as
//!   a reference for the other two.
//!
//! Ties are broken toward the larger percentile, i.e. the lexicographically
//! smallest vector of grid indices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dependency::BlockPartition;
use crate::error::{Error, Result};
use crate::quantizer::{percentile_bounds, percentile_bounds_sorted, LayerSpecs, RoundingSpec};
use crate::tensor::{squared_distance, CalibrationSet, Model};

/// Default evaluation budget for a single exhaustive scan.
pub const DEFAULT_BUDGET: u64 = 1_000_000;

/// Ordered percentile candidates, strictly decreasing, each in `(0.9, 1.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CandidateGrid {
    percentiles: Vec<f64>,
}

impl CandidateGrid {
    pub fn new(percentiles: Vec<f64>) -> Result<Self> {
        if percentiles.is_empty() {
            return Err(Error::InvalidInput("candidate grid is empty".into()));
        }
        if let Some(p) = percentiles.iter().find(|p| !(**p > 0.9 && **p <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "grid percentile {p} outside (0.9, 1.0]"
            )));
        }
        if percentiles.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidInput(
                "grid percentiles must be strictly decreasing".into(),
            ));
        }
        Ok(Self { percentiles })
    }

    /// `1.0` down to `0.98` in steps of `0.005`.
    pub fn standard() -> Self {
        Self::new(vec![1.0, 0.995, 0.99, 0.985, 0.98]).expect("static grid")
    }

    /// Parses a comma separated list such as `1.0,0.99,0.98`.
    pub fn parse(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad grid entry `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn percentiles(&self) -> &[f64] {
        &self.percentiles
    }

    pub fn len(&self) -> usize {
        self.percentiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.percentiles.is_empty()
    }
}

impl Default for CandidateGrid {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<Vec<f64>> for CandidateGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CandidateGrid> for Vec<f64> {
    fn from(g: CandidateGrid) -> Self {
        g.percentiles
    }
}

/// Where layer errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbePoint {
    /// After the nonlinearity.
    #[default]
    Post,
    /// On the affine output `W x + b`.
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(rename = "layer")]
    LayerWise,
    #[serde(rename = "block")]
    BlockWise,
    #[serde(rename = "oracle")]
    GlobalOracle,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Strategy::LayerWise),
            "block" => Ok(Strategy::BlockWise),
            "oracle" => Ok(Strategy::GlobalOracle),
            other => Err(Error::InvalidInput(format!(
                "unknown strategy `{other}` (expected layer, block or oracle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub grid: CandidateGrid,
    /// Maximum number of combinations one exhaustive scan may evaluate.
    pub budget: u64,
    /// Search weight and activation percentiles independently.
    pub decouple: bool,
    pub probe: ProbePoint,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            bits_w: 4,
            bits_a: 4,
            grid: CandidateGrid::standard(),
            budget: DEFAULT_BUDGET,
            decouple: false,
            probe: ProbePoint::Post,
        }
    }
}

impl SearchConfig {
    pub fn with_bits(bits_w: u32, bits_a: u32) -> Self {
        Self {
            bits_w,
            bits_a,
            ..Self::default()
        }
    }

    /// Number of candidates per layer.
    pub fn choices_per_layer(&self) -> usize {
        if self.decouple {
            self.grid.len() * self.grid.len()
        } else {
            self.grid.len()
        }
    }

    /// Candidates per layer: the grid, or its square when decoupled.
    fn choices(&self) -> Vec<Choice> {
        let g = self.grid.len();
        if self.decouple {
            (0..g)
                .flat_map(|w| (0..g).map(move |a| Choice { w, a }))
                .collect()
        } else {
            (0..g).map(|i| Choice { w: i, a: i }).collect()
        }
    }

    fn combinations(&self, depth: usize) -> Result<u64> {
        let per_layer = self.choices().len() as u128;
        let total = per_layer.checked_pow(depth as u32).unwrap_or(u128::MAX);
        if total > self.budget as u128 {
            return Err(Error::SearchSpaceTooLarge {
                combinations: total,
                budget: self.budget,
            });
        }
        Ok(total as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Choice {
    w: usize,
    a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub weight: RoundingSpec,
    pub activation: RoundingSpec,
    /// Output error of this layer under the chosen specs.
    pub layer_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub start: usize,
    pub end: usize,
    /// Error at the block output when the block's layers are chosen greedily
    /// one at a time, with the same upstream state.
    pub sequential_error: f64,
    /// Error at the block output for the jointly chosen combination.
    pub joint_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub strategy: Strategy,
    pub bits_w: u32,
    pub bits_a: u32,
    pub grid: CandidateGrid,
    pub decoupled: bool,
    pub probe: ProbePoint,
    /// Clip tail rule: `1 - p` of the mass is cut from each side.
    pub tail_rule: String,
    pub per_layer: Vec<LayerChoice>,
    pub per_block: Vec<BlockResult>,
    pub final_output_error: f64,
    /// Number of candidate combinations scored by the search proper.
    pub evaluations: u64,
}

impl SearchReport {
    pub fn specs(&self) -> Vec<LayerSpecs> {
        self.per_layer
            .iter()
            .map(|c| LayerSpecs::new(c.weight, c.activation))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Squared error of the final-layer output, summed over the calibration set.
pub fn evaluate_final_error(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    probe: ProbePoint,
) -> Result<f64> {
    calib.check_model(model)?;
    let last = model.n_layers() - 1;
    let mut total = 0.0;
    for x in calib.samples() {
        let trace = model.forward_quantized_trace(x, specs)?;
        let reference = fp_layer_outputs(model, x.data());
        let (q, r) = match probe {
            ProbePoint::Post => (&trace.outputs[last], &reference[last].1),
            ProbePoint::Pre => (&trace.pre_activations[last], &reference[last].0),
        };
        total += squared_distance(q, r);
    }
    Ok(total)
}

/// (pre, post) full-precision output of every layer.
fn fp_layer_outputs(model: &Model, x: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::with_capacity(model.n_layers());
    let mut current = x.to_vec();
    for layer in model.layers() {
        let (pre, post) = layer.eval_with(layer.weight().data(), &current);
        current = post.clone();
        out.push((pre, post));
    }
    out
}

/// Specs implied by explicit `(weight percentile, activation percentile)`
/// pairs, one per layer, derived front to back on `calib`.
pub fn derive_specs(
    model: &Model,
    calib: &CalibrationSet,
    bits_w: u32,
    bits_a: u32,
    percentiles: &[(f64, f64)],
) -> Result<Vec<LayerSpecs>> {
    calib.check_model(model)?;
    if percentiles.len() != model.n_layers() {
        return Err(Error::InvalidInput(format!(
            "expected {} percentile pairs, got {}",
            model.n_layers(),
            percentiles.len()
        )));
    }
    let mut inputs: Vec<Vec<f64>> = calib.samples().iter().map(|s| s.data().to_vec()).collect();
    let mut specs = Vec::with_capacity(model.n_layers());
    for (layer, &(pw, pa)) in model.layers().iter().zip(percentiles) {
        let weight = RoundingSpec::from_percentile(layer.weight().data(), bits_w, pw)?;
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        let (lo, hi) = percentile_bounds(&flat, pa)?;
        let activation = RoundingSpec::new(bits_a, lo, hi, pa)?;
        let wq = weight.quantize_slice(layer.weight().data());
        inputs = inputs
            .iter()
            .map(|x| layer.eval_with(&wq, &activation.quantize_slice(x)).1)
            .collect();
        specs.push(LayerSpecs::new(weight, activation));
    }
    Ok(specs)
}

/// Batch state entering some layer on the quantized path.
#[derive(Clone)]
pub(crate) struct BatchState {
    /// Calibration sample index of each row.
    pub samples: Vec<usize>,
    /// Unquantized input of the current layer, one row per sample.
    pub inputs: Vec<Vec<f64>>,
}

pub(crate) struct LayerStep {
    pub specs: LayerSpecs,
    pub post: Vec<Vec<f64>>,
    /// Error of each row; `error` is their sum.
    pub row_errors: Vec<f64>,
    pub error: f64,
}

/// Shared machinery for the layer- and block-wise searches.
pub(crate) struct Engine<'a> {
    model: &'a Model,
    cfg: &'a SearchConfig,
    choices: Vec<Choice>,
    /// `reference[s][k]` = full-precision (pre, post) output of layer k.
    reference: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    /// `weights[k][g]` = (spec, quantized weights) for grid entry g.
    weights: Vec<Vec<(RoundingSpec, Vec<f64>)>>,
    calib: Vec<Vec<f64>>,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a Model, calib: &CalibrationSet, cfg: &'a SearchConfig) -> Result<Self> {
        calib.check_model(model)?;
        let calib: Vec<Vec<f64>> = calib.samples().iter().map(|s| s.data().to_vec()).collect();
        let reference = calib.iter().map(|x| fp_layer_outputs(model, x)).collect();
        let weights = model
            .layers()
            .iter()
            .map(|layer| {
                cfg.grid
                    .percentiles()
                    .iter()
                    .map(|&p| {
                        let spec =
                            RoundingSpec::from_percentile(layer.weight().data(), cfg.bits_w, p)?;
                        let q = spec.quantize_slice(layer.weight().data());
                        Ok((spec, q))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            cfg,
            choices: cfg.choices(),
            reference,
            weights,
            calib,
        })
    }

    pub fn initial_state(&self) -> BatchState {
        BatchState {
            samples: (0..self.calib.len()).collect(),
            inputs: self.calib.clone(),
        }
    }

    fn sorted_inputs(state: &BatchState) -> Vec<f64> {
        let mut flat: Vec<f64> = state.inputs.iter().flatten().copied().collect();
        flat.sort_by(f64::total_cmp);
        flat
    }

    pub fn step_sorted(
        &self,
        k: usize,
        choice_index: usize,
        state: &BatchState,
    ) -> Result<LayerStep> {
        self.step(k, choice_index, state, &Self::sorted_inputs(state))
    }

    pub fn n_choices(&self) -> usize {
        self.choices.len()
    }

    fn step(
        &self,
        k: usize,
        choice_index: usize,
        state: &BatchState,
        sorted: &[f64],
    ) -> Result<LayerStep> {
        let choice = self.choices[choice_index];
        let layer = &self.model.layers()[k];
        let (weight, wq) = &self.weights[k][choice.w];
        let pa = self.cfg.grid.percentiles()[choice.a];
        let (lo, hi) = percentile_bounds_sorted(sorted, pa)?;
        let activation = RoundingSpec::new(self.cfg.bits_a, lo, hi, pa)?;
        let mut pre = Vec::with_capacity(state.inputs.len());
        let mut post = Vec::with_capacity(state.inputs.len());
        for x in &state.inputs {
            let (p, q) = layer.eval_with(wq, &activation.quantize_slice(x));
            pre.push(p);
            post.push(q);
        }
        let row_errors: Vec<f64> = state
            .samples
            .iter()
            .enumerate()
            .map(|(row, &s)| {
                let (rp, rq) = &self.reference[s][k];
                match self.cfg.probe {
                    ProbePoint::Post => squared_distance(&post[row], rq),
                    ProbePoint::Pre => squared_distance(&pre[row], rp),
                }
            })
            .collect();
        let error = row_errors.iter().sum();
        Ok(LayerStep {
            specs: LayerSpecs::new(*weight, activation),
            post,
            row_errors,
            error,
        })
    }

    pub fn advance(state: &BatchState, step: &LayerStep) -> BatchState {
        BatchState {
            samples: state.samples.clone(),
            inputs: step.post.clone(),
        }
    }

    /// Applies fixed specs to layers `range`, returning the state after them.
    pub fn propagate_fixed(
        &self,
        range: std::ops::Range<usize>,
        specs: &[LayerSpecs],
        state: &BatchState,
    ) -> BatchState {
        let mut inputs = state.inputs.clone();
        for k in range {
            let layer = &self.model.layers()[k];
            let wq = specs[k].weight.quantize_slice(layer.weight().data());
            inputs = inputs
                .iter()
                .map(|x| {
                    layer
                        .eval_with(&wq, &specs[k].activation.quantize_slice(x))
                        .1
                })
                .collect();
        }
        BatchState {
            samples: state.samples.clone(),
            inputs,
        }
    }

    /// Greedy choice for layers `start..=end`, each minimizing its own error.
    pub fn greedy(&self, start: usize, end: usize, state: &BatchState) -> Result<Vec<LayerStep>> {
        let mut steps = Vec::with_capacity(end + 1 - start);
        let mut current = state.clone();
        for k in start..=end {
            let best = self.best_single(k, &current)?;
            current = Self::advance(&current, &best);
            steps.push(best);
        }
        Ok(steps)
    }

    fn best_single(&self, k: usize, state: &BatchState) -> Result<LayerStep> {
        let sorted = Self::sorted_inputs(state);
        let mut best: Option<LayerStep> = None;
        for c in 0..self.choices.len() {
            let step = self.step(k, c, state, &sorted)?;
            if best.as_ref().is_none_or(|b| step.error < b.error) {
                best = Some(step);
            }
        }
        Ok(best.expect("grid is non-empty"))
    }

    /// Exhaustive scan of layers `start..=end` scored at layer `end`.
    /// Returns the steps of the winning combination.
    pub fn joint(&self, start: usize, end: usize, state: &BatchState) -> Result<Vec<LayerStep>> {
        let n_choices = self.choices.len();
        let leaves: Vec<(Vec<usize>, f64)> = (0..n_choices)
            .into_par_iter()
            .map(|first| {
                let mut out = Vec::new();
                let sorted = Self::sorted_inputs(state);
                let step = self.step(start, first, state, &sorted)?;
                let mut prefix = vec![first];
                self.enumerate(start, end, &step, state, &mut prefix, &mut out)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut best = 0;
        for (i, leaf) in leaves.iter().enumerate() {
            if leaf.1 < leaves[best].1 {
                best = i;
            }
        }
        self.replay(start, &leaves[best].0, state)
    }

    fn enumerate(
        &self,
        k: usize,
        end: usize,
        step: &LayerStep,
        state: &BatchState,
        prefix: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) -> Result<()> {
        if k == end {
            out.push((prefix.clone(), step.error));
            return Ok(());
        }
        let next = Self::advance(state, step);
        let sorted = Self::sorted_inputs(&next);
        for c in 0..self.choices.len() {
            let child = self.step(k + 1, c, &next, &sorted)?;
            prefix.push(c);
            self.enumerate(k + 1, end, &child, &next, prefix, out)?;
            prefix.pop();
        }
        Ok(())
    }

    fn replay(&self, start: usize, combo: &[usize], state: &BatchState) -> Result<Vec<LayerStep>> {
        let mut steps = Vec::with_capacity(combo.len());
        let mut current = state.clone();
        for (offset, &c) in combo.iter().enumerate() {
            let sorted = Self::sorted_inputs(&current);
            let step = self.step(start + offset, c, &current, &sorted)?;
            current = Self::advance(&current, &step);
            steps.push(step);
        }
        Ok(steps)
    }

    pub fn next_state(state: &BatchState, steps: &[LayerStep]) -> BatchState {
        match steps.last() {
            Some(last) => Self::advance(state, last),
            None => state.clone(),
        }
    }
}

fn check_partition(partition: &BlockPartition, n: usize) -> Result<()> {
    let mut expected = 0;
    for &(s, e) in partition.blocks() {
        if s != expected || e < s {
            return Err(Error::InvalidInput(format!(
                "partition {:?} is not a contiguous cover",
                partition.blocks()
            )));
        }
        expected = e + 1;
    }
    if expected != n {
        return Err(Error::InvalidInput(format!(
            "partition covers {expected} layers, model has {n}"
        )));
    }
    Ok(())
}

fn run_blocks(
    model: &Model,
    blocks: &[(usize, usize)],
    calib: &CalibrationSet,
    cfg: &SearchConfig,
    strategy: Strategy,
) -> Result<SearchReport> {
    let engine = Engine::new(model, calib, cfg)?;
    let mut evaluations = 0u64;
    for &(s, e) in blocks {
        evaluations += cfg.combinations(e + 1 - s)?;
    }
    let mut state = engine.initial_state();
    let mut per_layer = Vec::with_capacity(model.n_layers());
    let mut per_block = Vec::with_capacity(blocks.len());
    for &(start, end) in blocks {
        let joint = engine.joint(start, end, &state)?;
        // Diagnostic only: not counted in `evaluations`.
        let sequential = if start == end {
            joint[0].error
        } else {
            engine
                .greedy(start, end, &state)?
                .last()
                .expect("non-empty")
                .error
        };
        per_block.push(BlockResult {
            start,
            end,
            sequential_error: sequential,
            joint_error: joint.last().expect("non-empty").error,
        });
        for (offset, step) in joint.iter().enumerate() {
            per_layer.push(LayerChoice {
                layer: start + offset,
                weight: step.specs.weight,
                activation: step.specs.activation,
                layer_error: step.error,
            });
        }
        state = Engine::next_state(&state, &joint);
    }
    let specs: Vec<LayerSpecs> = per_layer
        .iter()
        .map(|c| LayerSpecs::new(c.weight, c.activation))
        .collect();
    let final_output_error = evaluate_final_error(model, &specs, calib, cfg.probe)?;
    Ok(report(
        cfg,
        strategy,
        per_layer,
        per_block,
        final_output_error,
        evaluations,
    ))
}

fn report(
    cfg: &SearchConfig,
    strategy: Strategy,
    per_layer: Vec<LayerChoice>,
    per_block: Vec<BlockResult>,
    final_output_error: f64,
    evaluations: u64,
) -> SearchReport {
    SearchReport {
        strategy,
        bits_w: cfg.bits_w,
        bits_a: cfg.bits_a,
        grid: cfg.grid.clone(),
        decoupled: cfg.decouple,
        probe: cfg.probe,
        tail_rule: "symmetric".to_string(),
        per_layer,
        per_block,
        final_output_error,
        evaluations,
    }
}

/// Greedy layer-by-layer search.
pub fn search_layerwise(
    model: &Model,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
) -> Result<SearchReport> {
    let blocks: Vec<_> = (0..model.n_layers()).map(|k| (k, k)).collect();
    run_blocks(model, &blocks, calib, cfg, Strategy::LayerWise)
}

/// Joint search inside each block of `partition`, blocks in order with
/// earlier blocks frozen. An all-singleton partition is the layer-wise
/// search and is reported as such.
pub fn search_blockwise(
    model: &Model,
    partition: &BlockPartition,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
) -> Result<SearchReport> {
    check_partition(partition, model.n_layers())?;
    let strategy = if partition.blocks().iter().all(|(s, e)| s == e) {
        Strategy::LayerWise
    } else {
        Strategy::BlockWise
    };
    run_blocks(model, partition.blocks(), calib, cfg, strategy)
}

/// Exhaustive scan over every combination, scored at the final output.
pub fn global_oracle(
    model: &Model,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
) -> Result<SearchReport> {
    calib.check_model(model)?;
    let n = model.n_layers();
    let total = cfg.combinations(n)?;
    let choices = cfg.choices();
    let grid = cfg.grid.percentiles();
    let per = choices.len() as u64;
    let decode = |mut idx: u64| -> Vec<usize> {
        let mut combo = vec![0; n];
        for slot in combo.iter_mut().rev() {
            *slot = (idx % per) as usize;
            idx /= per;
        }
        combo
    };
    let to_percentiles = |combo: &[usize]| -> Vec<(f64, f64)> {
        combo
            .iter()
            .map(|&c| (grid[choices[c].w], grid[choices[c].a]))
            .collect()
    };
    let errors: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let specs = derive_specs(
                model,
                calib,
                cfg.bits_w,
                cfg.bits_a,
                &to_percentiles(&decode(idx)),
            )?;
            evaluate_final_error(model, &specs, calib, cfg.probe)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0usize;
    for (i, e) in errors.iter().enumerate() {
        if *e < errors[best] {
            best = i;
        }
    }
    let combo = decode(best as u64);
    let specs = derive_specs(
        model,
        calib,
        cfg.bits_w,
        cfg.bits_a,
        &to_percentiles(&combo),
    )?;
    let layer_errors = layer_errors(model, &specs, calib, cfg.probe)?;
    let per_layer = specs
        .iter()
        .zip(layer_errors)
        .enumerate()
        .map(|(k, (s, e))| LayerChoice {
            layer: k,
            weight: s.weight,
            activation: s.activation,
            layer_error: e,
        })
        .collect();
    let greedy = search_layerwise(model, calib, cfg)?;
    let per_block = vec![BlockResult {
        start: 0,
        end: n - 1,
        sequential_error: greedy.final_output_error,
        joint_error: errors[best],
    }];
    Ok(report(
        cfg,
        Strategy::GlobalOracle,
        per_layer,
        per_block,
        errors[best],
        total,
    ))
}

/// Output error of every layer for a complete spec set.
pub fn layer_errors(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    probe: ProbePoint,
) -> Result<Vec<f64>> {
    let mut totals = vec![0.0; model.n_layers()];
    for x in calib.samples() {
        let trace = model.forward_quantized_trace(x, specs)?;
        let reference = fp_layer_outputs(model, x.data());
        for (k, total) in totals.iter_mut().enumerate() {
            *total += match probe {
                ProbePoint::Post => squared_distance(&trace.outputs[k], &reference[k].1),
                ProbePoint::Pre => squared_distance(&trace.pre_activations[k], &reference[k].0),
            };
        }
    }
    Ok(totals)
}
