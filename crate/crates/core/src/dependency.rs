//! Cross-layer dependency estimation, block partitioning and the
//! discretization-error-difference (DED) probe.
//!
//! # Dependency proxy
//!
//! For a consecutive pair of layer inputs `X^(k)`, `X^(k+1)` the proxy is a
//! mean-field conditional entropy computed from a single quantized forward
//! pass per sample:
//!
//! 1. `X^(k)` is taken on the quantized path and hard-quantized with layer
//!    `k`'s input spec.
//! 2. The quantized tensor goes through layer `k` in full precision, giving
//!    the not-yet-quantized `X^(k+1)`.
//! 3. `H` is the mean per-element entropy of the soft distribution of that
//!    tensor under layer `k+1`'s input spec.
//! 4. `w` is the mean soft probability that layer `k`'s input spec assigns to
//!    the level each element was actually rounded to.
//!
//! The sample's dependency is `w * H`; the table entry averages it over the
//! calibration set. Dividing by element counts keeps the threshold `h0`
//! independent of layer width.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{LayerSpecs, SoftQuantizer};
use crate::search::{search_layerwise, Engine, SearchConfig};
use crate::tensor::{CalibrationSet, Model};

/// `pairwise[k]` is the dependency between the inputs of layers `k` and `k+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyTable {
    pub pairwise: Vec<f64>,
    pub computed_on: String,
}

impl DependencyTable {
    pub fn new(pairwise: Vec<f64>, computed_on: impl Into<String>) -> Result<Self> {
        if pairwise.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidInput(
                "dependencies must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            pairwise,
            computed_on: computed_on.into(),
        })
    }

    /// Number of layers the table describes.
    pub fn n_layers(&self) -> usize {
        self.pairwise.len() + 1
    }

    pub fn mean(&self) -> f64 {
        if self.pairwise.is_empty() {
            0.0
        } else {
            self.pairwise.iter().sum::<f64>() / self.pairwise.len() as f64
        }
    }

    fn prefix_sums(&self) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(self.pairwise.len() + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for d in &self.pairwise {
            acc += d;
            prefix.push(acc);
        }
        prefix
    }
}

/// Dependency contribution of one sample.
pub(crate) fn sample_dependency(
    model: &Model,
    k: usize,
    specs: &[LayerSpecs],
    x: &[f64],
    temperature: Option<f64>,
) -> Result<f64> {
    let layers = model.layers();
    let mut input = x.to_vec();
    for j in 0..k {
        let wq = specs[j].weight.quantize_slice(layers[j].weight().data());
        input = layers[j]
            .eval_with(&wq, &specs[j].activation.quantize_slice(&input))
            .1;
    }
    let here = SoftQuantizer::new(specs[k].activation, temperature)?;
    let next = SoftQuantizer::new(specs[k + 1].activation, temperature)?;
    let mut weight = 0.0;
    for &a in &input {
        weight += here.prob_with_grad(a, here.spec().code(a)).0;
    }
    weight /= input.len() as f64;
    let xq = specs[k].activation.quantize_slice(&input);
    let propagated = layers[k].eval(&xq);
    let h = next.total_entropy(&propagated) / propagated.len() as f64;
    Ok(weight * h)
}

fn check_pair(model: &Model, k: usize, specs: &[LayerSpecs]) -> Result<()> {
    if model.n_layers() < 2 || k + 1 >= model.n_layers() {
        return Err(Error::OutOfRange(format!(
            "pair ({k}, {}) for a {}-layer model",
            k + 1,
            model.n_layers()
        )));
    }
    if specs.len() != model.n_layers() {
        return Err(Error::InvalidInput(format!(
            "expected {} layer specs, got {}",
            model.n_layers(),
            specs.len()
        )));
    }
    Ok(())
}

/// Dependency between the inputs of layers `k` and `k + 1`, averaged over
/// `calib`. `temperature = None` uses each spec's level interval.
pub fn pairwise_dependency(
    model: &Model,
    k: usize,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    temperature: Option<f64>,
) -> Result<f64> {
    check_pair(model, k, specs)?;
    calib.check_model(model)?;
    let per_sample = calib
        .samples()
        .par_iter()
        .map(|x| sample_dependency(model, k, specs, x.data(), temperature))
        .collect::<Result<Vec<_>>>()?;
    // collected in sample order, so the sum does not depend on thread count
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

pub fn dependency_table(
    model: &Model,
    specs: &[LayerSpecs],
    calib: &CalibrationSet,
    temperature: Option<f64>,
) -> Result<DependencyTable> {
    let pairwise = (0..model.n_layers().saturating_sub(1))
        .map(|k| pairwise_dependency(model, k, specs, calib, temperature))
        .collect::<Result<Vec<_>>>()?;
    DependencyTable::new(pairwise, calib.id())
}

/// Dependency between layers `from < to`: the sum of the pairwise entries
/// `from..to`.
pub fn multilayer_dependency(table: &DependencyTable, from: usize, to: usize) -> Result<f64> {
    if from >= to || to >= table.n_layers() {
        return Err(Error::OutOfRange(format!(
            "dependency range ({from}, {to}) for {} layers",
            table.n_layers()
        )));
    }
    let prefix = table.prefix_sums();
    Ok(prefix[to] - prefix[from])
}

/// Contiguous, disjoint cover of the layers by inclusive `(start, end)` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    blocks: Vec<(usize, usize)>,
    max_depth: usize,
    /// `None` means no threshold (never merge).
    threshold: Option<f64>,
}

impl BlockPartition {
    pub fn new(
        blocks: Vec<(usize, usize)>,
        max_depth: usize,
        threshold: Option<f64>,
    ) -> Result<Self> {
        if max_depth == 0 {
            return Err(Error::InvalidInput("max_depth must be at least 1".into()));
        }
        let mut expected = 0;
        for &(s, e) in &blocks {
            if s != expected || e < s || e + 1 - s > max_depth {
                return Err(Error::InvalidInput(format!(
                    "blocks {blocks:?} are not a contiguous cover with depth <= {max_depth}"
                )));
            }
            expected = e + 1;
        }
        if blocks.is_empty() {
            return Err(Error::InvalidInput("partition has no blocks".into()));
        }
        Ok(Self {
            blocks,
            max_depth,
            threshold,
        })
    }

    pub fn singletons(n: usize) -> Self {
        Self::new((0..n).map(|k| (k, k)).collect(), 1, None).expect("n >= 1")
    }

    pub fn whole(n: usize) -> Self {
        Self::new(vec![(0, n - 1)], n, None).expect("n >= 1")
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.last().map(|b| b.1 + 1).unwrap_or(0)
    }
}

/// Median of the pairwise dependencies; `+inf` when there are none.
pub fn auto_threshold(table: &DependencyTable) -> f64 {
    let mut v = table.pairwise.clone();
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Greedy left-to-right block assignment. A block starting at `r` extends to
/// the largest `s` with `s - r < max_depth` and
/// `D(r, s) > (s - r) * h0`; otherwise it is the singleton `{r}`.
pub fn partition_blocks(
    table: &DependencyTable,
    h0: f64,
    max_depth: usize,
) -> Result<BlockPartition> {
    if h0.is_nan() {
        return Err(Error::InvalidInput("threshold h0 is NaN".into()));
    }
    if max_depth == 0 {
        return Err(Error::InvalidInput("max_depth must be at least 1".into()));
    }
    let n = table.n_layers();
    let prefix = table.prefix_sums();
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        let limit = (start + max_depth - 1).min(n - 1);
        for s in (start + 1..=limit).rev() {
            if prefix[s] - prefix[start] > (s - start) as f64 * h0 {
                end = s;
                break;
            }
        }
        blocks.push((start, end));
        start = end + 1;
    }
    let threshold = h0.is_finite().then_some(h0);
    BlockPartition::new(blocks, max_depth, threshold)
}

/// One DED measurement: how much a joint search over layers `(k, k+1)` beats
/// the greedy search on a single calibration sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedSample {
    pub layer: usize,
    pub sample_id: usize,
    /// Summed soft entropy (nats) of layer `k+1`'s input under the greedy specs.
    pub entropy: f64,
    pub ded: f64,
}

/// Measures DED for every pair on a shared layer-wise baseline.
///
/// Layers before `k` are frozen at the layer-wise search result on the whole
/// calibration set. Every grid combination for `(k, k+1)` gets its rounding
/// functions from the whole calibration set; each sample then picks among
/// them, greedily layer by layer for the sequential arm and over all
/// combinations for the joint arm.
pub struct DedProbe<'a> {
    engine: Engine<'a>,
    upstream: Vec<LayerSpecs>,
    n_layers: usize,
    n_samples: usize,
    temperature: Option<f64>,
}

impl<'a> DedProbe<'a> {
    pub fn new(
        model: &'a Model,
        calib: &CalibrationSet,
        cfg: &'a SearchConfig,
        temperature: Option<f64>,
    ) -> Result<Self> {
        let upstream = search_layerwise(model, calib, cfg)?.specs();
        Self::with_upstream(model, calib, cfg, upstream, temperature)
    }

    /// Uses `upstream` (a layer-wise result on `calib`) instead of searching.
    pub fn with_upstream(
        model: &'a Model,
        calib: &CalibrationSet,
        cfg: &'a SearchConfig,
        upstream: Vec<LayerSpecs>,
        temperature: Option<f64>,
    ) -> Result<Self> {
        if upstream.len() != model.n_layers() {
            return Err(Error::InvalidInput(format!(
                "expected {} upstream specs, got {}",
                model.n_layers(),
                upstream.len()
            )));
        }
        Ok(Self {
            engine: Engine::new(model, calib, cfg)?,
            upstream,
            n_layers: model.n_layers(),
            n_samples: calib.len(),
            temperature,
        })
    }

    pub fn measure(&self, k: usize) -> Result<Vec<DedSample>> {
        if k + 1 >= self.n_layers {
            return Err(Error::OutOfRange(format!(
                "DED pair ({k}, {}) for a {}-layer model",
                k + 1,
                self.n_layers
            )));
        }
        let full = self.engine.initial_state();
        let state = self.engine.propagate_fixed(0..k, &self.upstream, &full);
        let nc = self.engine.n_choices();
        let first: Vec<_> = (0..nc)
            .into_par_iter()
            .map(|c| self.engine.step_sorted(k, c, &state))
            .collect::<Result<_>>()?;
        let second: Vec<Vec<_>> = first
            .par_iter()
            .map(|st| {
                let next = Engine::advance(&state, st);
                (0..nc)
                    .map(|c| self.engine.step_sorted(k + 1, c, &next))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        // first index wins ties, i.e. the larger percentile
        let argmin = |f: &dyn Fn(usize) -> f64| {
            let mut b = 0;
            for c in 1..nc {
                if f(c) < f(b) {
                    b = c;
                }
            }
            b
        };
        (0..self.n_samples)
            .map(|s| {
                let g0 = argmin(&|c| first[c].row_errors[s]);
                let g1 = argmin(&|c| second[g0][c].row_errors[s]);
                let mut joint = f64::INFINITY;
                for row in &second {
                    for st in row {
                        joint = joint.min(st.row_errors[s]);
                    }
                }
                let soft = SoftQuantizer::new(second[g0][g1].specs.activation, self.temperature)?;
                Ok(DedSample {
                    layer: k,
                    sample_id: s,
                    entropy: soft.total_entropy(&first[g0].post[s]),
                    ded: second[g0][g1].row_errors[s] - joint,
                })
            })
            .collect()
    }

    pub fn measure_all(&self) -> Result<Vec<DedSample>> {
        let mut out = Vec::new();
        for k in 0..self.n_layers.saturating_sub(1) {
            out.extend(self.measure(k)?);
        }
        Ok(out)
    }
}

pub fn measure_ded(
    model: &Model,
    k: usize,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
    temperature: Option<f64>,
) -> Result<Vec<DedSample>> {
    DedProbe::new(model, calib, cfg, temperature)?.measure(k)
}

/// Pearson correlation, `None` when either coordinate has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() || is_constant(xs) || is_constant(ys) {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

// exact comparison: a centered sum of equal values need not be exactly zero
fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    pub count: usize,
    pub mean_entropy: f64,
    pub mean_ded: f64,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Entropy-versus-DED correlation. `None` coefficients mean undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub count: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub per_layer: Vec<LayerCorrelation>,
}

pub fn correlation_report(samples: &[DedSample]) -> Result<Correlation> {
    if samples.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "correlation needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    let entropy: Vec<f64> = samples.iter().map(|s| s.entropy).collect();
    let ded: Vec<f64> = samples.iter().map(|s| s.ded).collect();
    let mut by_layer: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let e = by_layer.entry(s.layer).or_default();
        e.0.push(s.entropy);
        e.1.push(s.ded);
    }
    let per_layer = by_layer
        .into_iter()
        .map(|(layer, (e, d))| {
            let enough = e.len() >= 3;
            LayerCorrelation {
                layer,
                count: e.len(),
                mean_entropy: e.iter().sum::<f64>() / e.len() as f64,
                mean_ded: d.iter().sum::<f64>() / d.len() as f64,
                pearson: if enough { pearson(&e, &d) } else { None },
                spearman: if enough { spearman(&e, &d) } else { None },
            }
        })
        .collect();
    Ok(Correlation {
        count: samples.len(),
        pearson: pearson(&entropy, &ded),
        spearman: spearman(&entropy, &ded),
        per_layer,
    })
}
