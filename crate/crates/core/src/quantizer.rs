//! Uniform fake quantization, percentile clip bounds and the soft
//! (softmax-over-levels) view of rounding used for entropy estimates.
//!
//! A [`RoundingSpec`] describes `M = 2^bits` evenly spaced rounding points
//! `q_m = lower + m * interval`, with `q_0 == lower` and `q_{M-1} == upper`.
//! Hard rounding clips to `[lower, upper]` and snaps to the nearest point,
//! breaking exact ties toward the even code.
//!
//! The soft view replaces the hard snap with a categorical distribution over
//! the points:
//!
//! ```text
//! p_m(x) = exp(-(x - q_m)^2 / T) / sum_m' exp(-(x - q_m')^2 / T)
//! ```
//!
//! where `T` defaults to the level interval. `x` is clipped first, so values
//! beyond the bounds behave like the nearest bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest supported bitwidth.
pub const MAX_BITS: u32 = 24;

/// Quantization parameters for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct RoundingSpec {
    bits: u32,
    lower: f64,
    upper: f64,
    percentile: f64,
    interval: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    bits: u32,
    lower: f64,
    upper: f64,
    percentile: f64,
}

impl TryFrom<RawSpec> for RoundingSpec {
    type Error = Error;
    fn try_from(r: RawSpec) -> Result<Self> {
        RoundingSpec::new(r.bits, r.lower, r.upper, r.percentile)
    }
}

impl From<RoundingSpec> for RawSpec {
    fn from(s: RoundingSpec) -> Self {
        RawSpec {
            bits: s.bits,
            lower: s.lower,
            upper: s.upper,
            percentile: s.percentile,
        }
    }
}

impl RoundingSpec {
    pub fn new(bits: u32, lower: f64, upper: f64, percentile: f64) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidSpec(format!(
                "bits must be in 1..={MAX_BITS}, got {bits}"
            )));
        }
        if !lower.is_finite() || !upper.is_finite() || !(lower < upper) {
            return Err(Error::InvalidSpec(format!(
                "need finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        if !(0.0..=1.0).contains(&percentile) {
            return Err(Error::InvalidSpec(format!(
                "percentile {percentile} outside [0, 1]"
            )));
        }
        let levels = 1u64 << bits;
        let interval = (upper - lower) / (levels - 1) as f64;
        if !(interval > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "bounds [{lower}, {upper}] too close for {bits} bits"
            )));
        }
        Ok(Self {
            bits,
            lower,
            upper,
            percentile,
            interval,
        })
    }

    /// Spec whose bounds are the `p`-percentile clip range of `values`.
    pub fn from_percentile(values: &[f64], bits: u32, p: f64) -> Result<Self> {
        let (lower, upper) = percentile_bounds(values, p)?;
        Self::new(bits, lower, upper, p)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn percentile(&self) -> f64 {
        self.percentile
    }

    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    /// Rounding point `q_m`.
    #[inline]
    pub fn point(&self, m: u32) -> f64 {
        if m as usize == self.levels() - 1 {
            self.upper
        } else {
            self.lower + m as f64 * self.interval
        }
    }

    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// Code of the nearest rounding point after clipping.
    #[inline]
    pub fn code(&self, x: f64) -> u32 {
        let t = (self.clip(x) - self.lower) / self.interval;
        let max = (self.levels() - 1) as f64;
        t.round_ties_even().clamp(0.0, max) as u32
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.point(self.code(x))
    }

    pub fn quantize_slice(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }
}

/// Empirical quantile with linear interpolation between order statistics of
/// an already sorted slice.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        sorted[lo.min(sorted.len() - 1)]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Half-width used to widen a degenerate `lower == upper` range:
/// `max(|v|, 1) * sqrt(f64::EPSILON)`.
pub fn degenerate_margin(v: f64) -> f64 {
    v.abs().max(1.0) * f64::EPSILON.sqrt()
}

/// Clip bounds keeping the central mass `p` of `values`, with `1 - p` cut
/// from each tail. `p = 1` gives the exact min and max.
pub fn percentile_bounds(values: &[f64], p: f64) -> Result<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_bounds_sorted(&sorted, p)
}

pub(crate) fn percentile_bounds_sorted(sorted: &[f64], p: f64) -> Result<(f64, f64)> {
    if sorted.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty tensor".into()));
    }
    if !(0.9..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "percentile {p} outside [0.9, 1.0]"
        )));
    }
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("percentile input".into()));
    }
    let tail = 1.0 - p;
    let lower = sorted_quantile(sorted, tail);
    let upper = sorted_quantile(sorted, p);
    if lower < upper {
        Ok((lower, upper))
    } else {
        let eps = degenerate_margin(lower);
        Ok((lower - eps, lower + eps))
    }
}

/// Per-layer pair of weight and input-activation specs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpecs {
    pub weight: RoundingSpec,
    pub activation: RoundingSpec,
}

impl LayerSpecs {
    pub fn new(weight: RoundingSpec, activation: RoundingSpec) -> Self {
        Self { weight, activation }
    }
}

/// Result of [`fake_quantize`]: the dequantized values and their codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Tensor,
    pub codes: Vec<u32>,
}

pub fn fake_quantize(t: &Tensor, spec: &RoundingSpec) -> QuantizedTensor {
    let codes: Vec<u32> = t.data().iter().map(|&x| spec.code(x)).collect();
    let data = codes.iter().map(|&m| spec.point(m)).collect();
    QuantizedTensor {
        values: Tensor::new(t.shape().to_vec(), data).expect("rounding points are finite"),
        codes,
    }
}

/// Softmax-over-levels view of a [`RoundingSpec`].
#[derive(Debug, Clone, Copy)]
pub struct SoftQuantizer {
    spec: RoundingSpec,
    temperature: f64,
}

/// Value, probability-of-one-level and their derivatives at a single point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftPoint {
    pub entropy: f64,
    /// dH/dx, zero outside the clip range.
    pub d_entropy: f64,
}

impl SoftQuantizer {
    /// `temperature = None` uses the level interval.
    pub fn new(spec: RoundingSpec, temperature: Option<f64>) -> Result<Self> {
        let temperature = temperature.unwrap_or(spec.interval);
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "soft temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { spec, temperature })
    }

    pub fn spec(&self) -> &RoundingSpec {
        &self.spec
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Writes `log p_m(x)` for every level into `out`.
    fn log_probs_into(&self, x: f64, out: &mut Vec<f64>) {
        let xc = self.spec.clip(x);
        out.clear();
        let mut max = f64::NEG_INFINITY;
        for m in 0..self.spec.levels() as u32 {
            let d = xc - self.spec.point(m);
            let s = -d * d / self.temperature;
            max = max.max(s);
            out.push(s);
        }
        let mut z = 0.0;
        for s in out.iter() {
            z += (s - max).exp();
        }
        let log_z = max + z.ln();
        for s in out.iter_mut() {
            *s -= log_z;
        }
    }

    pub fn probs(&self, x: f64) -> Vec<f64> {
        let mut lp = Vec::with_capacity(self.spec.levels());
        self.log_probs_into(x, &mut lp);
        lp.into_iter().map(f64::exp).collect()
    }

    /// Entropy in nats of the distribution at `x`.
    pub fn entropy(&self, x: f64) -> f64 {
        let mut lp = Vec::with_capacity(self.spec.levels());
        self.log_probs_into(x, &mut lp);
        entropy_of_log_probs(&lp)
    }

    /// Entropy and its derivative with respect to `x`.
    pub fn entropy_with_grad(&self, x: f64) -> SoftPoint {
        let mut lp = Vec::with_capacity(self.spec.levels());
        self.log_probs_into(x, &mut lp);
        let entropy = entropy_of_log_probs(&lp);
        if !self.spec.contains(x) {
            return SoftPoint {
                entropy,
                d_entropy: 0.0,
            };
        }
        // dH/dx = -sum_m p_m log p_m (g_m - gbar), g_m = d logit_m / dx.
        let (gbar, grads) = self.logit_grads(x, &lp);
        let mut d = 0.0;
        for (l, g) in lp.iter().zip(&grads) {
            let p = l.exp();
            if p > 0.0 {
                d -= p * l * (g - gbar);
            }
        }
        SoftPoint {
            entropy,
            d_entropy: d,
        }
    }

    /// `p_code(x)` and its derivative with respect to `x`.
    pub fn prob_with_grad(&self, x: f64, code: u32) -> (f64, f64) {
        let mut lp = Vec::with_capacity(self.spec.levels());
        self.log_probs_into(x, &mut lp);
        let p = lp[code as usize].exp();
        if !self.spec.contains(x) {
            return (p, 0.0);
        }
        let (gbar, grads) = self.logit_grads(x, &lp);
        (p, p * (grads[code as usize] - gbar))
    }

    fn logit_grads(&self, x: f64, log_probs: &[f64]) -> (f64, Vec<f64>) {
        let xc = self.spec.clip(x);
        let grads: Vec<f64> = (0..self.spec.levels() as u32)
            .map(|m| -2.0 * (xc - self.spec.point(m)) / self.temperature)
            .collect();
        let gbar = log_probs.iter().zip(&grads).map(|(l, g)| l.exp() * g).sum();
        (gbar, grads)
    }

    /// Summed entropy over `values` without materializing the distribution.
    pub fn total_entropy(&self, values: &[f64]) -> f64 {
        let mut lp = Vec::with_capacity(self.spec.levels());
        values
            .iter()
            .map(|&x| {
                self.log_probs_into(x, &mut lp);
                entropy_of_log_probs(&lp)
            })
            .sum()
    }
}

fn entropy_of_log_probs(lp: &[f64]) -> f64 {
    let mut h = 0.0;
    for &l in lp {
        let p = l.exp();
        if p > 0.0 {
            h -= p * l;
        }
    }
    h.max(0.0)
}

/// Per-element categorical distributions over rounding points, stored as
/// `elements x levels` row-major probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDistribution {
    levels: usize,
    probs: Vec<f64>,
}

impl SoftDistribution {
    /// Builds a distribution from explicit rows; each row must be a valid
    /// probability vector of length `levels`.
    pub fn from_rows(levels: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut probs = Vec::with_capacity(levels * rows.len());
        for r in rows {
            if r.len() != levels {
                return Err(Error::Shape(format!(
                    "row has {} entries, expected {levels}",
                    r.len()
                )));
            }
            let sum: f64 = r.iter().sum();
            if r.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "row is not a probability vector (sum {sum})"
                )));
            }
            probs.extend_from_slice(r);
        }
        Ok(Self { levels, probs })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn elements(&self) -> usize {
        self.probs.len() / self.levels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.levels..(i + 1) * self.levels]
    }

    pub fn argmax(&self, i: usize) -> u32 {
        let row = self.row(i);
        let mut best = 0;
        for (m, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = m;
            }
        }
        best as u32
    }
}

pub fn soft_distribution(t: &Tensor, spec: &RoundingSpec) -> SoftDistribution {
    soft_distribution_with(t, &SoftQuantizer::new(*spec, None).expect("valid spec"))
}

pub fn soft_distribution_with(t: &Tensor, soft: &SoftQuantizer) -> SoftDistribution {
    let levels = soft.spec.levels();
    let mut probs = Vec::with_capacity(levels * t.len());
    for &x in t.data() {
        probs.extend(soft.probs(x));
    }
    SoftDistribution { levels, probs }
}

/// Entropy in nats, summed over elements, with `0 log 0 = 0`.
pub fn entropy(d: &SoftDistribution) -> f64 {
    d.probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}
