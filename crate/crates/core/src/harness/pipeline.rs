//! End-to-end run and its artifacts.
//!
//! Phases, in order: layer-wise baseline, dependency estimation on the
//! baseline specs, block partition, search, DED probe, optional encoder
//! optimization followed by re-estimation, re-partition and re-search, and
//! finally the self-checks. Wall-clock timings are kept in memory only, so
//! two runs with the same inputs write byte-identical files.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dependency::{
    auto_threshold, correlation_report, dependency_table, partition_blocks, BlockPartition,
    Correlation, DedProbe, DedSample, DependencyTable,
};
use crate::encoder::{optimize_encoder, teacher_targets, TraceRow, VeoConfig};
use crate::error::{Error, Result};
use crate::harness::io;
use crate::harness::memory::{memory_estimate, MemoryEstimate};
use crate::harness::report::ded_csv;
use crate::search::{
    global_oracle, search_blockwise, search_layerwise, CandidateGrid, ProbePoint, SearchConfig,
    SearchReport, Strategy, DEFAULT_BUDGET,
};
use crate::tensor::{CalibrationSet, Model};

/// Self-check tolerance for error comparisons.
pub const CHECK_TOLERANCE: f64 = 1e-9;

/// The oracle self-check runs only when the full scan has at most this many
/// combinations.
pub const ORACLE_CHECK_LIMIT: u128 = 4096;

pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const SEARCH_REPORT_FILE: &str = "search_report.json";
pub const DEPENDENCY_FILE: &str = "dependency.json";
pub const DED_CSV_FILE: &str = "ded_samples.csv";
pub const VEO_TRACE_FILE: &str = "veo_trace.csv";
pub const VEO_MODEL_FILE: &str = "model_veo.json";

/// Block threshold: a fixed value or the median of the pairwise entries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "ThresholdRepr", into = "ThresholdRepr")]
pub enum Threshold {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Text(String),
    Value(f64),
}

impl TryFrom<ThresholdRepr> for Threshold {
    type Error = Error;
    fn try_from(r: ThresholdRepr) -> Result<Self> {
        match r {
            ThresholdRepr::Text(s) => Threshold::parse(&s),
            ThresholdRepr::Value(v) => Ok(Threshold::Fixed(v)),
        }
    }
}

impl From<Threshold> for ThresholdRepr {
    fn from(t: Threshold) -> Self {
        match t {
            Threshold::Auto => ThresholdRepr::Text("auto".into()),
            Threshold::Fixed(v) => ThresholdRepr::Value(v),
        }
    }
}

impl Threshold {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Threshold::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Threshold::Fixed(v)),
            _ => Err(Error::InvalidInput(format!(
                "h0 must be `auto` or a finite number, got `{s}`"
            ))),
        }
    }

    pub fn resolve(self, table: &DependencyTable) -> f64 {
        match self {
            Threshold::Auto => auto_threshold(table),
            Threshold::Fixed(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub grid: CandidateGrid,
    pub max_depth: usize,
    pub h0: Threshold,
    /// Calibration samples used; larger files are subsampled with `seed`.
    pub calib_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub decouple: bool,
    pub probe: ProbePoint,
    pub budget: u64,
    pub temperature: Option<f64>,
    /// Encoder optimization; `None` skips it.
    pub veo: Option<VeoConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bits_w: 4,
            bits_a: 4,
            grid: CandidateGrid::standard(),
            max_depth: 3,
            h0: Threshold::Auto,
            calib_size: 64,
            seed: 0,
            strategy: Strategy::BlockWise,
            decouple: false,
            probe: ProbePoint::Post,
            budget: DEFAULT_BUDGET,
            temperature: None,
            veo: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !(1..=8).contains(&bits) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be in 1..=8, got {bits}"
                )));
            }
        }
        if self.calib_size == 0 {
            return Err(Error::InvalidInput("calib_size must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::InvalidInput("max_depth must be at least 1".into()));
        }
        if let Some(veo) = &self.veo {
            veo.validate()?;
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            bits_w: self.bits_w,
            bits_a: self.bits_a,
            grid: self.grid.clone(),
            budget: self.budget,
            decouple: self.decouple,
            probe: self.probe,
        }
    }
}

/// Output of the dependency phase, also what the `deps` command writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyArtifacts {
    pub table: DependencyTable,
    /// Resolved threshold; `None` when there is no pair to compare.
    pub h0: Option<f64>,
    pub partition: BlockPartition,
    pub ded_samples: Vec<DedSample>,
    /// `None` when there are fewer than three DED samples.
    pub correlation: Option<Correlation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeoArtifacts {
    pub trace: Vec<TraceRow>,
    pub baseline: SearchReport,
    pub dependency: DependencyArtifacts,
    pub search_report: SearchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Informational checks are reported but do not fail the run.
    pub gating: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTiming {
    pub phase: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: PipelineConfig,
    pub calibration: String,
    pub memory: MemoryEstimate,
    /// Layer-wise search on the input model.
    pub baseline: SearchReport,
    /// `None` for the layer-wise strategy.
    pub dependency: Option<DependencyArtifacts>,
    pub partition: BlockPartition,
    pub search_report: SearchReport,
    pub veo: Option<VeoArtifacts>,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub timings: Vec<PhaseTiming>,
    /// Optimized model when VEO ran; written to its own file.
    #[serde(skip)]
    pub tuned_model: Option<Model>,
}

impl RunArtifacts {
    /// The report after the last search phase.
    pub fn final_report(&self) -> &SearchReport {
        self.veo
            .as_ref()
            .map_or(&self.search_report, |v| &v.search_report)
    }

    /// The layer-wise baseline matching [`Self::final_report`].
    pub fn final_baseline(&self) -> &SearchReport {
        self.veo.as_ref().map_or(&self.baseline, |v| &v.baseline)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }
}

/// Keeps `size` samples chosen with `seed`, in their original order.
pub fn subsample(calib: &CalibrationSet, size: usize, seed: u64) -> Result<CalibrationSet> {
    if size >= calib.len() {
        return Ok(calib.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, calib.len(), size).into_vec();
    picked.sort_unstable();
    CalibrationSet::new(
        picked.iter().map(|&i| calib.samples()[i].clone()).collect(),
        seed,
    )
}

/// Dependency table on `baseline`'s specs, threshold, partition and
/// optionally the DED probe.
pub fn dependency_phase(
    model: &Model,
    calib: &CalibrationSet,
    cfg: &PipelineConfig,
    baseline: &SearchReport,
    with_ded: bool,
) -> Result<DependencyArtifacts> {
    let search = cfg.search_config();
    let temperature = cfg.temperature;
    let specs = baseline.specs();
    let table = dependency_table(model, &specs, calib, temperature)?;
    let threshold = cfg.h0.resolve(&table);
    let partition = partition_blocks(&table, threshold, cfg.max_depth)?;
    let ded_samples = if with_ded && model.n_layers() > 1 {
        DedProbe::with_upstream(model, calib, &search, specs, temperature)?.measure_all()?
    } else {
        Vec::new()
    };
    let correlation = if ded_samples.len() >= 3 {
        Some(correlation_report(&ded_samples)?)
    } else {
        None
    };
    Ok(DependencyArtifacts {
        table,
        h0: threshold.is_finite().then_some(threshold),
        partition,
        ded_samples,
        correlation,
    })
}

pub fn search_phase(
    model: &Model,
    calib: &CalibrationSet,
    search: &SearchConfig,
    strategy: Strategy,
    partition: &BlockPartition,
) -> Result<SearchReport> {
    match strategy {
        Strategy::LayerWise => search_layerwise(model, calib, search),
        Strategy::BlockWise => search_blockwise(model, partition, calib, search),
        Strategy::GlobalOracle => global_oracle(model, calib, search),
    }
}

struct Timer(Vec<PhaseTiming>);

impl Timer {
    fn run<T>(&mut self, phase: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_phase(phase))?;
        self.0.push(PhaseTiming {
            phase,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Baseline, dependency (unless layer-wise) and search for one model.
fn search_stage(
    timer: &mut Timer,
    cfg: &PipelineConfig,
    model: &Model,
    calib: &CalibrationSet,
    with_ded: bool,
) -> Result<(
    SearchReport,
    Option<DependencyArtifacts>,
    BlockPartition,
    SearchReport,
)> {
    let search = cfg.search_config();
    let baseline = timer.run("baseline", || search_layerwise(model, calib, &search))?;
    let dependency = if cfg.strategy == Strategy::LayerWise {
        None
    } else {
        Some(timer.run("dependency", || {
            dependency_phase(model, calib, cfg, &baseline, with_ded)
        })?)
    };
    let partition = dependency.as_ref().map_or_else(
        || BlockPartition::singletons(model.n_layers()),
        |d| d.partition.clone(),
    );
    let report = if cfg.strategy == Strategy::LayerWise {
        baseline.clone()
    } else {
        timer.run("search", || {
            search_phase(model, calib, &search, cfg.strategy, &partition)
        })?
    };
    Ok((baseline, dependency, partition, report))
}

fn self_checks(
    cfg: &PipelineConfig,
    model: &Model,
    calib: &CalibrationSet,
    baseline: &SearchReport,
    report: &SearchReport,
    ded: &[DedSample],
) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let worst_block = report
        .per_block
        .iter()
        .map(|b| b.joint_error - b.sequential_error)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check {
        name: "block_joint_le_sequential".into(),
        passed: report.per_block.is_empty() || worst_block <= CHECK_TOLERANCE,
        gating: true,
        detail: format!("max joint - sequential = {worst_block:e}"),
    });
    if !ded.is_empty() {
        let min = ded.iter().map(|d| d.ded).fold(f64::INFINITY, f64::min);
        checks.push(Check {
            name: "ded_nonnegative".into(),
            passed: min >= -CHECK_TOLERANCE,
            gating: true,
            detail: format!("min ded = {min:e} over {} samples", ded.len()),
        });
    }
    let search = cfg.search_config();
    let combos = (search.choices_per_layer() as u128).checked_pow(model.n_layers() as u32);
    match combos {
        Some(c) if c <= ORACLE_CHECK_LIMIT => {
            let oracle = global_oracle(model, calib, &search)?;
            checks.push(Check {
                name: "oracle_le_search".into(),
                passed: oracle.final_output_error <= report.final_output_error + CHECK_TOLERANCE,
                gating: true,
                detail: format!(
                    "oracle {:e}, search {:e}",
                    oracle.final_output_error, report.final_output_error
                ),
            });
        }
        _ => checks.push(Check {
            name: "oracle_le_search".into(),
            passed: true,
            gating: false,
            detail: format!("skipped: more than {ORACLE_CHECK_LIMIT} combinations"),
        }),
    }
    // Blocks after the first see a different upstream than the layer-wise
    // path, so this is reported but cannot gate.
    checks.push(Check {
        name: "search_le_layerwise".into(),
        passed: report.final_output_error <= baseline.final_output_error + CHECK_TOLERANCE,
        gating: false,
        detail: format!(
            "search {:e}, layer-wise {:e}",
            report.final_output_error, baseline.final_output_error
        ),
    });
    Ok(checks)
}

/// Runs every phase in memory.
pub fn execute(
    cfg: &PipelineConfig,
    model: &Model,
    calib: &CalibrationSet,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut timer = Timer(Vec::new());
    let calib = timer.run("load", || {
        calib.check_model(model)?;
        subsample(calib, cfg.calib_size, cfg.seed)
    })?;
    let (baseline, dependency, partition, search_report) =
        search_stage(&mut timer, cfg, model, &calib, true)?;
    let veo = match &cfg.veo {
        None => None,
        Some(veo_cfg) => {
            let outcome = timer.run("veo", || {
                optimize_encoder(
                    model,
                    &search_report.specs(),
                    &calib,
                    &teacher_targets(model, &calib),
                    veo_cfg,
                )
            })?;
            let (baseline, dependency, partition, report) =
                search_stage(&mut timer, cfg, &outcome.model, &calib, false)?;
            let dependency = dependency.unwrap_or_else(|| DependencyArtifacts {
                table: DependencyTable {
                    pairwise: Vec::new(),
                    computed_on: calib.id(),
                },
                h0: None,
                partition,
                ded_samples: Vec::new(),
                correlation: None,
            });
            Some((
                outcome.model,
                VeoArtifacts {
                    trace: outcome.trace,
                    baseline,
                    dependency,
                    search_report: report,
                },
            ))
        }
    };
    let ded = dependency.as_ref().map_or(&[][..], |d| &d.ded_samples[..]);
    let checks = timer.run("checks", || match &veo {
        None => self_checks(cfg, model, &calib, &baseline, &search_report, ded),
        Some((tuned, v)) => {
            let mut checks = self_checks(cfg, tuned, &calib, &v.baseline, &v.search_report, ded)?;
            let first = self_checks(cfg, model, &calib, &baseline, &search_report, &[])?;
            checks.extend(first.into_iter().map(|mut c| {
                c.name = format!("pre_veo_{}", c.name);
                c
            }));
            Ok(checks)
        }
    })?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        calibration: calib.id(),
        memory: memory_estimate(model, cfg.bits_w, cfg.bits_a),
        baseline,
        dependency,
        partition,
        search_report,
        checks,
        timings: timer.0,
        tuned_model: veo.as_ref().map(|(m, _)| m.clone()),
        veo: veo.map(|(_, v)| v),
    })
}

/// Writes every artifact file into `out_dir`, in a fixed order.
pub fn write_artifacts(artifacts: &RunArtifacts, out_dir: &Path) -> Result<()> {
    io::write_json(&out_dir.join(ARTIFACTS_FILE), artifacts)?;
    io::write_json(&out_dir.join(SEARCH_REPORT_FILE), artifacts.final_report())?;
    if let Some(dep) = &artifacts.dependency {
        io::write_json(&out_dir.join(DEPENDENCY_FILE), dep)?;
        io::write_text(&out_dir.join(DED_CSV_FILE), &ded_csv(&dep.ded_samples)?)?;
    }
    if let Some(veo) = &artifacts.veo {
        io::write_csv(&out_dir.join(VEO_TRACE_FILE), &veo.trace)?;
    }
    if let Some(model) = &artifacts.tuned_model {
        io::write_json(&out_dir.join(VEO_MODEL_FILE), model)?;
    }
    Ok(())
}

/// Loads the inputs, runs every phase and writes the artifacts. Fails with
/// [`Error::SelfCheck`] after writing if a gating check did not pass.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    model_file: &Path,
    calib_file: &Path,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    let model = io::load_model(model_file).map_err(|e| e.in_phase("load"))?;
    let calib = io::load_calibration(calib_file).map_err(|e| e.in_phase("load"))?;
    let artifacts = execute(cfg, &model, &calib)?;
    write_artifacts(&artifacts, out_dir).map_err(|e| e.in_phase("write"))?;
    let failed: Vec<&str> = artifacts
        .checks
        .iter()
        .filter(|c| c.gating && !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Error::SelfCheck(failed.join(", ")));
    }
    Ok(artifacts)
}
