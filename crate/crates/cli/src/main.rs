//! `blockptq` command-line driver. Every flag can also be set through an
//! environment variable named `BLOCKPTQ_<FLAG>` (upper case, dashes as
//! underscores), e.g. `BLOCKPTQ_BITS_W=6`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use blockptq::encoder::{optimize_encoder, teacher_targets, GradMode, VeoConfig};
use blockptq::harness::generate::{
    generate_calibration, generate_model, InputDistribution, ModelSpec,
};
use blockptq::harness::io;
use blockptq::harness::pipeline::{
    dependency_phase, run_pipeline, search_phase, subsample, PipelineConfig, RunArtifacts,
    Threshold,
};
use blockptq::harness::report::{render_report, ReportFormat};
use blockptq::search::{search_layerwise, CandidateGrid, ProbePoint, SearchReport, Strategy};
use blockptq::tensor::{Activation, CalibrationSet, Model};

#[derive(Parser)]
#[command(
    name = "blockptq",
    version,
    about = "Block-aware post-training quantization search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded random model.
    GenModel(GenModelArgs),
    /// Generate a seeded calibration set.
    GenCalib(GenCalibArgs),
    /// Dependency table, block partition and DED samples.
    Deps(DepsArgs),
    /// Search rounding functions with one strategy.
    Search(SearchCmdArgs),
    /// Optimize the encoder prefix.
    Veo(VeoCmdArgs),
    /// Run every phase and write the artifact directory.
    Pipeline(PipelineArgs),
    /// Re-emit a run's artifacts as JSON or DED scatter CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenModelArgs {
    /// Layer widths including the input, e.g. `8,8,8,8,8`.
    #[arg(long, env = "BLOCKPTQ_DIMS", value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, env = "BLOCKPTQ_ACTIVATION", default_value = "relu", value_parser = parse_activation)]
    activation: Activation,
    #[arg(long, env = "BLOCKPTQ_OUTPUT_ACTIVATION", default_value = "identity", value_parser = parse_activation)]
    output_activation: Activation,
    #[arg(long, env = "BLOCKPTQ_ENCODER_LEN", default_value_t = 0)]
    encoder_len: usize,
    #[arg(long, env = "BLOCKPTQ_SEED", default_value_t = 0)]
    seed: u64,
    /// Exact identity layers instead of random weights.
    #[arg(long)]
    identity: bool,
    /// Output file; stdout when absent.
    #[arg(long, env = "BLOCKPTQ_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenCalibArgs {
    #[arg(long, env = "BLOCKPTQ_DIM")]
    dim: usize,
    #[arg(long, env = "BLOCKPTQ_COUNT", default_value_t = 64)]
    count: usize,
    #[arg(long, env = "BLOCKPTQ_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "BLOCKPTQ_DIST", default_value = "normal", value_parser = parse_dist)]
    dist: InputDistribution,
    #[arg(long, env = "BLOCKPTQ_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct InputArgs {
    #[arg(long, env = "BLOCKPTQ_MODEL")]
    model: PathBuf,
    #[arg(long, env = "BLOCKPTQ_CALIB")]
    calib: PathBuf,
    /// Calibration samples to use; larger sets are subsampled with `--seed`.
    #[arg(long, env = "BLOCKPTQ_CALIB_SIZE", default_value_t = 64)]
    calib_size: usize,
    #[arg(long, env = "BLOCKPTQ_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, env = "BLOCKPTQ_BITS_W", default_value_t = 4)]
    bits_w: u32,
    #[arg(long, env = "BLOCKPTQ_BITS_A", default_value_t = 4)]
    bits_a: u32,
    /// Comma separated, strictly decreasing percentiles.
    #[arg(long, env = "BLOCKPTQ_GRID", default_value = "1.0,0.995,0.99,0.985,0.98", value_parser = parse_grid)]
    grid: CandidateGrid,
    #[arg(long, env = "BLOCKPTQ_MAX_DEPTH", default_value_t = 3)]
    max_depth: usize,
    /// Block threshold, a number or `auto` for the median dependency.
    #[arg(long, env = "BLOCKPTQ_H0", default_value = "auto", value_parser = parse_h0)]
    h0: Threshold,
    /// Largest number of combinations one exhaustive scan may score.
    #[arg(long, env = "BLOCKPTQ_BUDGET", default_value_t = blockptq::search::DEFAULT_BUDGET)]
    budget: u64,
    /// Search weight and activation percentiles independently.
    #[arg(long, env = "BLOCKPTQ_DECOUPLE")]
    decouple: bool,
    #[arg(long, env = "BLOCKPTQ_PROBE", default_value = "post", value_parser = parse_probe)]
    probe: ProbePoint,
    /// Soft-quantizer temperature; the level interval when absent.
    #[arg(long, env = "BLOCKPTQ_TEMPERATURE")]
    temperature: Option<f64>,
}

#[derive(Args, Clone)]
struct VeoArgs {
    #[arg(long, env = "BLOCKPTQ_LAMBDA1", default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, env = "BLOCKPTQ_LAMBDA2", default_value_t = 0.1)]
    lambda2: f64,
    #[arg(long, env = "BLOCKPTQ_ETA", default_value_t = 0.5)]
    eta: f64,
    #[arg(long, env = "BLOCKPTQ_EPOCHS", default_value_t = 10)]
    epochs: usize,
    #[arg(long, env = "BLOCKPTQ_BATCH", default_value_t = 8)]
    batch: usize,
    #[arg(long, env = "BLOCKPTQ_LR", default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, env = "BLOCKPTQ_GRAD_MODE", default_value = "analytic", value_parser = parse_grad_mode)]
    grad_mode: GradMode,
}

#[derive(Args)]
struct DepsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, env = "BLOCKPTQ_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchCmdArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, env = "BLOCKPTQ_STRATEGY", default_value = "block", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, env = "BLOCKPTQ_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VeoCmdArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    veo: VeoArgs,
    /// Take the rounding functions from this search report instead of
    /// running the block-wise search.
    #[arg(long, env = "BLOCKPTQ_REPORT")]
    report: Option<PathBuf>,
    /// Optimized model file.
    #[arg(long, env = "BLOCKPTQ_OUT")]
    out: PathBuf,
    /// Loss trace CSV.
    #[arg(long, env = "BLOCKPTQ_TRACE")]
    trace: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, env = "BLOCKPTQ_STRATEGY", default_value = "block", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Run encoder optimization and search again afterwards.
    #[arg(long, env = "BLOCKPTQ_VEO")]
    veo: bool,
    #[command(flatten)]
    veo_args: VeoArgs,
    #[arg(long, env = "BLOCKPTQ_OUT_DIR")]
    out_dir: PathBuf,
    /// Print per-phase wall-clock times to stderr.
    #[arg(long, env = "BLOCKPTQ_TIMINGS")]
    timings: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// An `artifacts.json` written by `pipeline`.
    #[arg(long, env = "BLOCKPTQ_ARTIFACTS")]
    artifacts: PathBuf,
    #[arg(long, env = "BLOCKPTQ_FORMAT", default_value = "json", value_parser = parse_format)]
    format: ReportFormat,
    #[arg(long, env = "BLOCKPTQ_OUT")]
    out: Option<PathBuf>,
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    Activation::parse(s).map_err(|e| e.to_string())
}

fn parse_dist(s: &str) -> Result<InputDistribution, String> {
    InputDistribution::parse(s).map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> Result<CandidateGrid, String> {
    CandidateGrid::parse(s).map_err(|e| e.to_string())
}

fn parse_h0(s: &str) -> Result<Threshold, String> {
    Threshold::parse(s).map_err(|e| e.to_string())
}

fn parse_probe(s: &str) -> Result<ProbePoint, String> {
    match s {
        "post" => Ok(ProbePoint::Post),
        "pre" => Ok(ProbePoint::Pre),
        other => Err(format!("unknown probe `{other}` (expected post or pre)")),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn parse_grad_mode(s: &str) -> Result<GradMode, String> {
    GradMode::parse(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    ReportFormat::parse(s).map_err(|e| e.to_string())
}

impl VeoArgs {
    fn config(&self, temperature: Option<f64>) -> VeoConfig {
        VeoConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            eta: self.eta,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            grad_mode: self.grad_mode,
            temperature,
        }
    }
}

fn pipeline_config(
    input: &InputArgs,
    search: &SearchArgs,
    strategy: Strategy,
    veo: Option<VeoConfig>,
) -> PipelineConfig {
    PipelineConfig {
        bits_w: search.bits_w,
        bits_a: search.bits_a,
        grid: search.grid.clone(),
        max_depth: search.max_depth,
        h0: search.h0,
        calib_size: input.calib_size,
        seed: input.seed,
        strategy,
        decouple: search.decouple,
        probe: search.probe,
        budget: search.budget,
        temperature: search.temperature,
        veo,
    }
}

fn load_inputs(input: &InputArgs, cfg: &PipelineConfig) -> Result<(Model, CalibrationSet)> {
    cfg.validate()?;
    let model = io::load_model(&input.model)
        .with_context(|| format!("loading {}", input.model.display()))?;
    let calib = io::load_calibration(&input.calib)
        .with_context(|| format!("loading {}", input.calib.display()))?;
    let calib = subsample(&calib, cfg.calib_size, cfg.seed)?;
    Ok((model, calib))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => io::write_text(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// The same baseline, dependency and search sequence the pipeline runs.
fn searched(cfg: &PipelineConfig, model: &Model, calib: &CalibrationSet) -> Result<SearchReport> {
    let search = cfg.search_config();
    let baseline = search_layerwise(model, calib, &search)?;
    if cfg.strategy == Strategy::LayerWise {
        return Ok(baseline);
    }
    let deps = dependency_phase(model, calib, cfg, &baseline, false)?;
    Ok(search_phase(
        model,
        calib,
        &search,
        cfg.strategy,
        &deps.partition,
    )?)
}

fn print_timings(artifacts: &RunArtifacts) {
    for t in &artifacts.timings {
        eprintln!("{:<12} {:>10.3} s", t.phase, t.seconds);
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenModel(a) => {
            let spec = ModelSpec {
                dims: a.dims,
                activation: a.activation,
                output_activation: a.output_activation,
                encoder_len: a.encoder_len,
                seed: a.seed,
                identity: a.identity,
            };
            emit(
                a.out.as_deref(),
                &io::to_json_string(&generate_model(&spec)?)?,
            )
        }
        Command::GenCalib(a) => {
            let calib = generate_calibration(a.dim, a.count, a.seed, a.dist)?;
            emit(a.out.as_deref(), &io::to_json_string(&calib)?)
        }
        Command::Deps(a) => {
            let cfg = pipeline_config(&a.input, &a.search, Strategy::BlockWise, None);
            let (model, calib) = load_inputs(&a.input, &cfg)?;
            let baseline = search_layerwise(&model, &calib, &cfg.search_config())?;
            let deps = dependency_phase(&model, &calib, &cfg, &baseline, true)?;
            emit(a.out.as_deref(), &io::to_json_string(&deps)?)
        }
        Command::Search(a) => {
            let cfg = pipeline_config(&a.input, &a.search, a.strategy, None);
            let (model, calib) = load_inputs(&a.input, &cfg)?;
            emit(
                a.out.as_deref(),
                &io::to_json_string(&searched(&cfg, &model, &calib)?)?,
            )
        }
        Command::Veo(a) => {
            let veo = a.veo.config(a.search.temperature);
            let cfg = pipeline_config(&a.input, &a.search, Strategy::BlockWise, Some(veo));
            let (model, calib) = load_inputs(&a.input, &cfg)?;
            let specs = match &a.report {
                Some(path) => io::read_json::<SearchReport>(path)?.specs(),
                None => searched(&cfg, &model, &calib)?.specs(),
            };
            let outcome = optimize_encoder(
                &model,
                &specs,
                &calib,
                &teacher_targets(&model, &calib),
                &veo,
            )?;
            io::write_json(&a.out, &outcome.model)?;
            io::write_csv(&a.trace, &outcome.trace)?;
            Ok(())
        }
        Command::Pipeline(a) => {
            let veo = a.veo.then(|| a.veo_args.config(a.search.temperature));
            let cfg = pipeline_config(&a.input, &a.search, a.strategy, veo);
            let result = run_pipeline(&cfg, &a.input.model, &a.input.calib, &a.out_dir);
            if let Ok(artifacts) = &result {
                if a.timings {
                    print_timings(artifacts);
                }
                let report = artifacts.final_report();
                eprintln!(
                    "final output error {:e} (layer-wise {:e}), artifacts in {}",
                    report.final_output_error,
                    artifacts.final_baseline().final_output_error,
                    a.out_dir.display()
                );
            }
            result?;
            Ok(())
        }
        Command::Report(a) => {
            let artifacts: RunArtifacts = io::read_json(&a.artifacts)?;
            emit(a.out.as_deref(), &render_report(&artifacts, a.format)?)
        }
    }
}
