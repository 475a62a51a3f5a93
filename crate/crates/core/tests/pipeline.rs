use std::fs;
use std::path::Path;

use blockptq::dependency::BlockPartition;
use blockptq::encoder::VeoConfig;
use blockptq::harness::io;
use blockptq::harness::pipeline::*;
use blockptq::harness::report::{render_report, ReportFormat};
use blockptq::search::{search_layerwise, Strategy};
use blockptq::Error;

mod common;

fn inputs(
    dir: &Path,
    dims: &[usize],
    seed: u64,
    count: usize,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let model = common::encoder_model(dims, 1, seed);
    let calib = common::calib(dims[0], count, seed + 1);
    let (mp, cp) = (dir.join("model.json"), dir.join("calib.json"));
    io::write_json(&mp, &model).unwrap();
    io::write_json(&cp, &calib).unwrap();
    (mp, cp)
}

fn small_cfg() -> PipelineConfig {
    PipelineConfig {
        calib_size: 24,
        seed: 3,
        ..PipelineConfig::default()
    }
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_write_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (mp, cp) = inputs(tmp.path(), &[3, 4, 4, 2], 11, 40);
    let cfg = PipelineConfig {
        veo: Some(VeoConfig {
            epochs: 2,
            ..VeoConfig::default()
        }),
        ..small_cfg()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&cfg, &mp, &cp, &a).unwrap();
    run_pipeline(&cfg, &mp, &cp, &b).unwrap();
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    let names: Vec<&str> = ca.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            ARTIFACTS_FILE,
            DED_CSV_FILE,
            DEPENDENCY_FILE,
            VEO_MODEL_FILE,
            SEARCH_REPORT_FILE,
            VEO_TRACE_FILE
        ]
    );
    assert_eq!(ca, cb);
}

#[test]
fn artifacts_json_round_trips_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (mp, cp) = inputs(tmp.path(), &[3, 4, 4, 2], 12, 30);
    let out = tmp.path().join("run");
    run_pipeline(&small_cfg(), &mp, &cp, &out).unwrap();
    let text = fs::read_to_string(out.join(ARTIFACTS_FILE)).unwrap();
    let parsed: RunArtifacts = serde_json::from_str(&text).unwrap();
    assert_eq!(io::to_json_string(&parsed).unwrap(), text);
    assert_eq!(render_report(&parsed, ReportFormat::Json).unwrap(), text);
}

#[test]
fn csv_rows_match_sample_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (mp, cp) = inputs(tmp.path(), &[3, 4, 4, 2], 13, 30);
    let out = tmp.path().join("run");
    let cfg = PipelineConfig {
        veo: Some(VeoConfig {
            epochs: 3,
            ..VeoConfig::default()
        }),
        ..small_cfg()
    };
    let artifacts = run_pipeline(&cfg, &mp, &cp, &out).unwrap();
    let ded = &artifacts.dependency.as_ref().unwrap().ded_samples;
    assert_eq!(ded.len(), 2 * 24);
    let csv = fs::read_to_string(out.join(DED_CSV_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "layer,sample_id,entropy,ded");
    assert_eq!(csv.lines().count(), ded.len() + 1);
    assert_eq!(render_report(&artifacts, ReportFormat::Csv).unwrap(), csv);
    let trace = fs::read_to_string(out.join(VEO_TRACE_FILE)).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "epoch,L_reg,L_ent,L_err,total"
    );
    assert_eq!(trace.lines().count(), 3 + 2);
}

#[test]
fn layer_strategy_skips_dependency_phase() {
    let model = common::model(&[3, 4, 4, 2], 14);
    let calib = common::calib(3, 20, 15);
    let cfg = PipelineConfig {
        strategy: Strategy::LayerWise,
        ..small_cfg()
    };
    let artifacts = execute(&cfg, &model, &calib).unwrap();
    assert!(artifacts.dependency.is_none());
    assert_eq!(artifacts.partition, BlockPartition::singletons(3));
    assert_eq!(artifacts.search_report, artifacts.baseline);
    assert!(!artifacts.timings.iter().any(|t| t.phase == "dependency"));
    let tmp = tempfile::tempdir().unwrap();
    write_artifacts(&artifacts, tmp.path()).unwrap();
    assert!(!tmp.path().join(DEPENDENCY_FILE).exists());
    assert_eq!(
        render_report(&artifacts, ReportFormat::Csv).unwrap(),
        "layer,sample_id,entropy,ded\n"
    );
}

#[test]
fn phases_compose_to_the_same_artifacts() {
    let model = common::model(&[3, 5, 4, 4, 2], 16);
    let calib = common::calib(3, 50, 17);
    let cfg = small_cfg();
    let whole = execute(&cfg, &model, &calib).unwrap();

    let calib = subsample(&calib, cfg.calib_size, cfg.seed).unwrap();
    let search = cfg.search_config();
    let baseline = search_layerwise(&model, &calib, &search).unwrap();
    let deps = dependency_phase(&model, &calib, &cfg, &baseline, true).unwrap();
    let report = search_phase(&model, &calib, &search, cfg.strategy, &deps.partition).unwrap();
    assert_eq!(whole.calibration, calib.id());
    assert_eq!(whole.baseline, baseline);
    assert_eq!(whole.dependency.as_ref().unwrap(), &deps);
    assert_eq!(whole.search_report, report);
}

#[test]
fn block_strategy_on_four_layer_model_against_layerwise() {
    let model = common::model(&[4, 6, 6, 6, 4], 0);
    let calib = common::calib(4, 64, 1);
    let block = execute(&PipelineConfig::default(), &model, &calib).unwrap();
    let layer = execute(
        &PipelineConfig {
            strategy: Strategy::LayerWise,
            ..PipelineConfig::default()
        },
        &model,
        &calib,
    )
    .unwrap();
    assert!(
        block.search_report.final_output_error
            <= layer.search_report.final_output_error + CHECK_TOLERANCE,
        "block {} > layer {}",
        block.search_report.final_output_error,
        layer.search_report.final_output_error
    );
}

#[test]
fn gating_checks_are_recorded() {
    let model = common::model(&[3, 4, 4, 2], 18);
    let calib = common::calib(3, 30, 19);
    let artifacts = execute(&small_cfg(), &model, &calib).unwrap();
    let names: Vec<(&str, bool)> = artifacts
        .checks
        .iter()
        .map(|c| (c.name.as_str(), c.gating))
        .collect();
    assert_eq!(
        names,
        [
            ("block_joint_le_sequential", true),
            ("ded_nonnegative", true),
            ("oracle_le_search", true),
            ("search_le_layerwise", false),
        ]
    );
    assert!(artifacts.passed());
    // 5^6 combinations exceed the oracle limit, so that check is skipped
    let big = common::model(&[3, 3, 3, 3, 3, 3, 2], 20);
    let artifacts = execute(&small_cfg(), &big, &calib).unwrap();
    let oracle = artifacts
        .checks
        .iter()
        .find(|c| c.name == "oracle_le_search")
        .unwrap();
    assert!(!oracle.gating);
}

#[test]
fn phase_errors_carry_their_phase() {
    let tmp = tempfile::tempdir().unwrap();
    let (mp, _) = inputs(tmp.path(), &[3, 4, 2], 21, 10);
    let err = run_pipeline(
        &small_cfg(),
        &mp,
        &tmp.path().join("missing.json"),
        tmp.path(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Phase { phase: "load", .. }), "{err}");
    let wrong = common::calib(5, 10, 1);
    let err = execute(&small_cfg(), &common::model(&[3, 4, 2], 1), &wrong).unwrap_err();
    assert!(matches!(err, Error::Phase { phase: "load", .. }), "{err}");
    let tight = PipelineConfig {
        budget: 10,
        ..small_cfg()
    };
    let calib = common::calib(3, 10, 2);
    let err = execute(&tight, &common::model(&[3, 4, 4, 2], 1), &calib).unwrap_err();
    assert!(matches!(err, Error::Phase { .. }), "{err}");
}

#[test]
fn subsample_is_seeded_and_ordered() {
    let calib = common::calib(2, 30, 5);
    assert_eq!(subsample(&calib, 64, 0).unwrap(), calib);
    let a = subsample(&calib, 10, 7).unwrap();
    assert_eq!(a, subsample(&calib, 10, 7).unwrap());
    assert_ne!(a, subsample(&calib, 10, 8).unwrap());
    let positions: Vec<usize> = a
        .samples()
        .iter()
        .map(|s| calib.samples().iter().position(|t| t == s).unwrap())
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn config_parsing_and_validation() {
    assert_eq!(Threshold::parse("auto").unwrap(), Threshold::Auto);
    assert_eq!(Threshold::parse("0.25").unwrap(), Threshold::Fixed(0.25));
    assert!(Threshold::parse("inf").is_err());
    let cfg = PipelineConfig {
        h0: Threshold::Fixed(0.5),
        ..PipelineConfig::default()
    };
    let json = serde_json::to_string(&cfg).unwrap();
    assert!(json.contains(r#""h0":0.5"#));
    assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
    assert!(serde_json::to_string(&PipelineConfig::default())
        .unwrap()
        .contains(r#""h0":"auto""#));
    assert!(PipelineConfig {
        bits_w: 9,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(PipelineConfig {
        calib_size: 0,
        ..cfg.clone()
    }
    .validate()
    .is_err());
    assert!(ReportFormat::parse("xml").is_err());
}
