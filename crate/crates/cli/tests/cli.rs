use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blockptq::harness::io;
use blockptq::search::SearchReport;

fn blockptq(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blockptq"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn inputs(dir: &Path) -> (String, String) {
    let model = dir.join("model.json").to_string_lossy().into_owned();
    let calib = dir.join("calib.json").to_string_lossy().into_owned();
    ok(blockptq(
        &[
            "gen-model",
            "--dims",
            "3,4,4,2",
            "--encoder-len",
            "1",
            "--seed",
            "2",
            "--out",
            &model,
        ],
        &[],
    ));
    ok(blockptq(
        &[
            "gen-calib",
            "--dim",
            "3",
            "--count",
            "40",
            "--seed",
            "3",
            "--out",
            &calib,
        ],
        &[],
    ));
    (model, calib)
}

#[test]
fn generators_print_to_stdout_when_no_out_is_given() {
    let text = ok(blockptq(&["gen-calib", "--dim", "2", "--count", "3"], &[]));
    let again = ok(blockptq(
        &["gen-calib"],
        &[("BLOCKPTQ_DIM", "2"), ("BLOCKPTQ_COUNT", "3")],
    ));
    assert_eq!(text, again);
    assert!(text.starts_with('{'));
}

#[test]
fn env_vars_override_defaults_and_flags_override_env() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, calib) = inputs(tmp.path());
    let env = [
        ("BLOCKPTQ_MODEL", model.as_str()),
        ("BLOCKPTQ_CALIB", calib.as_str()),
        ("BLOCKPTQ_BITS_W", "6"),
    ];
    let report: SearchReport =
        serde_json::from_str(&ok(blockptq(&["search", "--strategy", "layer"], &env))).unwrap();
    assert_eq!((report.bits_w, report.bits_a), (6, 4));
    let report: SearchReport = serde_json::from_str(&ok(blockptq(
        &["search", "--strategy", "layer", "--bits-w", "3"],
        &env,
    )))
    .unwrap();
    assert_eq!(report.bits_w, 3);
}

#[test]
fn subcommands_compose_like_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, calib) = inputs(tmp.path());
    let run = tmp.path().join("run").to_string_lossy().into_owned();
    let common = [
        "--model",
        model.as_str(),
        "--calib",
        calib.as_str(),
        "--calib-size",
        "24",
        "--seed",
        "5",
    ];

    let mut args = vec!["pipeline"];
    args.extend(common);
    args.extend(["--out-dir", run.as_str()]);
    ok(blockptq(&args, &[]));

    let mut args = vec!["search"];
    args.extend(common);
    let searched = ok(blockptq(&args, &[]));
    assert_eq!(
        searched,
        fs::read_to_string(Path::new(&run).join("search_report.json")).unwrap()
    );

    let mut args = vec!["deps"];
    args.extend(common);
    let deps = ok(blockptq(&args, &[]));
    assert_eq!(
        deps,
        fs::read_to_string(Path::new(&run).join("dependency.json")).unwrap()
    );

    let artifacts = Path::new(&run)
        .join("artifacts.json")
        .to_string_lossy()
        .into_owned();
    let csv = ok(blockptq(
        &["report", "--artifacts", &artifacts, "--format", "csv"],
        &[],
    ));
    assert_eq!(
        csv,
        fs::read_to_string(Path::new(&run).join("ded_samples.csv")).unwrap()
    );
}

#[test]
fn veo_subcommand_writes_model_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, calib) = inputs(tmp.path());
    let out = tmp.path().join("tuned.json").to_string_lossy().into_owned();
    let trace = tmp.path().join("trace.csv").to_string_lossy().into_owned();
    ok(blockptq(
        &[
            "veo", "--model", &model, "--calib", &calib, "--epochs", "2", "--out", &out, "--trace",
            &trace,
        ],
        &[],
    ));
    let rows = fs::read_to_string(&trace).unwrap();
    assert_eq!(
        rows.lines().next().unwrap(),
        "epoch,L_reg,L_ent,L_err,total"
    );
    assert_eq!(rows.lines().count(), 4);
    io::load_model(Path::new(&out)).unwrap();
}

#[test]
fn bad_input_fails_with_a_message() {
    let out = blockptq(
        &[
            "search",
            "--model",
            "/nonexistent/model.json",
            "--calib",
            "/nonexistent/c.json",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.json"));
    let out = blockptq(&["gen-model", "--dims", "3,2", "--activation", "tanh"], &[]);
    assert!(!out.status.success());
}
