use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[data]
classes = 4
n_max = 12
rho = 4.0
height = 12
width = 12
test_per_class = 4

[arch]
n_cells = 3
init_channels = 2

[search]
epochs = 2
batch_size = 8
probe_every = 1

[search.probe]
power_iters = 3
batch_size = 8

[train]
epochs = 2
batch_size = 8

[suite]
seeds = [0]
backbone_epochs = 1
backbone_channels = 4
"#;

fn tailnas(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tailnas"));
    cmd.args(args).env_remove("TAILNAS_OUT");
    if let Some(root) = env_out {
        cmd.env("TAILNAS_OUT", root);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn run_in(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    tailnas(&args, None)
}

#[test]
fn search_writes_outputs_deterministically() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run_in(&cfg, &a, &["search"]));
    ok(&run_in(&cfg, &b, &["search"]));
    for f in [
        "genotype.json",
        "trace.csv",
        "summary.json",
        "bias.csv",
        "config.toml",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(fs::read_to_string(a.join("run.log"))
        .unwrap()
        .contains("start search"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 1);
    assert_eq!(summary["config"]["data"]["classes"], 4);
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn classifier_flag_controls_norm_spread() {
    let (dir, cfg) = setup();
    let (e, t) = (dir.path().join("etf"), dir.path().join("lin"));
    ok(&run_in(&cfg, &e, &["search", "--classifier", "etf"]));
    ok(&run_in(&cfg, &t, &["search", "--classifier", "trainable"]));
    let etf = column(
        &fs::read_to_string(e.join("trace.csv")).unwrap(),
        "norm_std",
    );
    assert!(
        etf.iter().all(|v| v.parse::<f64>().unwrap() == 0.0),
        "{etf:?}"
    );
    let lin = column(
        &fs::read_to_string(t.join("trace.csv")).unwrap(),
        "norm_std",
    );
    assert!(
        lin.iter().any(|v| v.parse::<f64>().unwrap() > 0.0),
        "{lin:?}"
    );
}

#[test]
fn config_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[search]\nepochs = 2\nlearning_rate = 0.1\n").unwrap();
    let out = run_in(&cfg, &dir.path().join("o"), &["search"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("learning_rate") && err.contains("line 3"),
        "{err}"
    );
}

#[test]
fn refuses_to_overwrite_without_force() {
    let (dir, cfg) = setup();
    let out_dir = dir.path().join("etf");
    ok(&run_in(&cfg, &out_dir, &["etfcheck"]));
    let again = run_in(&cfg, &out_dir, &["etfcheck"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&run_in(&cfg, &out_dir, &["etfcheck", "--force"]));
}

#[test]
fn default_output_root_comes_from_environment() {
    let (dir, cfg) = setup();
    let root = dir.path().join("root");
    ok(&tailnas(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "etfcheck",
            "--classes",
            "3",
        ],
        Some(&root),
    ));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("etfcheck/etf_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], true);
    assert!((report["mean_angle_degrees"].as_f64().unwrap() - 120.0).abs() < 1e-9);
}

#[test]
fn train_then_eval_agree() {
    let (dir, cfg) = setup();
    let s = dir.path().join("s");
    ok(&run_in(&cfg, &s, &["search"]));
    let t = dir.path().join("t");
    let geno = s.join("genotype.json");
    ok(&run_in(
        &cfg,
        &t,
        &["train", "--genotype", geno.to_str().unwrap()],
    ));
    let curve = fs::read_to_string(t.join("curve.csv")).unwrap();
    assert_eq!(
        curve.lines().next().unwrap(),
        "epoch,lr,train_loss,test_balanced_acc"
    );
    assert_eq!(curve.lines().count(), 3);
    let e = dir.path().join("e");
    let model = t.join("model.json");
    ok(&run_in(
        &cfg,
        &e,
        &["eval", "--model", model.to_str().unwrap()],
    ));
    let a = fs::read_to_string(t.join("eval_report.json")).unwrap();
    let b = fs::read_to_string(e.join("eval_report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradcheck_passes() {
    let (dir, cfg) = setup();
    let out = run_in(&cfg, &dir.path().join("g"), &["gradcheck"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
}

#[test]
fn suites_emit_tables() {
    let (dir, cfg) = setup();
    let x = dir.path().join("x");
    ok(&run_in(&cfg, &x, &["explore", "--axis", "topology"]));
    let agg = fs::read_to_string(x.join("aggregate.csv")).unwrap();
    let labels: Vec<&str> = agg
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "basic@rho1",
            "bottleneck@rho1",
            "basic@rho100",
            "bottleneck@rho100"
        ]
    );

    let o = dir.path().join("o");
    ok(&run_in(&cfg, &o, &["opcompare"]));
    let suite = fs::read_to_string(o.join("suite.csv")).unwrap();
    let labels: Vec<&str> = suite
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "sep_conv_3x3",
            "dil_conv_3x3",
            "lt_agg_conv",
            "lt_hier_conv"
        ]
    );
    assert!(o.join("param_guard.json").exists() && o.join("scatter.csv").exists());

    let bad = run_in(
        &cfg,
        &dir.path().join("bad"),
        &["explore", "--axis", "width"],
    );
    assert!(!bad.status.success());
}

#[test]
fn ablate_and_collapse_layouts() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    ok(&run_in(&cfg, &a, &["ablate"]));
    let suite = fs::read_to_string(a.join("suite.csv")).unwrap();
    let header = suite.lines().next().unwrap();
    assert!(header.contains("search_acc") && header.contains("retrain_acc"));
    let labels: Vec<&str> = suite
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["vanilla", "+conv", "+conv+etf"]);

    let c = dir.path().join("c");
    ok(&run_in(&cfg, &c, &["collapse"]));
    let t = fs::read_to_string(c.join("seed0_trainable_trace.csv")).unwrap();
    let e = fs::read_to_string(c.join("seed0_etf_trace.csv")).unwrap();
    assert_eq!(column(&t, "epoch"), column(&e, "epoch"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(c.join("summary.json")).unwrap()).unwrap();
    assert!(summary["lambda_pass"].is_boolean());
    assert!(summary["seeds"][0]["skip_fraction_etf"].is_number());
}

#[test]
fn data_command_round_trips() {
    let (dir, cfg) = setup();
    let d = dir.path().join("d");
    ok(&run_in(&cfg, &d, &["data"]));
    let bytes = fs::read(d.join("train.bin")).unwrap();
    assert_eq!(&bytes[..4], b"TNDS");
    let toml = format!(
        "{TINY}\n[dataset]\ntrain_path = {:?}\ntest_path = {:?}\n",
        d.join("train.bin"),
        d.join("test.bin")
    );
    let cfg2 = dir.path().join("files.toml");
    fs::write(&cfg2, toml).unwrap();
    ok(&run_in(&cfg2, &dir.path().join("s"), &["search"]));
}
