use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_any2point"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_toy(dir: &Path) {
    let o = run(&[
        "gen-data",
        "--out",
        p(dir),
        "--classes",
        "cube,sphere",
        "--train-per-class",
        "4",
        "--test-per-class",
        "2",
        "--n-points",
        "48",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn params_prints_report_line() {
    let o = run(&["params", "--preset", "reference"]);
    assert!(o.status.success());
    let line = stdout(&o);
    assert!(line.starts_with("trainable="), "{line}");
    assert!(line.contains(" total=") && line.contains(" ratio="));
}

#[test]
fn params_follow_flag_overrides() {
    let base = stdout(&run(&["params", "--preset", "toy"]));
    let more = stdout(&run(&["params", "--preset", "toy", "--set", "adapter.bottleneck_dim=8"]));
    assert_ne!(base, more);
    let head = stdout(&run(&["params", "--preset", "toy", "--head-only", "true", "--n-classes", "5"]));
    assert!(head.starts_with("trainable=85 "), "{head}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let a = stdout(&run(&["params", "--preset", "toy", "--n-classes", "7"]));
    let cfg = dir.path().join("cfg.json");
    // A training run records its resolved configuration.
    let data = dir.path().join("data");
    gen_toy(&data);
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--preset", "toy", "--data", p(&data), "--n-classes", "2", "--epochs", "1", "--quiet", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::copy(out.join("config.json"), &cfg).unwrap();
    let b = stdout(&run(&["params", "--config", p(&cfg), "--n-classes", "7"]));
    assert_eq!(a, b);
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_toy(&data);
    assert!(data.join("dataset.json").is_file());
    assert!(data.join("cube/train_0000.a2pc").is_file());

    let out = dir.path().join("run");
    let o = run(&[
        "train", "--preset", "toy", "--data", p(&data), "--n-classes", "2", "--epochs", "2", "--quiet", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train_acc = stdout(&o);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,loss,acc,lr");
    assert_eq!(lines.len(), 3);

    let o = run(&["eval", "--checkpoint", p(&out), "--data", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), train_acc);
    let acc: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let ins = dir.path().join("ins");
    let cloud = data.join("sphere/test_0001.a2pc");
    let o = run(&["inspect", "--checkpoint", p(&out), "--cloud", p(&cloud), "--out", p(&ins), "--clusters", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (name, header) in [
        ("test_0001.attention.csv", "x,y,z,score"),
        ("test_0001.similarity.csv", "x,y,z,score"),
        ("test_0001.clusters.csv", "x,y,z,label"),
    ] {
        let text = fs::read_to_string(ins.join(name)).unwrap();
        let mut rows = text.lines();
        assert_eq!(rows.next(), Some(header));
        assert_eq!(rows.count(), 12, "{name}");
    }
}

#[test]
fn training_is_reproducible_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "train", "--preset", "toy", "--benchmark", "toy", "--epochs", "2", "--quiet", "--out", p(&out),
        ]);
        assert!(o.status.success());
        csvs.push(fs::read(out.join("metrics.csv")).unwrap());
        csvs.push(fs::read(out.join("trainables/tensors.bin")).unwrap());
    }
    assert_eq!(csvs[0], csvs[2]);
    assert_eq!(csvs[1], csvs[3]);
}

#[test]
fn ablate_writes_one_csv_per_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "ablate", "--preset", "toy", "--epochs", "1", "--table", "main", "--table", "agg", "--out", p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let main = fs::read_to_string(dir.path().join("ablation_main.csv")).unwrap();
    assert_eq!(main.lines().count(), 5);
    assert!(main.lines().next().unwrap().ends_with("params_m,acc_1d,acc_2d"));
    assert!(dir.path().join("ablation_agg.csv").is_file());
}

#[test]
fn export_pe_writes_table_and_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let pe = dir.path().join("pe.a2pe");
    let bb = dir.path().join("bb");
    let o = run(&["export-pe", "--preset", "toy", "--out", p(&pe), "--backbone-out", p(&bb)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(&pe).unwrap()[..4], b"A2PE");
    // The saved backbone loads as a checkpoint.
    let o = run(&["params", "--preset", "toy", "--backbone-checkpoint", p(&bb)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--out", p(dir.path()), "--classes", "blob"]).status.code(), Some(2));
    assert_eq!(run(&["ablate", "--table", "nope", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["params", "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(run(&["params", "--preset", "toy", "--set", "adapter.bottleneck_dim=0"]).status.code(), Some(3));
    assert_eq!(run(&["params", "--preset", "toy", "--pe-mode", "bogus"]).status.code(), Some(3));
    let missing = dir.path().join("missing");
    assert_eq!(run(&["eval", "--checkpoint", p(&missing)]).status.code(), Some(4));
    let bad = dir.path().join("bad.a2pc");
    fs::write(&bad, b"not a cloud").unwrap();
    let data = dir.path().join("data");
    gen_toy(&data);
    let out = dir.path().join("run");
    let o = run(&["train", "--preset", "toy", "--data", p(&data), "--n-classes", "2", "--epochs", "1", "--quiet", "--out", p(&out)]);
    assert!(o.status.success());
    let o = run(&["inspect", "--checkpoint", p(&out), "--cloud", p(&bad), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
}
