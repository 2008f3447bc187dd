use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aplearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aplearn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let base = r#"
[data.synthetic]
num_sequences = 3
groups_per_sequence = 8
group_size = 3
test_sequences = 1
seed = 2

[model]
arch = "linear"
dim = 8

[batch]
size = 12

[sgd]
epochs = 3
seed = 9
"#;
    let path = dir.join(name);
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let run = dir.path().join("run");
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.starts_with("# config = {"));
    let epochs: Vec<usize> = log
        .lines()
        .filter_map(|l| l.strip_prefix("epoch="))
        .map(|l| l.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(epochs, vec![0, 1, 2]);
    let bytes = std::fs::read(run.join("model.apl")).unwrap();
    assert!(bytes.starts_with(b"APLDESC1"));

    // Same config and seed give the same checkpoint, byte for byte.
    let again = dir.path().join("again");
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&again)]));
    assert_eq!(bytes, std::fs::read(again.join("model.apl")).unwrap());

    let other = dir.path().join("other");
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&other), "--seed", "10"]));
    assert_ne!(bytes, std::fs::read(other.join("model.apl")).unwrap());
}

#[test]
fn transformer_checkpoint_carries_its_segments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "st.toml", "\n[st]\nenabled = true\n");
    let run = dir.path().join("run");
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let (model, header) = aplearn_core::model::checkpoint::load(&run.join("model.apl")).unwrap();
    assert!(header.spec.st.is_some());
    assert!(model.segments().iter().any(|s| s.name.starts_with("st.")));
    assert_eq!(header.config["st"]["enabled"], true);
}

#[test]
fn eval_reports_every_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let run = dir.path().join("run");
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let ckpt = run.join("model.apl");
    let rep = dir.path().join("eval");
    ok(&aplearn(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&rep)]));
    for task in ["retrieval", "verification", "matching"] {
        let text = std::fs::read_to_string(rep.join(format!("{task}.txt"))).unwrap();
        assert!(text.contains(&format!("task = {task}")));
        assert!(text.contains("config = {"), "{text}");
        assert!(text.contains("model.apl"));
    }
    assert!(rep.join("matching_pr.csv").exists());

    let init = dir.path().join("init");
    ok(&aplearn(&["eval", "--config", p(&cfg), "--random-init", "--out", p(&init)]));
    let text = std::fs::read_to_string(init.join("retrieval.txt")).unwrap();
    assert!(text.contains("random_init"));
}

#[test]
fn eval_rejects_a_checkpoint_of_another_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "");
    let run = dir.path().join("run");
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&run)]));
    let wide = dir.path().join("wide.toml");
    std::fs::write(&wide, std::fs::read_to_string(&cfg).unwrap().replace("dim = 8", "dim = 16")).unwrap();
    let out = aplearn(&["eval", "--config", p(&wide), "--checkpoint", p(&run.join("model.apl")), "--out", p(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim 8"));
}

#[test]
fn mine_writes_one_file_per_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "\n[mining]\nK = 4\n";
    let cfg = dir.path().join("mine.toml");
    std::fs::write(
        &cfg,
        format!("[data.synthetic]\nnum_sequences = 2\ngroups_per_sequence = 6\ngroup_size = 3\nsequence_mix = 0.6\n{extra}"),
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&aplearn(&["mine", "--config", p(&cfg), "--out", p(&a)]));
    ok(&aplearn(&["mine", "--config", p(&cfg), "--out", p(&b)]));
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2);
    for n in &names {
        let first = std::fs::read_to_string(a.join(n)).unwrap();
        assert_eq!(first, std::fs::read_to_string(b.join(n)).unwrap());
        assert!(first.contains("# config = {"));
    }

    // At p = 100 no center pair is farther apart than the threshold.
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("K = 4", "K = 4\np = 100.0")).unwrap();
    let c = dir.path().join("c");
    ok(&aplearn(&["mine", "--config", p(&cfg), "--out", p(&c)]));
    for n in &names {
        let text = std::fs::read_to_string(c.join(n)).unwrap();
        assert!(text.lines().all(|l| l.starts_with('#')), "{text}");
    }
}

#[test]
fn training_with_mined_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels");
    let cfg = write_config(dir.path(), "run.toml", "\n[mining]\nenabled = true\nK = 4\nlabels = \"labels\"\n");
    ok(&aplearn(&["mine", "--config", p(&cfg), "--out", p(&labels)]));
    ok(&aplearn(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]));
}

#[test]
fn gradcheck_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.toml");
    std::fs::write(&cfg, "loss_batches = 4\nhistograms = 20\n").unwrap();
    let out = aplearn(&["gradcheck", "--config", p(&cfg)]);
    ok(&out);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = lines.iter().map(|v| v["name"].as_str().unwrap()).collect();
    let expected: Vec<&str> = aplearn_core::gradcheck::registry().iter().map(|c| c.name).collect();
    assert_eq!(names, expected);
    assert!(lines.iter().all(|v| v["passed"] == true && v["max_rel_err"].as_f64().unwrap() <= v["tolerance"].as_f64().unwrap()));

    let bad = aplearn(&["gradcheck", "--config", p(&cfg), "--corrupt", "model.linear"]);
    assert_eq!(bad.status.code(), Some(3));
    let lines: Vec<serde_json::Value> = String::from_utf8(bad.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for v in &lines {
        assert_eq!(v["passed"] == true, v["name"] != "model.linear", "{v}");
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "\n[loss]\nbinz = 5\n");
    let out = aplearn(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("binz"));
    assert_eq!(aplearn(&["train"]).status.code(), Some(1));
    assert_eq!(aplearn(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ubc.toml");
    std::fs::write(&cfg, "[data]\nsource = \"ubc\"\npath = \"nowhere\"\n").unwrap();
    let out = aplearn(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hot.toml", "");
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("seed = 9", "seed = 9\nlr0 = 1e300\nmomentum = 0.0")).unwrap();
    let out = aplearn(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
