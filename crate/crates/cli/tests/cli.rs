use std::path::Path;
use std::process::{Command, Output};

fn transfir(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transfir"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn kv(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn small_synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", "ds", "--timestamps", "20", "--entities-per-type", "6"];
    args.extend_from_slice(extra);
    let o = transfir(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "ds", "--profile", "test", "--out", out];
    args.extend_from_slice(extra);
    transfir(&args, dir)
}

#[test]
fn ingest_counts_match_generator() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &["--format", "kv"]);
    let o = transfir(&["ingest", "--data", "ds", "--format", "kv"], tmp.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(kv(&out, "entities").as_deref(), Some("24"));
    assert_eq!(kv(&out, "relations").as_deref(), Some("8"));
    assert_eq!(kv(&out, "timestamps").as_deref(), Some("20"));
    assert_eq!(kv(&out, "emerging_fraction").as_deref(), Some("0.25"));
    assert_eq!(kv(&out, "train").as_deref(), Some("0..10"));
}

#[test]
fn missing_input_exits_2_and_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = transfir(&["ingest", "--data", "absent_dir"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent_dir"), "{}", stderr(&o));
}

#[test]
fn split_files_reload_to_the_same_graph() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    assert!(transfir(&["split", "--data", "ds", "--out", "parts"], tmp.path()).status.success());
    for f in ["train.txt", "valid.txt", "test.txt"] {
        assert!(tmp.path().join("parts").join(f).exists());
    }
    let a = stdout(&transfir(&["ingest", "--data", "ds", "--format", "kv"], tmp.path()));
    let b = stdout(&transfir(&["ingest", "--data", "parts", "--format", "kv"], tmp.path()));
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    let o = train(tmp.path(), "run", &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("run/checkpoint.tfir").exists());
    let log = std::fs::read_to_string(tmp.path().join("run/train.log")).unwrap();
    assert!(!log.contains("epoch=1"));
    assert!(log.lines().last().unwrap().starts_with("best_epoch=0"));
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    for out in ["a", "b"] {
        let o = train(tmp.path(), out, &["--epochs", "2", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: &str| std::fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("a/checkpoint.tfir"), read("b/checkpoint.tfir"));
    assert_eq!(read("a/train.log"), read("b/train.log"));
    let eval = |p: &str| stdout(&transfir(&["eval", "--data", "ds", "--checkpoint", p, "--format", "kv"], tmp.path()));
    assert_eq!(eval("a/checkpoint.tfir"), eval("b/checkpoint.tfir"));
}

#[test]
fn log_is_append_only() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    train(tmp.path(), "run", &["--epochs", "1"]);
    let first = std::fs::read_to_string(tmp.path().join("run/train.log")).unwrap();
    train(tmp.path(), "run", &["--epochs", "1"]);
    let second = std::fs::read_to_string(tmp.path().join("run/train.log")).unwrap();
    assert!(second.starts_with(&first));
    assert_eq!(second.matches("best_epoch=").count(), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    std::fs::write(tmp.path().join("cfg"), "# comment\nepochs = 0\nclusters = 4\nwindow = 5\n").unwrap();
    let o = train(tmp.path(), "run", &["--config", "cfg", "--clusters", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(tmp.path().join("run/train.log")).unwrap();
    let header = log.lines().next().unwrap();
    assert!(header.contains(" clusters=3 "), "{header}");
    assert!(header.contains(" window=5 "), "{header}");
    assert!(header.contains(" epochs=0 "), "{header}");

    std::fs::write(tmp.path().join("bad"), "epochs = 0\nnot_a_key = 1\n").unwrap();
    let o = train(tmp.path(), "run2", &["--config", "bad"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn empty_mode_reports_zero_queries() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &["--emergence", "0"]);
    assert!(train(tmp.path(), "run", &["--epochs", "0"]).status.success());
    let o = transfir(
        &["eval", "--data", "ds", "--checkpoint", "run/checkpoint.tfir", "--modes", "emerging", "--format", "kv"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(kv(&out, "emerging.n_queries").as_deref(), Some("0"));
    assert!(!out.contains("NaN"));

    let o = transfir(
        &["diagnose", "--data", "ds", "--checkpoint", "run/checkpoint.tfir", "--format", "kv"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(kv(&stdout(&o), "diagnostic").is_some());
}

#[test]
fn eval_ablation_and_diagnose_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    assert!(train(tmp.path(), "run", &["--epochs", "1"]).status.success());
    let o = transfir(
        &[
            "eval", "--data", "ds", "--checkpoint", "run/checkpoint.tfir", "--ablate", "no-transfer",
            "--format", "kv", "--report", "report.kv", "--threads", "2",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(tmp.path().join("report.kv")).unwrap();
    assert_eq!(report, stdout(&o));
    let h3: f64 = kv(&report, "vanilla.average.hits3").unwrap().parse().unwrap();
    let h10: f64 = kv(&report, "vanilla.average.hits10").unwrap().parse().unwrap();
    assert!(h3 <= h10);

    let o = transfir(&["diagnose", "--data", "ds", "--checkpoint", "run/checkpoint.tfir"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let proj = std::fs::read_to_string(tmp.path().join("projection.tsv")).unwrap();
    assert_eq!(proj.lines().count(), 1 + 24);
    assert!(stdout(&o).contains("collapse_ratio"));
}

#[test]
fn incompatible_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    assert!(train(tmp.path(), "run", &["--epochs", "0"]).status.success());
    let path = tmp.path().join("run/checkpoint.tfir");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = bytes[4].wrapping_add(1);
    std::fs::write(&path, bytes).unwrap();
    let o = transfir(&["eval", "--data", "ds", "--checkpoint", "run/checkpoint.tfir"], tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), &[]);
    let o = train(tmp.path(), "run", &["--epochs", "3", "--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("timestamp"), "{}", stderr(&o));
}
