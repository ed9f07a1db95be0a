use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "joints": 4,
  "vertices": 30,
  "frames": 40,
  "source_videos": 2,
  "source_frames": 30,
  "hmr": {"feature_dim": 16, "hidden_dim": 12, "num_hidden_layers": 1, "num_joints": 4},
  "md": {"window": 9, "pose_dim": 24, "blocks": 1},
  "hmr_pretrain": {"epochs": 2},
  "md_pretrain": {"steps": 10},
  "adapt": {"cycles": 2, "batch": 16}
}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cycleadapt"));
    cmd.env_remove("CYCLEADAPT_THREADS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header, &csv::StringRecord::from(vec!["cycle", "source", "mpjpe", "pa_mpjpe", "mpvpe", "accel"]));
    reader.records().map(Result::unwrap).collect()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

#[test]
fn adapt_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["adapt", "--config", s(&config), "--seed", "3", "--out", s(out)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    let names: Vec<String> = ta.iter().map(|(p, _)| p.to_string_lossy().replace('\\', "/")).collect();
    for expected in ["metrics.csv", "config.json", "checkpoints/cycle_01/hmr.bin", "checkpoints/cycle_02/md.bin"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }

    let text = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(!text.contains('\r'));
    let rows = records(&a.join("metrics.csv"));
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect();
    let expected: Vec<(String, String)> =
        [("0", "hmrnet"), ("1", "hmrnet"), ("1", "store"), ("2", "hmrnet"), ("2", "store")].iter().map(|(c, s)| (c.to_string(), s.to_string())).collect();
    assert_eq!(keys, expected);
    for r in &rows {
        for field in r.iter().skip(2) {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite() && v >= 0.0);
            let digits = field.trim_start_matches(['0', '.']).chars().filter(char::is_ascii_digit).count();
            assert!(digits <= 6, "{field}");
        }
    }

    ok(&["adapt", "--config", s(&config), "--seed", "4", "--out", s(&b)]);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn file_pipeline_matches_the_logged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    let nets = dir.path().join("nets");
    let run_dir = dir.path().join("run");
    ok(&["synth", "--config", s(&config), "--seed", "1", "--out", s(&data)]);
    for f in ["source_00.jsonl", "source_01.jsonl", "source_00.gt.jsonl", "target.jsonl", "target.gt.jsonl", "config.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    ok(&["pretrain", "--config", s(&config), "--seed", "1", "--data", s(&data), "--out", s(&nets)]);
    assert!(nets.join("hmr.bin").exists() && nets.join("md.bin").exists());
    ok(&["adapt", "--config", s(&config), "--seed", "1", "--data", s(&data), "--nets", s(&nets), "--out", s(&run_dir)]);

    // From files and from the seed alone, the run is the same.
    let direct = dir.path().join("direct");
    ok(&["adapt", "--config", s(&config), "--seed", "1", "--out", s(&direct)]);
    assert_eq!(fs::read(run_dir.join("metrics.csv")).unwrap(), fs::read(direct.join("metrics.csv")).unwrap());

    let scored = dir.path().join("eval.csv");
    let checkpoint = run_dir.join("checkpoints").join("cycle_02");
    ok(&[
        "eval", "--config", s(&config), "--checkpoint", s(&checkpoint), "--video", s(&data.join("target.jsonl")), "--md", s(&checkpoint), "--out", s(&scored),
    ]);
    let logged = records(&run_dir.join("metrics.csv"));
    let last_hmr = logged.iter().rev().find(|r| &r[1] == "hmrnet").unwrap();
    let eval_rows = records(&scored);
    assert_eq!(eval_rows.len(), 2);
    assert_eq!(eval_rows[0].iter().skip(2).collect::<Vec<_>>(), last_hmr.iter().skip(2).collect::<Vec<_>>());
    assert_eq!(&eval_rows[1][1], "store");

    let stdout = ok(&["eval", "--config", s(&config), "--checkpoint", s(&checkpoint.join("hmr.bin")), "--video", s(&data.join("target.jsonl"))]).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), 2);
}

#[test]
fn online_and_flagged_runs_log_their_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let online = dir.path().join("online");
    ok(&["adapt", "--config", s(&config), "--online", "--out", s(&online)]);
    let rows = records(&online.join("metrics.csv"));
    assert_eq!(rows.iter().map(|r| (r[0].to_string(), r[1].to_string())).collect::<Vec<_>>(), vec![("0".into(), "hmrnet".into()), ("1".into(), "hmrnet".into())]);
    assert!(online.join("checkpoints/final/hmr.bin").exists());

    let flagged = dir.path().join("flagged");
    ok(&["adapt", "--config", s(&config), "--random-init", "--no-3d-loss", "--unweighted-2d", "--gaussian-filter", "2", "--out", s(&flagged)]);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(flagged.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["flags"]["random_init"], true);
    assert_eq!(echo["config"]["adapt"]["no_3d_loss"], true);
    assert_eq!(echo["config"]["adapt"]["weighted_2d"], false);
    assert_eq!(echo["config"]["adapt"]["refiner"]["kind"], "gaussian_filter");
}

#[test]
fn ablate_table2_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("ablate");
    ok(&["ablate", "--config", s(&config), "--suite", "table2", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "suite,variant,seed,mpjpe,pa_mpjpe,mpvpe,accel");
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["no_adapt", "2d_only", "3d_noncyclic", "full_cyclic"]);

    // Parallel seeds give the same file as sequential ones.
    let (seq, par) = (dir.path().join("seq"), dir.path().join("par"));
    ok(&["ablate", "--config", s(&config), "--suite", "table4,pretraining", "--seeds", "0,1", "--out", s(&seq)]);
    let out2 = bin()
        .args(["ablate", "--config", s(&config), "--suite", "table4,pretraining", "--seeds", "0,1", "--out", s(&par)])
        .env("CYCLEADAPT_THREADS", "2")
        .output()
        .unwrap();
    assert!(out2.status.success());
    let seq_text = fs::read_to_string(seq.join("ablation.csv")).unwrap();
    assert_eq!(seq_text, fs::read_to_string(par.join("ablation.csv")).unwrap());
    assert_eq!(seq_text.lines().count(), 1 + 2 * 4);
}

#[test]
fn user_errors_exit_with_1_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["adapt", "--config", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"frames": 10, "surprise": 1}"#).unwrap();
    assert_eq!(run(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("y"))]).status.code(), Some(1));

    let invalid = dir.path().join("invalid.json");
    fs::write(&invalid, r#"{"adapt": {"batch": 0}}"#).unwrap();
    assert_eq!(run(&["adapt", "--config", s(&invalid), "--out", s(&dir.path().join("z"))]).status.code(), Some(1));

    let config = small_config(dir.path());
    let out = bin().args(["synth", "--config", s(&config), "--out", s(&dir.path().join("w"))]).env("CYCLEADAPT_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CYCLEADAPT_THREADS"));

    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&config), "--out", s(&data)]);
    let target = data.join("target.jsonl");
    let text = fs::read_to_string(&target).unwrap();
    fs::write(&target, &text[..text.len() / 3]).unwrap();
    let out = run(&["adapt", "--config", s(&config), "--data", s(&data), "--random-init", "--out", s(&dir.path().join("v"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target.jsonl"));

    let out = run(&["ablate", "--config", s(&config), "--suite", "table9", "--out", s(&dir.path().join("u"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["eval", "--config", s(&config), "--checkpoint", s(&data), "--video", s(&target)]);
    assert_eq!(out.status.code(), Some(1));
}
