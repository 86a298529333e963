use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn ssmrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmrec"))
        .args(args)
        .env_remove("SSMREC_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 60 users over 40 items with sparse, non-contiguous raw ids; every user
/// has between 8 and 15 items.
fn write_dataset(dir: &Path) -> PathBuf {
    let mut state: u64 = 12345;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    let mut text = String::new();
    for u in 0..60 {
        let want = 8 + next() % 8;
        let mut items = BTreeSet::new();
        while items.len() < want {
            items.insert(next() % 40);
        }
        text.push_str(&(u * 3 + 1).to_string());
        for i in items {
            text.push_str(&format!(" {}", i * 2));
        }
        text.push('\n');
    }
    let path = dir.join("data.txt");
    fs::write(&path, text).unwrap();
    path
}

const CONFIG: &str = r#"{
  "dim": 8,
  "batch_size": 64,
  "max_epochs": 4,
  "eval_every": 2,
  "learning_rate": 0.01,
  "loss": {"kind": "SSM", "similarity": "cosine"},
  "model": {"kind": "LightGCN", "layers": 1}
}"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_str().unwrap().replace('\\', "/"));
            }
        }
    }
    out
}

fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn stats_counts_a_pair_list() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("pairs.txt");
    fs::write(&path, "10 7\n10 9\n11 7\n\n12 3\n12 3\n").unwrap();
    let out = ssmrec(&["stats", "--input", s(&path), "--format", "pairs"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["users"], 3);
    assert_eq!(v["items"], 3);
    assert_eq!(v["interactions"], 4);
    assert!((v["density"].as_f64().unwrap() - 4.0 / 9.0).abs() < 1e-12);
}

#[test]
fn stats_on_adjacency_file() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let text = fs::read_to_string(&data).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
    let interactions: usize = rows.iter().map(|r| r.len() - 1).sum();
    let items: BTreeSet<&str> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();

    let out = ssmrec(&["stats", "--input", s(&data), "--format", "adjacency"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["users"], rows.len());
    assert_eq!(v["items"], items.len());
    assert_eq!(v["interactions"], interactions);
}

#[test]
fn stats_rejects_empty_file() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("empty.txt");
    fs::write(&path, "\n\n").unwrap();
    let out = ssmrec(&["stats", "--input", s(&path)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no interactions"), "{}", stderr(&out));
}

#[test]
fn bad_ids_and_flags_are_validation_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "1 2\nuser7 3\n").unwrap();
    let out = ssmrec(&["stats", "--input", s(&path), "--format", "pairs"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains(":2:"), "{}", stderr(&out));

    assert_eq!(code(&ssmrec(&["stats", "--input", s(&path), "--format", "csv"])), 1);
    assert_eq!(code(&ssmrec(&["stats", "--input", s(&dir.path().join("missing.txt"))])), 1);
    assert_eq!(code(&ssmrec(&["verify", "--suite", "everything"])), 1);
    assert_eq!(code(&ssmrec(&["frobnicate"])), 1);
}

#[test]
fn missing_dim_is_named() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), r#"{"loss": {"kind": "SSM"}, "model": {"kind": "MF"}}"#);
    let out_dir = dir.path().join("out");
    let out = ssmrec(&["train", "--config", s(&cfg), "--input", s(&data), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("`dim`"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn schema_errors_carry_the_field_path() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cases = [
        (r#"{"dim": 4, "loss": {"kind": "SSM", "temperature": "hot"}, "model": {"kind": "MF"}}"#, "loss.temperature"),
        (r#"{"dim": 4, "loss": {"kind": "SSM", "temperature": -1}, "model": {"kind": "MF"}}"#, "loss.temperature"),
        (r#"{"dim": 4, "loss": {"kind": "SSM"}, "model": {"kind": "MF", "depth": 2}}"#, "model"),
        (r#"{"dim": 0, "loss": {"kind": "SSM"}, "model": {"kind": "MF"}}"#, "dim"),
        (
            r#"{"dim": 4, "loss": {"kind": "BPR"}, "model": {"kind": "MF"}, "sampler": {"strategy": "in_batch"}}"#,
            "sampler.strategy",
        ),
    ];
    for (body, field) in cases {
        let cfg = write_config(dir.path(), body);
        let out = ssmrec(&["train", "--config", s(&cfg), "--input", s(&data), "--out-dir", s(&dir.path().join("o"))]);
        assert_eq!(code(&out), 1, "{body}");
        assert!(stderr(&out).contains(field), "{body}: {}", stderr(&out));
    }
}

#[test]
fn train_with_three_seeds() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = ssmrec(&[
        "train", "--config", s(&cfg), "--input", s(&data), "--seeds", "1,2,3", "--out-dir", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut recalls = Vec::new();
    for seed in [1, 2, 3] {
        let run = out_dir.join(format!("seed-{seed}"));
        assert!(run.join("embeddings.bin").is_file());
        let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
        assert!(history.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
        recalls.push(read_json(&run.join("report.json"))["recall"].as_f64().unwrap());
    }
    let mean = recalls.iter().sum::<f64>() / 3.0;
    let std = (recalls.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let agg = read_json(&out_dir.join("aggregate.json"));
    assert!((agg["recall"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((agg["recall"]["std"].as_f64().unwrap() - std).abs() < 1e-12);
    assert_eq!(agg["seeds"], serde_json::json!([1, 2, 3]));

    // every artifact appears exactly once in the manifest, with its hash
    let manifest = read_json(&out_dir.join("manifest.json"));
    let listed: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    let unique: BTreeSet<String> = listed.iter().map(|p| p.to_string()).collect();
    assert_eq!(unique.len(), listed.len());
    let mut on_disk = files_under(&out_dir);
    on_disk.remove("manifest.json");
    assert_eq!(unique, on_disk);
    for o in manifest["outputs"].as_array().unwrap() {
        assert_eq!(o["sha256"].as_str().unwrap(), sha256_file(&out_dir.join(o["path"].as_str().unwrap())));
    }
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap(), sha256_file(&data));
    assert_eq!(manifest["config"]["dim"], 8);
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2, 3]));

    let ids = fs::read_to_string(out_dir.join("user_ids.txt")).unwrap();
    assert_eq!(ids.lines().next(), Some("1 0"));
    assert_eq!(ids.lines().nth(1), Some("4 1"));
}

fn history_hashes(manifest: &Path) -> Vec<(String, String)> {
    read_json(manifest)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["path"].as_str().unwrap().ends_with("history.jsonl"))
        .map(|o| (o["path"].as_str().unwrap().to_string(), o["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn rerun_gives_identical_history() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path, threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssmrec"));
        cmd.args(["train", "--config", s(&cfg), "--input", s(&data), "--seeds", "5,6", "--out-dir", s(out)]);
        match threads {
            Some(t) => cmd.env("SSMREC_THREADS", t),
            None => cmd.env_remove("SSMREC_THREADS"),
        };
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run(&a, None);
    run(&b, Some("1"));
    let ha = history_hashes(&a.join("manifest.json"));
    assert_eq!(ha.len(), 2);
    assert_eq!(ha, history_hashes(&b.join("manifest.json")));
    assert_eq!(
        fs::read(a.join("seed-5/embeddings.bin")).unwrap(),
        fs::read(b.join("seed-5/embeddings.bin")).unwrap()
    );
}

#[test]
fn evaluate_reproduces_the_training_report() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = ssmrec(&["train", "--config", s(&cfg), "--input", s(&data), "--seeds", "4", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let eval_dir = dir.path().join("eval");
    let ckpt = out_dir.join("seed-4/embeddings.bin");
    let out = ssmrec(&[
        "evaluate", "--config", s(&cfg), "--input", s(&data), "--checkpoint", s(&ckpt), "--out-dir", s(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let trained = read_json(&out_dir.join("seed-4/report.json"));
    assert_eq!(printed, trained);
    for key in ["recall", "ndcg", "group_recall", "k", "users_evaluated", "users_skipped"] {
        assert!(printed.get(key).is_some(), "{key}");
    }
    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("recall,ndcg,"));
    assert!(eval_dir.join("manifest.json").is_file());

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = ssmrec(&["evaluate", "--config", s(&cfg), "--input", s(&data), "--checkpoint", s(&garbage)]);
    assert_eq!(code(&out), 1);
}

fn sweep_rows(out_dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            let cols: Vec<String> = l.split(',').map(str::to_string).collect();
            assert_eq!(cols.len(), header.len(), "{l}");
            cols
        })
        .collect()
}

#[test]
fn sweep_grids_have_expected_rows() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), &CONFIG.replace("\"max_epochs\": 4", "\"max_epochs\": 2"));
    let sweep = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["sweep", "--config", s(&cfg), "--input", s(&data), "--out-dir", s(&out_dir)];
        args.extend_from_slice(extra);
        let o = ssmrec(&args);
        (o, out_dir)
    };

    let (o, tau) = sweep("tau", &["--tau", "0.1,0.2,0.5,1.0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = sweep_rows(&tau);
    assert_eq!(rows.len(), 4);
    let temps: Vec<&str> = rows.iter().map(|r| r[7].as_str()).collect();
    assert_eq!(temps, ["0.1", "0.2", "0.5", "1"]);
    assert!(rows.iter().all(|r| r[12] == "ok"));

    let (o, sim) = sweep("sim", &["--similarity-grid"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels: Vec<String> = sweep_rows(&sim).iter().map(|r| r[1].clone()).collect();
    assert_eq!(labels, ["IP-IP", "IP-COS", "COS-IP", "COS-COS"]);

    let (o, prop) = sweep("prop", &["--propagation-grid", "--parallel", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = sweep_rows(&prop);
    assert_eq!(rows.len(), 6);
    let models: BTreeSet<(String, String, String)> =
        rows.iter().map(|r| (r[3].clone(), r[4].clone(), r[5].clone())).collect();
    assert_eq!(models.len(), 6);
    assert!(models.contains(&("SVDpp_item".into(), "1".into(), "0".into())));

    // the same points run one at a time give the same numbers
    let (o, seq) = sweep("prop-seq", &["--propagation-grid"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(sweep_rows(&seq), rows);
}

#[test]
fn sweep_cap_is_checked_before_running() {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = ssmrec(&[
        "sweep", "--config", s(&cfg), "--input", s(&data), "--out-dir", s(&out_dir),
        "--tau", "0.1,0.2,0.5,1.0", "--similarity-grid", "--max-points", "15",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("16 points"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn verify_dcg_passes() {
    let dir = TempDir::new().unwrap();
    let json = dir.path().join("dcg.json");
    let out = ssmrec(&["verify", "--suite", "dcg", "--json", s(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let records = read_json(&json);
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["status"], "pass");
    assert_eq!(records[0]["trials"], 10_000);
}

#[test]
fn corrupted_gradients_fail_verification() {
    let out = ssmrec(&["verify", "--suite", "gradients", "--corrupt-gradient"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("FAIL gradient_oracle"), "{}", stdout(&out));
}

#[test]
fn verify_all_writes_one_record_per_check() {
    let dir = TempDir::new().unwrap();
    let json = dir.path().join("all.json");
    let out = ssmrec(&["verify", "--suite", "all", "--json", s(&json)]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let records = read_json(&json);
    let records = records.as_array().unwrap();
    let names: BTreeSet<&str> = records.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), records.len());
    assert_eq!(stdout(&out).lines().count(), records.len());
    for r in records {
        for key in ["name", "paper_ref", "status", "max_error", "trials", "detail"] {
            assert!(r.get(key).is_some(), "{key} missing in {r}");
        }
    }
    for expected in ["gradient_oracle", "fixed_point_difference", "dcg_bound", "magnitude_formula"] {
        assert!(names.contains(expected), "{expected}");
    }
}
