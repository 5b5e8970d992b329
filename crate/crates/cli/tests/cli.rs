use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const WORDS: &[&str] = &[
    "a", "educação", "é", "direito", "de", "todos", "dever", "do", "estado", "sociedade",
    "precisa", "combater", "desigualdade", "jovens", "merecem", "oportunidades", "escolas",
];
const GRID: [i64; 6] = [0, 40, 80, 120, 160, 200];

fn aes(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aes"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_corpus(dir: &Path, name: &str, n: usize) -> PathBuf {
    let mut state = 12345u64;
    let mut next = |m: usize| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize % m
    };
    let mut text = String::new();
    for i in 0..n {
        let essay: Vec<&str> = (0..12).map(|_| WORDS[next(WORDS.len())]).collect();
        let scores: Vec<i64> = (0..5).map(|_| GRID[next(6)]).collect();
        let line = serde_json::json!({
            "id": format!("e{i}"),
            "prompt": (["Educação no Brasil", "Saúde pública"][i % 2]),
            "essay": essay.join(" "),
            "scores": scores,
        });
        text.push_str(&format!("{line}\n"));
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn trained(dir: &Path) {
    write_corpus(dir, "data.jsonl", 12);
    let o = aes(dir, &["build-vocab", "--input", "data.jsonl", "--size", "120", "--min-freq", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = aes(
        dir,
        &[
            "train", "--train", "data.jsonl", "--val", "data.jsonl", "--vocab", "vocab.txt",
            "--model-config", "toy", "--max-len", "24", "--epochs", "2", "--batch-size", "4",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn every_subcommand_documents_defaults() {
    let dir = TempDir::new().unwrap();
    let top = aes(dir.path(), &["--help"]);
    assert_eq!(top.status.code(), Some(0));
    for sub in ["stats", "split", "build-vocab", "train", "eval", "score", "grad-check"] {
        let o = aes(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let help = stdout(&o);
        assert!(help.contains("--seed") && help.contains("[default: 0]"), "{sub}");
    }
    let train = stdout(&aes(dir.path(), &["train", "--help"]));
    for flag in ["--epochs", "--batch-size", "--lr", "--weight-decay", "--out-checkpoint", "--history-out"] {
        let at = train.find(flag).unwrap();
        assert!(train[at..].contains("[default:"), "{flag}");
    }
}

#[test]
fn split_writes_parts_and_manifest() {
    let dir = TempDir::new().unwrap();
    write_corpus(dir.path(), "d.jsonl", 40);
    let args = ["split", "--input", "d.jsonl", "--seed", "7", "--ratios", "0.70,0.15,0.15", "--out-dir", "out"];
    let o = aes(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let lines = |n: &str| fs::read_to_string(out.join(n)).unwrap().lines().count();
    assert_eq!((lines("train.jsonl"), lines("val.jsonl"), lines("test.jsonl")), (28, 6, 6));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("split.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["counts"], serde_json::json!([28, 6, 6]));
    let mut ids: Vec<String> = ["train", "val", "test"]
        .iter()
        .flat_map(|p| manifest[p].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()))
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 40);

    let first = fs::read(out.join("train.jsonl")).unwrap();
    let o = aes(dir.path(), &args);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("train.jsonl")).unwrap(), first);
}

#[test]
fn stats_prints_grade_table() {
    let dir = TempDir::new().unwrap();
    write_corpus(dir.path(), "d.jsonl", 30);
    let o = aes(dir.path(), &["stats", "--input", "d.jsonl"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("score,c1,c2,c3,c4,c5"));
    let mut sums = [0usize; 5];
    for line in lines {
        for (s, cell) in sums.iter_mut().zip(line.split(',').skip(1)) {
            *s += cell.parse::<usize>().unwrap();
        }
    }
    assert_eq!(sums, [30; 5]);
}

#[test]
fn train_eval_score_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    trained(d);
    let history = fs::read_to_string(d.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_rmse_c1,"));
    assert_eq!(history.lines().count(), 3);

    let o = aes(d, &["eval", "--checkpoint", "model.aesm", "--vocab", "vocab.txt", "--data", "data.jsonl", "--report-out", "report.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("QWK"));
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,c1,c2,c3,c4,c5,total\nqwk,"));

    fs::write(d.join("p.txt"), "Educação no Brasil\n").unwrap();
    fs::write(d.join("e.txt"), "a educação é direito de todos\n").unwrap();
    let o = aes(d, &["score", "--checkpoint", "model.aesm", "--vocab", "vocab.txt", "--prompt-file", "p.txt", "--essay-file", "e.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let row: Vec<u32> = text.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(row.len(), 6);
    assert!(row[..5].iter().all(|g| g % 40 == 0 && *g <= 200));
    assert_eq!(row[..5].iter().sum::<u32>(), row[5]);
}

#[test]
fn same_seed_same_checkpoint() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    trained(a.path());
    trained(b.path());
    assert_eq!(
        fs::read(a.path().join("model.aesm")).unwrap(),
        fs::read(b.path().join("model.aesm")).unwrap()
    );
}

#[test]
fn config_file_fills_flags_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_corpus(d, "data.jsonl", 8);
    assert!(aes(d, &["build-vocab", "--input", "data.jsonl", "--size", "120", "--min-freq", "1"]).status.success());
    fs::write(
        d.join("run.json"),
        r#"{"train": "data.jsonl", "val": "data.jsonl", "vocab": "vocab.txt", "model_config": "toy",
            "max_len": 24, "epochs": 1, "history_out": "h.csv"}"#,
    )
    .unwrap();
    let o = aes(d, &["--config", "run.json", "train", "--epochs", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.join("h.csv")).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(aes(d, &["stats", "--input", "missing.jsonl"]).status.code(), Some(2));
    assert_eq!(aes(d, &["stats", "--bogus"]).status.code(), Some(1));
    fs::write(d.join("bad.jsonl"), r#"{"id":"x","prompt":"p","essay":"e","scores":[0,40,80,120,130]}"#).unwrap();
    let o = aes(d, &["stats", "--input", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("c5"));
    write_corpus(d, "d.jsonl", 5);
    assert_eq!(aes(d, &["split", "--input", "d.jsonl", "--ratios", "0.5,0.5,0.5"]).status.code(), Some(1));
}

#[test]
fn grad_check_passes_at_a_conditioned_point() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_corpus(d, "data.jsonl", 4);
    assert!(aes(d, &["build-vocab", "--input", "data.jsonl", "--size", "120", "--min-freq", "1"]).status.success());
    let o = aes(
        d,
        &[
            "--precision", "f64", "grad-check", "--data", "data.jsonl", "--vocab", "vocab.txt",
            "--weight-scale", "10", "--exclude", "attention.key.bias", "--threshold", "1e-4",
        ],
    );
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));
}
