use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stancevote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stancevote")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/experiment.toml")
}

fn write_config(dir: &Path, dataset: &str, backend: &str) -> PathBuf {
    let records: String = (0..6)
        .map(|i| {
            let gold = ["For", "Against", "NoArgument"][i % 3];
            format!(
                "{{\"id\":\"r{i}\",\"topic\":\"abortion\",\"text\":\"Sentence {i}.\",\"thesis\":null,\"gold\":\"{gold}\",\"source\":\"t\"}}\n"
            )
        })
        .collect();
    std::fs::write(dir.join("records.jsonl"), records).unwrap();
    let path = dir.join("experiment.toml");
    std::fs::write(
        &path,
        format!(
            r#"seed = 3
output_dir = "out"

[[datasets]]
name = "toy"
mode = "three_class"
path = "{dataset}"
skip_trim = true
format = {{ kind = "canonical" }}

{backend}
"#
        ),
    )
    .unwrap();
    path
}

const STOCHASTIC: &str = "[[backends]]\nname = \"mock\"\nkind = \"mock_stochastic\"\n";

#[test]
fn full_pipeline_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let config = demo_config();
    let common = ["--config", config.to_str().unwrap(), "--out", out.path().to_str().unwrap(), "--repeats", "2"];
    for command in ["ingest", "sample", "dry-run", "run", "vote", "ablate", "kappa", "report"] {
        let result = stancevote(&[&[command][..], &common[..]].concat());
        assert_eq!(code(&result), 0, "{command}: {}", String::from_utf8_lossy(&result.stderr));
    }
    for file in ["reports/report.json", "reports/summary.tsv", "reports/kappa.tsv", "results/results.jsonl", "ledgers/run.jsonl"] {
        assert!(out.path().join(file).is_file(), "{file} missing");
    }
    let dry = stancevote(&[&["dry-run"][..], &common[..]].concat());
    assert!(String::from_utf8_lossy(&dry.stdout).contains("total requests: 0"));
}

#[test]
fn filters_and_prompt_override() {
    let out = tempfile::tempdir().unwrap();
    let config = demo_config();
    let base = ["--config", config.to_str().unwrap(), "--out", out.path().to_str().unwrap()];
    assert_eq!(code(&stancevote(&[&["sample"][..], &base[..]].concat())), 0);
    let dry = stancevote(&[&["dry-run", "--dataset", "pairs", "--prompts", "P1,P3", "--repeats", "1", "--model", "mock"][..], &base[..]].concat());
    assert_eq!(code(&dry), 0);
    // 40 records, two prompts, answer plus certainty.
    assert!(String::from_utf8_lossy(&dry.stdout).contains("total requests: 160"), "{}", String::from_utf8_lossy(&dry.stdout));
}

#[test]
fn config_errors_exit_one() {
    assert_eq!(code(&stancevote(&["run"])), 1);
    assert_eq!(code(&stancevote(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"many\"\n").unwrap();
    assert_eq!(code(&stancevote(&["sample", "--config", bad.to_str().unwrap()])), 1);
    let config = write_config(dir.path(), "records.jsonl", STOCHASTIC);
    let unknown = stancevote(&["sample", "--config", config.to_str().unwrap(), "--dataset", "nope"]);
    assert_eq!(code(&unknown), 1);
    assert_eq!(code(&stancevote(&["sample", "--config", config.to_str().unwrap(), "--repeats", "0"])), 1);
    assert_eq!(code(&stancevote(&["--help"])), 0);
}

#[test]
fn io_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&stancevote(&["sample", "--config", missing.to_str().unwrap()])), 2);
    let config = write_config(dir.path(), "no-such-file.jsonl", STOCHASTIC);
    assert_eq!(code(&stancevote(&["sample", "--config", config.to_str().unwrap()])), 2);
    let config = write_config(dir.path(), "records.jsonl", STOCHASTIC);
    assert_eq!(code(&stancevote(&["report", "--config", config.to_str().unwrap()])), 2);
}

#[test]
fn backend_exhaustion_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("script.json"), r#"{"default":{"error":"transient"}}"#).unwrap();
    let backend = "[[backends]]\nname = \"flaky\"\nkind = \"mock_scripted\"\nscript = \"script.json\"\nmax_attempts = 2\nbackoff = { initial_ms = 0, multiplier = 1.0, max_ms = 0 }\n";
    let config = write_config(dir.path(), "records.jsonl", backend);
    let config = config.to_str().unwrap();
    assert_eq!(code(&stancevote(&["sample", "--config", config])), 0);
    let run = stancevote(&["run", "--config", config]);
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(dir.path().join("out/results/results.jsonl").is_file());

    std::fs::write(dir.path().join("script.json"), r#"{"default":{"error":"auth"}}"#).unwrap();
    assert_eq!(code(&stancevote(&["run", "--config", config, "--resume", "false"])), 3);
}
