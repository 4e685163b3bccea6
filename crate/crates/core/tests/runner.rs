use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use stancevote::backend::{BackendKind, BackendProfile, Ledger, Script, ScriptEntry, StochasticSettings, Turn};
use stancevote::corpus::{self, DatasetSpec, SourceFormat};
use stancevote::ensemble::Algorithm;
use stancevote::metrics::MacroPolicy;
use stancevote::runner::{read_results, BackendFactory, ExperimentConfig, RowStatus, Runner, RunnerError};
use stancevote::{Label, Mode, PromptId, Record};

fn records(n: usize) -> Vec<Record> {
    (0..n)
        .map(|i| Record {
            id: format!("r{i}"),
            topic: "abortion".into(),
            text: format!("Sentence number {i} about the topic."),
            thesis: None,
            gold: Label::ALL[i % 3],
            source: "test".into(),
        })
        .collect()
}

fn config(dir: &Path, recs: &[Record], backend: BackendProfile) -> ExperimentConfig {
    let data = dir.join("source.jsonl");
    corpus::write_records(&data, recs).unwrap();
    let mut spec = DatasetSpec::new("toy", Mode::ThreeClass, data, SourceFormat::Canonical);
    spec.skip_trim = true;
    ExperimentConfig {
        seed: 17,
        output_dir: dir.join("out"),
        prompts: PromptId::RAR.to_vec(),
        certainty: true,
        repeats: 1,
        voting: Algorithm::ALL.to_vec(),
        concurrency: 2,
        macro_policy: MacroPolicy::default(),
        templates: None,
        theses: None,
        datasets: vec![spec],
        backends: vec![backend],
    }
}

fn stochastic(accuracy: f64) -> BackendProfile {
    let mut p = BackendProfile::new("mock", BackendKind::MockStochastic);
    p.stochastic = Some(StochasticSettings { accuracy, ..Default::default() });
    p
}

fn scripted(dir: &Path, recs: &[Record]) -> BackendProfile {
    let mut script = Script::default();
    for r in recs {
        for p in PromptId::RAR {
            let answer = match p.answer_format() {
                stancevote::AnswerFormat::Letters => r.gold.letter().to_string(),
                _ if r.gold == Label::NoArgument => "No argument".to_string(),
                _ => r.gold.to_string(),
            };
            script.by_key.insert(format!("{}/{p}/answer", r.id), ScriptEntry::Text(answer));
            script.by_key.insert(format!("{}/{p}/certainty", r.id), ScriptEntry::Text("I am 90% certain.".into()));
        }
    }
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::to_string(&script).unwrap()).unwrap();
    let mut p = BackendProfile::new("scripted", BackendKind::MockScripted);
    p.script = Some(path);
    p
}

#[test]
fn scripted_run_writes_answer_and_certainty_exchanges() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(4);
    let runner = Runner::new(config(dir.path(), &recs, scripted(dir.path(), &recs)));
    runner.sample().unwrap();
    assert_eq!(runner.dry_run().unwrap().total, 32);
    let summary = runner.run().unwrap();
    assert_eq!((summary.batch.issued, summary.rows, summary.failed_exchanges), (32, 16, 0));
    let ledger = Ledger::load(&runner.config.ledger_path()).unwrap();
    let turns = ledger.exchanges().iter().fold(BTreeMap::new(), |mut m, e| {
        *m.entry(e.key.turn).or_insert(0) += 1;
        m
    });
    assert_eq!(turns, BTreeMap::from([(Turn::Answer, 16), (Turn::Certainty, 16)]));
    let rows = read_results(&runner.config.results_path()).unwrap();
    assert!(rows.iter().all(|r| r.prediction.label == Some(r.gold) && r.prediction.certainty == Some(0.9)));
    assert!(rows.iter().all(|r| r.answer_status == RowStatus::Ok && r.certainty_status == Some(RowStatus::Ok)));
    assert_eq!(runner.dry_run().unwrap().total, 0);
    assert_eq!(runner.run().unwrap().batch.issued, 0);
}

#[test]
fn unknown_prompt_in_config_is_exit_1() {
    let text = r#"
seed = 1
prompts = ["P1", "P9"]
datasets = []
backends = []
"#;
    let err = ExperimentConfig::from_toml_str(text).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn kappa_needs_two_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(config(dir.path(), &records(6), stochastic(0.7)));
    runner.sample().unwrap();
    runner.run().unwrap();
    let err = runner.kappa().unwrap_err();
    assert!(err.to_string().contains("repeats"), "{err}");
    assert!(runner.report().unwrap().kappa.is_none());
}

#[test]
fn report_never_touches_backends() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &records(9), stochastic(0.7));
    cfg.repeats = 2;
    let runner = Runner::new(cfg.clone());
    runner.sample().unwrap();
    runner.run().unwrap();
    let expected = runner.report().unwrap();
    let panicking: BackendFactory = Arc::new(|_, _, _| panic!("report must not build backends"));
    let offline = Runner::new(cfg).with_factory(panicking);
    assert_eq!(offline.report().unwrap(), expected);
    offline.vote().unwrap();
    offline.ablate().unwrap();
    offline.kappa().unwrap();
}

#[test]
fn voting_is_no_worse_than_the_weakest_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(config(dir.path(), &records(300), stochastic(0.7)));
    runner.sample().unwrap();
    runner.run().unwrap();
    let report = runner.report().unwrap();
    let worst = report
        .aggregate
        .cells
        .iter()
        .filter(|c| c.column == "zero_shot")
        .map(|c| c.accuracy)
        .fold(f64::INFINITY, f64::min);
    for alg in ["simple", "tiebreak", "weighted"] {
        let voted = report.aggregate.cells.iter().find(|c| c.method == alg).unwrap().accuracy;
        assert!(voted >= worst, "{alg}: {voted} < {worst}");
    }
}

#[test]
fn failed_exchanges_are_recorded_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(2);
    let mut backend = scripted(dir.path(), &recs);
    backend.max_attempts = 2;
    backend.backoff.initial_ms = 0;
    let script_path = backend.script.clone().unwrap();
    let mut script: Script = serde_json::from_str(&std::fs::read_to_string(&script_path).unwrap()).unwrap();
    script.by_key.insert(
        "r0/P1/answer".into(),
        serde_json::from_str::<ScriptEntry>(r#"{"error":"transient"}"#).unwrap(),
    );
    std::fs::write(&script_path, serde_json::to_string(&script).unwrap()).unwrap();
    let runner = Runner::new(config(dir.path(), &recs, backend));
    runner.sample().unwrap();
    let summary = runner.run().unwrap();
    assert_eq!(summary.failed_exchanges, 2);
    let rows = read_results(&runner.config.results_path()).unwrap();
    let failed = rows.iter().find(|r| r.record_id == "r0" && r.prompt_id == PromptId::P1).unwrap();
    assert_eq!((failed.answer_status, failed.certainty_status), (RowStatus::Failed, Some(RowStatus::Failed)));
    assert_eq!(failed.prediction.label, None);
}

#[test]
fn sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &records(90), stochastic(0.7));
    cfg.datasets[0].skip_trim = false;
    cfg.datasets[0].trim_target = 30;
    let runner = Runner::new(cfg.clone());
    let first = runner.sample().unwrap();
    let bytes = std::fs::read(cfg.sampled_path("toy")).unwrap();
    assert_eq!(runner.sample().unwrap(), first);
    assert_eq!(std::fs::read(cfg.sampled_path("toy")).unwrap(), bytes);
    assert_eq!(first[0].quotas, BTreeMap::from([(Label::For, 10), (Label::Against, 10), (Label::NoArgument, 10)]));
    cfg.seed += 1;
    Runner::new(cfg.clone()).sample().unwrap();
    assert_ne!(std::fs::read(cfg.sampled_path("toy")).unwrap(), bytes);
}

#[test]
fn oversized_target_names_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &records(10), stochastic(0.7));
    cfg.datasets[0].skip_trim = false;
    cfg.datasets[0].trim_target = 11;
    let err = Runner::new(cfg).sample().unwrap_err();
    assert!(matches!(err, RunnerError::Corpus { ref dataset, .. } if dataset == "toy"));
    assert!(err.to_string().contains("toy"));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn ukp_abortion_sample_matches_class_quotas() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("abortion.tsv");
    let mut tsv = String::from("topic\tretrievedUrl\tarchivedUrl\tsentenceHash\tsentence\tannotation\tset\n");
    let mut row = 0;
    for (annotation, n) in [("Argument_for", 680), ("Argument_against", 822), ("NoArgument", 2427)] {
        for _ in 0..n {
            tsv.push_str(&format!("abortion\tu\ta\th{row}\tSentence \"{row}\" here.\t{annotation}\ttrain\n"));
            row += 1;
        }
    }
    std::fs::write(&path, tsv).unwrap();
    let text = format!(
        r#"
seed = 5
output_dir = "{out}"

[[datasets]]
name = "abortion"
mode = "three_class"
path = "{path}"
format = {{ kind = "delimited", delimiter = "\t", has_header = true, quoting = false }}
columns = {{ id = "sentenceHash", topic = "topic", text = "sentence", gold = "annotation" }}

[[backends]]
name = "mock"
kind = "mock_stochastic"
"#,
        out = dir.path().join("out").display(),
        path = path.display()
    );
    let manifest = Runner::new(ExperimentConfig::from_toml_str(&text).unwrap()).sample().unwrap().remove(0);
    assert_eq!(manifest.ingested, 3929);
    assert_eq!(manifest.quotas, BTreeMap::from([(Label::For, 346), (Label::Against, 418), (Label::NoArgument, 1236)]));
    assert_eq!(manifest.records, 2000);
}

#[test]
fn filtered_run_keeps_other_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &records(6), stochastic(0.7));
    let mut second = cfg.datasets[0].clone();
    second.name = "other".into();
    cfg.datasets.push(second);
    let runner = Runner::new(cfg.clone());
    runner.sample().unwrap();
    runner.run().unwrap();
    let full = read_results(&cfg.results_path()).unwrap();
    assert_eq!(full.len(), 48);

    let mut narrowed = cfg.clone();
    narrowed.select_datasets(&["other".to_string()]).unwrap();
    let narrowed = Runner::new(narrowed);
    assert_eq!(narrowed.run().unwrap().rows, 24);
    assert_eq!(read_results(&cfg.results_path()).unwrap(), full);
    let report = narrowed.report().unwrap();
    assert!(report.aggregate.cells.iter().all(|c| c.dataset == "other"));
}
