use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use stancevote::backend::{
    self, message_digest, run_batch, BackendKind, BackendProfile, BatchJob, BatchOptions, ChatBackend, ChatError,
    ChatRequest, ExchangeKey, HttpBackend, Ledger, Script, ScriptEntry, ScriptedBackend, StochasticBackend,
    StochasticSettings, Turn,
};
use stancevote::{AnswerFormat, ChatMessage, Label, Mode, PromptId, PromptInstance};

fn jobs(records: usize) -> Vec<BatchJob> {
    (0..records)
        .flat_map(|r| {
            PromptId::RAR.into_iter().map(move |p| BatchJob {
                dataset: "d".into(),
                mode: Mode::ThreeClass,
                gold: Some(Label::ALL[r % 3]),
                instance: PromptInstance {
                    record_id: format!("r{r}"),
                    prompt_id: p,
                    messages: vec![ChatMessage::user(format!("sentence {r} for {p}"))],
                    format: p.answer_format(),
                },
                certainty: Some("How certain are you?".into()),
            })
        })
        .collect()
}

fn quiet(path: std::path::PathBuf, concurrency: usize) -> BatchOptions {
    BatchOptions { sleeper: Arc::new(|_| {}), ..BatchOptions::new(path, concurrency) }
}

struct Probe {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl ChatBackend for Probe {
    fn send(&self, _: &ChatRequest<'_>) -> Result<String, ChatError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(5));
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok("For 80".into())
    }
}

#[test]
fn concurrency_is_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let probe = Arc::new(Probe { in_flight: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
    let backends: Vec<(BackendProfile, Arc<dyn ChatBackend>)> =
        vec![(BackendProfile::new("probe", BackendKind::MockScripted), probe.clone())];
    let summary = run_batch(&backends, &jobs(6), 1, &quiet(dir.path().join("l.jsonl"), 3)).unwrap();
    assert_eq!(summary.issued, 48);
    let peak = probe.peak.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak in-flight {peak}");
}

#[test]
fn resume_only_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.jsonl");
    let backends: Vec<(BackendProfile, Arc<dyn ChatBackend>)> = vec![(
        BackendProfile::new("mock", BackendKind::MockStochastic),
        Arc::new(StochasticBackend::new(StochasticSettings::default(), 9)),
    )];
    let partial = BatchOptions { max_exchanges: Some(21), ..quiet(path.clone(), 4) };
    let first = run_batch(&backends, &jobs(5), 2, &partial).unwrap();
    assert!(first.interrupted);
    let before = std::fs::read(&path).unwrap();
    let second = run_batch(&backends, &jobs(5), 2, &quiet(path.clone(), 4)).unwrap();
    assert_eq!(second.skipped, 21);
    assert_eq!(first.issued + second.issued, 5 * 4 * 2 * 2);
    let after = std::fs::read(&path).unwrap();
    assert!(after.starts_with(&before), "resume rewrote existing ledger bytes");
    assert_eq!(Ledger::load(&path).unwrap().len(), 80);
}

#[test]
fn torn_tail_is_discarded_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.jsonl");
    let backends: Vec<(BackendProfile, Arc<dyn ChatBackend>)> = vec![(
        BackendProfile::new("mock", BackendKind::MockStochastic),
        Arc::new(StochasticBackend::new(StochasticSettings::default(), 9)),
    )];
    run_batch(&backends, &jobs(1), 1, &BatchOptions { max_exchanges: Some(3), ..quiet(path.clone(), 1) }).unwrap();
    std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"schema\":\"stancev").unwrap();
    assert_eq!(Ledger::load(&path).unwrap().len(), 3);
    run_batch(&backends, &jobs(1), 1, &quiet(path.clone(), 1)).unwrap();
    let ledger = Ledger::load(&path).unwrap();
    assert_eq!(ledger.len(), 8);
    assert!(std::fs::read_to_string(&path).unwrap().lines().all(|l| l.ends_with('}')));
}

#[test]
fn scripted_digest_lookup() {
    let messages = vec![ChatMessage::user("Is this for or against?")];
    let mut script = Script::default();
    script.by_digest.insert(message_digest(&messages), ScriptEntry::Text("Against".into()));
    script.by_key.insert("r1/P1/answer".into(), ScriptEntry::Text("For".into()));
    let backend = ScriptedBackend::new(script);
    let key = |record: &str| ExchangeKey {
        backend: "s".into(),
        dataset: "d".into(),
        record_id: record.into(),
        prompt_id: PromptId::P1,
        repeat: 0,
        turn: Turn::Answer,
    };
    let send = |k: &ExchangeKey, m: &[ChatMessage]| {
        backend.send(&ChatRequest { key: k, messages: m, gold: None, mode: Mode::ThreeClass, format: AnswerFormat::Words })
    };
    assert_eq!(send(&key("r1"), &messages).unwrap(), "Against");
    assert_eq!(send(&key("r1"), &[ChatMessage::user("other")]).unwrap(), "For");
    assert!(matches!(send(&key("r2"), &[ChatMessage::user("other")]), Err(ChatError::Fatal(_))));
}

/// Serves canned HTTP responses in order and records each request head.
fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut heads = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                head.push_str(&line);
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            head.push_str(&String::from_utf8(payload).unwrap());
            heads.push(head);
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        heads
    });
    (format!("http://{addr}/v1"), handle)
}

#[test]
fn http_retries_rate_limits_then_succeeds() {
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Against"}}]}"#.to_string();
    let limited = r#"{"error":"slow down"}"#.to_string();
    let (endpoint, server) = serve(vec![(429, limited.clone()), (429, limited), (200, ok)]);
    std::env::set_var("STANCEVOTE_TEST_TOKEN", "sekrit");
    let mut profile = BackendProfile::new("http", BackendKind::HttpChat);
    profile.endpoint = Some(endpoint);
    profile.model = Some("test-model".into());
    profile.credential_env = Some("STANCEVOTE_TEST_TOKEN".into());
    profile.timeout_secs = 10;
    let http = HttpBackend::from_profile(&profile).unwrap();
    let key = ExchangeKey {
        backend: "http".into(),
        dataset: "d".into(),
        record_id: "r".into(),
        prompt_id: PromptId::P3,
        repeat: 0,
        turn: Turn::Answer,
    };
    let messages = [ChatMessage::user("q")];
    let request = ChatRequest { key: &key, messages: &messages, gold: None, mode: Mode::ThreeClass, format: AnswerFormat::Words };
    let slept = Mutex::new(Vec::new());
    let out = backend::chat(&http, &profile, &request, &|d| slept.lock().unwrap().push(d)).unwrap();
    assert_eq!((out.text.as_str(), out.attempts), ("Against", 3));
    assert_eq!(slept.into_inner().unwrap().len(), 2);
    let heads = server.join().unwrap();
    assert_eq!(heads.len(), 3);
    assert!(heads[0].starts_with("POST /v1/chat/completions"));
    assert!(heads[0].to_ascii_lowercase().contains("authorization: bearer sekrit"));
    assert!(heads[0].contains("\"model\":\"test-model\""));
}

#[test]
fn http_missing_credential_is_config_error() {
    let mut profile = BackendProfile::new("http", BackendKind::HttpChat);
    profile.endpoint = Some("http://127.0.0.1:1".into());
    profile.model = Some("m".into());
    profile.credential_env = Some("STANCEVOTE_TEST_UNSET_VARIABLE".into());
    let err = HttpBackend::from_profile(&profile).err().unwrap();
    assert!(err.to_string().contains("STANCEVOTE_TEST_UNSET_VARIABLE"));
}
