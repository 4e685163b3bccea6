//! Bounded worker pool that drives prompt instances through backends.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use super::ledger::{Exchange, ExchangeStatus, Ledger, LedgerError, LedgerWriter, LEDGER_SCHEMA};
use super::{chat, BackendProfile, ChatBackend, ChatError, ChatRequest, ExchangeKey, Turn};
use crate::corpus::{Label, Mode};
use crate::parsing::AnswerFormat;
use crate::promptgen::{ChatMessage, PromptInstance};

/// Called between retry attempts. Tests pass a no-op.
pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// One prompt instance to send, plus the follow-up question if certainty
/// is requested for it.
#[derive(Debug, Clone)]
pub struct BatchJob {
    pub dataset: String,
    pub mode: Mode,
    pub gold: Option<Label>,
    pub instance: PromptInstance,
    /// Certainty question appended after the model's answer.
    pub certainty: Option<String>,
}

impl BatchJob {
    fn key(&self, backend: &str, repeat: u32, turn: Turn) -> ExchangeKey {
        ExchangeKey {
            backend: backend.to_string(),
            dataset: self.dataset.clone(),
            record_id: self.instance.record_id.clone(),
            prompt_id: self.instance.prompt_id,
            repeat,
            turn,
        }
    }
}

#[derive(Clone)]
pub struct BatchOptions {
    pub concurrency: usize,
    pub ledger_path: PathBuf,
    /// Stop after this many new exchanges. Simulates an interrupted run.
    pub max_exchanges: Option<usize>,
    pub sleeper: Sleeper,
    pub progress: bool,
}

impl BatchOptions {
    pub fn new(ledger_path: impl Into<PathBuf>, concurrency: usize) -> Self {
        BatchOptions {
            concurrency,
            ledger_path: ledger_path.into(),
            max_exchanges: None,
            sleeper: Arc::new(std::thread::sleep),
            progress: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchSummary {
    /// New exchanges written to the ledger.
    pub issued: usize,
    /// Exchanges already terminal in the ledger.
    pub skipped: usize,
    /// New exchanges whose status is failed.
    pub failed: usize,
    /// True when `max_exchanges` cut the batch short.
    pub interrupted: bool,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("concurrency must be at least 1")]
    Concurrency,
    #[error("{key}: {source}")]
    Auth {
        key: ExchangeKey,
        #[source]
        source: ChatError,
    },
}

struct Unit<'a> {
    backend: usize,
    job: &'a BatchJob,
    repeat: u32,
    /// Answer text already in the ledger; `Some` means only the certainty
    /// turn is outstanding.
    prior_answer: Option<Option<String>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn plan<'a>(
    profiles: &[&BackendProfile],
    jobs: &'a [BatchJob],
    repeats: u32,
    ledger: &Ledger,
) -> (Vec<Unit<'a>>, usize) {
    let mut units = Vec::new();
    let mut skipped = 0;
    for (b, profile) in profiles.iter().enumerate() {
        for repeat in 0..repeats {
            for job in jobs {
                let answer = ledger.get(&job.key(&profile.name, repeat, Turn::Answer));
                let certainty_done =
                    job.certainty.is_none() || ledger.contains(&job.key(&profile.name, repeat, Turn::Certainty));
                match answer {
                    None => units.push(Unit { backend: b, job, repeat, prior_answer: None }),
                    Some(done) => {
                        skipped += 1;
                        if certainty_done {
                            skipped += job.certainty.is_some() as usize;
                        } else {
                            let text = done.ok().then(|| done.response.clone());
                            units.push(Unit { backend: b, job, repeat, prior_answer: Some(text) });
                        }
                    }
                }
            }
        }
    }
    (units, skipped)
}

/// Number of exchanges a batch would still issue against `ledger`.
pub fn count_pending(profiles: &[BackendProfile], jobs: &[BatchJob], repeats: u32, ledger: &Ledger) -> usize {
    let refs: Vec<&BackendProfile> = profiles.iter().collect();
    plan(&refs, jobs, repeats, ledger)
        .0
        .iter()
        .map(|u| match u.prior_answer {
            None => 1 + u.job.certainty.is_some() as usize,
            Some(_) => 1,
        })
        .sum()
}

enum Event {
    Done(Exchange),
    Abort(BatchError),
}

/// Runs every (backend, job, repeat) not already terminal in the ledger.
///
/// Each unit is the answer exchange followed, when requested, by the
/// certainty exchange that replays the answer verbatim. Completed exchanges
/// go to a single writer, so ledger lines never interleave. An
/// authentication failure stops the batch and is returned as an error;
/// everything else ends up in the ledger as an ok or failed exchange.
pub fn run_batch(
    backends: &[(BackendProfile, Arc<dyn ChatBackend>)],
    jobs: &[BatchJob],
    repeats: u32,
    options: &BatchOptions,
) -> Result<BatchSummary, BatchError> {
    if options.concurrency == 0 {
        return Err(BatchError::Concurrency);
    }
    let ledger = Ledger::load(&options.ledger_path)?;
    let mut writer = LedgerWriter::open(&options.ledger_path)?;
    let profiles: Vec<&BackendProfile> = backends.iter().map(|(p, _)| p).collect();
    let (units, skipped) = plan(&profiles, jobs, repeats, &ledger);
    let mut summary = BatchSummary { skipped, ..Default::default() };

    let next = AtomicUsize::new(0);
    let budget = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let interrupted = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Event>();
    let total = units.len();
    let workers = options.concurrency.min(total.max(1));

    let mut abort = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (units, next, budget, stop, interrupted) = (&units, &next, &budget, &stop, &interrupted);
            scope.spawn(move || {
                let take_budget = || match options.max_exchanges {
                    Some(max) if budget.fetch_add(1, Ordering::SeqCst) >= max => {
                        interrupted.store(true, Ordering::SeqCst);
                        stop.store(true, Ordering::SeqCst);
                        false
                    }
                    _ => true,
                };
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(unit) = units.get(i) else { break };
                    let (profile, backend) = &backends[unit.backend];
                    if let Err(e) = run_unit(unit, profile, backend.as_ref(), options, &take_budget, &tx) {
                        stop.store(true, Ordering::SeqCst);
                        let _ = tx.send(Event::Abort(e));
                        break;
                    }
                }
            });
        }
        drop(tx);
        for event in rx {
            match event {
                Event::Done(exchange) => {
                    if abort.is_some() {
                        continue;
                    }
                    if let Err(e) = writer.append(&exchange) {
                        stop.store(true, Ordering::SeqCst);
                        abort = Some(BatchError::Ledger(e));
                        continue;
                    }
                    summary.issued += 1;
                    summary.failed += !exchange.ok() as usize;
                    if options.progress && summary.issued.is_multiple_of(100) {
                        eprintln!("progress: {} exchanges written, {} units planned", summary.issued, total);
                    }
                }
                Event::Abort(e) => {
                    abort.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = abort {
        return Err(e);
    }
    summary.interrupted = interrupted.load(Ordering::SeqCst);
    Ok(summary)
}

fn exchange(
    key: ExchangeKey,
    request: Vec<ChatMessage>,
    outcome: Result<(String, u32, Option<String>), ChatError>,
    started: Instant,
) -> Exchange {
    let (response, attempts, error) = outcome.expect("auth errors are handled by the caller");
    Exchange {
        schema: LEDGER_SCHEMA.to_string(),
        key,
        request,
        status: if error.is_none() { ExchangeStatus::Ok } else { ExchangeStatus::Failed },
        response,
        attempts,
        latency_ms: started.elapsed().as_millis() as u64,
        timestamp_ms: now_ms(),
        error,
    }
}

fn run_unit(
    unit: &Unit<'_>,
    profile: &BackendProfile,
    backend: &dyn ChatBackend,
    options: &BatchOptions,
    take_budget: &dyn Fn() -> bool,
    tx: &mpsc::Sender<Event>,
) -> Result<(), BatchError> {
    let job = unit.job;
    let sleep = |d: Duration| (options.sleeper)(d);
    let send = |key: &ExchangeKey, messages: &[ChatMessage], format: AnswerFormat| {
        let request = ChatRequest { key, messages, gold: job.gold, mode: job.mode, format };
        chat(backend, profile, &request, &sleep)
            .map(|o| (o.text, o.attempts, o.error))
            .map_err(|source| BatchError::Auth { key: key.clone(), source })
    };

    let answer = match &unit.prior_answer {
        Some(prior) => prior.clone(),
        None => {
            if !take_budget() {
                return Ok(());
            }
            let key = job.key(&profile.name, unit.repeat, Turn::Answer);
            let messages = profile.request_messages(&job.instance.messages);
            let started = Instant::now();
            let (text, attempts, error) = send(&key, &messages, job.instance.format)?;
            let ok = error.is_none();
            let _ = tx.send(Event::Done(exchange(key, messages, Ok((text.clone(), attempts, error)), started)));
            ok.then_some(text)
        }
    };

    let Some(followup) = &job.certainty else { return Ok(()) };
    if !take_budget() {
        return Ok(());
    }
    let key = job.key(&profile.name, unit.repeat, Turn::Certainty);
    let started = Instant::now();
    let Some(answer) = answer else {
        let messages = profile.request_messages(&job.instance.messages);
        let failed = Ok((String::new(), 0, Some("answer exchange failed".to_string())));
        let _ = tx.send(Event::Done(exchange(key, messages, failed, started)));
        return Ok(());
    };
    let mut conversation = job.instance.messages.clone();
    conversation.push(ChatMessage::assistant(answer));
    conversation.push(ChatMessage::user(followup.clone()));
    let messages = profile.request_messages(&conversation);
    let outcome = send(&key, &messages, AnswerFormat::Number)?;
    let _ = tx.send(Event::Done(exchange(key, messages, Ok(outcome), started)));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendKind, StochasticBackend, StochasticSettings};
    use crate::promptgen::PromptId;
    use std::sync::Mutex;

    fn jobs(records: usize, certainty: bool) -> Vec<BatchJob> {
        let mut out = Vec::new();
        for r in 0..records {
            for p in PromptId::RAR {
                out.push(BatchJob {
                    dataset: "d".into(),
                    mode: Mode::ThreeClass,
                    gold: Some(Label::ALL[r % 3]),
                    instance: PromptInstance {
                        record_id: format!("r{r}"),
                        prompt_id: p,
                        messages: vec![ChatMessage::user(format!("text {r}"))],
                        format: p.answer_format(),
                    },
                    certainty: certainty.then(|| "How certain?".to_string()),
                });
            }
        }
        out
    }

    fn stochastic() -> Vec<(BackendProfile, Arc<dyn ChatBackend>)> {
        let profile = BackendProfile::new("mock", BackendKind::MockStochastic);
        vec![(profile, Arc::new(StochasticBackend::new(StochasticSettings::default(), 3)))]
    }

    fn options(path: PathBuf, concurrency: usize) -> BatchOptions {
        BatchOptions { sleeper: Arc::new(|_| {}), ..BatchOptions::new(path, concurrency) }
    }

    #[test]
    fn counts_exchanges_with_certainty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let j = jobs(2, true);
        assert_eq!(count_pending(&[stochastic()[0].0.clone()], &j, 1, &Ledger::default()), 16);
        let s = run_batch(&stochastic(), &j, 1, &options(path.clone(), 3)).unwrap();
        assert_eq!(s.issued, 16);
        let again = run_batch(&stochastic(), &j, 1, &options(path.clone(), 3)).unwrap();
        assert_eq!((again.issued, again.skipped), (0, 16));
    }

    #[test]
    fn interrupted_then_resumed_matches_full_run() {
        let dir = tempfile::tempdir().unwrap();
        let j = jobs(5, true);
        let full = dir.path().join("full.jsonl");
        run_batch(&stochastic(), &j, 2, &options(full.clone(), 4)).unwrap();
        let part = dir.path().join("part.jsonl");
        let mut opts = options(part.clone(), 4);
        opts.max_exchanges = Some(13);
        let s = run_batch(&stochastic(), &j, 2, &opts).unwrap();
        assert!(s.interrupted);
        assert_eq!(s.issued, 13);
        run_batch(&stochastic(), &j, 2, &options(part.clone(), 2)).unwrap();
        let key_set = |p: &PathBuf| {
            let mut v: Vec<(ExchangeKey, String)> =
                Ledger::load(p).unwrap().exchanges().iter().map(|e| (e.key.clone(), e.response.clone())).collect();
            v.sort();
            v
        };
        assert_eq!(key_set(&full), key_set(&part));
    }

    #[test]
    fn certainty_replays_answer_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let mut backends = stochastic();
        backends[0].0.system_prompt = Some("sys".into());
        run_batch(&backends, &jobs(1, true), 1, &options(path.clone(), 1)).unwrap();
        let ledger = Ledger::load(&path).unwrap();
        for e in ledger.exchanges().iter().filter(|e| e.key.turn == Turn::Certainty) {
            let answer = ledger.get(&ExchangeKey { turn: Turn::Answer, ..e.key.clone() }).unwrap();
            assert_eq!(e.request[0], ChatMessage::system("sys"));
            assert_eq!(e.request[2], ChatMessage::assistant(answer.response.clone()));
            assert_eq!(e.request.len(), 4);
        }
    }

    struct AuthFails;
    impl ChatBackend for AuthFails {
        fn send(&self, _: &ChatRequest<'_>) -> Result<String, ChatError> {
            Err(ChatError::Auth("401".into()))
        }
    }

    #[test]
    fn auth_failure_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let backends: Vec<(BackendProfile, Arc<dyn ChatBackend>)> =
            vec![(BackendProfile::new("x", BackendKind::HttpChat), Arc::new(AuthFails))];
        let err = run_batch(&backends, &jobs(2, false), 1, &options(dir.path().join("l"), 2)).unwrap_err();
        assert!(matches!(err, BatchError::Auth { .. }));
    }

    struct Down(Mutex<u32>);
    impl ChatBackend for Down {
        fn send(&self, _: &ChatRequest<'_>) -> Result<String, ChatError> {
            *self.0.lock().unwrap() += 1;
            Err(ChatError::Transient("503".into()))
        }
    }

    #[test]
    fn exhausted_answer_fails_certainty_without_request() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l");
        let down = Arc::new(Down(Mutex::new(0)));
        let mut profile = BackendProfile::new("x", BackendKind::HttpChat);
        profile.max_attempts = 3;
        let backends: Vec<(BackendProfile, Arc<dyn ChatBackend>)> = vec![(profile, down.clone())];
        let s = run_batch(&backends, &jobs(1, true), 1, &options(path.clone(), 1)).unwrap();
        assert_eq!((s.issued, s.failed), (8, 8));
        assert_eq!(*down.0.lock().unwrap(), 12);
        for e in Ledger::load(&path).unwrap().exchanges() {
            assert_eq!(e.response, "");
            assert_eq!(e.attempts, if e.key.turn == Turn::Answer { 3 } else { 0 });
        }
    }
}
