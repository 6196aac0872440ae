use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use mia_core::eval::{evaluate_strategies, CompiledStrategy, Weights};
use mia_core::library::Library;
use mia_core::logits::Dataset;
use mia_core::metrics::baseline_kinds;
use mia_core::orchestrator::transport::{
    ChatRequest, ChatResponse, ChatTransport, HttpTransport, MeteredTransport, ReplayTransport,
    Role, TransportError,
};
use mia_core::orchestrator::{run_loop, Backend, GuidanceMode, OnTransportError, RunConfig};
use mia_core::simulate::{simulate_dataset, SimConfig};

fn small_dataset() -> Dataset {
    simulate_dataset(&SimConfig {
        n_member: 150,
        n_nonmember: 150,
        vocab: 200,
        seq_len: 32,
        delta: 0.3,
        seed: 3,
    })
    .unwrap()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

fn offline(rounds: u32) -> RunConfig {
    RunConfig {
        rounds,
        seed: 11,
        ..RunConfig::default()
    }
}

fn replay_config(guidance_mode: GuidanceMode, guidance_enabled: bool) -> RunConfig {
    RunConfig {
        rounds: 3,
        backend: Backend::Replay,
        fixtures: Some(fixtures()),
        guidance_mode,
        guidance_enabled,
        ..RunConfig::default()
    }
}

#[test]
fn offline_loop_is_monotone_and_reproducible() {
    let ds = small_dataset();
    let a = run_loop(&ds, &offline(6), None, Library::new(), |_, _| {}).unwrap();
    assert!(a.aborted.is_none());
    assert_eq!(a.rounds.len(), 6);
    assert!(a.library.len() <= 30);
    let best: Vec<f64> = a.rounds.iter().map(|r| r.best_q_so_far.unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
    assert!(a.rounds.iter().all(|r| r.guidance.is_some()));
    assert_eq!(a.total_usage().input_tokens, 0);

    let b = run_loop(&ds, &offline(6), None, Library::new(), |_, _| {}).unwrap();
    assert_eq!(a.library.to_jsonl(), b.library.to_jsonl());
    assert_eq!(a.rounds, b.rounds);

    let baselines: Vec<CompiledStrategy> = baseline_kinds()
        .into_iter()
        .map(CompiledStrategy::native)
        .collect();
    let base_best = evaluate_strategies(&baselines, &ds, &Weights::default())
        .iter()
        .filter(|r| !r.failed())
        .map(|r| r.q)
        .fold(f64::NEG_INFINITY, f64::max);
    eprintln!(
        "best loop q {:?} vs best baseline q {base_best}",
        best.last()
    );
}

#[test]
fn loop_continues_numbering_from_an_existing_library() {
    let ds = small_dataset();
    let first = run_loop(&ds, &offline(2), None, Library::new(), |_, _| {}).unwrap();
    let before = first.library.to_jsonl();
    let more = run_loop(&ds, &offline(1), None, first.library, |_, _| {}).unwrap();
    assert_eq!(more.rounds[0].round, 3);
    assert!(more.library.to_jsonl().starts_with(&before));
}

#[test]
fn zero_rounds_and_no_guidance() {
    let ds = small_dataset();
    let none = run_loop(&ds, &offline(0), None, Library::new(), |_, _| {}).unwrap();
    assert!(none.library.is_empty() && none.rounds.is_empty());

    let cfg = RunConfig {
        guidance_enabled: false,
        ..offline(3)
    };
    let out = run_loop(&ds, &cfg, None, Library::new(), |_, _| {}).unwrap();
    assert!(out.rounds.iter().all(|r| r.guidance.is_none()));
    assert!(out.rounds.iter().all(|r| !r
        .generation_prompt
        .contains("Guidance from the previous round")));
    assert!(out.library.entries().iter().all(|e| e.analysis.is_empty()));
}

#[test]
fn replay_run_covers_rejections_barren_rounds_and_fallbacks() {
    let ds = small_dataset();
    let tr = MeteredTransport::new(ReplayTransport::from_dir(fixtures()).unwrap());
    let cfg = replay_config(GuidanceMode::Llm, true);
    let mut seen = Vec::new();
    let out = run_loop(&ds, &cfg, Some(&tr), Library::new(), |r, lib| {
        seen.push((r.round, lib.len()))
    })
    .unwrap();

    assert_eq!(seen, vec![(1, 3), (2, 5), (3, 5)]);
    let counts: Vec<usize> = out.rounds.iter().map(|r| r.candidates.len()).collect();
    assert_eq!(counts, vec![3, 2, 0]);
    assert_eq!(out.rounds[1].rejected.len(), 1);
    assert!(out.rounds[2].barren);

    // Round 1 guidance is the model's; round 2's was unparsable.
    let g1 = out.rounds[0].guidance.as_ref().unwrap();
    assert_eq!(
        g1.useful_insights.notes,
        "Target-relative margins dominate."
    );
    assert!(out.rounds[0].guidance_fallback.is_none());
    assert!(out.rounds[1].guidance_fallback.is_some());
    assert!(out.rounds[1]
        .generation_prompt
        .contains("pool the margin over its largest values"));
    let e = out
        .library
        .entries()
        .iter()
        .find(|e| e.spec.name == "true_max_gap")
        .unwrap();
    assert_eq!(
        e.analysis,
        "The margin to the top token separates members sharply."
    );

    // Usage: three generation calls and two guidance calls.
    assert_eq!(out.total_usage(), tr.total());
    assert_eq!(tr.total().input_tokens, 3100 + 3650 + 3700 + 900 + 880);
}

#[test]
fn guidance_ablation_leaves_evaluation_unchanged() {
    let ds = small_dataset();
    let with = {
        let tr = ReplayTransport::from_dir(fixtures()).unwrap();
        run_loop(
            &ds,
            &replay_config(GuidanceMode::Llm, true),
            Some(&tr),
            Library::new(),
            |_, _| {},
        )
        .unwrap()
    };
    let without = {
        let tr = ReplayTransport::from_dir(fixtures()).unwrap();
        run_loop(
            &ds,
            &replay_config(GuidanceMode::Llm, false),
            Some(&tr),
            Library::new(),
            |_, _| {},
        )
        .unwrap()
    };
    for (a, b) in with.rounds.iter().zip(&without.rounds) {
        assert_eq!(a.results, b.results);
        assert_eq!(a.candidates, b.candidates);
        assert!(a.guidance.is_some() && b.guidance.is_none());
    }
    assert!(with.total_usage().input_tokens > without.total_usage().input_tokens);
}

struct Failing;

impl ChatTransport for Failing {
    fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, TransportError> {
        Err(TransportError::Exhausted {
            attempts: 3,
            last: "connection refused".into(),
        })
    }
}

#[test]
fn transport_failure_policy() {
    let ds = small_dataset();
    let cfg = RunConfig {
        backend: Backend::LlmChat,
        rounds: 2,
        ..RunConfig::default()
    };
    let aborted = run_loop(&ds, &cfg, Some(&Failing), Library::new(), |_, _| {}).unwrap();
    assert!(aborted.aborted.is_some());
    assert!(aborted.rounds.is_empty());

    let cfg = RunConfig {
        on_transport_error: OnTransportError::OfflineMutation,
        ..cfg
    };
    let fell_back = run_loop(&ds, &cfg, Some(&Failing), Library::new(), |_, _| {}).unwrap();
    assert!(fell_back.aborted.is_none());
    assert_eq!(fell_back.rounds.len(), 2);
    assert!(fell_back
        .rounds
        .iter()
        .all(|r| r.generator_fallback.is_some() && r.candidates.len() == 5));

    assert!(run_loop(&ds, &cfg, None, Library::new(), |_, _| {}).is_err());
}

/// Answers 429 to the first request and a completion to the rest.
fn serve(listener: TcpListener, hits: &'static AtomicUsize) {
    for stream in listener.incoming().take(2) {
        let mut stream = stream.unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(req["temperature"], 0.6);
        let (status, text) = if hits.fetch_add(1, Ordering::SeqCst) == 0 {
            ("429 Too Many Requests", "{}".to_string())
        } else {
            (
                "200 OK",
                r#"{"choices":[{"message":{"content":"pong"}}],"usage":{"prompt_tokens":7,"completion_tokens":2}}"#
                    .to_string(),
            )
        };
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
            text.len()
        )
        .unwrap();
    }
}

#[test]
fn http_transport_retries_after_429() {
    static HITS: AtomicUsize = AtomicUsize::new(0);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let server = thread::spawn(move || serve(listener, &HITS));
    let tr = HttpTransport::new(url, "test-key")
        .unwrap()
        .with_backoff(3, Duration::from_millis(10));
    let resp = tr
        .complete(&ChatRequest {
            role: Role::Generation,
            model: "any".into(),
            temperature: 0.6,
            system: "s".into(),
            user: "u".into(),
        })
        .unwrap();
    server.join().unwrap();
    assert_eq!(resp.text, "pong");
    assert_eq!(resp.usage.input_tokens, 7);
    assert_eq!(HITS.load(Ordering::SeqCst), 2);
}
