use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2};
use rand::Rng;
use sparselab::autointerp::{
    collect_dossiers, marked_spans, render_fuzzing_items, run_fuzzing, ChatBackend, ChatMessage, ChatRequest,
    DossierConfig, FuzzingConfig, HttpBackend, LlmEndpointConfig, MockBackend, MockKind, PromptSet, RequestKind,
    Transcript,
};
use sparselab::rng;
use sparselab::sae::{init_standard, SparseAutoencoder, StandardSae};
use sparselab::ActivationDataset;

fn fixture(n_windows: usize, window: usize, seed: u64) -> (StandardSae<f32>, ActivationDataset) {
    let mut r = rng::stream(seed, 7);
    let n = n_windows * window;
    let rows = Array2::from_shape_simple_fn((n, 8), || r.random_range(-1.0f32..1.0));
    let tokens: Vec<u32> = (0..n).map(|_| r.random_range(97u32..123)).collect();
    let mut sae = init_standard::<f32>(8, 24, seed).unwrap();
    sae.b_enc = Array1::from_elem(24, -0.6);
    (
        sae,
        ActivationDataset::new(rows).unwrap().with_token_ids(tokens).unwrap(),
    )
}

#[test]
fn dossiers_match_brute_force_window_peaks() {
    let (window, n_windows) = (8, 60);
    let (sae, data) = fixture(n_windows, window, 1);
    let cfg = DossierConfig {
        n_latents_sampled: 10,
        windows_per_latent: 5,
        random_windows_per_latent: 6,
        window,
        seed: 3,
    };
    let set = collect_dossiers(&sae, &data, &cfg).unwrap();
    let z = sae.encode(data.rows());
    let peak = |latent: usize, w: usize| (0..window).map(|i| z[[w * window + i, latent]]).fold(0.0f32, f32::max);
    let alive: Vec<usize> = (0..24).filter(|&j| (0..n_windows).any(|w| peak(j, w) > 0.0)).collect();
    assert_eq!(set.n_alive, alive.len());
    assert_eq!(set.dossiers.len(), cfg.n_latents_sampled.min(alive.len()));
    for d in &set.dossiers {
        assert!(alive.contains(&d.latent));
        let mut order: Vec<usize> = (0..n_windows).filter(|&w| peak(d.latent, w) > 0.0).collect();
        order.sort_by(|&a, &b| peak(d.latent, b).total_cmp(&peak(d.latent, a)).then(a.cmp(&b)));
        order.truncate(cfg.windows_per_latent);
        let got: Vec<usize> = d.examples.iter().map(|e| e.source).collect();
        assert_eq!(got, order);
        for e in d.examples.iter().chain(&d.random_examples) {
            let w = e.source;
            assert_eq!(e.tokens, data.token_ids().unwrap()[w * window..(w + 1) * window]);
            for i in 0..window {
                assert!((e.activations[i] - z[[w * window + i, d.latent]]).abs() < 1e-6);
            }
        }
        assert_eq!(d.random_examples.len(), cfg.random_windows_per_latent);
        assert!(d.random_examples.iter().all(|e| !got.contains(&e.source)));
    }
    let again = collect_dossiers(&sae, &data, &cfg).unwrap();
    assert_eq!(
        again.dossiers.iter().map(|d| d.latent).collect::<Vec<_>>(),
        set.dossiers.iter().map(|d| d.latent).collect::<Vec<_>>()
    );
}

#[test]
fn fuzzing_items_fill_requested_counts() {
    let window = 16;
    let (sae, data) = fixture(120, window, 2);
    let cfg = DossierConfig {
        n_latents_sampled: 5,
        windows_per_latent: 12,
        random_windows_per_latent: 12,
        window,
        seed: 0,
    };
    let prompts = PromptSet::v1();
    let fz = FuzzingConfig {
        n_explanation_examples: 6,
        n_positive: 6,
        n_negative: 6,
        seed: 0,
    };
    for d in collect_dossiers(&sae, &data, &cfg).unwrap().dossiers {
        let rendered = render_fuzzing_items(&d, &prompts, &fz).unwrap();
        let pos = rendered.items.iter().filter(|i| i.label).count();
        let neg = rendered.items.len() - pos;
        assert_eq!(pos + rendered.shortfall_positive, 6);
        assert_eq!(neg + rendered.shortfall_negative, 6);
        for item in &rendered.items {
            assert!(!marked_spans(&item.text).is_empty(), "{}", item.text);
        }
    }
}

fn dossier_fixture() -> Vec<sparselab::autointerp::LatentDossier> {
    let (sae, data) = fixture(200, 16, 4);
    let cfg = DossierConfig {
        n_latents_sampled: 12,
        windows_per_latent: 40,
        random_windows_per_latent: 40,
        window: 16,
        seed: 1,
    };
    collect_dossiers(&sae, &data, &cfg).unwrap().dossiers
}

#[test]
fn oracle_mock_is_perfect_and_coin_flip_is_chance() {
    let dossiers = dossier_fixture();
    let prompts = PromptSet::v1();
    let cfg = FuzzingConfig::default();
    let t = Transcript::default();
    let oracle = run_fuzzing(&dossiers, &MockBackend::new(MockKind::Oracle, &t), &prompts, &cfg, 2).unwrap();
    assert_eq!(oracle.pooled.unwrap().auroc, 1.0);
    assert_eq!(oracle.n_failed_latents, 0);

    let coin = run_fuzzing(
        &dossiers,
        &MockBackend::new(MockKind::CoinFlip { seed: 5 }, &t),
        &prompts,
        &cfg,
        2,
    )
    .unwrap();
    let n: usize = coin.latents.iter().map(|l| l.verdicts.len()).sum();
    let pos: usize = coin
        .latents
        .iter()
        .flat_map(|l| &l.verdicts)
        .filter(|v| v.label)
        .count();
    assert!(n >= 200, "only {n} items");
    let se = ((n + 1) as f64 / (12.0 * pos as f64 * (n - pos) as f64)).sqrt();
    let auroc = coin.pooled.unwrap().auroc;
    assert!((auroc - 0.5).abs() <= 3.0 * se, "coin-flip AUROC {auroc}, se {se}");
    assert!(!t.entries().is_empty());
}

#[test]
fn unparseable_replies_are_dropped_not_scored() {
    let dossiers = dossier_fixture();
    let t = Transcript::default();
    let echo = MockBackend::new(
        MockKind::Echo {
            reply: "Perhaps.".into(),
        },
        &t,
    );
    let report = run_fuzzing(&dossiers[..2], &echo, &PromptSet::v1(), &FuzzingConfig::default(), 1).unwrap();
    assert!(report.pooled.is_none());
    assert!(report
        .latents
        .iter()
        .all(|l| l.error.is_some() && l.verdicts.is_empty()));
}

#[test]
fn verdict_parsing() {
    let p = PromptSet::v1();
    assert_eq!(p.parse_verdict("Yes."), Some(true));
    assert_eq!(p.parse_verdict("  no, it is not"), Some(false));
    assert_eq!(p.parse_verdict("YES"), Some(true));
    assert_eq!(p.parse_verdict("maybe"), None);
    assert_eq!(p.parse_verdict(""), None);
}

struct Reply {
    status: u16,
    body: String,
}

/// One-connection-per-request HTTP server answering from a script.
fn serve(script: Vec<Reply>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for reply in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(head + &String::from_utf8(body).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.status,
                reply.body.len(),
                reply.body
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn request() -> ChatRequest {
    ChatRequest {
        id: "7-explain".into(),
        kind: RequestKind::Explanation,
        messages: vec![ChatMessage::system("s"), ChatMessage::user("u")],
        ground_truth: None,
    }
}

fn endpoint(url: String) -> LlmEndpointConfig {
    LlmEndpointConfig {
        base_url: url,
        model: "test-model".into(),
        api_key_env: Some("SPARSELAB_TEST_API_KEY".into()),
        backoff_secs: 0.01,
        timeout_secs: 5.0,
        ..Default::default()
    }
}

#[test]
fn http_backend_retries_server_errors_and_logs_every_attempt() {
    std::env::set_var("SPARSELAB_TEST_API_KEY", "secret");
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Fires on vowels."}}]}"#;
    let (url, seen) = serve(vec![
        Reply {
            status: 503,
            body: "{}".into(),
        },
        Reply {
            status: 200,
            body: ok.into(),
        },
    ]);
    let t = Transcript::default();
    let backend = HttpBackend::new(endpoint(url), &t).unwrap();
    assert_eq!(backend.complete(&request()).unwrap(), "Fires on vowels.");
    let entries = t.entries();
    assert_eq!(entries.len(), 2);
    assert!(entries[0]["error"].as_str().unwrap().contains("503"));
    assert_eq!(entries[1]["attempt"], 1);
    let seen = seen.lock().unwrap();
    assert!(seen[0].starts_with("POST /v1/chat/completions"));
    assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer secret"));
    assert!(seen[0].contains(r#""model":"test-model""#));
    assert!(seen[0].contains(r#""temperature":0.0"#));
}

#[test]
fn http_backend_gives_up_on_client_errors() {
    let (url, seen) = serve(vec![
        Reply {
            status: 400,
            body: "{}".into(),
        },
        Reply {
            status: 200,
            body: "{}".into(),
        },
    ]);
    let t = Transcript::default();
    let backend = HttpBackend::new(endpoint(url), &t).unwrap();
    assert!(backend.complete(&request()).is_err());
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert_eq!(t.entries().len(), 1);
}

#[test]
fn http_backend_reports_missing_content() {
    let (url, _) = serve(vec![Reply {
        status: 200,
        body: r#"{"choices":[]}"#.into(),
    }]);
    let t = Transcript::default();
    let backend = HttpBackend::new(endpoint(url), &t).unwrap();
    assert!(backend.complete(&request()).is_err());
}
