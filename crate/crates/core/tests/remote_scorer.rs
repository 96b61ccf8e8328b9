//! Remote client failure handling against a local stub.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use promptedit::scoring::{RemoteConfig, RemoteScorer, ScoringError};

/// Serves `(status, body)` replies in order, then closes.
fn stub(replies: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>, JoinHandle<()>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let request = server.recv().unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            request
                .respond(tiny_http::Response::from_string(body).with_status_code(status))
                .unwrap();
        }
    });
    (url, hits, handle)
}

fn client(url: String, retries: usize) -> RemoteScorer {
    let mut config = RemoteConfig::new(url, 2);
    config.retries = retries;
    config.retry_backoff_ms = 1;
    config.timeout_ms = 2000;
    RemoteScorer::new(config)
}

#[test]
fn server_errors_are_retried_then_reported() {
    let (url, hits, handle) = stub(vec![(503, "busy"), (500, "down"), (503, "busy")]);
    let err = client(url, 2).score_text("p", &["a", "b"]).unwrap_err();
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert!(matches!(err, ScoringError::ScorerUnavailable { attempts: 3, .. }), "{err:?}");
}

#[test]
fn recovers_after_one_server_error() {
    let (url, hits, handle) = stub(vec![(502, ""), (200, r#"{"log_probs":[-0.5,-1.0]}"#)]);
    let resp = client(url, 1).score_text("p", &["a", "b"]).unwrap();
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    assert_eq!(resp.log_probs, vec![-0.5, -1.0]);
    assert_eq!(resp.features, None);
}

#[test]
fn client_errors_and_bad_payloads_are_not_retried() {
    let (url, hits, handle) = stub(vec![(400, "bad request")]);
    let err = client(url, 3).score_text("p", &["a"]).unwrap_err();
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert!(matches!(err, ScoringError::ProtocolError(_)));

    let (url, hits, handle) = stub(vec![(200, r#"{"logprobs":[0.0]}"#)]);
    let err = client(url, 3).score_text("p", &["a"]).unwrap_err();
    handle.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert!(matches!(err, ScoringError::ProtocolError(_)));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = client(format!("http://127.0.0.1:{port}/score"), 1)
        .score_text("p", &["a"])
        .unwrap_err();
    assert!(err.is_retryable());
    assert!(matches!(err, ScoringError::ScorerUnavailable { attempts: 2, .. }));
}
