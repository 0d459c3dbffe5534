use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use image::{Rgb, RgbImage};
use pathagent::backend::{
    backoff_bounds, Backend, BackendError, BackendProfile, ChatMessage, CompletionRequest, HttpBackend, MessagePart,
};

struct Seen {
    auth: Option<String>,
    body: String,
}

/// Serves one canned status per connection, in order.
fn stub_server(statuses: Vec<u16>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = seen.clone();
    let handle = std::thread::spawn(move || {
        for status in statuses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(l["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            seen2.lock().unwrap().push(Seen {
                auth,
                body: String::from_utf8(body).unwrap(),
            });
            let payload = if status == 200 {
                r#"{"id":"resp-1","choices":[{"message":{"role":"assistant","content":"PONG"}}]}"#.to_string()
            } else {
                format!(r#"{{"error":"status {status}"}}"#)
            };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn profile(url: &str) -> BackendProfile {
    let mut p = BackendProfile::new("stub", url, "test-model");
    p.retries = 3;
    p.backoff_ms = 20;
    p.max_backoff_ms = 500;
    p.timeout_s = 10.0;
    p
}

#[test]
fn retries_through_rate_limits() {
    let (url, seen, handle) = stub_server(vec![429, 429, 200]);
    let p = profile(&url);
    let backend = HttpBackend::with_api_key(p.clone(), Some("secret".into())).unwrap();
    let img = Arc::new(RgbImage::from_fn(5, 4, |x, y| Rgb([x as u8 * 40, y as u8 * 50, 7])));
    let req = CompletionRequest::new(
        "conv-1",
        vec![ChatMessage::user(vec![
            MessagePart::Text("ping".into()),
            MessagePart::Image(img.clone()),
        ])],
    );
    let c = backend.complete(&req).unwrap();
    handle.join().unwrap();
    assert_eq!(c.text, "PONG");
    assert_eq!(c.retries, 2);
    assert_eq!(c.response_id.as_deref(), Some("resp-1"));
    let (lo, hi) = backoff_bounds(&p, 2);
    assert!(lo <= c.backoff && c.backoff <= hi);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    // the wire PNG decodes to the original raster
    let body: serde_json::Value = serde_json::from_str(&seen[2].body).unwrap();
    let url = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
    let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
    use base64::Engine as _;
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    assert_eq!(image::load_from_memory(&bytes).unwrap().to_rgb8(), *img);
}

#[test]
fn rate_limit_exhaustion() {
    let (url, _, handle) = stub_server(vec![429, 429]);
    let mut p = profile(&url);
    p.retries = 1;
    let backend = HttpBackend::with_api_key(p, None).unwrap();
    let req = CompletionRequest::new("c", vec![ChatMessage::user_text("x")]);
    assert_eq!(backend.complete(&req), Err(BackendError::RateLimited { retries: 1 }));
    handle.join().unwrap();
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, handle) = stub_server(vec![400]);
    let backend = HttpBackend::with_api_key(profile(&url), None).unwrap();
    let req = CompletionRequest::new("c", vec![ChatMessage::user_text("x")]);
    match backend.complete(&req) {
        Err(BackendError::ApiError { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("status 400"));
        }
        other => panic!("{other:?}"),
    }
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn server_errors_are_retried() {
    let (url, _, handle) = stub_server(vec![503, 200]);
    let backend = HttpBackend::with_api_key(profile(&url), None).unwrap();
    let req = CompletionRequest::new("c", vec![ChatMessage::user_text("x")]);
    assert_eq!(backend.complete(&req).unwrap().retries, 1);
    handle.join().unwrap();
}
