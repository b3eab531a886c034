//! The wire client against an in-process HTTP server backed by the mock providers.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use msmc::decompose::WindowSpec;
use msmc::providers::wire::{
    EmbeddingsResponse, ErrorResponse, ImageRequest, ImageResponse, RleMask, SegmentResponse, TextRequest, WindowRequest,
    WireClient, WireOptions, WireTensor,
};
use msmc::providers::{ImageEncoder, MockImageEncoder, MockSegmenter, MockTextEncoder, Segmenter, TextEncoder};
use msmc::{build_banks, run_few_shot, BankConfig, Error, FewShotConfig, Providers, Scale};

mod common;

struct Server {
    url: String,
    requests: Arc<AtomicU32>,
    /// The next this-many requests are answered with 503.
    fail_next: Arc<AtomicU32>,
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Service Unavailable",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body.as_bytes());
}

fn route(path: &str, body: &[u8], seed: u64) -> Result<String, (u16, String)> {
    let image_encoder = MockImageEncoder::new(seed, 64, 16);
    let bad = |e: &dyn std::fmt::Display| (400, e.to_string());
    let json = |v: &dyn erased::Ser| Ok(v.to_json());
    match path {
        "/v1/descriptor" => json(image_encoder.descriptor()),
        "/v1/embed_window" => {
            let req: WindowRequest = serde_json::from_slice(body).map_err(|e| bad(&e))?;
            let image = req.image.to_image().map_err(|e| bad(&e))?;
            let windows: Vec<WindowSpec> = req
                .windows
                .iter()
                .map(|r| WindowSpec { scale: Scale::Small, row0: r.row0, col0: r.col0, rows: r.rows, cols: r.cols })
                .collect();
            let es = image_encoder.embed_windows(&image, &windows).map_err(|e| bad(&e))?;
            let flat: Vec<f32> = es.iter().flat_map(|e| e.as_slice().to_vec()).collect();
            json(&EmbeddingsResponse { embeddings: WireTensor::from_f32(vec![es.len(), 64], &flat) })
        }
        "/v1/embed_image" => {
            let req: ImageRequest = serde_json::from_slice(body).map_err(|e| bad(&e))?;
            let image = req.image.to_image().map_err(|e| bad(&e))?;
            let out = image_encoder.embed_image(&image).map_err(|e| bad(&e))?;
            let flat: Vec<f32> = out.patch_tokens.iter().flat_map(|e| e.as_slice().to_vec()).collect();
            json(&ImageResponse {
                class_token: WireTensor::from_f32(vec![64], out.class_token.as_slice()),
                patch_tokens: WireTensor::from_f32(vec![out.rows, out.cols, 64], &flat),
            })
        }
        "/v1/embed_text" => {
            let req: TextRequest = serde_json::from_slice(body).map_err(|e| bad(&e))?;
            if req.templates.iter().any(|t| t.is_empty()) {
                return Err((400, "empty template".into()));
            }
            let es = MockTextEncoder::new(seed, 64).embed_templates(&req.templates).map_err(|e| bad(&e))?;
            let flat: Vec<f32> = es.iter().flat_map(|e| e.as_slice().to_vec()).collect();
            json(&EmbeddingsResponse { embeddings: WireTensor::from_f32(vec![es.len(), 64], &flat) })
        }
        "/v1/segment" => {
            let req: ImageRequest = serde_json::from_slice(body).map_err(|e| bad(&e))?;
            let image = req.image.to_image().map_err(|e| bad(&e))?;
            let masks = MockSegmenter::default().segment(&image).map_err(|e| bad(&e))?;
            json(&SegmentResponse { masks: masks.iter().map(RleMask::encode).collect() })
        }
        _ => Err((404, format!("no route {path}"))),
    }
}

mod erased {
    pub trait Ser {
        fn to_json(&self) -> String;
    }
    impl<T: serde::Serialize> Ser for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).unwrap()
        }
    }
}

fn handle(mut stream: TcpStream, seed: u64, fail_next: &AtomicU32) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut content_length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).unwrap();

    if fail_next.load(Ordering::SeqCst) > 0 {
        fail_next.fetch_sub(1, Ordering::SeqCst);
        respond(&mut stream, 503, r#"{"error":"warming up"}"#);
        return;
    }
    match route(&path, &body, seed) {
        Ok(json) => respond(&mut stream, 200, &json),
        Err((status, msg)) => respond(&mut stream, status, &serde_json::to_string(&ErrorResponse { error: msg }).unwrap()),
    }
}

fn serve(seed: u64) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicU32::new(0));
    let fail_next = Arc::new(AtomicU32::new(0));
    let (r, f) = (requests.clone(), fail_next.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            r.fetch_add(1, Ordering::SeqCst);
            let f = f.clone();
            thread::spawn(move || handle(stream, seed, &f));
        }
    });
    Server { url, requests, fail_next }
}

fn fast_retries() -> WireOptions {
    WireOptions { timeout: Duration::from_secs(30), attempts: 3, backoff: Duration::from_millis(1) }
}

#[test]
fn remote_embeddings_match_local_mock() {
    let server = serve(6);
    let client = WireClient::connect(&server.url, fast_retries()).unwrap();
    let local = MockImageEncoder::new(6, 64, 16);
    assert_eq!(client.descriptor(), local.descriptor());

    let image = common::disks(240, &[(100.0, 110.0)], 50.0);
    let grid = msmc::PatchGrid::for_image(&image, 16).unwrap();
    let windows = msmc::WindowConfig::default().windows(&grid, Scale::Middle).unwrap();
    let remote = client.embed_windows(&image, &windows).unwrap();
    let here = local.embed_windows(&image, &windows).unwrap();
    for (a, b) in remote.iter().zip(&here) {
        assert!(a.cosine(b) > 1.0 - 1e-6);
    }

    // full-grid window vs class token, every vector unit-norm
    let full = client.embed_window(&image, &grid.full_window()).unwrap();
    let tokens = client.embed_image(&image).unwrap();
    let gap = full.as_slice().iter().zip(tokens.class_token.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(gap <= 1e-4);
    for e in tokens.patch_tokens.iter().chain([&full]) {
        let norm: f64 = e.as_slice().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-5);
    }

    let masks = client.segment(&image).unwrap();
    assert_eq!(masks, MockSegmenter::default().segment(&image).unwrap());
}

#[test]
fn remote_pipeline_matches_local_pipeline() {
    let server = serve(2);
    let remote = Providers::remote(WireClient::connect(&server.url, fast_retries()).unwrap());
    let local = Providers::mock(2);
    let reference = common::disks(240, &[(80.0, 80.0), (170.0, 160.0)], 35.0);
    let test = common::with_noise(&reference, 70, 70, 24, 3);
    let cfg = BankConfig { augmentation: msmc::membank::AugmentationSpec::none(), ..BankConfig::default() };
    let few = FewShotConfig::default();
    let pair = msmc::providers::embed_text(local.text.as_ref(), "widget", &few.prompts).unwrap();

    let rb = build_banks(&[reference.clone()], &remote, &cfg).unwrap();
    let lb = build_banks(&[reference], &local, &cfg).unwrap();
    let r = run_few_shot(&test, &rb, Some(&pair), &remote, &few).unwrap();
    let l = run_few_shot(&test, &lb, Some(&pair), &local, &few).unwrap();
    assert!((r.image_score - l.image_score).abs() < 1e-4);
    assert!(r.map.values().iter().all(|v| v.is_finite()));
}

#[test]
fn unavailable_server_is_retried() {
    let server = serve(1);
    let client = WireClient::connect(&server.url, fast_retries()).unwrap();
    let image = msmc::ImageTensor::filled(32, 32, [0.5; 3]).unwrap();
    let before = server.requests.load(Ordering::SeqCst);
    server.fail_next.store(2, Ordering::SeqCst);
    assert!(client.embed_image(&image).is_ok());
    assert_eq!(server.requests.load(Ordering::SeqCst) - before, 3);

    server.fail_next.store(10, Ordering::SeqCst);
    match client.embed_image(&image) {
        Err(Error::Transport { status, retryable, attempts, .. }) => {
            assert_eq!(status, Some(503));
            assert!(retryable);
            assert_eq!(attempts, 3);
        }
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(1);
    let client = WireClient::connect(&server.url, fast_retries()).unwrap();
    let before = server.requests.load(Ordering::SeqCst);
    match client.embed_templates(&["a photo".to_string(), String::new()]) {
        Err(Error::Transport { status, retryable, attempts, .. }) => {
            assert_eq!(status, Some(400));
            assert!(!retryable);
            assert_eq!(attempts, 1);
        }
        other => panic!("expected a transport error, got {other:?}"),
    }
    assert_eq!(server.requests.load(Ordering::SeqCst) - before, 1);
}

#[test]
fn unreachable_server_reports_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = WireClient::connect(&format!("http://127.0.0.1:{port}"), fast_retries()).unwrap_err();
    assert!(matches!(err, Error::Transport { status: None, retryable: true, attempts: 3, .. }));
}
