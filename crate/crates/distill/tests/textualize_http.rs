//! Wire-contract test for the HTTP description client: POST of
//! {"prompt", "audio"} answered with {"description"}, order preservation
//! under concurrency, and per-record failure reporting.

use distill::pipeline::{
    gen_synthetic, synthetic_vocab, textualize, ExternalService, PromptTemplate,
};
use serde_json::Value;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

fn read_request(stream: &mut std::net::TcpStream) -> (String, Value) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = head
        .lines()
        .find(|l| l.to_ascii_lowercase().starts_with("content-length"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|v| v.trim().parse().ok())
        .unwrap();
    while buf.len() < header_end + content_length {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
    }
    let body: Value = serde_json::from_slice(&buf[header_end..header_end + content_length]).unwrap();
    (head, body)
}

fn respond(stream: &mut std::net::TcpStream, status: &str, body: &str) {
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes()).unwrap();
}

/// Serves until the listener is dropped; every valid request answers with a
/// description derived from the audio payload, while the poisoned audio
/// pattern always gets a 500.
fn spawn_server(listener: TcpListener, hits: Arc<AtomicUsize>) {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            hits.fetch_add(1, Ordering::SeqCst);
            let (head, body) = read_request(&mut stream);
            assert!(head.starts_with("POST"), "expected POST, got: {head}");
            let prompt = body["prompt"].as_str().unwrap();
            assert!(prompt.contains("Here is the question:"));
            let audio: Vec<u64> = body["audio"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap())
                .collect();
            if audio.first() == Some(&7) && audio.iter().all(|&a| a == 7) {
                respond(&mut stream, "500 Internal Server Error", "{}");
            } else {
                let reply = serde_json::json!({
                    "description": format!("heard {} audio tokens", audio.len())
                });
                respond(&mut stream, "200 OK", &reply.to_string());
            }
        }
    });
}

#[test]
fn external_service_round_trips_the_wire_contract() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    spawn_server(listener, hits.clone());

    let vocab = synthetic_vocab();
    let data = gen_synthetic(4, &vocab, 21).unwrap();
    let client = ExternalService::new(format!("http://{addr}/describe"));
    let outcome = textualize(
        &data.audio_records,
        &client,
        &PromptTemplate::default(),
        2,
    )
    .unwrap();
    assert!(outcome.failures.is_empty(), "failures: {:?}", outcome.failures);
    assert_eq!(outcome.records.len(), 4);
    for (t, a) in outcome.records.iter().zip(&data.audio_records) {
        assert_eq!(t.description, format!("heard {} audio tokens", a.audio.len()));
        assert_eq!(t.question, a.question);
        assert_eq!(t.answer, a.answer);
    }
    assert!(hits.load(Ordering::SeqCst) >= 4);
}

#[test]
fn failing_records_are_retried_then_reported_by_index() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    spawn_server(listener, hits.clone());

    let vocab = synthetic_vocab();
    let mut records = gen_synthetic(3, &vocab, 33).unwrap().audio_records;
    // The poisoned pattern the server always rejects.
    records[1].audio = vec![7; 8];
    let mut client = ExternalService::new(format!("http://{addr}/describe"));
    client.retries = 1;
    let outcome = textualize(&records, &client, &PromptTemplate::default(), 1).unwrap();
    assert_eq!(outcome.records.len(), 2);
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].0, 1, "failure must carry the record index");
    // Two good records once each plus the poisoned one tried 1 + 1 times.
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}
