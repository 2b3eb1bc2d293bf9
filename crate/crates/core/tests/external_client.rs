use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use attrshield::sap::{AttributeSource, ClientConfig, ExternalClient, Query, Question};
use attrshield::{Error, Image};

struct Captured {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per incoming connection, in order, and
/// reports each request it saw.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/describe", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                headers.push(line);
            }
            let len = headers
                .iter()
                .find_map(|h| h.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                .unwrap_or(0);
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let body = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
            tx.send(Captured { headers, body }).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn client(endpoint: String, token_env: &str, retries: usize) -> ExternalClient {
    ExternalClient::new(ClientConfig {
        endpoint,
        token_env: token_env.into(),
        timeout_secs: 5.0,
        max_retries: retries,
        backoff_ms: 1,
    })
    .unwrap()
}

fn ask(c: &mut ExternalClient, image: &Image) -> attrshield::Result<String> {
    let images = [image];
    let ids = ["img-0".to_string()];
    c.ask(&Query {
        question: Question::Q1,
        round: 0,
        prompt: "list what you see".into(),
        category: "zero",
        image_ids: &ids,
        images: &images,
        items: &[],
    })
}

#[test]
fn sends_prompt_image_and_token() {
    std::env::set_var("ATTRSHIELD_TEST_TOKEN_A", "secret-a");
    let (url, rx) = serve(vec![(200, r#"{"response":"- red background\n- a digit"}"#.into())]);
    let mut c = client(url, "ATTRSHIELD_TEST_TOKEN_A", 0);
    let image = Image::from_fn(4, 4, |y, x| [y as f64 / 4.0, x as f64 / 4.0, 0.5]);
    let answer = ask(&mut c, &image).unwrap();
    assert_eq!(answer, "- red background\n- a digit");
    let req = rx.recv().unwrap();
    assert!(req.headers[0].starts_with("POST /v1/describe"));
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer secret-a")));
    assert_eq!(req.body["prompt"], "list what you see");
    use base64::Engine;
    let png = base64::engine::general_purpose::STANDARD
        .decode(req.body["images"][0].as_str().unwrap())
        .unwrap();
    assert_eq!(Image::decode_png(&png).unwrap(), image);
}

#[test]
fn retries_after_server_error() {
    let (url, rx) = serve(vec![(500, "oops".into()), (200, r#"{"response":"- stripes"}"#.into())]);
    let mut c = client(url, "ATTRSHIELD_TEST_TOKEN_UNSET", 2);
    let answer = ask(&mut c, &Image::new(2, 2)).unwrap();
    assert_eq!(answer, "- stripes");
    let first = rx.recv().unwrap();
    assert!(!first.headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization")));
    rx.recv().unwrap();
}

#[test]
fn exhausted_retries_are_source_errors() {
    let (url, _rx) = serve(vec![(503, "busy".into()), (200, r#"{"response":"   "}"#.into())]);
    let mut c = client(url, "ATTRSHIELD_TEST_TOKEN_UNSET", 1);
    let err = ask(&mut c, &Image::new(2, 2)).unwrap_err();
    assert!(matches!(err, Error::Source { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn empty_endpoint_is_a_config_error() {
    let err = ExternalClient::new(ClientConfig { endpoint: String::new(), ..ClientConfig::default() }).err().unwrap();
    assert_eq!(err.exit_code(), 1);
}
