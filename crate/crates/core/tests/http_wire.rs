//! Wire-format and retry behaviour against a throwaway local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use base64::Engine;
use gnv_core::backend::{
    Backend, BackendEndpoint, BackendError, ChatParams, ChatRequest, ImageGenParams,
    ImageGenRequest, Role,
};
use gnv_core::image::RgbaImage;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Received {
    path: String,
    authorization: Option<String>,
    body: Value,
}

struct Server {
    url: String,
    log: Arc<Mutex<Vec<Received>>>,
}

impl Server {
    /// Answers each request with the next scripted `(status, body)`; the
    /// last one repeats.
    fn start(script: Vec<(u16, String)>) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let log2 = Arc::clone(&log);
        thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let path = request_line
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or("")
                    .to_string();
                let mut len = 0usize;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log2.lock().unwrap().push(Received {
                    path,
                    authorization,
                    body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                });
                let (status, reply) = &script[n.min(script.len() - 1)];
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        Server { url, log }
    }

    fn requests(&self) -> Vec<Received> {
        self.log.lock().unwrap().clone()
    }
}

fn chat_ok(text: &str) -> (u16, String) {
    (
        200,
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
    )
}

fn endpoint(role: Role, url: &str) -> BackendEndpoint {
    let mut ep = BackendEndpoint::new(role, url);
    ep.backoff_ms = 1;
    ep.timeout_secs = 10.0;
    ep
}

fn chat_req() -> ChatRequest {
    ChatRequest::new("be brief", "say hi", ChatParams::default())
}

fn png_b64(img: &RgbaImage) -> String {
    img.to_png_base64().unwrap()
}

#[test]
fn chat_request_shape() {
    let srv = Server::start(vec![chat_ok("hi there")]);
    let mut ep = endpoint(Role::Chat, &srv.url);
    ep.model = Some("llama".into());
    ep.auth_token = Some("sekrit".into());
    let b = Backend::connect(&ep).unwrap();
    assert_eq!(b.chat(&chat_req()).unwrap(), "hi there");

    let r = &srv.requests()[0];
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.authorization.as_deref(), Some("Bearer sekrit"));
    assert_eq!(r.body["model"], "llama");
    assert_eq!(
        r.body["messages"][0],
        json!({"role": "system", "content": "be brief"})
    );
    assert_eq!(
        r.body["messages"][1],
        json!({"role": "user", "content": "say hi"})
    );
    assert_eq!(r.body["temperature"], 0.7);
    assert_eq!(r.body["top_p"], 0.9);
    assert_eq!(r.body["max_tokens"], 256);
}

#[test]
fn vision_request_carries_data_url() {
    let srv = Server::start(vec![chat_ok("an image")]);
    let b = Backend::connect(&endpoint(Role::VisionChat, &srv.url)).unwrap();
    let img = RgbaImage::filled(8, 8, [9, 8, 7, 255]);
    assert_eq!(b.vision_chat(&img, &chat_req()).unwrap(), "an image");

    let body = &srv.requests()[0].body;
    let parts = body["messages"][1]["content"].as_array().unwrap();
    assert_eq!(parts[0], json!({"type": "text", "text": "say hi"}));
    assert_eq!(parts[1]["type"], "image_url");
    let url = parts[1]["image_url"]["url"].as_str().unwrap();
    let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .unwrap();
    assert_eq!(RgbaImage::from_png(&bytes).unwrap(), img);
}

#[test]
fn vision_rejects_oversized_payload() {
    let srv = Server::start(vec![chat_ok("x")]);
    let mut ep = endpoint(Role::VisionChat, &srv.url);
    ep.max_image_bytes = 10;
    let b = Backend::connect(&ep).unwrap();
    let img = RgbaImage::filled(8, 8, [1, 2, 3, 255]);
    assert!(matches!(
        b.vision_chat(&img, &chat_req()),
        Err(BackendError::ImageTooLarge { .. })
    ));
    assert!(srv.requests().is_empty());
}

#[test]
fn image_generation_shape_and_alpha() {
    let mut img = RgbaImage::filled(64, 64, [200, 10, 10, 0]);
    img.put(5, 5, [1, 2, 3, 255]);
    let srv = Server::start(vec![(
        200,
        json!({"image_png_base64": png_b64(&img)}).to_string(),
    )]);
    let b = Backend::connect(&endpoint(Role::ImageGen, &srv.url)).unwrap();
    let params = ImageGenParams {
        width: 64,
        height: 64,
        negative_prompt: "blurry".into(),
        ..ImageGenParams::default()
    };
    let got = b
        .generate_image(&ImageGenRequest::new("a cat", &params, true, 42))
        .unwrap();
    assert_eq!(got, img);

    let r = &srv.requests()[0];
    assert_eq!(r.path, "/v1/images/generate");
    assert_eq!(
        r.body,
        json!({
            "prompt": "a cat", "negative_prompt": "blurry", "steps": 25, "guidance_scale": 7.0,
            "strength": 1.0, "width": 64, "height": 64, "seed": 42, "alpha": true
        })
    );
}

#[test]
fn alpha_requested_but_rgb_returned() {
    let img = RgbaImage::filled(64, 64, [1, 2, 3, 255]);
    let rgb = base64::engine::general_purpose::STANDARD.encode(img.to_png_rgb().unwrap());
    let srv = Server::start(vec![(200, json!({"image_png_base64": rgb}).to_string())]);
    let b = Backend::connect(&endpoint(Role::ImageGen, &srv.url)).unwrap();
    let params = ImageGenParams {
        width: 64,
        height: 64,
        ..ImageGenParams::default()
    };
    assert!(matches!(
        b.generate_image(&ImageGenRequest::new("x", &params, true, 1)),
        Err(BackendError::Protocol(_))
    ));
    // the same bytes are fine for an opaque background request
    assert!(b
        .generate_image(&ImageGenRequest::new("x", &params, false, 1))
        .is_ok());
}

#[test]
fn wrong_size_is_shape_mismatch() {
    let img = RgbaImage::filled(72, 64, [1, 2, 3, 0]);
    let srv = Server::start(vec![(
        200,
        json!({"image_png_base64": png_b64(&img)}).to_string(),
    )]);
    let b = Backend::connect(&endpoint(Role::ImageGen, &srv.url)).unwrap();
    let params = ImageGenParams {
        width: 64,
        height: 64,
        ..ImageGenParams::default()
    };
    assert!(matches!(
        b.generate_image(&ImageGenRequest::new("x", &params, true, 1)),
        Err(BackendError::ShapeMismatch { actual_w: 72, .. })
    ));
}

#[test]
fn server_errors_are_retried() {
    let srv = Server::start(vec![
        (503, "{}".into()),
        (503, "{}".into()),
        chat_ok("finally"),
    ]);
    let b = Backend::connect(&endpoint(Role::Chat, &srv.url)).unwrap();
    assert_eq!(b.chat(&chat_req()).unwrap(), "finally");
    assert_eq!(srv.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let srv = Server::start(vec![(400, "bad".into())]);
    let b = Backend::connect(&endpoint(Role::Chat, &srv.url)).unwrap();
    assert!(matches!(
        b.chat(&chat_req()),
        Err(BackendError::Http { status: 400, .. })
    ));
    assert_eq!(srv.requests().len(), 1);
}

#[test]
fn auth_failures_map_to_auth_error() {
    for status in [401, 403] {
        let srv = Server::start(vec![(status, "{}".into())]);
        let b = Backend::connect(&endpoint(Role::Chat, &srv.url)).unwrap();
        assert!(
            matches!(b.chat(&chat_req()), Err(BackendError::Auth { status: s }) if s == status)
        );
        assert_eq!(srv.requests().len(), 1);
    }
}

#[test]
fn retries_exhausted() {
    let srv = Server::start(vec![(500, "{}".into())]);
    let mut ep = endpoint(Role::Chat, &srv.url);
    ep.max_retries = 2;
    let b = Backend::connect(&ep).unwrap();
    assert!(matches!(
        b.chat(&chat_req()),
        Err(BackendError::Transport { attempts: 3, .. })
    ));
    assert_eq!(srv.requests().len(), 3);
}

#[test]
fn malformed_body_is_protocol_error() {
    let srv = Server::start(vec![
        (200, "not json".into()),
        (200, json!({"choices": []}).to_string()),
    ]);
    let b = Backend::connect(&endpoint(Role::Chat, &srv.url)).unwrap();
    assert!(matches!(
        b.chat(&chat_req()),
        Err(BackendError::Protocol(_))
    ));
    assert!(matches!(
        b.chat(&chat_req()),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn unreachable_server_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut ep = endpoint(Role::Chat, &format!("http://127.0.0.1:{port}"));
    ep.max_retries = 1;
    let b = Backend::connect(&ep).unwrap();
    assert!(matches!(
        b.chat(&chat_req()),
        Err(BackendError::Transport { attempts: 2, .. })
    ));
}

#[test]
fn harmonize_round_trip() {
    let out = RgbaImage::filled(16, 16, [50, 60, 70, 255]);
    let srv = Server::start(vec![(
        200,
        json!({"image_png_base64": png_b64(&out)}).to_string(),
    )]);
    let b = Backend::connect(&endpoint(Role::Harmonizer, &srv.url)).unwrap();
    let comp = RgbaImage::filled(16, 16, [1, 1, 1, 255]);
    let mask = RgbaImage::filled(16, 16, [255, 255, 255, 255]);
    assert_eq!(b.harmonize(&comp, &mask).unwrap(), out);
    let r = &srv.requests()[0];
    assert_eq!(r.path, "/v1/harmonize");
    assert!(r.body["composite_png_base64"].is_string() && r.body["mask_png_base64"].is_string());
}
