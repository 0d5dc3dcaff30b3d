use std::time::Duration;

use serde_json::{json, Value};

use super::{Attempt, BackendEndpoint, BackendError, ChatRequest, ImageGenRequest};
use crate::image::RgbaImage;

const MAX_BODY_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Clone)]
pub(super) struct HttpClient {
    agent: ureq::Agent,
    base_url: String,
    model: String,
    bearer: Option<String>,
}

impl HttpClient {
    pub(super) fn new(ep: &BackendEndpoint) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(ep.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base_url: ep.base_url.trim_end_matches('/').to_string(),
            model: ep.model.clone().unwrap_or_else(|| "default".into()),
            bearer: ep.bearer(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, Attempt> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Err(classify(e)),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_string()
            .map_err(classify)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| {
                Attempt::Fatal(BackendError::Protocol(format!("invalid JSON body: {e}")))
            }),
            401 | 403 => Err(Attempt::Fatal(BackendError::Auth { status })),
            408 | 429 | 500..=599 => Err(Attempt::Retryable(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(BackendError::Http {
                status,
                body: text.chars().take(500).collect(),
            })),
        }
    }

    /// `image_b64` switches the user message to the multi-part vision form.
    pub(super) fn chat(
        &self,
        req: &ChatRequest,
        image_b64: Option<&str>,
    ) -> Result<String, Attempt> {
        let user = match image_b64 {
            None => json!(req.user_prompt),
            Some(b64) => json!([
                {"type": "text", "text": req.user_prompt},
                {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}
            ]),
        };
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": user},
            ],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_new_tokens,
        });
        let reply = self.post("/v1/chat/completions", &body)?;
        extract_reply(&reply).map_err(Attempt::Fatal)
    }

    pub(super) fn generate(&self, req: &ImageGenRequest) -> Result<RgbaImage, Attempt> {
        let body = json!({
            "prompt": req.positive_prompt,
            "negative_prompt": req.negative_prompt,
            "steps": req.steps,
            "guidance_scale": req.guidance_scale,
            "strength": req.strength,
            "width": req.width,
            "height": req.height,
            "seed": req.seed,
            "alpha": req.wants_alpha,
        });
        let reply = self.post("/v1/images/generate", &body)?;
        let (img, had_alpha) = decode_png_field(&reply)?;
        if req.wants_alpha && !had_alpha {
            return Err(Attempt::Fatal(BackendError::Protocol(
                "alpha requested but the returned PNG has no alpha channel".into(),
            )));
        }
        Ok(img)
    }

    pub(super) fn harmonize(
        &self,
        composite_b64: &str,
        mask_b64: &str,
    ) -> Result<RgbaImage, Attempt> {
        let body = json!({
            "composite_png_base64": composite_b64,
            "mask_png_base64": mask_b64,
        });
        let reply = self.post("/v1/harmonize", &body)?;
        Ok(decode_png_field(&reply)?.0)
    }
}

fn classify(e: ureq::Error) -> Attempt {
    use ureq::Error as E;
    match e {
        E::StatusCode(s) => Attempt::Retryable(format!("HTTP {s}")),
        E::BadUri(u) => Attempt::Fatal(BackendError::Precondition(format!("bad URI {u}"))),
        E::Json(j) => Attempt::Fatal(BackendError::Protocol(j.to_string())),
        E::BodyExceedsLimit(n) => Attempt::Fatal(BackendError::Protocol(format!(
            "response body exceeds {n} bytes"
        ))),
        other => Attempt::Retryable(other.to_string()),
    }
}

fn extract_reply(v: &Value) -> Result<String, BackendError> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        // some servers answer with a list of typed parts
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendError::Protocol("message content is not text".into())),
    }
}

fn decode_png_field(v: &Value) -> Result<(RgbaImage, bool), BackendError> {
    let b64 = v
        .get("image_png_base64")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing image_png_base64".into()))?;
    RgbaImage::from_png_base64_with_alpha_flag(b64)
        .map_err(|e| BackendError::Protocol(format!("undecodable image: {e}")))
}
