//! Clients for the three model roles (chat, vision chat, text-to-image) plus
//! the optional harmonizer, each reachable over HTTP or through a scripted
//! mock that runs fully offline.

mod http;
pub mod mock;
pub mod procedural;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RgbaImage;

pub use mock::{Invocation, MockBackend, MockScript};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 256;
pub const DEFAULT_STEPS: u32 = 25;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.0;
pub const DEFAULT_STRENGTH: f64 = 1.0;
pub const DEFAULT_IMAGE_SIDE: u32 = 640;

/// Environment variable consulted for a bearer token when none is configured.
pub const TOKEN_ENV: &str = "GNV_API_TOKEN";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("encoded image is {size} bytes, limit is {limit}")]
    ImageTooLarge { size: usize, limit: usize },
    #[error("backend returned {actual_w}x{actual_h}, requested {want_w}x{want_h}")]
    ShapeMismatch {
        want_w: u32,
        want_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("mock script {path}: {message}")]
    Script { path: PathBuf, message: String },
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Chat,
    VisionChat,
    ImageGen,
    Harmonizer,
    MockChat,
    MockVision,
    MockImage,
}

impl Role {
    pub fn is_mock(self) -> bool {
        matches!(self, Role::MockChat | Role::MockVision | Role::MockImage)
    }

    pub fn can_chat(self) -> bool {
        matches!(self, Role::Chat | Role::MockChat)
    }

    pub fn can_see(self) -> bool {
        matches!(self, Role::VisionChat | Role::MockVision)
    }

    pub fn can_draw(self) -> bool {
        matches!(self, Role::ImageGen | Role::MockImage)
    }
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_image_limit() -> usize {
    20 * 1024 * 1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub role: Role,
    /// Server root for network roles, script file for mock roles.
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing)]
    pub auth_token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_image_limit")]
    pub max_image_bytes: usize,
}

impl BackendEndpoint {
    pub fn new(role: Role, base_url: impl Into<String>) -> Self {
        Self {
            role,
            base_url: base_url.into(),
            model: None,
            auth_token: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            max_image_bytes: default_image_limit(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(BackendError::Precondition(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.base_url.trim().is_empty() {
            return Err(BackendError::Precondition("empty base_url".into()));
        }
        if !self.role.is_mock()
            && !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://"))
        {
            return Err(BackendError::Precondition(format!(
                "network role {:?} needs an http(s) URL, got {}",
                self.role, self.base_url
            )));
        }
        Ok(())
    }

    /// Resolves a relative mock script path against `dir`.
    pub fn rebase(&mut self, dir: &Path) {
        if self.role.is_mock() {
            let p = Path::new(&self.base_url);
            if p.is_relative() {
                self.base_url = dir.join(p).to_string_lossy().into_owned();
            }
        }
    }

    fn bearer(&self) -> Option<String> {
        self.auth_token
            .clone()
            .or_else(|| std::env::var(TOKEN_ENV).ok())
            .filter(|t| !t.is_empty())
    }
}

/// Sampling parameters shared by every chat-style call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, params: ChatParams) -> Self {
        Self {
            system_prompt: system.into(),
            user_prompt: user.into(),
            temperature: params.temperature,
            top_p: params.top_p,
            max_new_tokens: params.max_new_tokens,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(BackendError::Precondition(m));
        if self.system_prompt.trim().is_empty() {
            return bad("empty system prompt".into());
        }
        if self.user_prompt.trim().is_empty() {
            return bad("empty user prompt".into());
        }
        if self.max_new_tokens < 1 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        Ok(())
    }
}

/// Generation defaults carried by the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageGenParams {
    pub negative_prompt: String,
    pub steps: u32,
    pub guidance_scale: f64,
    pub strength: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for ImageGenParams {
    fn default() -> Self {
        Self {
            negative_prompt: String::new(),
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            strength: DEFAULT_STRENGTH,
            width: DEFAULT_IMAGE_SIDE,
            height: DEFAULT_IMAGE_SIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGenRequest {
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub steps: u32,
    pub guidance_scale: f64,
    pub strength: f64,
    pub width: u32,
    pub height: u32,
    pub wants_alpha: bool,
    pub seed: u64,
}

impl ImageGenRequest {
    pub fn new(
        prompt: impl Into<String>,
        params: &ImageGenParams,
        wants_alpha: bool,
        seed: u64,
    ) -> Self {
        Self {
            positive_prompt: prompt.into(),
            negative_prompt: params.negative_prompt.clone(),
            steps: params.steps,
            guidance_scale: params.guidance_scale,
            strength: params.strength,
            width: params.width,
            height: params.height,
            wants_alpha,
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(BackendError::Precondition(m));
        if self.positive_prompt.trim().is_empty() {
            return bad("empty positive prompt".into());
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v < 64 || v % 8 != 0 {
                return bad(format!("{name} {v} must be >= 64 and a multiple of 8"));
            }
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return bad(format!("strength {} outside [0, 1]", self.strength));
        }
        Ok(())
    }
}

#[derive(Clone)]
enum Transport {
    Http(http::HttpClient),
    Mock(Arc<MockBackend>),
}

/// A connected endpoint. Cheap to clone; clones share mock state.
#[derive(Clone)]
pub struct Backend {
    endpoint: BackendEndpoint,
    transport: Transport,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("role", &self.endpoint.role)
            .field("base_url", &self.endpoint.base_url)
            .finish()
    }
}

impl Backend {
    pub fn connect(endpoint: &BackendEndpoint) -> Result<Self> {
        endpoint.check()?;
        let transport = if endpoint.role.is_mock() {
            Transport::Mock(Arc::new(MockBackend::load(Path::new(&endpoint.base_url))?))
        } else {
            Transport::Http(http::HttpClient::new(endpoint))
        };
        Ok(Self {
            endpoint: endpoint.clone(),
            transport,
        })
    }

    /// Wraps an in-memory script, for callers that build mocks programmatically.
    pub fn from_script(role: Role, script: MockScript) -> Result<Self> {
        if !role.is_mock() {
            return Err(BackendError::Precondition(format!(
                "{role:?} is not a mock role"
            )));
        }
        let mut endpoint = BackendEndpoint::new(role, "<inline>");
        endpoint.backoff_ms = 0;
        Ok(Self {
            endpoint,
            transport: Transport::Mock(Arc::new(MockBackend::new(script, None)?)),
        })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    pub fn with_retry_policy(mut self, max_retries: u32, backoff_ms: u64) -> Self {
        self.endpoint.max_retries = max_retries;
        self.endpoint.backoff_ms = backoff_ms;
        self
    }

    /// Invocation log of a mock backend; empty for network backends.
    pub fn invocations(&self) -> Vec<Invocation> {
        match &self.transport {
            Transport::Mock(m) => m.invocations(),
            Transport::Http(_) => Vec::new(),
        }
    }

    fn require(&self, ok: bool, op: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(BackendError::Precondition(format!(
                "endpoint role {:?} cannot serve {op}",
                self.endpoint.role
            )))
        }
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String> {
        self.require(self.endpoint.role.can_chat(), "chat")?;
        req.check()?;
        self.with_retries(|| match &self.transport {
            Transport::Http(c) => c.chat(req, None),
            Transport::Mock(m) => m.chat(req, None),
        })
    }

    pub fn vision_chat(&self, image: &RgbaImage, req: &ChatRequest) -> Result<String> {
        self.require(self.endpoint.role.can_see(), "vision_chat")?;
        req.check()?;
        if image.is_empty() {
            return Err(BackendError::Precondition("empty image".into()));
        }
        let encoded = image
            .to_png_base64()
            .map_err(|e| BackendError::Precondition(format!("cannot encode image: {e}")))?;
        let size = encoded.len() + "data:image/png;base64,".len();
        if size > self.endpoint.max_image_bytes {
            return Err(BackendError::ImageTooLarge {
                size,
                limit: self.endpoint.max_image_bytes,
            });
        }
        self.with_retries(|| match &self.transport {
            Transport::Http(c) => c.chat(req, Some(&encoded)),
            Transport::Mock(m) => m.chat(req, Some(image)),
        })
    }

    pub fn generate_image(&self, req: &ImageGenRequest) -> Result<RgbaImage> {
        self.require(self.endpoint.role.can_draw(), "generate_image")?;
        req.check()?;
        let img = self.with_retries(|| match &self.transport {
            Transport::Http(c) => c.generate(req),
            Transport::Mock(m) => m.generate(req),
        })?;
        if img.width() != req.width || img.height() != req.height {
            return Err(BackendError::ShapeMismatch {
                want_w: req.width,
                want_h: req.height,
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        Ok(img)
    }

    /// Sends a composite and its paste mask to an external harmonizer.
    pub fn harmonize(&self, composite: &RgbaImage, mask: &RgbaImage) -> Result<RgbaImage> {
        self.require(self.endpoint.role == Role::Harmonizer, "harmonize")?;
        let Transport::Http(c) = &self.transport else {
            unreachable!("harmonizer role is network-only");
        };
        let comp = composite
            .to_png_base64()
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let m = mask
            .to_png_base64()
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let img = self.with_retries(|| c.harmonize(&comp, &m))?;
        if img.width() != composite.width() || img.height() != composite.height() {
            return Err(BackendError::ShapeMismatch {
                want_w: composite.width(),
                want_h: composite.height(),
                actual_w: img.width(),
                actual_h: img.height(),
            });
        }
        Ok(img)
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T, Attempt>) -> Result<T> {
        let mut tries = 0u32;
        loop {
            tries += 1;
            match attempt() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(message)) => {
                    if tries > self.endpoint.max_retries {
                        return Err(BackendError::Transport {
                            attempts: tries,
                            message,
                        });
                    }
                    let delay = self
                        .endpoint
                        .backoff_ms
                        .saturating_mul(1u64 << (tries - 1).min(16))
                        .min(30_000);
                    log::warn!(
                        "{:?} attempt {tries} failed ({message}); retrying in {delay} ms",
                        self.endpoint.role
                    );
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
    }
}

/// Outcome of a single attempt, before retry policy is applied.
#[derive(Debug)]
pub(crate) enum Attempt {
    Retryable(String),
    Fatal(BackendError),
}

impl From<BackendError> for Attempt {
    fn from(e: BackendError) -> Self {
        Attempt::Fatal(e)
    }
}
