//! Scripted offline backends.
//!
//! A mock endpoint points at a JSON script. Chat and vision mocks answer from
//! reply sequences (optionally selected by rules matching the request text or
//! the received image digest); image mocks render seeded procedural shapes.
//! Every call is appended to an invocation log kept behind a mutex, and
//! mirrored to `log_path` as JSON lines when one is set.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::procedural::{self, Generator};
use super::{Attempt, BackendError, ChatRequest, ImageGenRequest};
use crate::image::RgbaImage;
use crate::mask;

fn default_specks() -> u32 {
    24
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    /// The first `fail_first` calls fail with a retryable transport error.
    #[serde(default)]
    pub fail_first: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Fallback reply sequence; the last entry repeats once exhausted.
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default)]
    pub reply_files: Vec<PathBuf>,
    /// Vision mocks: derive a verdict from the image when no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<Judge>,
    /// Image mocks: shape used for alpha requests (default `disk`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    /// Image mocks: seeds divisible by this value render `two_disks`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_disks_every: Option<u64>,
    /// Image mocks: seeds divisible by this value render `empty`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_every: Option<u64>,
    /// Lone alpha flips sprinkled over transparent renders.
    #[serde(default = "default_specks")]
    pub specks: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring of the system prompt, user prompt, or image prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Digest of the received image, as [`RgbaImage::pixel_digest`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default)]
    pub reply_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Transport,
    Auth,
    Protocol,
    BadRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judge {
    /// Counts bright connected regions on the (black) canvas.
    Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub index: u64,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    pub outcome: String,
}

#[derive(Default)]
struct State {
    calls: u64,
    rule_cursor: Vec<usize>,
    default_cursor: usize,
    log: Vec<Invocation>,
}

pub struct MockBackend {
    script: MockScript,
    rule_replies: Vec<Vec<String>>,
    default_replies: Vec<String>,
    log_path: Option<PathBuf>,
    state: Mutex<State>,
}

impl MockBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let err = |message: String| BackendError::Script {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let script: MockScript = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::new(script, path.parent())
    }

    /// `dir` resolves relative reply files and log paths.
    pub fn new(script: MockScript, dir: Option<&Path>) -> Result<Self, BackendError> {
        let resolve = |p: &Path| match dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        };
        let read_all =
            |inline: &[String], files: &[PathBuf]| -> Result<Vec<String>, BackendError> {
                let mut out = inline.to_vec();
                for f in files {
                    let p = resolve(f);
                    let text = std::fs::read_to_string(&p).map_err(|e| BackendError::Script {
                        path: p.clone(),
                        message: e.to_string(),
                    })?;
                    out.push(text);
                }
                Ok(out)
            };
        let rule_replies = script
            .rules
            .iter()
            .map(|r| read_all(&r.replies, &r.reply_files))
            .collect::<Result<Vec<_>, _>>()?;
        let default_replies = read_all(&script.replies, &script.reply_files)?;
        let log_path = script.log_path.as_deref().map(resolve);
        let state = State {
            rule_cursor: vec![0; script.rules.len()],
            ..State::default()
        };
        Ok(Self {
            script,
            rule_replies,
            default_replies,
            log_path,
            state: Mutex::new(state),
        })
    }

    pub fn invocations(&self) -> Vec<Invocation> {
        self.state.lock().expect("mock state poisoned").log.clone()
    }

    fn record(&self, state: &mut State, mut inv: Invocation) {
        inv.index = state.log.len() as u64;
        if let Some(p) = &self.log_path {
            let line = serde_json::to_string(&inv).expect("invocation serializes");
            let res = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = res {
                log::warn!("cannot append mock log {}: {e}", p.display());
            }
        }
        state.log.push(inv);
    }

    fn matching_rule(&self, haystacks: &[&str], digest: Option<&str>) -> Option<usize> {
        self.script.rules.iter().position(|r| {
            let text_ok = r
                .contains
                .as_deref()
                .is_none_or(|needle| haystacks.iter().any(|h| h.contains(needle)));
            let image_ok = r
                .image_sha256
                .as_deref()
                .is_none_or(|want| digest.is_some_and(|d| d.eq_ignore_ascii_case(want)));
            text_ok && image_ok
        })
    }

    fn next_reply(seq: &[String], cursor: &mut usize) -> Option<String> {
        let reply = seq.get((*cursor).min(seq.len().checked_sub(1)?))?.clone();
        *cursor += 1;
        Some(reply)
    }

    pub(super) fn chat(
        &self,
        req: &ChatRequest,
        image: Option<&RgbaImage>,
    ) -> Result<String, Attempt> {
        let digest = image.map(RgbaImage::pixel_digest);
        let mut state = self.state.lock().expect("mock state poisoned");
        let call = state.calls;
        state.calls += 1;
        let mut inv = Invocation {
            index: 0,
            op: if image.is_some() {
                "vision_chat"
            } else {
                "chat"
            }
            .into(),
            system_prompt: Some(req.system_prompt.clone()),
            user_prompt: Some(req.user_prompt.clone()),
            prompt: None,
            seed: None,
            image_sha256: digest.clone(),
            outcome: "ok".into(),
        };
        if call < self.script.fail_first as u64 {
            inv.outcome = "transport_failure".into();
            self.record(&mut state, inv);
            return Err(Attempt::Retryable(format!(
                "scripted transport failure #{}",
                call + 1
            )));
        }
        let rule = self.matching_rule(&[&req.system_prompt, &req.user_prompt], digest.as_deref());
        if let Some(failure) = rule.and_then(|i| self.script.rules[i].error) {
            inv.outcome = format!("{failure:?}").to_lowercase();
            self.record(&mut state, inv);
            return Err(scripted_failure(failure));
        }
        let reply = match rule {
            Some(i) => {
                let mut cursor = state.rule_cursor[i];
                let r = Self::next_reply(&self.rule_replies[i], &mut cursor);
                state.rule_cursor[i] = cursor;
                r
            }
            None => None,
        };
        let reply = reply
            .or_else(|| match (self.script.judge, image) {
                (Some(Judge::Components), Some(img)) => {
                    Some(judge_components(img, category_hint(&req.user_prompt)))
                }
                _ => None,
            })
            .or_else(|| {
                let mut cursor = state.default_cursor;
                let r = Self::next_reply(&self.default_replies, &mut cursor);
                state.default_cursor = cursor;
                r
            });
        match reply {
            Some(text) => {
                self.record(&mut state, inv);
                Ok(text)
            }
            None => {
                inv.outcome = "no_reply".into();
                self.record(&mut state, inv);
                Err(Attempt::Fatal(BackendError::Protocol(
                    "mock script has no reply for this request".into(),
                )))
            }
        }
    }

    pub(super) fn generate(&self, req: &ImageGenRequest) -> Result<RgbaImage, Attempt> {
        let kind = {
            let mut state = self.state.lock().expect("mock state poisoned");
            let call = state.calls;
            state.calls += 1;
            let mut inv = Invocation {
                index: 0,
                op: "generate_image".into(),
                system_prompt: None,
                user_prompt: None,
                prompt: Some(req.positive_prompt.clone()),
                seed: Some(req.seed),
                image_sha256: None,
                outcome: "ok".into(),
            };
            if call < self.script.fail_first as u64 {
                inv.outcome = "transport_failure".into();
                self.record(&mut state, inv);
                return Err(Attempt::Retryable(format!(
                    "scripted transport failure #{}",
                    call + 1
                )));
            }
            let rule = self.matching_rule(&[&req.positive_prompt], None);
            if let Some(failure) = rule.and_then(|i| self.script.rules[i].error) {
                inv.outcome = format!("{failure:?}").to_lowercase();
                self.record(&mut state, inv);
                return Err(scripted_failure(failure));
            }
            self.record(&mut state, inv);
            rule.and_then(|i| self.script.rules[i].generator)
                .unwrap_or_else(|| self.default_generator(req))
        };
        Ok(procedural::render(
            kind,
            req.width,
            req.height,
            req.seed,
            self.script.specks,
        ))
    }

    fn default_generator(&self, req: &ImageGenRequest) -> Generator {
        if !req.wants_alpha {
            return Generator::Scene;
        }
        let every = |k: Option<u64>| k.is_some_and(|k| k > 0 && req.seed.is_multiple_of(k));
        if every(self.script.empty_every) {
            Generator::Empty
        } else if every(self.script.two_disks_every) {
            Generator::TwoDisks
        } else {
            self.script.generator.unwrap_or(Generator::Disk)
        }
    }
}

fn scripted_failure(kind: MockFailure) -> Attempt {
    match kind {
        MockFailure::Transport => Attempt::Retryable("scripted transport failure".into()),
        MockFailure::Auth => Attempt::Fatal(BackendError::Auth { status: 401 }),
        MockFailure::Protocol => {
            Attempt::Fatal(BackendError::Protocol("scripted protocol error".into()))
        }
        MockFailure::BadRequest => Attempt::Fatal(BackendError::Http {
            status: 400,
            body: "scripted bad request".into(),
        }),
    }
}

/// Reads the category from a `Category: <name>` line of the user prompt.
fn category_hint(user_prompt: &str) -> &str {
    user_prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix("Category:"))
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .unwrap_or("object")
}

/// Builds a transcript in the validation agent's output format from a crude
/// look at the image: bright regions on black are counted as objects.
pub fn judge_components(image: &RgbaImage, category: &str) -> String {
    let bits = image
        .pixels()
        .chunks_exact(4)
        .map(|p| p[3] > 127 && p[..3].iter().any(|&c| c > 24))
        .collect();
    let m = mask::BinaryMask::from_bits(image.width(), image.height(), bits).expect("sized");
    let m = mask::drop_specks(&m, mask::default_min_area(image.width(), image.height()));
    let comps = mask::connected_components(&m);
    let n = comps.len();
    let (w, h) = (image.width(), image.height());
    let touches = comps.iter().any(|c| {
        c.bbox.x == 0 || c.bbox.y == 0 || c.bbox.x + c.bbox.w == w || c.bbox.y + c.bbox.h == h
    });

    let (description, single, view, intact) = match n {
        0 => (
            "The image is a solid black square with no visible objects or features.".to_string(),
            (
                format!("The image does not contain any {category}."),
                "Fail",
            ),
            (
                "There is no visible object to provide a view of.".to_string(),
                "N/A",
            ),
            (format!("There is no {category} to evaluate."), "N/A"),
        ),
        1 => (
            format!(
                "The image shows a single rounded {category} centered on a solid black background."
            ),
            (format!("The image contains only one {category}."), "Meet"),
            (
                format!("The {category} is shown from a single angle or perspective."),
                "Meet",
            ),
            if touches {
                (
                    format!("The {category} is cut off by the image border."),
                    "Fail",
                )
            } else {
                (
                    format!("The {category} is intact and fully visible."),
                    "Meet",
                )
            },
        ),
        k => (
            format!("The image shows {k} separate rounded shapes on a solid black background."),
            (
                format!("The image contains {k} objects, not just one {category}."),
                "Fail",
            ),
            (
                "Each object is shown from a single angle.".to_string(),
                "Meet",
            ),
            (
                "All objects appear intact and fully visible.".to_string(),
                "Meet",
            ),
        ),
    };
    let keep = single.1 == "Meet" && view.1 == "Meet" && intact.1 == "Meet";
    let conclusion = if keep {
        "The image meets all the criteria and should be kept."
    } else {
        "The image does not meet all the criteria and should be filtered out."
    };
    format!(
        "**Image Description:**\n\n{description}\n\n**Evaluation Criteria:**\n\n\
         1. **Single {category}:**\n    * {}\n    * **Result:** {}\n\
         2. **Single View:**\n    * {}\n    * **Result:** {}\n\
         3. **Intact {category}:**\n    * {}\n    * **Result:** {}\n\
         4. **Plain Background:**\n    * The background is solid black, which is plain.\n    * **Result:** Meet\n\n\
         **Conclusion:**\n\n{conclusion}\n\n**Result:** {}\n",
        single.0,
        single.1,
        view.0,
        view.1,
        intact.0,
        intact.1,
        if keep { "Keep" } else { "Filter Out" },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, ChatParams, ImageGenParams, Role};

    fn chat_req() -> ChatRequest {
        ChatRequest::new("sys", "user", ChatParams::default())
    }

    #[test]
    fn sequence_repeats_last_reply() {
        let script = MockScript {
            replies: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        let b = Backend::from_script(Role::MockChat, script).unwrap();
        let got: Vec<_> = (0..4).map(|_| b.chat(&chat_req()).unwrap()).collect();
        assert_eq!(got, ["a", "b", "b", "b"]);
    }

    #[test]
    fn rules_match_on_text() {
        let script = MockScript {
            rules: vec![MockRule {
                contains: Some("pear".into()),
                replies: vec!["fruit".into()],
                ..Default::default()
            }],
            replies: vec!["other".into()],
            ..Default::default()
        };
        let b = Backend::from_script(Role::MockChat, script).unwrap();
        let pear = ChatRequest::new("sys", "a pear please", ChatParams::default());
        assert_eq!(b.chat(&pear).unwrap(), "fruit");
        assert_eq!(b.chat(&chat_req()).unwrap(), "other");
    }

    #[test]
    fn scripted_auth_error_is_not_retried() {
        let script = MockScript {
            rules: vec![MockRule {
                error: Some(MockFailure::Auth),
                ..Default::default()
            }],
            ..Default::default()
        };
        let b = Backend::from_script(Role::MockChat, script)
            .unwrap()
            .with_retry_policy(3, 0);
        assert!(matches!(
            b.chat(&chat_req()),
            Err(BackendError::Auth { status: 401 })
        ));
        assert_eq!(b.invocations().len(), 1);
    }

    #[test]
    fn retries_exhausted_is_transport_error() {
        let script = MockScript {
            fail_first: 10,
            replies: vec!["late".into()],
            ..Default::default()
        };
        let b = Backend::from_script(Role::MockChat, script)
            .unwrap()
            .with_retry_policy(2, 0);
        match b.chat(&chat_req()) {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_script_is_protocol_error() {
        let b = Backend::from_script(Role::MockChat, MockScript::default()).unwrap();
        assert!(matches!(
            b.chat(&chat_req()),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn background_requests_are_opaque() {
        let b = Backend::from_script(Role::MockImage, MockScript::default()).unwrap();
        let p = ImageGenParams {
            width: 64,
            height: 64,
            ..ImageGenParams::default()
        };
        let img = b
            .generate_image(&ImageGenRequest::new("a room", &p, false, 3))
            .unwrap();
        assert!(!img.has_transparency());
    }

    #[test]
    fn judge_counts_regions() {
        let one = procedural::render(Generator::Disk, 128, 128, 4, 0).flatten_over_black();
        assert!(judge_components(&one, "ball").ends_with("**Result:** Keep\n"));
        let two = procedural::render(Generator::TwoDisks, 128, 128, 4, 0).flatten_over_black();
        assert!(judge_components(&two, "ball").ends_with("**Result:** Filter Out\n"));
        let none = procedural::render(Generator::Empty, 128, 128, 4, 0).flatten_over_black();
        assert!(judge_components(&none, "ball").contains("N/A"));
    }

    #[test]
    fn category_hint_reads_prompt_line() {
        assert_eq!(category_hint("Category: hair drier\nLook."), "hair drier");
        assert_eq!(category_hint("no hint"), "object");
    }
}
