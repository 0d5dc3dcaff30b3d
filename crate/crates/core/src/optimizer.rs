//! Iterative system-prompt optimization driven by textual criticism.
//!
//! Each iteration asks the agent for a downstream prompt, has an evaluator
//! criticize it, rewrites the system prompt from that criticism, regenerates
//! the downstream prompt with the rewrite and lets a validator decide whether
//! the rewrite is an improvement. The loop runs at most `max_iterations`
//! times and stops at the first accepted rewrite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ChatParams, ChatRequest};
use crate::prompts;

pub const DEFAULT_MAX_ITERATIONS: u32 = 5;
pub const DEFAULT_TOKEN_BUDGET: u32 = 75;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{step} returned an empty reply")]
    EmptyReply { step: &'static str },
    #[error("rewrite step returned the system prompt unchanged")]
    NoChange,
    #[error("validator reply has no YES/NO decision: {reply:?}")]
    Unparseable { reply: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, OptimizeError>;

/// User-message templates for each participant, plus the meta-prompts used
/// as system prompts of the evaluator, rewriter and validator.
///
/// Placeholders: `{category}`, `{prompt}`, `{system_prompt}`, `{criticism}`,
/// `{candidate}`, `{baseline}`, `{token_budget}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleTemplates {
    pub agent_user: String,
    pub evaluator_system: String,
    pub evaluator_user: String,
    pub tgd_system: String,
    pub tgd_user: String,
    pub validator_system: String,
    pub validator_user: String,
}

impl Default for RoleTemplates {
    fn default() -> Self {
        Self {
            agent_user: "Write one prompt for an image of a single {category}. Reply with the prompt only."
                .into(),
            evaluator_system: prompts::EVALUATOR_SYSTEM.into(),
            evaluator_user: "Prompt to review:\n{prompt}".into(),
            tgd_system: prompts::TGD_SYSTEM.into(),
            tgd_user: "Current system prompt:\n<<<\n{system_prompt}\n>>>\n\nCriticism of a prompt it produced:\n<<<\n{criticism}\n>>>\n\nWrite the improved system prompt."
                .into(),
            validator_system: prompts::PROMPT_VALIDATOR_SYSTEM.into(),
            validator_user: "Category: {category}\n\nBaseline prompt:\n{baseline}\n\nCandidate prompt:\n{candidate}"
                .into(),
        }
    }
}

impl RoleTemplates {
    /// Templates for optimizing the validation agent's system prompt: the
    /// agent is asked to lay out how it would report on an image.
    pub fn for_validation_agent() -> Self {
        Self {
            agent_user: "Category: {category}\nWithout seeing an image yet, write the exact response you would give for an image that shows one intact {category} on a plain black background, following your output format."
                .into(),
            evaluator_system: prompts::EVALUATOR_VALIDATION_SYSTEM.into(),
            evaluator_user: "Sample response to review:\n{prompt}".into(),
            tgd_system: prompts::TGD_VALIDATION_SYSTEM.into(),
            validator_system: prompts::PROMPT_VALIDATOR_VALIDATION_SYSTEM.into(),
            validator_user: "Category: {category}\n\nBaseline response:\n{baseline}\n\nCandidate response:\n{candidate}"
                .into(),
            ..Self::default()
        }
    }
}

fn meta_params() -> ChatParams {
    ChatParams {
        max_new_tokens: 1024,
        ..ChatParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: u32,
    pub token_budget: u32,
    pub templates: RoleTemplates,
    /// Sampling for the agent whose system prompt is optimized.
    pub agent_params: ChatParams,
    /// Sampling for evaluator, rewriter and validator.
    pub meta_params: ChatParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            token_budget: DEFAULT_TOKEN_BUDGET,
            templates: RoleTemplates::default(),
            agent_params: ChatParams::default(),
            meta_params: meta_params(),
        }
    }
}

/// Chat endpoints taking part in one optimization run. The rewriter is
/// usually the evaluator's endpoint.
#[derive(Debug, Clone, Copy)]
pub struct Participants<'a> {
    pub agent: &'a Backend,
    pub evaluator: &'a Backend,
    pub rewriter: &'a Backend,
    pub validator: &'a Backend,
}

/// One loop iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    pub iteration: u32,
    pub system_prompt: String,
    pub candidate_system_prompt: Option<String>,
    pub downstream_prompt: String,
    pub candidate_downstream_prompt: Option<String>,
    pub criticism: Option<String>,
    pub decision: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub category: String,
    pub states: Vec<PromptState>,
    pub final_system_prompt: String,
    pub accepted: bool,
    pub iterations_used: u32,
}

impl OptimizationTrace {
    /// Writes `trace_<role>_<timestamp>.json` into `dir`.
    pub fn write(&self, dir: &Path, role: &str, timestamp: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("trace_{role}_{timestamp}.json"));
        let json = serde_json::to_string_pretty(self).expect("trace serializes");
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

fn require_nonempty(what: &str, s: &str) -> Result<()> {
    if s.trim().is_empty() {
        Err(OptimizeError::Precondition(format!(
            "{what} must be nonempty"
        )))
    } else {
        Ok(())
    }
}

/// Trims whitespace and any layers of matching quotes around a reply.
pub fn strip_reply(reply: &str) -> &str {
    let mut s = reply.trim();
    loop {
        let stripped = [
            ('"', '"'),
            ('\'', '\''),
            ('`', '`'),
            ('\u{201c}', '\u{201d}'),
        ]
        .iter()
        .find_map(|&(open, close)| {
            s.strip_prefix(open)
                .and_then(|rest| rest.strip_suffix(close))
        });
        match stripped {
            Some(inner) if s.chars().count() >= 2 => s = inner.trim(),
            _ => return s,
        }
    }
}

fn ask(
    backend: &Backend,
    system: &str,
    user: &str,
    params: ChatParams,
    step: &'static str,
) -> Result<String> {
    let reply = backend.chat(&ChatRequest::new(system, user, params))?;
    let text = strip_reply(&reply);
    if text.is_empty() {
        return Err(OptimizeError::EmptyReply { step });
    }
    Ok(text.to_string())
}

/// Asks the agent (running under `system_prompt`) for one downstream prompt.
pub fn generate_downstream_prompt(
    system_prompt: &str,
    category: &str,
    agent: &Backend,
    cfg: &OptimizerConfig,
) -> Result<String> {
    require_nonempty("category", category)?;
    require_nonempty("system prompt", system_prompt)?;
    let user = fill(&cfg.templates.agent_user, cfg, &[("category", category)]);
    let prompt = ask(agent, system_prompt, &user, cfg.agent_params, "agent")?;
    let words = prompt.split_whitespace().count();
    if words > cfg.token_budget as usize {
        log::debug!(
            "downstream prompt has {words} words, budget is {}",
            cfg.token_budget
        );
    }
    Ok(prompt)
}

/// Returns the evaluator's criticism verbatim (modulo outer whitespace).
pub fn evaluate_prompt(
    downstream_prompt: &str,
    evaluator: &Backend,
    cfg: &OptimizerConfig,
) -> Result<String> {
    require_nonempty("downstream prompt", downstream_prompt)?;
    let t = &cfg.templates;
    let system = fill(&t.evaluator_system, cfg, &[]);
    let user = fill(&t.evaluator_user, cfg, &[("prompt", downstream_prompt)]);
    let reply = evaluator.chat(&ChatRequest::new(system, user, cfg.meta_params))?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(OptimizeError::EmptyReply { step: "evaluator" });
    }
    Ok(text.to_string())
}

/// Rewrites `system_prompt` in the direction given by `criticism`.
pub fn tgd_step(
    system_prompt: &str,
    criticism: &str,
    rewriter: &Backend,
    cfg: &OptimizerConfig,
) -> Result<String> {
    require_nonempty("system prompt", system_prompt)?;
    require_nonempty("criticism", criticism)?;
    let t = &cfg.templates;
    let system = fill(&t.tgd_system, cfg, &[]);
    let user = fill(
        &t.tgd_user,
        cfg,
        &[("system_prompt", system_prompt), ("criticism", criticism)],
    );
    let rewritten = ask(rewriter, &system, &user, cfg.meta_params, "rewriter")?;
    if rewritten == system_prompt.trim() {
        return Err(OptimizeError::NoChange);
    }
    Ok(rewritten)
}

/// Case-insensitive scan for the last standalone YES/NO token.
pub fn parse_decision(reply: &str) -> Option<bool> {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .rev()
        .find_map(|tok| {
            if tok.eq_ignore_ascii_case("yes") {
                Some(true)
            } else if tok.eq_ignore_ascii_case("no") {
                Some(false)
            } else {
                None
            }
        })
}

/// Asks the validator whether `candidate` should replace `baseline`.
pub fn validate_prompt(
    candidate: &str,
    baseline: Option<&str>,
    category: &str,
    validator: &Backend,
    cfg: &OptimizerConfig,
) -> Result<bool> {
    require_nonempty("candidate prompt", candidate)?;
    let t = &cfg.templates;
    let system = fill(&t.validator_system, cfg, &[]);
    let user = fill(
        &t.validator_user,
        cfg,
        &[
            ("candidate", candidate),
            ("baseline", baseline.unwrap_or("(none)")),
            ("category", category),
        ],
    );
    let reply = validator.chat(&ChatRequest::new(system, user, cfg.meta_params))?;
    parse_decision(&reply).ok_or(OptimizeError::Unparseable { reply })
}

fn fill(template: &str, cfg: &OptimizerConfig, vars: &[(&str, &str)]) -> String {
    let budget = cfg.token_budget.to_string();
    let mut all = vars.to_vec();
    all.push(("token_budget", &budget));
    prompts::fill(template, &all)
}

/// Runs the optimization loop from `initial`.
///
/// A rewrite identical to its input, or a validator reply without a decision,
/// counts as a rejected iteration. Backend failures abort the run.
pub fn optimize_system_prompt(
    initial: &str,
    category: &str,
    cfg: &OptimizerConfig,
    who: Participants<'_>,
) -> Result<OptimizationTrace> {
    require_nonempty("initial system prompt", initial)?;
    require_nonempty("category", category)?;
    if cfg.max_iterations < 1 {
        return Err(OptimizeError::Precondition(
            "max_iterations must be at least 1".into(),
        ));
    }
    for (name, b) in [
        ("agent", who.agent),
        ("evaluator", who.evaluator),
        ("rewriter", who.rewriter),
        ("validator", who.validator),
    ] {
        if !b.endpoint().role.can_chat() {
            return Err(OptimizeError::Precondition(format!(
                "{name} endpoint role {:?} is not chat-capable",
                b.endpoint().role
            )));
        }
    }

    let mut system_prompt = initial.trim().to_string();
    let mut last_candidate: Option<String> = None;
    let mut states = Vec::new();

    for iteration in 0..cfg.max_iterations {
        let downstream = generate_downstream_prompt(&system_prompt, category, who.agent, cfg)?;
        let criticism = evaluate_prompt(&downstream, who.evaluator, cfg)?;
        let mut state = PromptState {
            iteration,
            system_prompt: system_prompt.clone(),
            candidate_system_prompt: None,
            downstream_prompt: downstream.clone(),
            candidate_downstream_prompt: None,
            criticism: Some(criticism.clone()),
            decision: None,
        };

        let candidate = match tgd_step(&system_prompt, &criticism, who.rewriter, cfg) {
            Ok(c) => c,
            Err(OptimizeError::NoChange) => {
                log::info!("iteration {iteration}: rewrite unchanged");
                states.push(state);
                continue;
            }
            Err(e) => return Err(e),
        };
        let candidate_downstream =
            generate_downstream_prompt(&candidate, category, who.agent, cfg)?;
        let decision = match validate_prompt(
            &candidate_downstream,
            Some(&downstream),
            category,
            who.validator,
            cfg,
        ) {
            Ok(d) => d,
            Err(OptimizeError::Unparseable { reply }) => {
                log::warn!(
                    "iteration {iteration}: undecidable validator reply, treating as NO: {reply:?}"
                );
                false
            }
            Err(e) => return Err(e),
        };

        state.candidate_system_prompt = Some(candidate.clone());
        state.candidate_downstream_prompt = Some(candidate_downstream);
        state.decision = Some(decision);
        states.push(state);

        if decision {
            let iterations_used = states.len() as u32;
            return Ok(OptimizationTrace {
                category: category.to_string(),
                states,
                final_system_prompt: candidate,
                accepted: true,
                iterations_used,
            });
        }
        system_prompt = candidate.clone();
        last_candidate = Some(candidate);
    }

    let iterations_used = states.len() as u32;
    Ok(OptimizationTrace {
        category: category.to_string(),
        states,
        final_system_prompt: last_candidate.unwrap_or(system_prompt),
        accepted: false,
        iterations_used,
    })
}
