use gnv_core::backend::Backend;
use gnv_core::fsutil::write_atomic;
use gnv_core::optimizer::{
    optimize_system_prompt, OptimizationTrace, OptimizeError, OptimizerConfig, Participants,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{write_json, Ctx};
use crate::config::{keys, Need};
use crate::error::CliError;
use crate::state::Stage;

pub const PROMPTS_DIR: &str = "prompts";
pub const TRACES_DIR: &str = "traces";
pub const LD_AGENT_FILE: &str = "ld_agent.txt";
pub const VALIDATION_AGENT_FILE: &str = "validation_agent.txt";
const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub accepted: bool,
    pub iterations_used: u32,
    pub trace: String,
    pub prompt_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub probe_category: String,
    pub ld_agent: RoleSummary,
    pub validation_agent: RoleSummary,
}

fn map_err(e: OptimizeError) -> CliError {
    match e {
        OptimizeError::Backend(b) => b.into(),
        OptimizeError::Precondition(m) => CliError::Config(m),
        OptimizeError::Io(e) => CliError::Io(e.to_string()),
        other => CliError::Backend(other.to_string()),
    }
}

/// Prompt used by later stages: the optimized one if present, else `fallback`.
pub(super) fn resolve_prompt(ctx: &Ctx, file: &str, fallback: &str) -> Result<String, CliError> {
    let p = ctx.path(PROMPTS_DIR).join(file);
    if p.exists() {
        std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))
    } else {
        if ctx.cfg.prompts.optimize {
            log::warn!("{} not found; using the configured prompt", p.display());
        }
        Ok(fallback.to_string())
    }
}

pub fn optimize_prompts(ctx: &mut Ctx) -> Result<(), CliError> {
    let dir = ctx.path(PROMPTS_DIR);
    let summary_path = dir.join(SUMMARY_FILE);
    if ctx.state.is_done(Stage::Prompts) && summary_path.exists() {
        ctx.progress.stage_done("prompts", json!({"skipped": true}));
        return Ok(());
    }
    let cfg = &ctx.cfg;
    let agent = cfg.backend(keys::AGENT, None, Need::Chat)?;
    let evaluator = cfg.backend(keys::EVALUATOR, None, Need::Chat)?;
    let rewriter = cfg.backend(keys::REWRITER, Some(keys::EVALUATOR), Need::Chat)?;
    let validator = cfg.backend(keys::PROMPT_VALIDATOR, None, Need::Chat)?;
    let dry_run = cfg.backend(keys::VALIDATION_DRY_RUN, Some(keys::AGENT), Need::Chat)?;
    let probe = cfg.probe_category()?.to_string();
    ctx.progress.stage_start("prompts", 2);

    let timestamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let run = |role: &str, initial: &str, opt: &OptimizerConfig, agent: &Backend, file: &str| {
        let trace = optimize_system_prompt(
            initial,
            &probe,
            opt,
            Participants {
                agent,
                evaluator: &evaluator,
                rewriter: &rewriter,
                validator: &validator,
            },
        )
        .map_err(map_err)?;
        let trace_path = trace
            .write(&ctx.path(TRACES_DIR), role, &timestamp)
            .map_err(map_err)?;
        let prompt_path = dir.join(file);
        write_atomic(&prompt_path, trace.final_system_prompt.as_bytes())
            .map_err(|e| CliError::io(&prompt_path, e))?;
        ctx.progress.item(
            "prompts",
            role,
            if trace.accepted {
                "accepted"
            } else {
                "not_accepted"
            },
            None,
        );
        Ok::<_, CliError>(summarize(&trace, &trace_path))
    };
    let ld = run(
        "ld_agent",
        &cfg.prompts.ld_agent_initial,
        &cfg.optimizer,
        &agent,
        LD_AGENT_FILE,
    )?;
    let val = run(
        "validation_agent",
        &cfg.prompts.validation_initial,
        &cfg.validation_optimizer(),
        &dry_run,
        VALIDATION_AGENT_FILE,
    )?;
    for (role, s) in [("ld_agent", &ld), ("validation_agent", &val)] {
        if !s.accepted {
            log::warn!("{role}: no candidate accepted within the iteration bound; keeping the last rewrite");
        }
    }
    let summary = PromptSummary {
        probe_category: probe,
        ld_agent: ld,
        validation_agent: val,
    };
    write_json(&summary_path, &summary)?;
    ctx.progress.stage_done(
        "prompts",
        serde_json::to_value(&summary).expect("summary serializes"),
    );
    ctx.finish(Stage::Prompts)
}

fn summarize(trace: &OptimizationTrace, path: &std::path::Path) -> RoleSummary {
    RoleSummary {
        accepted: trace.accepted,
        iterations_used: trace.iterations_used,
        trace: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        prompt_sha256: gnv_core::prompts::sha256_hex(&trace.final_system_prompt),
    }
}
