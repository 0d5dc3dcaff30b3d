//! Shipped prompt assets and `{placeholder}` filling.

use sha2::{Digest, Sha256};

/// Initial system prompt of the prompt-writing agent.
pub const LD_AGENT_INITIAL: &str = include_str!("../assets/prompts/ld_agent_initial.txt");
/// Published optimized system prompt of the prompt-writing agent.
pub const LD_AGENT_OPTIMIZED: &str = include_str!("../assets/prompts/ld_agent_optimized.txt");
pub const VALIDATION_INITIAL: &str = include_str!("../assets/prompts/validation_initial.txt");
pub const VALIDATION_OPTIMIZED: &str = include_str!("../assets/prompts/validation_optimized.txt");

pub const EVALUATOR_SYSTEM: &str = include_str!("../assets/prompts/evaluator_system.txt");
pub const TGD_SYSTEM: &str = include_str!("../assets/prompts/tgd_system.txt");
pub const PROMPT_VALIDATOR_SYSTEM: &str =
    include_str!("../assets/prompts/prompt_validator_system.txt");

/// Meta-prompts used when the validation agent's own prompt is optimized.
pub const EVALUATOR_VALIDATION_SYSTEM: &str =
    include_str!("../assets/prompts/evaluator_validation_system.txt");
pub const TGD_VALIDATION_SYSTEM: &str = include_str!("../assets/prompts/tgd_validation_system.txt");
pub const PROMPT_VALIDATOR_VALIDATION_SYSTEM: &str =
    include_str!("../assets/prompts/prompt_validator_validation_system.txt");

/// Placeholder the validation prompts use for the object category.
pub const CATEGORY_PLACEHOLDER: &str = "[Category Name]";

/// Background scene template; `<object>` and `<setting>` are substituted.
pub const BACKGROUND_TEMPLATE: &str = "A <object> in an empty <setting> background";

/// Replaces each `{key}` with its value. Unknown placeholders are left alone.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

pub fn substitute_category(system_prompt: &str, category: &str) -> String {
    system_prompt.replace(CATEGORY_PLACEHOLDER, category)
}

pub fn background_prompt(object: &str, setting: &str) -> String {
    BACKGROUND_TEMPLATE
        .replace("<object>", object)
        .replace("<setting>", setting)
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
