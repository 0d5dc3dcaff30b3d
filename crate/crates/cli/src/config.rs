//! Run configuration: one JSON document, optionally named by `GNV_CONFIG`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gnv_core::backend::{Backend, BackendEndpoint, ImageGenParams, Role};
use gnv_core::compositor::{HarmonizerKind, PlacementPolicy};
use gnv_core::dataset::{check_categories, CategorySpec};
use gnv_core::mask::{DEFAULT_ALPHA_THRESHOLD, DEFAULT_MEDIAN_KERNEL, DEFAULT_MIN_AREA_FRACTION};
use gnv_core::optimizer::{OptimizerConfig, RoleTemplates};
use gnv_core::validation::ValidatorSettings;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_ENV: &str = "GNV_CONFIG";

/// Endpoint keys understood by the stages.
pub mod keys {
    pub const AGENT: &str = "agent";
    pub const EVALUATOR: &str = "evaluator";
    /// Falls back to the evaluator.
    pub const REWRITER: &str = "rewriter";
    pub const PROMPT_VALIDATOR: &str = "prompt_validator";
    /// Chat endpoint answering for the validation agent during prompt
    /// optimization; falls back to the agent.
    pub const VALIDATION_DRY_RUN: &str = "validation_dry_run";
    pub const VISION: &str = "vision";
    pub const IMAGE: &str = "image";
    pub const ALL: [&str; 7] = [
        AGENT,
        EVALUATOR,
        REWRITER,
        PROMPT_VALIDATOR,
        VALIDATION_DRY_RUN,
        VISION,
        IMAGE,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    /// Run the optimization stage as part of `gnv run`.
    pub optimize: bool,
    /// Category used while optimizing; defaults to the first category.
    pub probe_category: Option<String>,
    pub ld_agent_initial: String,
    pub validation_initial: String,
    /// Prompts used when optimization is skipped.
    pub ld_agent: String,
    pub validation_agent: String,
    /// Optimizer settings for the validation agent; defaults to `optimizer`
    /// with validation-specific templates.
    pub validation_optimizer: Option<OptimizerConfig>,
}

impl Default for PromptSettings {
    fn default() -> Self {
        use gnv_core::prompts::*;
        Self {
            optimize: true,
            probe_category: None,
            ld_agent_initial: LD_AGENT_INITIAL.into(),
            validation_initial: VALIDATION_INITIAL.into(),
            ld_agent: LD_AGENT_OPTIMIZED.into(),
            validation_agent: VALIDATION_OPTIMIZED.into(),
            validation_optimizer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub alpha_threshold: u8,
    pub median_kernel: u32,
    /// Smallest kept component in pixels; defaults to 0.1% of the image.
    pub min_area: Option<usize>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            alpha_threshold: DEFAULT_ALPHA_THRESHOLD,
            median_kernel: DEFAULT_MEDIAN_KERNEL,
            min_area: None,
        }
    }
}

impl FilterSettings {
    pub fn min_area_for(&self, width: u32, height: u32) -> usize {
        self.min_area.unwrap_or_else(|| {
            (DEFAULT_MIN_AREA_FRACTION * (width as f64) * (height as f64)).ceil() as usize
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Any background may host any instance.
    #[default]
    Independent,
    /// Backgrounds are drawn from those generated for the scene's first category.
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSettings {
    pub settings: Vec<String>,
    pub per_category: u32,
    pub mode: BackgroundMode,
}

impl Default for BackgroundSettings {
    fn default() -> Self {
        Self {
            settings: vec!["indoor".into(), "outdoor".into()],
            per_category: 1,
            mode: BackgroundMode::Independent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    /// Number of composite images.
    pub size: u64,
    /// Side of composites and backgrounds.
    pub image_size: u32,
    pub out_dir: PathBuf,
    /// Instances to generate; defaults to `size` times the mean instances per image.
    pub instances: Option<u64>,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            size: 100,
            image_size: gnv_core::backend::DEFAULT_IMAGE_SIDE,
            out_dir: PathBuf::from("gnv-out"),
            instances: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSettings {
    /// Size of the least-frequent category group reported separately.
    pub rare_group: Option<usize>,
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub endpoints: BTreeMap<String, BackendEndpoint>,
    pub categories: Vec<CategorySpec>,
    #[serde(default)]
    pub prompts: PromptSettings,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub generation: ImageGenParams,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub validator: ValidatorSettings,
    #[serde(default)]
    pub policy: PlacementPolicy,
    #[serde(default)]
    pub harmonizer: HarmonizerKind,
    #[serde(default)]
    pub backgrounds: BackgroundSettings,
    #[serde(default)]
    pub dataset: DatasetSettings,
    #[serde(default)]
    pub stats: StatsSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl RunConfig {
    /// A configuration with every default and the given categories.
    pub fn with_categories(categories: Vec<CategorySpec>) -> Self {
        Self {
            endpoints: BTreeMap::new(),
            categories,
            prompts: PromptSettings::default(),
            optimizer: OptimizerConfig::default(),
            generation: ImageGenParams::default(),
            filter: FilterSettings::default(),
            validator: ValidatorSettings::default(),
            policy: PlacementPolicy::default(),
            harmonizer: HarmonizerKind::default(),
            backgrounds: BackgroundSettings::default(),
            dataset: DatasetSettings::default(),
            stats: StatsSettings::default(),
            seed: 0,
            parallelism: default_parallelism(),
        }
    }

    /// Parses `text`; relative mock scripts and `out_dir` resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        for ep in cfg.endpoints.values_mut() {
            ep.rebase(base);
        }
        if let HarmonizerKind::External { endpoint, .. } = &mut cfg.harmonizer {
            endpoint.rebase(base);
        }
        if cfg.dataset.out_dir.is_relative() {
            cfg.dataset.out_dir = base.join(&cfg.dataset.out_dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        Self::from_json(&text, &base)
    }

    pub fn check(&self) -> Result<(), CliError> {
        check_categories(&self.categories).map_err(|e| CliError::Config(e.to_string()))?;
        for key in self.endpoints.keys() {
            if !keys::ALL.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown endpoint key {key:?}; expected one of {}",
                    keys::ALL.join(", ")
                )));
            }
        }
        for (key, ep) in &self.endpoints {
            ep.check()
                .map_err(|e| CliError::Config(format!("endpoint {key}: {e}")))?;
        }
        self.policy
            .check()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.parallelism == 0 {
            return Err(CliError::Config("parallelism must be at least 1".into()));
        }
        if self.filter.median_kernel.is_multiple_of(2) {
            return Err(CliError::Config("filter.median_kernel must be odd".into()));
        }
        if self.dataset.image_size < 64 || !self.dataset.image_size.is_multiple_of(8) {
            return Err(CliError::Config(
                "dataset.image_size must be >= 64 and a multiple of 8".into(),
            ));
        }
        if self.backgrounds.settings.is_empty() || self.backgrounds.per_category == 0 {
            return Err(CliError::Config(
                "at least one background per category is required".into(),
            ));
        }
        Ok(())
    }

    /// Digest of everything that shapes outputs; `out_dir` and
    /// `parallelism` are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("parallelism");
            if let Some(ds) = obj.get_mut("dataset").and_then(|d| d.as_object_mut()) {
                ds.remove("out_dir");
            }
        }
        // serde_json maps are ordered, so the text is canonical
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn instance_count(&self) -> u64 {
        self.dataset.instances.unwrap_or_else(|| {
            (self.dataset.size as f64 * self.policy.mean_instances()).ceil() as u64
        })
    }

    pub fn validation_optimizer(&self) -> OptimizerConfig {
        self.prompts
            .validation_optimizer
            .clone()
            .unwrap_or_else(|| OptimizerConfig {
                templates: RoleTemplates::for_validation_agent(),
                ..self.optimizer.clone()
            })
    }

    pub fn probe_category(&self) -> Result<&str, CliError> {
        match &self.prompts.probe_category {
            Some(c) => Ok(c),
            None => self
                .categories
                .first()
                .map(|c| c.name.as_str())
                .ok_or_else(|| CliError::Config("no categories configured".into())),
        }
    }

    /// Connects the endpoint under `key`, checking its capability.
    pub fn backend(
        &self,
        key: &str,
        fallback: Option<&str>,
        need: Need,
    ) -> Result<Backend, CliError> {
        let (name, ep) = match (self.endpoints.get(key), fallback) {
            (Some(ep), _) => (key, ep),
            (None, Some(f)) => match self.endpoints.get(f) {
                Some(ep) => (f, ep),
                None => return Err(missing(key)),
            },
            (None, None) => return Err(missing(key)),
        };
        if !need.accepts(ep.role) {
            return Err(CliError::Config(format!(
                "endpoint {name} has role {:?}, which cannot serve as a {} endpoint",
                ep.role,
                need.label()
            )));
        }
        Backend::connect(ep).map_err(|e| CliError::Config(format!("endpoint {name}: {e}")))
    }
}

fn missing(key: &str) -> CliError {
    CliError::Config(format!("no endpoint configured under endpoints.{key}"))
}

#[derive(Debug, Clone, Copy)]
pub enum Need {
    Chat,
    Vision,
    Image,
}

impl Need {
    fn accepts(self, role: Role) -> bool {
        match self {
            Need::Chat => role.can_chat(),
            Need::Vision => role.can_see(),
            Need::Image => role.can_draw(),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Need::Chat => "chat",
            Need::Vision => "vision",
            Need::Image => "image generation",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"categories":[{"id":1,"name":"cup"}],"endpoints":{"agent":{"role":"mock_chat","base_url":"agent.json"}}}"#
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let cfg = RunConfig::from_json(minimal(), Path::new("/etc/gnv")).unwrap();
        assert_eq!(cfg.endpoints["agent"].base_url, "/etc/gnv/agent.json");
        assert_eq!(cfg.dataset.out_dir, Path::new("/etc/gnv/gnv-out"));
    }

    #[test]
    fn hash_ignores_out_dir_and_parallelism() {
        let a = RunConfig::from_json(minimal(), Path::new("/a")).unwrap();
        let mut b = a.clone();
        b.dataset.out_dir = "/elsewhere".into();
        b.parallelism = 9;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = minimal().replace("\"categories\"", "\"colour\":1,\"categories\"");
        assert!(RunConfig::from_json(&text, Path::new(".")).is_err());
    }

    #[test]
    fn instance_count_scales_with_mean() {
        let mut cfg = RunConfig::with_categories(vec![]);
        cfg.dataset.size = 20;
        assert_eq!(cfg.instance_count(), 70);
        cfg.dataset.instances = Some(3);
        assert_eq!(cfg.instance_count(), 3);
    }

    #[test]
    fn role_mismatch_is_config_error() {
        let cfg = RunConfig::from_json(minimal(), Path::new("/nonexistent")).unwrap();
        assert!(matches!(
            cfg.backend("agent", None, Need::Vision),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            cfg.backend("vision", None, Need::Vision),
            Err(CliError::Config(_))
        ));
    }
}
