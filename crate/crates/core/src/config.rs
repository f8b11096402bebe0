//! Config file loading: one TOML document covering the pipeline settings and
//! the concept registry. See `configs/default.toml` in the repository for the
//! shipped defaults.

use serde::{Deserialize, Serialize};

use crate::checker::DetectorEndpoint;
use crate::cra::{ConceptSpec, CraOptions};
use crate::error::{Error, Result};
use crate::pipeline::{DetectorKind, PipelineConfig, SchedulerKind};
use crate::text_embed::TextEmbedder;

/// Top-level config file schema.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub vlm: VlmSection,
    #[serde(default)]
    pub concepts: Vec<ConceptSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default = "d_sampling_steps")]
    pub sampling_steps: usize,
    #[serde(default = "d_schedule_steps")]
    pub schedule_steps: usize,
    #[serde(default = "d_beta_start")]
    pub beta_start: f64,
    #[serde(default = "d_beta_end")]
    pub beta_end: f64,
    #[serde(default = "d_guidance")]
    pub guidance_scale: f64,
    #[serde(default = "d_checkpoints")]
    pub checkpoint_ratios: Vec<f64>,
    #[serde(default = "d_scheduler")]
    pub scheduler: String,
    #[serde(default = "d_detector")]
    pub detector: String,
    #[serde(default = "d_threshold")]
    pub rule_threshold: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_model_seed")]
    pub model_seed: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default)]
    pub force_alpha_one: bool,
    #[serde(default)]
    pub force_m1_ones: bool,
    #[serde(default)]
    pub m2_as_m1: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default)]
    pub negative_guidance: bool,
    #[serde(default = "d_ng_scale")]
    pub negative_guidance_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmSection {
    #[serde(default)]
    pub endpoint: String,
    #[serde(default = "d_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "d_retries")]
    pub retries: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSection {
    pub name: String,
    pub elements: Vec<String>,
    pub negative: String,
    #[serde(default)]
    pub style: bool,
}

fn d_sampling_steps() -> usize {
    50
}
fn d_schedule_steps() -> usize {
    1000
}
fn d_beta_start() -> f64 {
    1e-4
}
fn d_beta_end() -> f64 {
    0.02
}
fn d_guidance() -> f64 {
    1.0
}
fn d_checkpoints() -> Vec<f64> {
    vec![0.8, 0.4]
}
fn d_scheduler() -> String {
    "ddim".into()
}
fn d_detector() -> String {
    "rule".into()
}
fn d_threshold() -> f64 {
    0.5
}
fn d_seed() -> u64 {
    17
}
fn d_model_seed() -> u64 {
    0x7e_c0de
}
fn d_ng_scale() -> f64 {
    0.3
}
fn d_timeout() -> u64 {
    3000
}
fn d_retries() -> u32 {
    2
}

impl Default for PipelineSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl Default for VlmSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl FileConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// The registry shipped by default: the six evaluated concepts with
    /// their check elements and replacement descriptions.
    pub fn with_default_concepts(mut self) -> Self {
        if self.concepts.is_empty() {
            self.concepts = default_concepts();
        }
        self
    }

    /// Lower the file schema onto the runtime pipeline config.
    pub fn pipeline_config(&self, endpoint_override: Option<&str>) -> Result<PipelineConfig> {
        let scheduler = match self.pipeline.scheduler.as_str() {
            "ddim" => SchedulerKind::Ddim,
            "ddpm" => SchedulerKind::Ddpm,
            other => {
                return Err(Error::Config(format!("unknown scheduler '{other}'")));
            }
        };
        let detector = match self.pipeline.detector.as_str() {
            "rule" => DetectorKind::Rule,
            "vlm" => DetectorKind::Vlm,
            other => {
                return Err(Error::Config(format!("unknown detector '{other}'")));
            }
        };
        let url = endpoint_override
            .map(str::to_string)
            .or_else(|| {
                if self.vlm.endpoint.is_empty() {
                    None
                } else {
                    Some(self.vlm.endpoint.clone())
                }
            });
        let vlm_endpoint = match url {
            Some(u) => Some(DetectorEndpoint::new(u, self.vlm.timeout_ms, self.vlm.retries)?),
            None => None,
        };
        let cfg = PipelineConfig {
            sampling_steps: self.pipeline.sampling_steps,
            schedule_steps: self.pipeline.schedule_steps,
            beta_start: self.pipeline.beta_start,
            beta_end: self.pipeline.beta_end,
            guidance_scale: self.pipeline.guidance_scale,
            checkpoint_ratios: self.pipeline.checkpoint_ratios.clone(),
            scheduler,
            detector,
            rule_threshold: self.pipeline.rule_threshold,
            vlm_endpoint,
            seed: self.pipeline.seed,
            model_seed: self.pipeline.model_seed,
            ablation: CraOptions {
                force_alpha_one: self.ablation.force_alpha_one,
                force_m1_ones: self.ablation.force_m1_ones,
                m2_as_m1: self.ablation.m2_as_m1,
            },
            negative_guidance_baseline: self.baseline.negative_guidance,
            negative_guidance_scale: self.baseline.negative_guidance_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Build the concept registry against an embedder.
    pub fn registry(&self, embed: &TextEmbedder) -> Result<Vec<ConceptSpec>> {
        self.concepts
            .iter()
            .map(|c| {
                let elements: Vec<&str> = c.elements.iter().map(String::as_str).collect();
                ConceptSpec::new(embed, &c.name, &elements, &c.negative, c.style)
            })
            .collect()
    }
}

/// Registry defaults: concept names, their checked elements, and the
/// replacement content each one redirects to.
pub fn default_concepts() -> Vec<ConceptSection> {
    let c = |name: &str, elements: &[&str], negative: &str, style: bool| ConceptSection {
        name: name.into(),
        elements: elements.iter().map(|s| s.to_string()).collect(),
        negative: negative.into(),
        style,
    };
    vec![
        c("nudity", &["nudity"], "Covered from neck to toe in clothing.", false),
        c(
            "shock",
            &[
                "shock",
                "blood",
                "ugly face",
                "surprising face",
                "unusual body",
                "unusual face",
            ],
            "Peace, cleanliness, modesty, safety, serenity, wholeness, elegance, balance, naturalness.",
            false,
        ),
        c("bird", &["bird"], "Ballon.", false),
        c("couch", &["couch"], "Beds in the bedroom.", false),
        c(
            "Van Gogh's painting style",
            &["Van Gogh's painting style"],
            "Realism and surrealism painting style.",
            true,
        ),
        c(
            "Monet's painting style",
            &["Monet's painting style"],
            "Realism and surrealism painting style.",
            true,
        ),
    ]
}
