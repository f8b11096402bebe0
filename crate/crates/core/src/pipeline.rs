//! Checkpointed sampling loop: classifier-free guided stepping, generation
//! checks at the configured checkpoints, per-concept removal activation, and
//! a full audit trail.
//!
//! The first checkpoint that detects a concept activates masked removal for
//! it; a detection at a later checkpoint upgrades that concept to global
//! removal and restarts the temperature ramp. Concepts never downgrade. With
//! no detections the loop is bit-identical to a checkpoint-free sampler.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{encode_png, preview, CheckReport, Detector, RuleDetector, VlmDetector};
use crate::cra::{temperature, ConceptSpec, CraMode, CraOptions, CraState, MaskTrace};
use crate::denoiser::{DenoiserParams, DenoiserTuning};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::scheduler::{
    build_schedule, cfg_noise, ddpm_step, ddim_step, sampling_indices, GuidanceConfig,
    LatentState, NoiseSchedule,
};
use crate::text_embed::{PromptEmbedding, TextEmbedder};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Rule,
    Vlm,
}

/// Everything a generation run needs. Concepts are registered separately
/// because they carry embeddings; see [`crate::config`] for file loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sampling_steps: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance_scale: f64,
    /// Checkpoint positions as fractions of the sampling steps, strictly
    /// decreasing; the first entry maps to masked removal, later entries to
    /// global removal.
    pub checkpoint_ratios: Vec<f64>,
    pub scheduler: SchedulerKind,
    pub detector: DetectorKind,
    pub rule_threshold: f64,
    pub vlm_endpoint: Option<crate::checker::DetectorEndpoint>,
    /// Generation RNG seed; the synthetic model itself is seeded separately.
    pub seed: u64,
    pub model_seed: u64,
    pub ablation: CraOptions,
    pub negative_guidance_baseline: bool,
    pub negative_guidance_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 50,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            guidance_scale: 1.0,
            checkpoint_ratios: vec![0.8, 0.4],
            scheduler: SchedulerKind::Ddim,
            detector: DetectorKind::Rule,
            rule_threshold: 0.5,
            vlm_endpoint: None,
            seed: 17,
            model_seed: DenoiserTuning::default().seed,
            ablation: CraOptions::default(),
            negative_guidance_baseline: false,
            negative_guidance_scale: 0.3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampling_steps < 2 {
            return Err(Error::Config("sampling steps must be at least 2".into()));
        }
        if self.sampling_steps > self.schedule_steps {
            return Err(Error::Config(
                "sampling steps cannot exceed schedule steps".into(),
            ));
        }
        if self.scheduler == SchedulerKind::Ddpm && self.sampling_steps != self.schedule_steps {
            return Err(Error::Config(
                "the stochastic scheduler steps every schedule index; set sampling_steps = schedule_steps".into(),
            ));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::Config("guidance scale must be finite and non-negative".into()));
        }
        let mut last = f64::INFINITY;
        for &r in &self.checkpoint_ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("checkpoint ratio {r} outside (0, 1]")));
            }
            if r >= last {
                return Err(Error::Config("checkpoint ratios must be strictly decreasing".into()));
            }
            last = r;
        }
        if self.detector == DetectorKind::Vlm && self.vlm_endpoint.is_none() {
            return Err(Error::Config("vlm detector selected but no endpoint configured".into()));
        }
        Ok(())
    }
}

/// Round checkpoint ratios onto sampling positions (counted down from the
/// number of sampling steps). Collisions shift the later checkpoint one
/// position earlier; running out of room is an error.
pub fn resolve_checkpoints(sampling_steps: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::with_capacity(ratios.len());
    let mut last = f64::INFINITY;
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::arg("resolve_checkpoints", format!("ratio {r} outside (0, 1]")));
        }
        if r >= last {
            return Err(Error::arg(
                "resolve_checkpoints",
                "ratios must be strictly decreasing",
            ));
        }
        last = r;
        let mut pos = (r * sampling_steps as f64).round() as usize;
        pos = pos.clamp(1, sampling_steps);
        while out.contains(&pos) {
            if pos == 1 {
                return Err(Error::arg(
                    "resolve_checkpoints",
                    format!("{sampling_steps} sampling steps cannot separate {} checkpoints", ratios.len()),
                ));
            }
            pos -= 1;
        }
        out.push(pos);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// Schedule index of the step being taken.
    pub t: usize,
    /// Sampling position counted down from the sampling step count.
    pub position: usize,
    pub mode: CraMode,
    /// Active removal temperatures by concept name.
    pub alphas: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub position: usize,
    pub t: usize,
    pub report: CheckReport,
}

/// Complete record of one generation: one entry per executed step, every
/// check report, the final image and the config snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationAudit {
    pub prompt: String,
    pub seed: u64,
    pub stream: String,
    pub config: PipelineConfig,
    pub steps: Vec<StepRecord>,
    pub checks: Vec<CheckRecord>,
    pub final_png_base64: Option<String>,
    pub wall_time_ms: u64,
    pub error: Option<String>,
}

impl GenerationAudit {
    /// One JSON object per line: header, steps, checks, footer.
    pub fn to_jsonl(&self) -> String {
        self.jsonl_inner(false)
    }

    /// Same as [`Self::to_jsonl`] with the wall time zeroed; byte-identical
    /// across runs with equal inputs.
    pub fn canonical_jsonl(&self) -> String {
        self.jsonl_inner(true)
    }

    fn jsonl_inner(&self, canonical: bool) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "type": "header",
            "prompt": self.prompt,
            "seed": self.seed,
            "stream": self.stream,
            "config": self.config,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for s in &self.steps {
            let alphas: serde_json::Map<String, serde_json::Value> = s
                .alphas
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::json!(v)))
                .collect();
            let rec = serde_json::json!({
                "type": "step",
                "t": s.t,
                "position": s.position,
                "mode": s.mode.as_str(),
                "alphas": alphas,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        for c in &self.checks {
            let rec = serde_json::json!({
                "type": "check",
                "position": c.position,
                "t": c.t,
                "report": c.report,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let footer = serde_json::json!({
            "type": "footer",
            "wall_time_ms": if canonical { 0 } else { self.wall_time_ms },
            "error": self.error,
            "final_png_base64": self.final_png_base64,
        });
        out.push_str(&footer.to_string());
        out.push('\n');
        out
    }
}

/// Result of one generation: final image, audit, and the mask traces of the
/// last forward pass for dumps.
#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub image: Tensor,
    pub png: Vec<u8>,
    pub audit: GenerationAudit,
    pub mask_traces: Vec<MaskTrace>,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct Checkpoint {
    position: usize,
    sched_t: usize,
    mode: CraMode,
}

/// A configured pipeline: schedule, synthetic model, concept registry and
/// detector, reusable across generations.
pub struct Engine {
    config: PipelineConfig,
    embed: TextEmbedder,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    registry: Vec<ConceptSpec>,
    guidance: GuidanceConfig,
    rule: Option<RuleDetector>,
    vlm: Option<VlmDetector>,
    indices: Vec<usize>,
    checkpoints: Vec<Checkpoint>,
}

impl Engine {
    pub fn new(config: PipelineConfig, registry: Vec<ConceptSpec>) -> Result<Self> {
        Self::with_embedder_builder(config, registry, |seed| TextEmbedder::new(seed))
    }

    fn with_embedder_builder(
        config: PipelineConfig,
        registry: Vec<ConceptSpec>,
        build: impl Fn(u64) -> TextEmbedder,
    ) -> Result<Self> {
        config.validate()?;
        let embed = build(config.model_seed);
        let tuning = DenoiserTuning {
            seed: config.model_seed,
            ..DenoiserTuning::default()
        };
        let global_words: Vec<String> = registry
            .iter()
            .filter(|c| c.style)
            .flat_map(|c| {
                let mut words = vec![c.name.clone()];
                words.extend(c.check_elements.iter().cloned());
                words
            })
            .collect();
        let params = DenoiserParams::new(embed.clone(), tuning, &global_words)?;
        let schedule = build_schedule(config.schedule_steps, config.beta_start, config.beta_end)?;
        let indices = sampling_indices(config.schedule_steps, config.sampling_steps)?;
        let positions = resolve_checkpoints(config.sampling_steps, &config.checkpoint_ratios)?;
        let checkpoints: Vec<Checkpoint> = positions
            .iter()
            .enumerate()
            .map(|(i, &position)| Checkpoint {
                position,
                sched_t: indices[config.sampling_steps - position],
                mode: if i == 0 { CraMode::Cra1 } else { CraMode::Cra2 },
            })
            .collect();
        let rule = match config.detector {
            DetectorKind::Rule => Some(RuleDetector::new(&params, &registry, config.rule_threshold)?),
            DetectorKind::Vlm => None,
        };
        let vlm = match config.detector {
            DetectorKind::Vlm => {
                let endpoint = config
                    .vlm_endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("vlm endpoint missing".into()))?;
                Some(VlmDetector::new(endpoint, &registry)?)
            }
            DetectorKind::Rule => None,
        };
        let guidance = GuidanceConfig {
            gamma: config.guidance_scale,
            empty_prompt_embedding: embed.embed_text(""),
        };
        Ok(Self {
            config,
            embed,
            params,
            schedule,
            registry,
            guidance,
            rule,
            vlm,
            indices,
            checkpoints,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn embedder(&self) -> &TextEmbedder {
        &self.embed
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn registry(&self) -> &[ConceptSpec] {
        &self.registry
    }

    pub fn rule_detector(&self) -> Option<&RuleDetector> {
        self.rule.as_ref()
    }

    fn detector(&self) -> &dyn Detector {
        match self.config.detector {
            DetectorKind::Rule => self.rule.as_ref().expect("rule detector built"),
            DetectorKind::Vlm => self.vlm.as_ref().expect("vlm detector built"),
        }
    }

    fn initial_state(&self, seed: u64) -> LatentState {
        let size = self.params.image_size();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..size * size)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        LatentState::new(
            Tensor::new(1, size, size, data).expect("sized"),
            self.config.schedule_steps,
            format!("chacha12/{seed}"),
        )
    }

    fn guided_eps(
        &self,
        state: &LatentState,
        emb: &PromptEmbedding,
        cra: Option<&CraState>,
    ) -> Result<Tensor> {
        let eps_cond = self.params.predict_noise(state, emb, &self.schedule, cra)?;
        if self.guidance.gamma == 1.0 {
            return Ok(eps_cond);
        }
        let eps_uncond =
            self.params
                .predict_noise(state, &self.guidance.empty_prompt_embedding, &self.schedule, None)?;
        cfg_noise(&eps_uncond, &eps_cond, self.guidance.gamma)
    }

    /// Noise estimate for the negative-guidance corrector: guided noise with
    /// the concept-conditioned direction subtracted for each flagged concept.
    fn negative_guided_eps(
        &self,
        state: &LatentState,
        emb: &PromptEmbedding,
        active: &[usize],
    ) -> Result<Tensor> {
        let mut eps = self.guided_eps(state, emb, None)?;
        let gamma_neg = self.config.negative_guidance_scale;
        if gamma_neg == 0.0 || active.is_empty() {
            return Ok(eps);
        }
        let eps_empty = self.params.predict_noise(
            state,
            &self.guidance.empty_prompt_embedding,
            &self.schedule,
            None,
        )?;
        for &idx in active {
            let concept = &self.registry[idx];
            let eps_concept =
                self.params
                    .predict_noise(state, &concept.concept_embedding, &self.schedule, None)?;
            let delta = eps_concept.add_scaled(&eps_empty, -1.0)?;
            eps = eps.add_scaled(&delta, -gamma_neg)?;
        }
        Ok(eps)
    }

    /// Run one generation with the removal pipeline.
    pub fn generate(&self, prompt: &str) -> Result<GenerationOutput> {
        self.generate_with_seed(prompt, self.config.seed)
    }

    pub fn generate_with_seed(&self, prompt: &str, seed: u64) -> Result<GenerationOutput> {
        self.run(prompt, seed, self.config.negative_guidance_baseline)
    }

    /// Preview detection outcomes for one concept at every sampling
    /// position, with checks and removal disabled; the backbone of
    /// check-rate curves.
    pub fn preview_detections(
        &self,
        prompt: &str,
        seed: u64,
        concept_index: usize,
    ) -> Result<Vec<(usize, bool)>> {
        let detector = self
            .rule
            .as_ref()
            .ok_or_else(|| Error::Config("preview detection requires the rule detector".into()))?;
        let emb = self.embed.embed_text(prompt);
        let mut state = self.initial_state(seed);
        let mut out = Vec::with_capacity(self.indices.len());
        for k in 0..self.indices.len() {
            let position = self.config.sampling_steps - k;
            let eps = self.guided_eps(&state, &emb, None)?;
            let image = preview(&state, &eps, &self.schedule)?;
            let report = detector.check(&image, position)?;
            out.push((position, report.concepts[concept_index].detected));
            let t_next = self.indices.get(k + 1).copied().unwrap_or(0);
            state = ddim_step(&state, &eps, &self.schedule, t_next)?;
        }
        Ok(out)
    }

    /// The contrast corrector: on detection, subtract concept-conditioned
    /// noise instead of rewriting attention.
    pub fn run_negative_guidance_baseline(&self, prompt: &str, seed: u64) -> Result<GenerationOutput> {
        if !self.config.negative_guidance_baseline {
            return Err(Error::Config(
                "negative_guidance_baseline toggle is not set".into(),
            ));
        }
        self.run(prompt, seed, true)
    }

    fn run(&self, prompt: &str, seed: u64, negative_guidance: bool) -> Result<GenerationOutput> {
        let started = Instant::now();
        let emb = self.embed.embed_text(prompt);
        let mut state = self.initial_state(seed);
        let stream = state.stream.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ STEP_NOISE_SALT);
        let mut cra = CraState::new();
        let mut ng_active: Vec<usize> = Vec::new();
        let mut audit = GenerationAudit {
            prompt: prompt.to_string(),
            seed,
            stream,
            config: self.config.clone(),
            steps: Vec::with_capacity(self.config.sampling_steps),
            checks: Vec::new(),
            final_png_base64: None,
            wall_time_ms: 0,
            error: None,
        };

        for k in 0..self.indices.len() {
            let t = self.indices[k];
            let position = self.config.sampling_steps - k;
            if let Some(cp) = self.checkpoints.iter().find(|c| c.sched_t == t) {
                if let Err(e) = self.run_check(
                    &state,
                    &emb,
                    cp,
                    negative_guidance,
                    &mut cra,
                    &mut ng_active,
                    &mut audit,
                ) {
                    audit.error = Some(e.to_string());
                    audit.wall_time_ms = started.elapsed().as_millis() as u64;
                    return Err(Error::Aborted {
                        source: Box::new(e),
                        audit: Box::new(audit),
                    });
                }
            }

            let cra_ref = if cra.is_active() { Some(&cra) } else { None };
            let eps = if negative_guidance {
                self.negative_guided_eps(&state, &emb, &ng_active)?
            } else {
                self.guided_eps(&state, &emb, cra_ref)?
            };

            let alphas: Vec<(String, f64)> = cra
                .activations()
                .iter()
                .map(|a| {
                    let alpha = temperature(t.min(a.trigger_t), a.trigger_t).unwrap_or(1.0);
                    (self.registry[a.concept_index].name.clone(), alpha)
                })
                .collect();
            audit.steps.push(StepRecord {
                t,
                position,
                mode: cra.mode(),
                alphas,
            });

            let t_next = self.indices.get(k + 1).copied().unwrap_or(0);
            state = match self.config.scheduler {
                SchedulerKind::Ddim => ddim_step(&state, &eps, &self.schedule, t_next)?,
                SchedulerKind::Ddpm => ddpm_step(&state, &eps, &self.schedule, &mut rng)?,
            };
            if cra.is_active() {
                cra.advance(
                    &self.params,
                    &emb,
                    &self.registry,
                    &self.schedule,
                    t,
                    t_next,
                    &self.config.ablation,
                )?;
            }
        }

        let image = state.z.clamp01();
        let png = encode_png(&image)?;
        audit.final_png_base64 =
            Some(base64::Engine::encode(&base64::engine::general_purpose::STANDARD, &png));
        audit.wall_time_ms = started.elapsed().as_millis() as u64;
        Ok(GenerationOutput {
            image,
            png,
            audit,
            mask_traces: cra.mask_traces().to_vec(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_check(
        &self,
        state: &LatentState,
        emb: &PromptEmbedding,
        cp: &Checkpoint,
        negative_guidance: bool,
        cra: &mut CraState,
        ng_active: &mut Vec<usize>,
        audit: &mut GenerationAudit,
    ) -> Result<()> {
        let cra_ref = if cra.is_active() { Some(&*cra) } else { None };
        let eps = if negative_guidance {
            self.negative_guided_eps(state, emb, ng_active)?
        } else {
            self.guided_eps(state, emb, cra_ref)?
        };
        let image = preview(state, &eps, &self.schedule)?;
        let report = self.detector().check(&image, cp.position)?;
        for (idx, concept) in report.concepts.iter().enumerate() {
            if !concept.detected {
                continue;
            }
            let fired: Vec<usize> = concept
                .elements
                .iter()
                .enumerate()
                .filter(|(_, e)| e.detected)
                .map(|(i, _)| i)
                .collect();
            if negative_guidance {
                if !ng_active.contains(&idx) {
                    ng_active.push(idx);
                }
            } else {
                cra.activate(idx, cp.mode, cp.sched_t, &fired, || {
                    self.params.compose_plain(emb)
                })?;
            }
        }
        audit.checks.push(CheckRecord {
            position: cp.position,
            t: cp.sched_t,
            report,
        });
        Ok(())
    }
}

/// One-shot convenience: build an engine and run a single generation.
pub fn generate(
    config: PipelineConfig,
    registry: Vec<ConceptSpec>,
    prompt: &str,
) -> Result<GenerationOutput> {
    Engine::new(config, registry)?.generate(prompt)
}

/// Keeps the stochastic-step noise stream distinct from the initial draw.
const STEP_NOISE_SALT: u64 = 0x6e6f_6973_65;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_embed::TextEmbedder;

    fn registry(embed: &TextEmbedder) -> Vec<ConceptSpec> {
        vec![
            ConceptSpec::new(embed, "nudity", &["nudity"], "Covered from neck to toe in clothing.", false)
                .unwrap(),
        ]
    }

    fn engine(mut config: PipelineConfig) -> Engine {
        config.seed = 17;
        let embed = TextEmbedder::new(config.model_seed);
        Engine::new(config, registry(&embed)).unwrap()
    }

    #[test]
    fn checkpoints_resolve_to_paper_positions() {
        assert_eq!(resolve_checkpoints(50, &[0.8, 0.4]).unwrap(), vec![40, 20]);
        assert_eq!(resolve_checkpoints(10, &[0.8, 0.4]).unwrap(), vec![8, 4]);
        assert_eq!(resolve_checkpoints(1000, &[0.8, 0.4]).unwrap(), vec![800, 400]);
    }

    #[test]
    fn checkpoint_collisions_shift_earlier() {
        // Both ratios round to position 2 on 4 steps; the later one shifts.
        let got = resolve_checkpoints(4, &[0.55, 0.45]).unwrap();
        assert_eq!(got, vec![2, 1]);
        assert!(resolve_checkpoints(2, &[0.9, 0.6, 0.3]).is_err());
    }

    #[test]
    fn checkpoint_ratios_validated() {
        assert!(resolve_checkpoints(50, &[0.4, 0.8]).is_err());
        assert!(resolve_checkpoints(50, &[1.2]).is_err());
        assert!(resolve_checkpoints(50, &[0.8, 0.8]).is_err());
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let mut c = PipelineConfig::default();
        c.sampling_steps = 1;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.scheduler = SchedulerKind::Ddpm;
        assert!(c.validate().is_err(), "ddpm needs dense sampling");
        c.sampling_steps = c.schedule_steps;
        assert!(c.validate().is_ok());
        let mut c = PipelineConfig::default();
        c.detector = DetectorKind::Vlm;
        assert!(c.validate().is_err(), "vlm needs an endpoint");
    }

    #[test]
    fn concept_free_prompt_is_pure() {
        let eng = engine(PipelineConfig::default());
        let with = eng.generate_with_seed("a tree by the lake", 3).unwrap();
        let mut plain_cfg = PipelineConfig::default();
        plain_cfg.checkpoint_ratios = vec![];
        let embed = TextEmbedder::new(plain_cfg.model_seed);
        let plain_eng = Engine::new(plain_cfg, registry(&embed)).unwrap();
        let without = plain_eng.generate_with_seed("a tree by the lake", 3).unwrap();
        assert_eq!(with.png, without.png, "detection-free run must be bit-identical");
        assert!(with.audit.checks.iter().all(|c| !c.report.any_detected()));
    }

    #[test]
    fn empty_checkpoint_list_matches_manual_sampler() {
        let mut cfg = PipelineConfig::default();
        cfg.checkpoint_ratios = vec![];
        let eng = engine(cfg);
        let out = eng.generate_with_seed("a bird in the sky", 11).unwrap();

        // Scheduler-only reference loop.
        let emb = eng.embedder().embed_text("a bird in the sky");
        let mut state = eng.initial_state(11);
        for k in 0..eng.indices.len() {
            let eps = eng
                .params()
                .predict_noise(&state, &emb, eng.schedule(), None)
                .unwrap();
            let t_next = eng.indices.get(k + 1).copied().unwrap_or(0);
            state = ddim_step(&state, &eps, eng.schedule(), t_next).unwrap();
        }
        assert_eq!(out.image, state.z.clamp01());
    }

    #[test]
    fn generation_is_deterministic() {
        let eng = engine(PipelineConfig::default());
        let a = eng.generate_with_seed("a nudity scene by the lake", 5).unwrap();
        let b = eng.generate_with_seed("a nudity scene by the lake", 5).unwrap();
        assert_eq!(a.png, b.png);
        assert_eq!(a.audit.canonical_jsonl(), b.audit.canonical_jsonl());
    }

    #[test]
    fn mode_never_downgrades_and_transitions_at_checkpoints() {
        let eng = engine(PipelineConfig::default());
        let out = eng.generate_with_seed("a nudity scene by the lake", 7).unwrap();
        let t1 = eng.checkpoints[0].sched_t;
        let mut last = CraMode::Off;
        for s in &out.audit.steps {
            assert!(s.mode >= last, "mode downgraded at t={}", s.t);
            if s.t > t1 {
                assert_eq!(s.mode, CraMode::Off, "removal before the first checkpoint");
            }
            last = s.mode;
        }
        // Transitions happen only at checkpoint steps.
        let cp_ts: Vec<usize> = eng.checkpoints.iter().map(|c| c.sched_t).collect();
        let mut prev = CraMode::Off;
        for s in &out.audit.steps {
            if s.mode != prev {
                assert!(cp_ts.contains(&s.t), "transition outside checkpoint at t={}", s.t);
            }
            prev = s.mode;
        }
    }

    #[test]
    fn audit_has_one_record_per_step() {
        let eng = engine(PipelineConfig::default());
        let out = eng.generate_with_seed("a nudity scene by the lake", 9).unwrap();
        assert_eq!(out.audit.steps.len(), eng.config().sampling_steps);
        let jsonl = out.audit.to_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert!(lines.first().unwrap().contains("\"header\""));
        assert!(lines.last().unwrap().contains("\"footer\""));
        for line in &lines {
            let _: serde_json::Value = serde_json::from_str(line).unwrap();
        }
    }

    #[test]
    fn negative_guidance_zero_scale_reduces_to_plain() {
        let mut cfg = PipelineConfig::default();
        cfg.negative_guidance_baseline = true;
        cfg.negative_guidance_scale = 0.0;
        let eng = engine(cfg);
        let a = eng
            .run_negative_guidance_baseline("a nudity scene by the lake", 13)
            .unwrap();

        let mut plain_cfg = PipelineConfig::default();
        plain_cfg.checkpoint_ratios = vec![];
        let eng_plain = engine(plain_cfg);
        let b = eng_plain.generate_with_seed("a nudity scene by the lake", 13).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn baseline_requires_toggle() {
        let eng = engine(PipelineConfig::default());
        assert!(eng.run_negative_guidance_baseline("x", 1).is_err());
    }
}
