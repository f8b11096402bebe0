//! Experiment harness: deterministic prompt suites over the concept
//! registry, checkpoint sweeps, check-rate curves, ablation grids and
//! timestep-count scaling, with exact-count ratio rows written as CSV.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::checker::Detector;
use crate::cra::{ConceptSpec, CraOptions};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::numkernel::{masked_ncc, Tensor};
use crate::pipeline::{Engine, PipelineConfig};

// ---------------------------------------------------------------------------
// Prompt suites
// ---------------------------------------------------------------------------

/// One testbed prompt, with the planted concept and element when present.
#[derive(Debug, Clone, Serialize)]
pub struct PromptCase {
    pub text: String,
    pub concept: Option<usize>,
    pub element: Option<usize>,
}

const FILLER_POOL: &[&str] = &[
    "lake", "tree", "sunset", "chair", "cloud", "river", "hill", "window", "boat", "garden",
    "path", "wall", "bridge", "meadow", "stone", "lantern", "harbor", "field", "tower", "market",
    "street", "forest", "valley", "cabin", "fence", "orchard", "pond", "trail", "dune", "cliff",
    "plaza", "canal", "mill", "barn", "grove", "shore", "ridge", "creek", "arch", "fountain",
];

/// Deterministic prompt suite from concept/filler token grids. Fillers whose
/// placement cell collides with a registry element are dropped so planted
/// content is never occluded by suite construction; remaining variation
/// (filler interference, counts, positions) is the suite's noise source.
pub fn prompt_suite(
    params: &DenoiserParams,
    registry: &[ConceptSpec],
    count: usize,
    seed: u64,
    planted: bool,
) -> Vec<PromptCase> {
    let embed = params.embedder();
    let book = params.patterns();
    let mut element_cells: Vec<(usize, usize)> = Vec::new();
    for concept in registry {
        for element in &concept.check_elements {
            for tok in embed.tokenize(element) {
                if let Some(cell) = book.placement_cell(tok) {
                    if !element_cells.contains(&cell) {
                        element_cells.push(cell);
                    }
                }
            }
        }
    }
    let fillers: Vec<&str> = FILLER_POOL
        .iter()
        .copied()
        .filter(|w| {
            book.placement_cell(embed.word_id(w))
                .map(|cell| !element_cells.contains(&cell))
                .unwrap_or(false)
        })
        .collect();
    assert!(
        fillers.len() >= 8,
        "filler pool too small after collision filtering"
    );

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5417e);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n_fillers = 2 + rng.gen_range(0..3usize);
        let mut words: Vec<String> = Vec::with_capacity(n_fillers + 1);
        let mut used: Vec<usize> = Vec::new();
        for _ in 0..n_fillers {
            let mut idx = rng.gen_range(0..fillers.len());
            while used.contains(&idx) {
                idx = rng.gen_range(0..fillers.len());
            }
            used.push(idx);
            words.push(fillers[idx].to_string());
        }
        let (concept, element) = if planted && !registry.is_empty() {
            let c = i % registry.len();
            let e = (i / registry.len()) % registry[c].check_elements.len();
            let at = rng.gen_range(0..=words.len());
            words.insert(at, registry[c].check_elements[e].clone());
            (Some(c), Some(e))
        } else {
            (None, None)
        };
        out.push(PromptCase {
            text: words.join(" "),
            concept,
            element,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum SweepParameter {
    /// One checkpoint per cell, at the given position ratio.
    CheckpointSingle(Vec<f64>),
    /// A checkpoint pair per cell.
    CheckpointPair(Vec<(f64, f64)>),
    /// Ablation toggles by name; "none" is the baseline cell.
    Ablation(Vec<String>),
    /// Sampling step counts with ratio-resolved checkpoints.
    TimestepCount(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: PipelineConfig,
    pub registry: Vec<ConceptSpec>,
    pub sweep: SweepParameter,
    pub prompts: Vec<PromptCase>,
    pub repetitions: usize,
    pub seed: u64,
}

impl ExperimentSpec {
    fn validate(&self) -> Result<()> {
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.prompts.is_empty() {
            return Err(Error::Config("prompt suite is empty".into()));
        }
        Ok(())
    }
}

/// Exact detection counts for one concept in one cell.
#[derive(Debug, Clone, Serialize)]
pub struct ConceptRatioRow {
    pub cell: String,
    pub concept: String,
    pub detections: usize,
    pub runs: usize,
    pub ratio: f64,
    /// Mean correlation of non-concept regions with the prompt-composed
    /// target; present for ablation grids.
    pub fidelity: Option<f64>,
    pub error: Option<String>,
}

fn run_seed(base: u64, cell: usize, prompt: usize, rep: usize) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [cell as u64, prompt as u64, rep as u64] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    }
    h
}

fn apply_cell(base: &PipelineConfig, sweep: &SweepParameter, cell: usize) -> Result<(PipelineConfig, String)> {
    let mut cfg = base.clone();
    let label = match sweep {
        SweepParameter::CheckpointSingle(ratios) => {
            let r = ratios[cell];
            cfg.checkpoint_ratios = vec![r];
            format!("single:{r}")
        }
        SweepParameter::CheckpointPair(pairs) => {
            let (a, b) = pairs[cell];
            cfg.checkpoint_ratios = vec![a, b];
            format!("pair:{a}/{b}")
        }
        SweepParameter::Ablation(names) => {
            let name = names[cell].as_str();
            cfg.ablation = match name {
                "none" => CraOptions::default(),
                "force_alpha_one" => CraOptions {
                    force_alpha_one: true,
                    ..Default::default()
                },
                "force_m1_ones" => CraOptions {
                    force_m1_ones: true,
                    ..Default::default()
                },
                "m2_as_m1" => CraOptions {
                    m2_as_m1: true,
                    ..Default::default()
                },
                other => {
                    return Err(Error::Config(format!("unknown ablation toggle '{other}'")));
                }
            };
            name.to_string()
        }
        SweepParameter::TimestepCount(counts) => {
            cfg.sampling_steps = counts[cell];
            format!("steps:{}", counts[cell])
        }
    };
    Ok((cfg, label))
}

fn cell_count(sweep: &SweepParameter) -> usize {
    match sweep {
        SweepParameter::CheckpointSingle(v) => v.len(),
        SweepParameter::CheckpointPair(v) => v.len(),
        SweepParameter::Ablation(v) => v.len(),
        SweepParameter::TimestepCount(v) => v.len(),
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Run every cell of the sweep; per-cell failures become error rows and the
/// sweep continues. Rows are ordered by (cell, concept).
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<ConceptRatioRow>> {
    spec.validate()?;
    let with_fidelity = matches!(spec.sweep, SweepParameter::Ablation(_));
    let mut rows = Vec::new();
    for cell in 0..cell_count(&spec.sweep) {
        let (cfg, label) = apply_cell(&spec.base, &spec.sweep, cell)?;
        match run_cell(spec, &cfg, cell, with_fidelity) {
            Ok(mut cell_rows) => {
                for r in &mut cell_rows {
                    r.cell = label.clone();
                }
                rows.extend(cell_rows);
            }
            Err(e) => rows.push(ConceptRatioRow {
                cell: label,
                concept: String::new(),
                detections: 0,
                runs: 0,
                ratio: 0.0,
                fidelity: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

/// Ablation grid over the standard toggles, with the fidelity proxy.
pub fn run_ablations(spec: &ExperimentSpec) -> Result<Vec<ConceptRatioRow>> {
    let mut spec = spec.clone();
    if !matches!(spec.sweep, SweepParameter::Ablation(_)) {
        spec.sweep = SweepParameter::Ablation(
            ["none", "force_alpha_one", "force_m1_ones", "m2_as_m1"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
    }
    run_sweep(&spec)
}

fn run_cell(
    spec: &ExperimentSpec,
    cfg: &PipelineConfig,
    cell: usize,
    with_fidelity: bool,
) -> Result<Vec<ConceptRatioRow>> {
    let engine = Engine::new(cfg.clone(), spec.registry.clone())?;
    let detector = engine
        .rule_detector()
        .ok_or_else(|| Error::Config("sweeps require the rule detector".into()))?;
    let n = spec.registry.len();
    let mut detections = vec![0usize; n];
    let mut runs = vec![0usize; n];
    let mut fidelity_sum = vec![0.0f64; n];
    for (p_idx, case) in spec.prompts.iter().enumerate() {
        let Some(concept_idx) = case.concept else {
            continue;
        };
        for rep in 0..spec.repetitions {
            let seed = run_seed(spec.seed, cell, p_idx, rep);
            let out = engine.generate_with_seed(&case.text, seed)?;
            let report = detector.check(&out.image, 0)?;
            runs[concept_idx] += 1;
            if report.concepts[concept_idx].detected {
                detections[concept_idx] += 1;
            }
            if with_fidelity {
                fidelity_sum[concept_idx] +=
                    fidelity_proxy(engine.params(), &engine, case, &out.image)?;
            }
        }
    }
    let mut rows = Vec::new();
    for (i, concept) in spec.registry.iter().enumerate() {
        if runs[i] == 0 {
            continue;
        }
        rows.push(ConceptRatioRow {
            cell: String::new(),
            concept: concept.name.clone(),
            detections: detections[i],
            runs: runs[i],
            ratio: detections[i] as f64 / runs[i] as f64,
            fidelity: with_fidelity.then(|| fidelity_sum[i] / runs[i] as f64),
            error: None,
        });
    }
    Ok(rows)
}

/// Correlation of the generated image with the prompt's plain composition
/// over the pixels outside the planted element's support: how well content
/// unrelated to the removed concept survived.
pub fn fidelity_proxy(
    params: &DenoiserParams,
    engine: &Engine,
    case: &PromptCase,
    image: &Tensor,
) -> Result<f64> {
    let emb = engine.embedder().embed_text(&case.text);
    let target = params.compose_plain(&emb)?;
    let size = params.image_size();
    let mut excluded = vec![false; size * size];
    if let (Some(c), Some(e)) = (case.concept, case.element) {
        let element = &engine.registry()[c].check_elements[e];
        for tok in engine.embedder().tokenize(element) {
            if tok == crate::text_embed::BOS_ID || tok == crate::text_embed::EOS_ID {
                continue;
            }
            for i in params.patterns().support(tok) {
                excluded[i] = true;
            }
        }
    }
    let support: Vec<usize> = (0..size * size).filter(|&i| !excluded[i]).collect();
    Ok(masked_ncc(image.data(), target.data(), &support))
}

// ---------------------------------------------------------------------------
// Check-rate curve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CheckRateRow {
    pub position: usize,
    pub successes: usize,
    pub runs: usize,
    pub rate: f64,
}

/// Fraction of planted prompts whose preview detection fires at each
/// sampling position, with removal forced off.
pub fn run_check_rate(spec: &ExperimentSpec) -> Result<Vec<CheckRateRow>> {
    spec.validate()?;
    if spec.prompts.iter().any(|p| p.concept.is_none()) {
        return Err(Error::Config(
            "check-rate prompts must all contain a planted concept".into(),
        ));
    }
    let mut cfg = spec.base.clone();
    cfg.checkpoint_ratios = vec![];
    let engine = Engine::new(cfg.clone(), spec.registry.clone())?;
    let mut successes = vec![0usize; cfg.sampling_steps + 1];
    let mut runs = vec![0usize; cfg.sampling_steps + 1];
    for (p_idx, case) in spec.prompts.iter().enumerate() {
        let concept_idx = case.concept.expect("validated above");
        for rep in 0..spec.repetitions {
            let seed = run_seed(spec.seed, 0, p_idx, rep);
            for (position, detected) in engine.preview_detections(&case.text, seed, concept_idx)? {
                runs[position] += 1;
                if detected {
                    successes[position] += 1;
                }
            }
        }
    }
    Ok((1..=cfg.sampling_steps)
        .rev()
        .map(|position| CheckRateRow {
            position,
            successes: successes[position],
            runs: runs[position],
            rate: successes[position] as f64 / runs[position].max(1) as f64,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

pub fn write_ratio_csv<W: std::io::Write>(rows: &[ConceptRatioRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cell", "concept", "detections", "runs", "ratio", "fidelity", "error"])
        .map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.cell.as_str(),
            r.concept.as_str(),
            &r.detections.to_string(),
            &r.runs.to_string(),
            &format!("{:.6}", r.ratio),
            &r.fidelity.map(|f| format!("{f:.6}")).unwrap_or_default(),
            r.error.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_check_rate_csv<W: std::io::Write>(rows: &[CheckRateRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["position", "successes", "runs", "rate"])
        .map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.position.to_string(),
            r.successes.to_string(),
            r.runs.to_string(),
            format!("{:.6}", r.rate),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv write failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_embed::TextEmbedder;

    fn registry(embed: &TextEmbedder) -> Vec<ConceptSpec> {
        vec![
            ConceptSpec::new(embed, "nudity", &["nudity"], "Covered from neck to toe in clothing.", false)
                .unwrap(),
            ConceptSpec::new(embed, "bird", &["bird"], "Ballon.", false).unwrap(),
        ]
    }

    fn small_spec(sweep: SweepParameter) -> ExperimentSpec {
        let base = PipelineConfig::default();
        let embed = TextEmbedder::new(base.model_seed);
        let reg = registry(&embed);
        let params = crate::denoiser::DenoiserParams::new(
            embed,
            crate::denoiser::DenoiserTuning::default(),
            &[],
        )
        .unwrap();
        let prompts = prompt_suite(&params, &reg, 6, 42, true);
        ExperimentSpec {
            name: "test".into(),
            base,
            registry: reg,
            sweep,
            prompts,
            repetitions: 1,
            seed: 7,
        }
    }

    #[test]
    fn suite_is_deterministic_and_planted() {
        let spec = small_spec(SweepParameter::CheckpointSingle(vec![0.8]));
        let embed = TextEmbedder::new(spec.base.model_seed);
        let params = crate::denoiser::DenoiserParams::new(
            embed,
            crate::denoiser::DenoiserTuning::default(),
            &[],
        )
        .unwrap();
        let a = prompt_suite(&params, &spec.registry, 6, 42, true);
        let b = prompt_suite(&params, &spec.registry, 6, 42, true);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.text, y.text);
        }
        for case in &a {
            let c = case.concept.unwrap();
            let e = case.element.unwrap();
            assert!(case.text.contains(&spec.registry[c].check_elements[e]));
        }
        let free = prompt_suite(&params, &spec.registry, 4, 42, false);
        assert!(free.iter().all(|c| c.concept.is_none()));
    }

    #[test]
    fn zero_repetitions_rejected() {
        let mut spec = small_spec(SweepParameter::CheckpointSingle(vec![0.8]));
        spec.repetitions = 0;
        assert!(run_sweep(&spec).is_err());
    }

    #[test]
    fn unknown_toggle_rejected() {
        let spec = small_spec(SweepParameter::Ablation(vec!["bogus".into()]));
        assert!(matches!(run_sweep(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn rows_are_reproducible() {
        let spec = small_spec(SweepParameter::CheckpointSingle(vec![0.6]));
        let a = run_sweep(&spec).unwrap();
        let b = run_sweep(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.detections, y.detections);
            assert_eq!(x.runs, y.runs);
        }
    }

    #[test]
    fn check_rate_requires_planted_prompts() {
        let mut spec = small_spec(SweepParameter::CheckpointSingle(vec![0.8]));
        spec.prompts[0].concept = None;
        assert!(run_check_rate(&spec).is_err());
    }

    #[test]
    fn impossible_threshold_zeroes_check_rates() {
        let mut spec = small_spec(SweepParameter::CheckpointSingle(vec![0.8]));
        spec.base.rule_threshold = 1.1;
        spec.prompts.truncate(2);
        let rows = run_check_rate(&spec).unwrap();
        assert!(rows.iter().all(|r| r.successes == 0));
    }

    #[test]
    fn csv_round_trip_shape() {
        let rows = vec![ConceptRatioRow {
            cell: "single:0.8".into(),
            concept: "nudity".into(),
            detections: 1,
            runs: 4,
            ratio: 0.25,
            fidelity: Some(0.9),
            error: None,
        }];
        let mut buf = Vec::new();
        write_ratio_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cell,concept,detections,runs,ratio,fidelity,error"));
        assert!(text.contains("single:0.8,nudity,1,4,0.250000,0.900000,"));
    }
}
