//! Command-line front end: single generations, checkpoint sweeps, check-rate
//! curves, ablation grids and mask dumps.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use corrector_core::checker::encode_mask_png;
use corrector_core::config::FileConfig;
use corrector_core::harness::{
    prompt_suite, run_check_rate, run_sweep, write_check_rate_csv, write_ratio_csv,
    ExperimentSpec, SweepParameter,
};
use corrector_core::pipeline::{DetectorKind, Engine, PipelineConfig};
use corrector_core::text_embed::TextEmbedder;

/// Environment variable consulted for the detector endpoint URL.
const ENDPOINT_ENV: &str = "CORRECTOR_VLM_ENDPOINT";

#[derive(Parser)]
#[command(name = "corrector", about = "Checkpointed diffusion sampling with concept removal")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (TOML). Defaults ship a full concept registry.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Generation seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Detector kind override: rule | vlm.
    #[arg(long, global = true)]
    detector: Option<String>,
    /// Detector endpoint URL override (or set the environment variable).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one image for a prompt, with checks and removal active.
    Generate {
        /// The text prompt.
        prompt: String,
    },
    /// Checkpoint sweep over a planted prompt suite.
    Sweep {
        /// Single-checkpoint cells, e.g. "1.0,0.8,0.6,0.4,0.2".
        #[arg(long, value_delimiter = ',')]
        singles: Vec<f64>,
        /// Checkpoint-pair cells, e.g. "0.8:0.4".
        #[arg(long, value_delimiter = ',')]
        pairs: Vec<String>,
        #[arg(long, default_value_t = 30)]
        prompts: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Preview detection rate at every sampling position, removal off.
    CheckRate {
        #[arg(long, default_value_t = 30)]
        prompts: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Ablation grid over the removal toggles, with the fidelity proxy.
    Ablate {
        #[arg(long, default_value_t = 30)]
        prompts: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Generate with removal active and dump the per-layer concept masks.
    MaskDump { prompt: String },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file_cfg = load_config(&cli.common)?;
    let (config, registry, engine) = build_engine(&cli.common, &file_cfg)?;
    fs::create_dir_all(&cli.common.out)
        .with_context(|| format!("creating output dir {:?}", cli.common.out))?;

    match cli.command {
        Command::Generate { prompt } => generate(&cli.common, &engine, &prompt),
        Command::Sweep {
            singles,
            pairs,
            prompts,
            reps,
        } => sweep(&cli.common, config, registry, &engine, singles, pairs, prompts, reps),
        Command::CheckRate { prompts, reps } => {
            check_rate(&cli.common, config, registry, &engine, prompts, reps)
        }
        Command::Ablate { prompts, reps } => {
            ablate(&cli.common, config, registry, &engine, prompts, reps)
        }
        Command::MaskDump { prompt } => mask_dump(&cli.common, &engine, &prompt),
    }
}

fn load_config(common: &Common) -> Result<FileConfig> {
    let cfg = match &common.config {
        Some(path) => FileConfig::from_path(path).with_context(|| format!("loading {path:?}"))?,
        None => FileConfig::default(),
    };
    Ok(cfg.with_default_concepts())
}

fn build_engine(
    common: &Common,
    file_cfg: &FileConfig,
) -> Result<(PipelineConfig, Vec<corrector_core::cra::ConceptSpec>, Engine)> {
    let env_endpoint = std::env::var(ENDPOINT_ENV).ok();
    let endpoint = common.endpoint.as_deref().or(env_endpoint.as_deref());
    let mut config = file_cfg.pipeline_config(endpoint)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(kind) = &common.detector {
        config.detector = match kind.as_str() {
            "rule" => DetectorKind::Rule,
            "vlm" => DetectorKind::Vlm,
            other => bail!("unknown detector '{other}'"),
        };
    }
    let embed = TextEmbedder::new(config.model_seed);
    let registry = file_cfg.registry(&embed)?;
    let engine = Engine::new(config.clone(), registry.clone())?;
    Ok((config, registry, engine))
}

fn generate(common: &Common, engine: &Engine, prompt: &str) -> Result<()> {
    let out = engine.generate(prompt)?;
    let png_path = common.out.join("final.png");
    fs::write(&png_path, &out.png)?;
    let audit_path = common.out.join("audit.jsonl");
    fs::write(&audit_path, out.audit.to_jsonl())?;
    for check in &out.audit.checks {
        let detected = check.report.detected_names();
        println!(
            "check at position {}: {}",
            check.position,
            if detected.is_empty() {
                "clean".to_string()
            } else {
                detected.join(", ")
            }
        );
    }
    println!("image: {}", png_path.display());
    println!("audit: {}", audit_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: &Common,
    config: PipelineConfig,
    registry: Vec<corrector_core::cra::ConceptSpec>,
    engine: &Engine,
    singles: Vec<f64>,
    pairs: Vec<String>,
    prompts: usize,
    reps: usize,
) -> Result<()> {
    let sweep = if !pairs.is_empty() {
        let mut cells = Vec::new();
        for p in &pairs {
            let (a, b) = p
                .split_once(':')
                .with_context(|| format!("pair '{p}' must look like 0.8:0.4"))?;
            cells.push((a.parse()?, b.parse()?));
        }
        SweepParameter::CheckpointPair(cells)
    } else if !singles.is_empty() {
        SweepParameter::CheckpointSingle(singles)
    } else {
        SweepParameter::CheckpointSingle(vec![1.0, 0.8, 0.6, 0.4, 0.2])
    };
    let seed = config.seed;
    let spec = ExperimentSpec {
        name: "sweep".into(),
        prompts: prompt_suite(engine.params(), &registry, prompts, seed, true),
        base: config,
        registry,
        sweep,
        repetitions: reps,
        seed,
    };
    let rows = run_sweep(&spec)?;
    let path = common.out.join("sweep.csv");
    write_ratio_csv(&rows, fs::File::create(&path)?)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn check_rate(
    common: &Common,
    config: PipelineConfig,
    registry: Vec<corrector_core::cra::ConceptSpec>,
    engine: &Engine,
    prompts: usize,
    reps: usize,
) -> Result<()> {
    let seed = config.seed;
    let spec = ExperimentSpec {
        name: "check-rate".into(),
        prompts: prompt_suite(engine.params(), &registry, prompts, seed, true),
        base: config,
        registry,
        sweep: SweepParameter::CheckpointSingle(vec![0.8]),
        repetitions: reps,
        seed,
    };
    let rows = run_check_rate(&spec)?;
    let path = common.out.join("check_rate.csv");
    write_check_rate_csv(&rows, fs::File::create(&path)?)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn ablate(
    common: &Common,
    config: PipelineConfig,
    registry: Vec<corrector_core::cra::ConceptSpec>,
    engine: &Engine,
    prompts: usize,
    reps: usize,
) -> Result<()> {
    let seed = config.seed;
    let spec = ExperimentSpec {
        name: "ablate".into(),
        prompts: prompt_suite(engine.params(), &registry, prompts, seed, true),
        base: config,
        registry,
        sweep: SweepParameter::Ablation(
            ["none", "force_alpha_one", "force_m1_ones", "m2_as_m1"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        ),
        repetitions: reps,
        seed,
    };
    let rows = run_sweep(&spec)?;
    let path = common.out.join("ablations.csv");
    write_ratio_csv(&rows, fs::File::create(&path)?)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn mask_dump(common: &Common, engine: &Engine, prompt: &str) -> Result<()> {
    let out = engine.generate(prompt)?;
    fs::write(common.out.join("final.png"), &out.png)?;
    if out.mask_traces.is_empty() {
        println!("no removal was triggered; nothing to dump");
        return Ok(());
    }
    for trace in &out.mask_traces {
        let name = format!(
            "mask_layer{}_{}.png",
            trace.layer_id,
            trace.concept.replace([' ', '\''], "_")
        );
        let png = encode_mask_png(&trace.mask.values, trace.mask.resolution, 16)?;
        fs::write(common.out.join(&name), png)?;
        println!("wrote {name} ({}x{})", trace.mask.resolution, trace.mask.resolution);
    }
    Ok(())
}
