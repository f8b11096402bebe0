//! Concept removal attention: temperature schedule, attention toward a
//! negative concept, adaptive binary concept masks with per-layer policies,
//! and the masked blend that swaps removal output into the standard
//! cross-attention result.
//!
//! Masks are computed per head from the end-of-sequence column of the
//! concept-key attention scores, thresholded at that column's mean, averaged
//! across heads and re-binarized, so every head shares one mask.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionTap, DenoiserParams, LayerSpec, MaskPolicy};
use crate::error::{Error, Result};
use crate::numkernel::{mean_slice, Matrix, Tensor};
use crate::scheduler::NoiseSchedule;
use crate::text_embed::{PromptEmbedding, TextEmbedder};

// ---------------------------------------------------------------------------
// Concept registry entries
// ---------------------------------------------------------------------------

/// A target concept: what to check for, and what to generate instead.
#[derive(Debug, Clone)]
pub struct ConceptSpec {
    pub name: String,
    /// Element phrases the checker asks about; detection of any element
    /// counts as detection of the concept.
    pub check_elements: Vec<String>,
    pub negative_text: String,
    /// Style concepts manifest globally rather than in a region.
    pub style: bool,
    pub concept_embedding: PromptEmbedding,
    pub negative_embedding: PromptEmbedding,
    pub element_embeddings: Vec<PromptEmbedding>,
}

impl ConceptSpec {
    pub fn new(
        embed: &TextEmbedder,
        name: &str,
        check_elements: &[&str],
        negative_text: &str,
        style: bool,
    ) -> Result<Self> {
        if name.trim().is_empty() {
            return Err(Error::Config("concept name must be non-empty".into()));
        }
        if negative_text.trim().is_empty() {
            return Err(Error::Config(format!(
                "concept '{name}' has an empty negative concept text"
            )));
        }
        if check_elements.is_empty() {
            return Err(Error::Config(format!("concept '{name}' has no check elements")));
        }
        let element_embeddings = check_elements
            .iter()
            .map(|e| embed.embed_text(e))
            .collect();
        Ok(Self {
            name: name.to_string(),
            check_elements: check_elements.iter().map(|s| s.to_string()).collect(),
            negative_text: negative_text.to_string(),
            style,
            concept_embedding: embed.embed_text(name),
            negative_embedding: embed.embed_text(negative_text),
            element_embeddings,
        })
    }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Per-pixel gate at one layer resolution; entries are 0 or 1 after
/// binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl ConceptMask {
    pub fn ones(resolution: usize) -> Self {
        Self {
            resolution,
            values: vec![1.0; resolution * resolution],
        }
    }

    pub fn zeros(resolution: usize) -> Self {
        Self {
            resolution,
            values: vec![0.0; resolution * resolution],
        }
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn coverage(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Nearest-neighbor resample to another square resolution.
    pub fn resample(&self, resolution: usize) -> ConceptMask {
        if resolution == self.resolution {
            return self.clone();
        }
        let mut values = vec![0.0; resolution * resolution];
        for y in 0..resolution {
            for x in 0..resolution {
                let sy = y * self.resolution / resolution;
                let sx = x * self.resolution / resolution;
                values[y * resolution + x] = self.values[sy * self.resolution + sx];
            }
        }
        ConceptMask { resolution, values }
    }

    /// Pixel-wise union with another mask of the same resolution.
    pub fn union(&self, other: &ConceptMask) -> ConceptMask {
        debug_assert_eq!(self.resolution, other.resolution);
        ConceptMask {
            resolution: self.resolution,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| if *a >= 0.5 || *b >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Masks cached by normal-policy layers during one forward pass, in layer
/// order; inherited-mask layers average these.
#[derive(Debug, Clone, Default)]
pub struct MaskCache {
    masks: Vec<ConceptMask>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, mask: ConceptMask) {
        self.masks.push(mask);
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[ConceptMask] {
        &self.masks
    }

    /// Average the cached masks at a target resolution and re-binarize at
    /// one half, ties rounding up to removal.
    pub fn average_at(&self, resolution: usize) -> Result<ConceptMask> {
        if self.masks.is_empty() {
            return Err(Error::MaskPolicy(
                "inherited mask requested before any normal layer ran".into(),
            ));
        }
        let mut acc = vec![0.0; resolution * resolution];
        for mask in &self.masks {
            let r = mask.resample(resolution);
            for (a, v) in acc.iter_mut().zip(&r.values) {
                *a += v;
            }
        }
        let n = self.masks.len() as f64;
        Ok(ConceptMask {
            resolution,
            values: acc
                .iter()
                .map(|a| if a / n >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
        })
    }
}

/// Binary masks from per-head end-of-sequence probability columns: each head
/// thresholds at its own column mean, heads are averaged, and the average is
/// re-binarized at one half with ties keeping removal on.
pub fn mask_from_eos_columns(columns: &[Vec<f64>], resolution: usize) -> Result<ConceptMask> {
    if columns.is_empty() {
        return Err(Error::Empty { op: "mask_from_eos_columns" });
    }
    let m = resolution * resolution;
    let mut acc = vec![0.0; m];
    for col in columns {
        if col.len() != m {
            return Err(Error::dim(
                "mask_from_eos_columns",
                format!("column length {} != {}", col.len(), m),
            ));
        }
        let kappa = mean_slice(col)?;
        for (a, v) in acc.iter_mut().zip(col) {
            if *v >= kappa {
                *a += 1.0;
            }
        }
    }
    let n = columns.len() as f64;
    Ok(ConceptMask {
        resolution,
        values: acc
            .iter()
            .map(|a| if a / n >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// Adaptive concept mask at a normal-policy layer: for each head, softmax the
/// concept-key scores, read the end-of-sequence column, compare against its
/// mean, then combine heads.
pub fn mask_m1(
    params: &DenoiserParams,
    features: &Matrix,
    key: &PromptEmbedding,
    layer: &LayerSpec,
) -> Result<ConceptMask> {
    if layer.mask_policy != MaskPolicy::Normal {
        return Err(Error::MaskPolicy(format!(
            "mask_m1 called on layer {} with policy {:?}",
            layer.layer_id, layer.mask_policy
        )));
    }
    let (_, probs) = params.attention_with(features, key, layer, 1.0, None)?;
    let columns: Vec<Vec<f64>> = probs.iter().map(|p| p.column(key.eos_index())).collect();
    mask_from_eos_columns(&columns, layer.resolution)
}

// ---------------------------------------------------------------------------
// Temperature
// ---------------------------------------------------------------------------

/// Softmax temperature while removal is active: one half at the trigger
/// timestep, rising linearly to one at the end of generation.
pub fn temperature(t: usize, t_i: usize) -> Result<f64> {
    if t_i == 0 {
        return Err(Error::timestep("temperature", "trigger timestep must be positive"));
    }
    if t > t_i {
        return Err(Error::timestep(
            "temperature",
            format!("t={t} is before the trigger t_i={t_i}"),
        ));
    }
    Ok(0.5 + 0.5 * (t_i - t) as f64 / t_i as f64)
}

/// Ablation toggles threaded through removal attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CraOptions {
    /// Hold the removal softmax temperature at 1.
    pub force_alpha_one: bool,
    /// Replace adaptive masks with all-ones masks.
    pub force_m1_ones: bool,
    /// Use adaptive masks for the global (second-checkpoint) mode too.
    pub m2_as_m1: bool,
}

pub fn effective_alpha(t: usize, t_i: usize, opts: &CraOptions) -> Result<f64> {
    if opts.force_alpha_one {
        // Still validate the timestep contract.
        temperature(t, t_i)?;
        return Ok(1.0);
    }
    temperature(t, t_i)
}

// ---------------------------------------------------------------------------
// Removal attention and the masked blend
// ---------------------------------------------------------------------------

/// Attention toward the negative concept with the temperature applied inside
/// the softmax.
pub fn attn_cr(
    params: &DenoiserParams,
    features: &Matrix,
    p_n: &PromptEmbedding,
    layer: &LayerSpec,
    alpha: f64,
    taps: Option<&mut Vec<AttentionTap>>,
) -> Result<Matrix> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::arg("attn_cr", format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(params.attention_with(features, p_n, layer, alpha, taps)?.0)
}

/// Per-pixel blend `(1 - M) * plain + M * removal`. Binary mask entries copy
/// rows bit-exactly; fractional entries interpolate.
pub fn blend_rows(mask: &ConceptMask, plain: &Matrix, removal: &Matrix) -> Result<Matrix> {
    if plain.rows() != removal.rows()
        || plain.cols() != removal.cols()
        || mask.values.len() != plain.rows()
    {
        return Err(Error::dim(
            "cra_attention",
            format!(
                "mask {} vs outputs {}x{} / {}x{}",
                mask.values.len(),
                plain.rows(),
                plain.cols(),
                removal.rows(),
                removal.cols()
            ),
        ));
    }
    let mut out = Matrix::zeros(plain.rows(), plain.cols());
    for r in 0..plain.rows() {
        let m = mask.values[r];
        let dst = out.row_mut(r);
        if m == 0.0 {
            dst.copy_from_slice(plain.row(r));
        } else if m == 1.0 {
            dst.copy_from_slice(removal.row(r));
        } else {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = (1.0 - m) * plain.get(r, i) + m * removal.get(r, i);
            }
        }
    }
    Ok(out)
}

/// Mask dispatch for one layer given the removal mode in force. `None` means
/// removal is skipped at this layer and plain attention applies.
pub fn mask_for_layer(
    params: &DenoiserParams,
    features: &Matrix,
    layer: &LayerSpec,
    mode: CraMode,
    keys: &[&PromptEmbedding],
    cache: &MaskCache,
    opts: &CraOptions,
) -> Result<Option<ConceptMask>> {
    if mode == CraMode::Off {
        return Err(Error::MaskPolicy("mask requested while removal is off".into()));
    }
    if layer.mask_policy == MaskPolicy::SkipCra {
        return Ok(None);
    }
    if mode == CraMode::Cra2 && !opts.m2_as_m1 {
        return Ok(Some(ConceptMask::ones(layer.resolution)));
    }
    // Adaptive-mask path (first-checkpoint mode, or the global mode ablated
    // onto it).
    match layer.mask_policy {
        MaskPolicy::SkipCra => unreachable!(),
        MaskPolicy::Normal => {
            if opts.force_m1_ones {
                return Ok(Some(ConceptMask::ones(layer.resolution)));
            }
            if keys.is_empty() {
                return Err(Error::MaskPolicy("no concept keys to mask against".into()));
            }
            let mut mask = mask_m1(params, features, keys[0], layer)?;
            for key in &keys[1..] {
                mask = mask.union(&mask_m1(params, features, key, layer)?);
            }
            Ok(Some(mask))
        }
        MaskPolicy::InheritAverage => {
            if opts.force_m1_ones {
                return Ok(Some(ConceptMask::ones(layer.resolution)));
            }
            Ok(Some(cache.average_at(layer.resolution)?))
        }
    }
}

/// The full removal attention for one concept at one layer: plain attention
/// blended with negative-concept attention under the layer's mask.
#[allow(clippy::too_many_arguments)]
pub fn cra_attention(
    params: &DenoiserParams,
    features: &Matrix,
    p: &PromptEmbedding,
    concept: &ConceptSpec,
    activation: &ConceptActivation,
    layer: &LayerSpec,
    cache: &mut MaskCache,
    t: usize,
    opts: &CraOptions,
) -> Result<Matrix> {
    if t > activation.trigger_t {
        return Err(Error::timestep(
            "cra_attention",
            format!("t={t} precedes trigger {}", activation.trigger_t),
        ));
    }
    let plain = params.cross_attention(features, p, layer, None)?;
    let keys: Vec<&PromptEmbedding> = activation
        .fired_elements
        .iter()
        .map(|&i| &concept.element_embeddings[i])
        .collect();
    let keys = if keys.is_empty() {
        vec![&concept.concept_embedding]
    } else {
        keys
    };
    let mask = mask_for_layer(params, features, layer, activation.mode, &keys, cache, opts)?;
    let Some(mask) = mask else {
        return Ok(plain);
    };
    let alpha = effective_alpha(t, activation.trigger_t, opts)?;
    let removal = attn_cr(params, features, &concept.negative_embedding, layer, alpha, None)?;
    let out = blend_rows(&mask, &plain, &removal)?;
    if layer.mask_policy == MaskPolicy::Normal && activation.mode == CraMode::Cra1 {
        cache.push(mask);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-generation removal state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CraMode {
    Off,
    Cra1,
    Cra2,
}

impl CraMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CraMode::Off => "off",
            CraMode::Cra1 => "cra1",
            CraMode::Cra2 => "cra2",
        }
    }
}

/// One concept's removal activation: the mode of its latest triggering
/// checkpoint, when it fired, and which check elements fired.
#[derive(Debug, Clone)]
pub struct ConceptActivation {
    pub concept_index: usize,
    pub mode: CraMode,
    pub trigger_t: usize,
    pub fired_elements: Vec<usize>,
}

/// Mask trace of the most recent forward pass, for dumps and layer tests.
#[derive(Debug, Clone)]
pub struct MaskTrace {
    pub layer_id: usize,
    pub concept: String,
    pub mask: ConceptMask,
}

/// Per-generation removal state: which concepts are active in which mode,
/// the committed image the replacement process is rewriting, and the latest
/// mask traces.
#[derive(Debug, Clone, Default)]
pub struct CraState {
    activations: Vec<ConceptActivation>,
    committed: Option<Tensor>,
    mask_cache: Vec<MaskTrace>,
}

impl CraState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_active(&self) -> bool {
        !self.activations.is_empty()
    }

    pub fn mode(&self) -> CraMode {
        self.activations
            .iter()
            .map(|a| a.mode)
            .max()
            .unwrap_or(CraMode::Off)
    }

    pub fn activations(&self) -> &[ConceptActivation] {
        &self.activations
    }

    pub fn committed(&self) -> Option<&Tensor> {
        self.committed.as_ref()
    }

    pub fn mask_traces(&self) -> &[MaskTrace] {
        &self.mask_cache
    }

    pub fn activation_for(&self, concept_index: usize) -> Option<&ConceptActivation> {
        self.activations.iter().find(|a| a.concept_index == concept_index)
    }

    /// Register a detection. Modes never downgrade; a repeated or stronger
    /// trigger restarts the temperature ramp at the new timestep and extends
    /// the fired element set.
    pub fn activate(
        &mut self,
        concept_index: usize,
        mode: CraMode,
        trigger_t: usize,
        fired_elements: &[usize],
        committed_init: impl FnOnce() -> Result<Tensor>,
    ) -> Result<()> {
        if mode == CraMode::Off {
            return Err(Error::arg("activate", "cannot activate the off mode"));
        }
        if self.committed.is_none() {
            self.committed = Some(committed_init()?);
        }
        match self
            .activations
            .iter_mut()
            .find(|a| a.concept_index == concept_index)
        {
            Some(existing) => {
                if mode >= existing.mode {
                    existing.mode = mode;
                    existing.trigger_t = trigger_t;
                }
                for &e in fired_elements {
                    if !existing.fired_elements.contains(&e) {
                        existing.fired_elements.push(e);
                    }
                }
            }
            None => {
                self.activations.push(ConceptActivation {
                    concept_index,
                    mode,
                    trigger_t,
                    fired_elements: fired_elements.to_vec(),
                });
                self.activations.sort_by_key(|a| a.concept_index);
            }
        }
        Ok(())
    }

    /// Apply one sampling step of content replacement to the committed
    /// image: for every active concept in registry order, run the masked
    /// removal attention at the current temperature, measure how much
    /// attention mass actually lands on replacement content per pixel, and
    /// move the committed image toward the decoded replacement at a rate
    /// normalized for step span and remaining generation time.
    pub fn advance(
        &mut self,
        params: &DenoiserParams,
        p: &PromptEmbedding,
        registry: &[ConceptSpec],
        schedule: &NoiseSchedule,
        t_from: usize,
        t_to: usize,
        opts: &CraOptions,
    ) -> Result<()> {
        if !self.is_active() {
            return Ok(());
        }
        if t_to >= t_from {
            return Err(Error::timestep(
                "cra_advance",
                format!("step must move down: {t_from} -> {t_to}"),
            ));
        }
        let tuning = params.tuning();
        let size = params.image_size();
        let n_layers = params.layers().len() as f64;
        let total = schedule.total_steps() as f64;
        let span = (t_from - t_to) as f64 / total;
        let capacity = (t_from as f64 / total).powf(tuning.capacity_exponent);
        let exponent = tuning.replacement_gain * capacity * span * tuning.reference_steps;

        self.mask_cache.clear();
        let activations = self.activations.clone();
        for activation in &activations {
            let concept = registry.get(activation.concept_index).ok_or_else(|| {
                Error::Config(format!(
                    "activation references concept {} outside the registry",
                    activation.concept_index
                ))
            })?;
            let t_eff = t_from.min(activation.trigger_t);
            let alpha = effective_alpha(t_eff, activation.trigger_t, opts)?;
            let p_n = &concept.negative_embedding;
            let pn_dict = params.decode_dict(p_n);
            let keys: Vec<&PromptEmbedding> = if activation.fired_elements.is_empty() {
                vec![&concept.concept_embedding]
            } else {
                activation
                    .fired_elements
                    .iter()
                    .map(|&i| &concept.element_embeddings[i])
                    .collect()
            };

            let mut cache = MaskCache::new();
            let mut rate_sum = vec![0.0; size * size];
            let mut repl_sum = vec![0.0; size * size];
            for layer in params.layers() {
                let features = params.layer_features(p, layer);
                let mask = match mask_for_layer(
                    params,
                    &features,
                    layer,
                    activation.mode,
                    &keys,
                    &cache,
                    opts,
                )? {
                    Some(m) => m,
                    None => continue,
                };
                let (out_cr, probs) =
                    params.attention_with(&features, p_n, layer, alpha, None)?;
                let content = params.decode_content(&out_cr, &pn_dict, layer);
                let m = layer.pixels();
                let mut rate_l = vec![0.0; m];
                let mut repl_l = vec![0.0; m];
                for i in 0..m {
                    let mut bos = 0.0;
                    for ph in &probs {
                        bos += ph.get(i, 0);
                    }
                    bos /= probs.len() as f64;
                    // Floor on the normalizing mass: a near-total collapse
                    // onto the sequence-start token writes almost nothing,
                    // and must not amplify decode residue into the image.
                    let mass = (1.0 - bos).max(0.1);
                    let repl = tuning.bg_level + tuning.compose_amp * content[i] / mass;
                    let rate = mask.values[i] * (1.0 - bos);
                    rate_l[i] = rate;
                    repl_l[i] = rate * repl;
                }
                let rate_up =
                    crate::denoiser::upsample_field(&rate_l, layer.resolution, size);
                let repl_up =
                    crate::denoiser::upsample_field(&repl_l, layer.resolution, size);
                for i in 0..size * size {
                    rate_sum[i] += rate_up[i];
                    repl_sum[i] += repl_up[i];
                }
                if layer.mask_policy == MaskPolicy::Normal
                    && (activation.mode == CraMode::Cra1 || opts.m2_as_m1)
                {
                    cache.push(mask.clone());
                }
                self.mask_cache.push(MaskTrace {
                    layer_id: layer.layer_id,
                    concept: concept.name.clone(),
                    mask,
                });
            }

            let committed = self
                .committed
                .as_mut()
                .expect("active state always has a committed image");
            for i in 0..size * size {
                let rate = (rate_sum[i] / n_layers).clamp(0.0, 1.0);
                if rate <= 0.0 {
                    continue;
                }
                let repl = repl_sum[i] / rate_sum[i];
                let eta = 1.0 - (1.0 - rate).powf(exponent);
                let v = committed.data()[i];
                committed.data_mut()[i] = v + eta * (repl - v);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserTuning;
    use crate::text_embed::TextEmbedder;

    fn setup() -> (DenoiserParams, TextEmbedder) {
        let embed = TextEmbedder::new(0x7e_c0de);
        let params = DenoiserParams::new(embed.clone(), DenoiserTuning::default(), &[]).unwrap();
        (params, embed)
    }

    #[test]
    fn temperature_endpoints_and_midpoint() {
        assert_eq!(temperature(40, 40).unwrap(), 0.5);
        assert_eq!(temperature(0, 40).unwrap(), 1.0);
        assert!((temperature(20, 40).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn temperature_rejects_pre_trigger() {
        assert!(temperature(41, 40).is_err());
        assert!(temperature(1, 0).is_err());
    }

    #[test]
    fn temperature_monotone_and_bounded() {
        let t_i = 37;
        let mut last = 0.0;
        for t in (0..=t_i).rev() {
            let a = temperature(t, t_i).unwrap();
            assert!((0.5..=1.0).contains(&a));
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn alpha_one_reduces_removal_to_plain_attention() {
        let (params, embed) = setup();
        let p_n = embed.embed_text("covered in clothing");
        let layer = &params.layers()[1];
        let features = params.layer_features(&embed.embed_text("a nude person"), layer);
        let a = attn_cr(&params, &features, &p_n, layer, 1.0, None).unwrap();
        let b = params.cross_attention(&features, &p_n, layer, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attn_cr_flattens_attention_at_low_temperature() {
        let (params, embed) = setup();
        let p_n = embed.embed_text("covered in clothing");
        let layer = &params.layers()[1];
        let features = params.layer_features(&embed.embed_text("a nude person"), layer);
        let (_, probs1) = params.attention_with(&features, &p_n, layer, 1.0, None).unwrap();
        let (_, probs05) = params.attention_with(&features, &p_n, layer, 0.5, None).unwrap();
        // Max attention weight strictly smaller at the lower temperature.
        for (p1, p05) in probs1.iter().zip(&probs05) {
            for r in 0..p1.rows() {
                let m1 = p1.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m05 = p05.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(m05 < m1 + 1e-12);
            }
        }
    }

    #[test]
    fn attn_cr_rejects_bad_alpha() {
        let (params, embed) = setup();
        let p_n = embed.embed_text("x");
        let layer = &params.layers()[1];
        let features = params.layer_features(&p_n, layer);
        assert!(attn_cr(&params, &features, &p_n, layer, 0.0, None).is_err());
        assert!(attn_cr(&params, &features, &p_n, layer, 1.5, None).is_err());
    }

    #[test]
    fn blend_boundary_masks_are_exact() {
        let (params, embed) = setup();
        let p = embed.embed_text("a nude person");
        let p_n = embed.embed_text("covered in clothing");
        let layer = &params.layers()[1];
        let features = params.layer_features(&p, layer);
        let plain = params.cross_attention(&features, &p, layer, None).unwrap();
        let removal = attn_cr(&params, &features, &p_n, layer, 0.7, None).unwrap();

        let zeros = ConceptMask::zeros(layer.resolution);
        let blended = blend_rows(&zeros, &plain, &removal).unwrap();
        assert_eq!(blended, plain);

        let ones = ConceptMask::ones(layer.resolution);
        let blended = blend_rows(&ones, &plain, &removal).unwrap();
        assert_eq!(blended, removal);
    }

    #[test]
    fn blend_partial_mask_is_rowwise() {
        let (params, embed) = setup();
        let p = embed.embed_text("a nude person");
        let p_n = embed.embed_text("covered in clothing");
        let layer = &params.layers()[2];
        let features = params.layer_features(&p, layer);
        let plain = params.cross_attention(&features, &p, layer, None).unwrap();
        let removal = attn_cr(&params, &features, &p_n, layer, 0.6, None).unwrap();
        let mut mask = ConceptMask::zeros(layer.resolution);
        for i in [0usize, 3, 7, 11] {
            mask.values[i] = 1.0;
        }
        let blended = blend_rows(&mask, &plain, &removal).unwrap();
        for r in 0..plain.rows() {
            let want = if mask.values[r] == 1.0 {
                removal.row(r)
            } else {
                plain.row(r)
            };
            assert_eq!(blended.row(r), want, "row {r}");
        }
    }

    #[test]
    fn mask_degenerate_equal_scores_is_all_ones() {
        let col = vec![0.25; 16];
        let mask = mask_from_eos_columns(&[col], 4).unwrap();
        assert!(mask.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn mask_single_aligned_pixel() {
        // One pixel clearly above the mean, others equal and below.
        let mut col = vec![0.1; 16];
        col[5] = 0.9;
        let mask = mask_from_eos_columns(&[col], 4).unwrap();
        for (i, v) in mask.values.iter().enumerate() {
            assert_eq!(*v, if i == 5 { 1.0 } else { 0.0 }, "pixel {i}");
        }
    }

    #[test]
    fn mask_head_disagreement_tie_keeps_removal() {
        let mut a = vec![0.1; 16];
        let mut b = vec![0.1; 16];
        a[3] = 0.9; // head 0 marks pixel 3
        b[9] = 0.9; // head 1 marks pixel 9
        let mask = mask_from_eos_columns(&[a, b], 4).unwrap();
        // Each marked pixel has head average 0.5; the tie binarizes to 1.
        assert_eq!(mask.values[3], 1.0);
        assert_eq!(mask.values[9], 1.0);
        assert_eq!(mask.values[0], 0.0);
    }

    #[test]
    fn mask_is_invariant_to_per_row_logit_shift() {
        use crate::numkernel::{softmax_rows, Matrix};
        // Softmax is shift-invariant per row, so adding a constant to all
        // logits of a pixel row must leave the mask unchanged.
        let logits = Matrix::new(
            4,
            3,
            vec![
                1.0, 2.0, 3.0, //
                0.5, 0.1, 0.2, //
                2.0, 2.0, 2.5, //
                -1.0, 0.0, 4.0,
            ],
        )
        .unwrap();
        let shifted = {
            let mut m = logits.clone();
            for r in 0..m.rows() {
                for v in m.row_mut(r) {
                    *v += 7.5;
                }
            }
            m
        };
        let col_a = softmax_rows(&logits, 1.0).unwrap().column(2);
        let col_b = softmax_rows(&shifted, 1.0).unwrap().column(2);
        let ma = mask_from_eos_columns(&[col_a], 2).unwrap();
        let mb = mask_from_eos_columns(&[col_b], 2).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn mask_m1_rejects_wrong_policy() {
        let (params, embed) = setup();
        let key = embed.embed_text("nudity");
        let skip = &params.layers()[0];
        let features = params.layer_features(&key, skip);
        assert!(matches!(
            mask_m1(&params, &features, &key, skip),
            Err(Error::MaskPolicy(_))
        ));
    }

    #[test]
    fn inherited_mask_constant_resampling() {
        let mut cache = MaskCache::new();
        cache.push(ConceptMask::ones(16));
        let avg = cache.average_at(4).unwrap();
        assert!(avg.values.iter().all(|v| *v == 1.0));
        assert_eq!(avg.resolution, 4);
    }

    #[test]
    fn inherited_mask_requires_cache() {
        let cache = MaskCache::new();
        assert!(matches!(cache.average_at(4), Err(Error::MaskPolicy(_))));
    }

    #[test]
    fn mode_ordering_and_activation() {
        let (params, embed) = setup();
        let concept = ConceptSpec::new(&embed, "nudity", &["nudity"], "covered", false).unwrap();
        let registry = [concept];
        let mut state = CraState::new();
        assert_eq!(state.mode(), CraMode::Off);
        let p = embed.embed_text("a nude person");
        state
            .activate(0, CraMode::Cra1, 800, &[0], || params.compose_plain(&p))
            .unwrap();
        assert_eq!(state.mode(), CraMode::Cra1);
        assert_eq!(state.activation_for(0).unwrap().trigger_t, 800);
        // Upgrade re-anchors the trigger.
        state
            .activate(0, CraMode::Cra2, 400, &[0], || unreachable!("already committed"))
            .unwrap();
        assert_eq!(state.mode(), CraMode::Cra2);
        assert_eq!(state.activation_for(0).unwrap().trigger_t, 400);
        let _ = &registry;
    }

    #[test]
    fn mask_for_layer_dispatch() {
        let (params, embed) = setup();
        let key = embed.embed_text("nudity");
        let keys = [&key];
        let opts = CraOptions::default();
        let cache = MaskCache::new();
        let p = embed.embed_text("a nude person by a lake");

        // Skip layer: no mask in either mode.
        let skip = &params.layers()[0];
        let f = params.layer_features(&p, skip);
        assert!(mask_for_layer(&params, &f, skip, CraMode::Cra1, &keys, &cache, &opts)
            .unwrap()
            .is_none());
        assert!(mask_for_layer(&params, &f, skip, CraMode::Cra2, &keys, &cache, &opts)
            .unwrap()
            .is_none());

        // Global mode: all ones elsewhere.
        let normal = &params.layers()[1];
        let f = params.layer_features(&p, normal);
        let m = mask_for_layer(&params, &f, normal, CraMode::Cra2, &keys, &cache, &opts)
            .unwrap()
            .unwrap();
        assert!(m.values.iter().all(|v| *v == 1.0));

        // Masked mode on a normal layer: binary, not trivially empty.
        let m = mask_for_layer(&params, &f, normal, CraMode::Cra1, &keys, &cache, &opts)
            .unwrap()
            .unwrap();
        assert!(m.is_binary());
    }
}
