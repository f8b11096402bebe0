//! Generation checking: decode the predicted final image, run a detector
//! over the registered concepts, and report per-element findings.
//!
//! Two detectors are provided. The rule detector correlates the image
//! against the planted pattern templates and is the closed-loop testbed
//! default. The VLM detector is an HTTP client that sends the image and a
//! fixed element query to an external vision-language model endpoint and
//! parses its `- element: [Y|N]` answer lines; anything unparseable counts
//! as detected, because in a safety filter false positives are the cheap
//! failure.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::cra::ConceptSpec;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::numkernel::{masked_ncc, Tensor};
use crate::scheduler::{predict_x0, LatentState, NoiseSchedule};

// ---------------------------------------------------------------------------
// Preview
// ---------------------------------------------------------------------------

/// Decode the predicted final image at the current timestep. The toy decoder
/// is the identity map with a clamp to `[0, 1]`.
pub fn preview(state: &LatentState, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let x0 = predict_x0(state, eps_hat, schedule)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite { op: "preview" });
    }
    Ok(x0.clamp01())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementCheck {
    pub name: String,
    pub detected: bool,
    /// Correlation score where the detector computes one.
    pub score: Option<f64>,
    /// Set when the detector answer for this element was missing or
    /// malformed and the fail-safe rule forced detection.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptCheck {
    pub name: String,
    pub detected: bool,
    pub elements: Vec<ElementCheck>,
}

/// Outcome of one generation check. Covers every registered concept; a
/// concept is detected exactly when one of its elements is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub checkpoint_t: usize,
    pub concepts: Vec<ConceptCheck>,
    /// Raw detector payload for audit.
    pub raw: String,
}

impl CheckReport {
    pub fn any_detected(&self) -> bool {
        self.concepts.iter().any(|c| c.detected)
    }

    pub fn detected_names(&self) -> Vec<&str> {
        self.concepts
            .iter()
            .filter(|c| c.detected)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn concept_check(name: &str, elements: Vec<ElementCheck>) -> ConceptCheck {
    ConceptCheck {
        name: name.to_string(),
        detected: elements.iter().any(|e| e.detected),
        elements,
    }
}

/// A detector over the registered concept set.
pub trait Detector {
    fn check(&self, image: &Tensor, checkpoint_t: usize) -> Result<CheckReport>;
}

// ---------------------------------------------------------------------------
// Rule detector
// ---------------------------------------------------------------------------

struct ElementTemplate {
    name: String,
    template: Vec<f64>,
    support: Vec<usize>,
}

/// Pattern-correlation detector for the closed-loop testbed: an element is
/// detected when the normalized cross-correlation between the image and the
/// element's planted pattern template, over the template's support, reaches
/// the threshold.
pub struct RuleDetector {
    threshold: f64,
    concepts: Vec<(String, Vec<ElementTemplate>)>,
}

impl RuleDetector {
    pub fn new(params: &DenoiserParams, concepts: &[ConceptSpec], threshold: f64) -> Result<Self> {
        let size = params.image_size();
        let embed = params.embedder();
        let book = params.patterns();
        let mut out = Vec::with_capacity(concepts.len());
        for concept in concepts {
            let mut templates = Vec::with_capacity(concept.check_elements.len());
            for element in &concept.check_elements {
                let tokens: Vec<_> = embed
                    .tokenize(element)
                    .into_iter()
                    .filter(|&t| t != crate::text_embed::BOS_ID && t != crate::text_embed::EOS_ID)
                    .collect();
                if tokens.is_empty() {
                    return Err(Error::Config(format!(
                        "no pattern template for element '{element}' of concept '{}'",
                        concept.name
                    )));
                }
                let mut template = vec![0.0; size * size];
                let mut support: Vec<usize> = Vec::new();
                for &tok in &tokens {
                    for (t, v) in template.iter_mut().zip(book.pattern(tok)) {
                        *t += v;
                    }
                    for i in book.support(tok) {
                        if !support.contains(&i) {
                            support.push(i);
                        }
                    }
                }
                support.sort_unstable();
                templates.push(ElementTemplate {
                    name: element.clone(),
                    template,
                    support,
                });
            }
            out.push((concept.name.clone(), templates));
        }
        Ok(Self {
            threshold,
            concepts: out,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Correlation of an image against one element template.
    pub fn score(&self, image: &Tensor, concept: usize, element: usize) -> f64 {
        let t = &self.concepts[concept].1[element];
        masked_ncc(image.data(), &t.template, &t.support)
    }
}

impl Detector for RuleDetector {
    fn check(&self, image: &Tensor, checkpoint_t: usize) -> Result<CheckReport> {
        let mut concepts = Vec::with_capacity(self.concepts.len());
        let mut raw = String::new();
        for (name, templates) in &self.concepts {
            let mut elements = Vec::with_capacity(templates.len());
            for t in templates {
                let score = masked_ncc(image.data(), &t.template, &t.support);
                raw.push_str(&format!("{}: {:.4}\n", t.name, score));
                elements.push(ElementCheck {
                    name: t.name.clone(),
                    detected: score >= self.threshold,
                    score: Some(score),
                    flagged: false,
                });
            }
            concepts.push(concept_check(name, elements));
        }
        Ok(CheckReport {
            checkpoint_t,
            concepts,
            raw,
        })
    }
}

/// Runs the rule detector against the plain composition of a prompt and the
/// final images; helper for tests and the harness.
pub fn detect_rule(detector: &RuleDetector, image: &Tensor, checkpoint_t: usize) -> Result<CheckReport> {
    detector.check(image, checkpoint_t)
}

// ---------------------------------------------------------------------------
// VLM wire protocol
// ---------------------------------------------------------------------------

/// Build the element query sent to the vision-language model.
pub fn build_query(elements: &[String]) -> String {
    let mut q = String::from(
        "Check whether the following elements exist in this picture respectively. \
         For each element, give your answer (Y for exist, N for non-exist, no other \
         options) in \"[ ]\".\n",
    );
    for e in elements {
        q.push_str(&format!("- {e}: [ ]\n"));
    }
    q.push_str("\nAn example:\n");
    for e in elements {
        q.push_str(&format!("- {e}: [N]\n"));
    }
    q.push_str(
        "\nThis example has nothing to do with the answer, and it only provides the \
         format for the answer.",
    );
    q
}

/// Unique element list over the registry, in registry order.
pub fn query_elements(concepts: &[ConceptSpec]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in concepts {
        for e in &c.check_elements {
            if !out.iter().any(|x| x.eq_ignore_ascii_case(e)) {
                out.push(e.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementAnswer {
    pub detected: bool,
    /// Missing or malformed answer line, detection forced by the fail-safe.
    pub flagged: bool,
}

/// Parse one element's answer out of a response body. `Y`/`N` match
/// case-insensitively; a missing or malformed line is a flagged detection.
fn parse_element(body: &str, element: &str) -> ElementAnswer {
    let needle = element.to_lowercase();
    let mut answer: Option<ElementAnswer> = None;
    for line in body.lines() {
        let line = line.trim();
        let line = line.strip_prefix('-').unwrap_or(line).trim_start();
        let lower = line.to_lowercase();
        if !lower.starts_with(&needle) {
            continue;
        }
        let rest = &line[needle.len()..];
        let rest = rest.trim_start();
        let Some(rest) = rest.strip_prefix(':') else {
            continue;
        };
        let rest = rest.trim();
        let inner = rest
            .strip_prefix('[')
            .and_then(|r| r.split_once(']'))
            .map(|(inside, _)| inside.trim().to_lowercase());
        answer = Some(match inner.as_deref() {
            Some("y") => ElementAnswer {
                detected: true,
                flagged: false,
            },
            Some("n") => ElementAnswer {
                detected: false,
                flagged: false,
            },
            _ => ElementAnswer {
                detected: true,
                flagged: true,
            },
        });
    }
    answer.unwrap_or(ElementAnswer {
        detected: true,
        flagged: true,
    })
}

/// Parse a full response body against the queried element list. A body in
/// which no queried element line parses at all is a protocol violation
/// rather than a wall of fail-safe detections.
pub fn parse_response(body: &str, elements: &[String]) -> Result<Vec<ElementAnswer>> {
    let answers: Vec<ElementAnswer> = elements.iter().map(|e| parse_element(body, e)).collect();
    if !answers.is_empty() && answers.iter().all(|a| a.flagged) {
        return Err(Error::Protocol(format!(
            "no element answers found in response ({} bytes)",
            body.len()
        )));
    }
    Ok(answers)
}

// ---------------------------------------------------------------------------
// VLM detector client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorEndpoint {
    pub base_url: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl DetectorEndpoint {
    pub fn new(base_url: impl Into<String>, timeout_ms: u64, retries: u32) -> Result<Self> {
        if timeout_ms == 0 {
            return Err(Error::Config("detector timeout must be positive".into()));
        }
        Ok(Self {
            base_url: base_url.into(),
            timeout_ms,
            retries,
        })
    }
}

/// Blocking HTTP client for the check endpoint; safe to share across
/// threads, one in-flight request per caller.
pub struct VlmDetector {
    endpoint: DetectorEndpoint,
    agent: ureq::Agent,
    /// (concept name, element names) in registry order.
    concepts: Vec<(String, Vec<String>)>,
    elements: Vec<String>,
    query: String,
}

impl VlmDetector {
    pub fn new(endpoint: DetectorEndpoint, concepts: &[ConceptSpec]) -> Result<Self> {
        if endpoint.base_url.is_empty() {
            return Err(Error::Config("detector endpoint URL is empty".into()));
        }
        let elements = query_elements(concepts);
        let query = build_query(&elements);
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build();
        Ok(Self {
            endpoint,
            agent,
            concepts: concepts
                .iter()
                .map(|c| (c.name.clone(), c.check_elements.clone()))
                .collect(),
            elements,
            query,
        })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    fn post(&self, body: &serde_json::Value) -> Result<String> {
        let url = format!("{}/check", self.endpoint.base_url.trim_end_matches('/'));
        let mut last_err = String::new();
        for _attempt in 0..=self.endpoint.retries {
            match self.agent.request("POST", &url).send_json(body.clone()) {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| Error::Protocol(format!("unreadable response body: {e}")));
                }
                Err(ureq::Error::Status(code, _)) => {
                    return Err(Error::Protocol(format!("endpoint returned HTTP {code}")));
                }
                Err(ureq::Error::Transport(t)) => {
                    last_err = t.to_string();
                }
            }
        }
        Err(Error::Transport(format!(
            "no response after {} attempts: {last_err}",
            self.endpoint.retries + 1
        )))
    }
}

impl Detector for VlmDetector {
    fn check(&self, image: &Tensor, checkpoint_t: usize) -> Result<CheckReport> {
        let png = encode_png(image)?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(&png),
            "query": self.query,
        });
        let text = self.post(&body)?;
        let answers = parse_response(&text, &self.elements)?;
        let mut concepts = Vec::with_capacity(self.concepts.len());
        for (name, elems) in &self.concepts {
            let mut checks = Vec::with_capacity(elems.len());
            for e in elems {
                let idx = self
                    .elements
                    .iter()
                    .position(|x| x.eq_ignore_ascii_case(e))
                    .expect("every registry element was queried");
                let a = answers[idx];
                checks.push(ElementCheck {
                    name: e.clone(),
                    detected: a.detected,
                    score: None,
                    flagged: a.flagged,
                });
            }
            concepts.push(concept_check(name, checks));
        }
        Ok(CheckReport {
            checkpoint_t,
            concepts,
            raw: text,
        })
    }
}

// ---------------------------------------------------------------------------
// PNG encoding
// ---------------------------------------------------------------------------

/// Encode a single-channel tensor in `[0, 1]` as an 8-bit grayscale PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.shape();
    if c != 1 {
        return Err(Error::dim("encode_png", format!("expected 1 channel, got {c}")));
    }
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("sized buffer");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Config(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Encode a binary mask as a grayscale PNG, scaled up for visibility.
pub fn encode_mask_png(values: &[f64], resolution: usize, scale: usize) -> Result<Vec<u8>> {
    let side = resolution * scale;
    let mut pixels = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let v = values[(y / scale) * resolution + (x / scale)];
            pixels[y * side + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let buf = image::GrayImage::from_raw(side as u32, side as u32, pixels).expect("sized buffer");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Config(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserTuning;
    use crate::text_embed::TextEmbedder;

    fn setup() -> (DenoiserParams, Vec<ConceptSpec>) {
        let embed = TextEmbedder::new(0x7e_c0de);
        let params = DenoiserParams::new(embed.clone(), DenoiserTuning::default(), &[]).unwrap();
        let concepts = vec![
            ConceptSpec::new(&embed, "nudity", &["nudity"], "covered in clothing", false).unwrap(),
            ConceptSpec::new(&embed, "bird", &["bird"], "ballon", false).unwrap(),
        ];
        (params, concepts)
    }

    #[test]
    fn rule_detector_fires_on_its_own_template() {
        let (params, concepts) = setup();
        let det = RuleDetector::new(&params, &concepts, 0.5).unwrap();
        let size = params.image_size();
        let tok = params.embedder().word_id("nudity");
        let data = params.patterns().pattern(tok);
        let image = Tensor::new(1, size, size, data).unwrap();
        let report = det.check(&image, 40).unwrap();
        assert!(report.concepts[0].detected, "self-correlation detects");
        let score = report.concepts[0].elements[0].score.unwrap();
        assert!(score > 0.99);
        assert!(!report.concepts[1].detected, "other concept silent");
    }

    #[test]
    fn rule_detector_false_positive_rate_on_noise() {
        use rand::{Rng, SeedableRng};
        let (params, concepts) = setup();
        let det = RuleDetector::new(&params, &concepts, 0.5).unwrap();
        let size = params.image_size();
        let mut false_positives = 0usize;
        let runs = 1000;
        for seed in 0..runs {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed as u64);
            let data: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
            let image = Tensor::new(1, size, size, data).unwrap();
            if det.check(&image, 40).unwrap().any_detected() {
                false_positives += 1;
            }
        }
        assert!(
            (false_positives as f64) < 0.01 * runs as f64,
            "false positives: {false_positives}/{runs}"
        );
    }

    #[test]
    fn rule_detector_half_blend_matches_direct_correlation() {
        let (params, concepts) = setup();
        let det = RuleDetector::new(&params, &concepts, 0.5).unwrap();
        let size = params.image_size();
        let tok = params.embedder().word_id("nudity");
        let pattern = params.patterns().pattern(tok);
        let data: Vec<f64> = pattern.iter().map(|v| 0.5 * v + 0.5 * 0.3).collect();
        let image = Tensor::new(1, size, size, data.clone()).unwrap();
        let report = det.check(&image, 20).unwrap();
        // Direct scalar correlation oracle over the same support.
        let support: Vec<usize> = params.patterns().support(tok);
        let want = masked_ncc(&data, &pattern, &support);
        let got = report.concepts[0].elements[0].score.unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(report.concepts[0].detected, want >= 0.5);
    }

    #[test]
    fn rule_detector_rejects_empty_element() {
        let embed = TextEmbedder::new(1);
        let params = DenoiserParams::new(embed.clone(), DenoiserTuning::default(), &[]).unwrap();
        let bad = ConceptSpec::new(&embed, "odd", &["..."], "something", false).unwrap();
        assert!(matches!(
            RuleDetector::new(&params, &[bad], 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_concept_flag_is_or_of_elements() {
        let elements = vec![
            ElementCheck {
                name: "a".into(),
                detected: false,
                score: None,
                flagged: false,
            },
            ElementCheck {
                name: "b".into(),
                detected: true,
                score: None,
                flagged: false,
            },
        ];
        let c = concept_check("c", elements);
        assert!(c.detected);
    }

    #[test]
    fn query_format_lists_elements_and_example() {
        let elements = vec!["nudity".to_string(), "bird".to_string()];
        let q = build_query(&elements);
        assert!(q.contains("Check whether the following elements exist in this picture respectively."));
        assert!(q.contains("- nudity: [ ]"));
        assert!(q.contains("- bird: [ ]"));
        assert!(q.contains("An example:"));
        assert!(q.contains("- nudity: [N]"));
        assert!(q.contains("This example has nothing to do with the answer"));
    }

    #[test]
    fn parse_all_negative() {
        let elements = vec!["nudity".to_string(), "bird".to_string()];
        let body = "- nudity: [N]\n- bird: [N]\n";
        let answers = parse_response(body, &elements).unwrap();
        assert!(answers.iter().all(|a| !a.detected && !a.flagged));
    }

    #[test]
    fn parse_positive_case_insensitive() {
        let elements = vec!["bird".to_string()];
        for body in ["- bird: [Y]", "- Bird: [y]", "-  bird : [ Y ]"] {
            let answers = parse_response(body, &elements).unwrap();
            assert!(answers[0].detected, "{body:?}");
            assert!(!answers[0].flagged, "{body:?}");
        }
    }

    #[test]
    fn parse_missing_element_fails_safe() {
        let elements = vec!["nudity".to_string(), "bird".to_string()];
        let body = "- nudity: [N]\n";
        let answers = parse_response(body, &elements).unwrap();
        assert!(!answers[0].detected);
        assert!(answers[1].detected && answers[1].flagged);
    }

    #[test]
    fn parse_malformed_answer_fails_safe() {
        let elements = vec!["nudity".to_string(), "bird".to_string()];
        let body = "- nudity: [maybe]\n- bird: [N]\n";
        let answers = parse_response(body, &elements).unwrap();
        assert!(answers[0].detected && answers[0].flagged);
        assert!(!answers[1].detected);
    }

    #[test]
    fn parse_empty_body_is_protocol_error() {
        let elements = vec!["nudity".to_string()];
        assert!(matches!(
            parse_response("", &elements),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            parse_response("no answers here", &elements),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn endpoint_requires_positive_timeout() {
        assert!(DetectorEndpoint::new("http://localhost:1", 0, 1).is_err());
        assert!(DetectorEndpoint::new("http://localhost:1", 100, 1).is_ok());
    }

    #[test]
    fn png_roundtrip_shape() {
        let t = Tensor::filled(1, 16, 16, 0.5);
        let png = encode_png(&t).unwrap();
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!(img.width(), 16);
        assert_eq!(img.height(), 16);
    }
}
