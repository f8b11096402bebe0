//! Deterministic stand-in for a text encoder: hash tokenizer over a fixed
//! vocabulary plus a seeded embedding table.
//!
//! Every token id maps to a fixed unit vector. All content vectors share a
//! common component along the beginning-of-sequence direction, mirroring the
//! tendency of real text encoders to give the sequence-start token broad
//! similarity with everything else. The end-of-sequence vector is the
//! renormalized mean of the content vectors, so it aggregates the prompt's
//! overall semantics and gives mask computations a meaningful column to read.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub type TokenId = u32;

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;

/// Token-vector sequence with the prompt-ending position marked.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// One row per token, unit L2 norm.
    vectors: Matrix,
    eos_index: usize,
    tokens: Vec<TokenId>,
    source_text: String,
}

impl PromptEmbedding {
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn eos_index(&self) -> usize {
        self.eos_index
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids strictly between the sequence markers.
    pub fn content_tokens(&self) -> &[TokenId] {
        if self.eos_index <= 1 {
            &[]
        } else {
            &self.tokens[1..self.eos_index]
        }
    }

    pub fn eos_vector(&self) -> &[f64] {
        self.vectors.row(self.eos_index)
    }
}

#[derive(Debug, Clone)]
pub struct EmbedConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Cosine of every content vector against the sequence-start direction.
    pub bos_align: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            vocab_size: 4096,
            max_len: 77,
            bos_align: 0.0,
            seed: 0x7e_c0de,
        }
    }
}

/// Seeded tokenizer + embedding table. Built once, immutable, shareable.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    cfg: EmbedConfig,
    /// Row-major `vocab_size x dim` table of unit vectors.
    table: Vec<f64>,
    /// The sequence-start direction (row `BOS_ID` of the table).
    bos_dir: Vec<f64>,
}

impl TextEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_config(EmbedConfig {
            seed,
            ..EmbedConfig::default()
        })
    }

    pub fn with_config(cfg: EmbedConfig) -> Self {
        assert!(cfg.dim >= 4, "embedding dimension too small");
        assert!(cfg.vocab_size > 2, "vocabulary must hold BOS, EOS and content");
        let mut bos_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xb05);
        let bos_dir = unit_gaussian(&mut bos_rng, cfg.dim);

        let mut table = vec![0.0; cfg.vocab_size * cfg.dim];
        table[..cfg.dim].copy_from_slice(&bos_dir);
        for id in 1..cfg.vocab_size {
            let mut rng =
                ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ id as u64);
            let g = unit_gaussian(&mut rng, cfg.dim);
            // Residual direction orthogonal to the BOS axis, then a fixed
            // common component along it.
            let dot: f64 = g.iter().zip(&bos_dir).map(|(a, b)| a * b).sum();
            let mut resid: Vec<f64> = g.iter().zip(&bos_dir).map(|(a, b)| a - dot * b).collect();
            normalize(&mut resid);
            let c = cfg.bos_align;
            let s = (1.0 - c * c).sqrt();
            let row = &mut table[id * cfg.dim..(id + 1) * cfg.dim];
            for (i, r) in row.iter_mut().enumerate() {
                *r = s * resid[i] + c * bos_dir[i];
            }
        }
        Self { cfg, table, bos_dir }
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn bos_direction(&self) -> &[f64] {
        &self.bos_dir
    }

    /// Table vector of a token id.
    pub fn vector(&self, id: TokenId) -> &[f64] {
        let id = id as usize % self.cfg.vocab_size;
        &self.table[id * self.cfg.dim..(id + 1) * self.cfg.dim]
    }

    /// Residual part of a token vector (BOS component removed, renormalized).
    /// This is the direction content decoding happens against.
    pub fn residual_direction(&self, id: TokenId) -> Vec<f64> {
        let v = self.vector(id);
        let dot: f64 = v.iter().zip(&self.bos_dir).map(|(a, b)| a * b).sum();
        let mut resid: Vec<f64> = v.iter().zip(&self.bos_dir).map(|(a, b)| a - dot * b).collect();
        normalize(&mut resid);
        resid
    }

    /// Hash id of a single word, for template construction.
    pub fn word_id(&self, word: &str) -> TokenId {
        2 + (fnv1a(word.as_bytes()) % (self.cfg.vocab_size as u64 - 2)) as TokenId
    }

    /// Lowercase, split on non-alphanumeric, hash into the fixed vocabulary,
    /// wrap in sequence markers, truncate to the maximum length.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let lower = text.to_lowercase();
        let mut tokens = Vec::with_capacity(16);
        tokens.push(BOS_ID);
        for word in lower.split(|c: char| !c.is_alphanumeric()) {
            if word.is_empty() {
                continue;
            }
            if tokens.len() == self.cfg.max_len - 1 {
                break;
            }
            tokens.push(self.word_id(word));
        }
        tokens.push(EOS_ID);
        tokens
    }

    /// Map a token sequence to its embedding. The EOS row is the renormalized
    /// mean of the content rows so it encodes the prompt's overall semantics;
    /// with no content tokens it falls back to the EOS table vector.
    pub fn encode(&self, tokens: &[TokenId]) -> Result<PromptEmbedding> {
        if tokens.is_empty() {
            return Err(Error::Empty { op: "encode" });
        }
        let n = tokens.len();
        let d = self.cfg.dim;
        let eos_index = tokens.iter().position(|&t| t == EOS_ID).unwrap_or(n - 1);
        let mut data = vec![0.0; n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(self.vector(tok));
        }
        let content: Vec<TokenId> = tokens[..eos_index]
            .iter()
            .copied()
            .filter(|&t| t != BOS_ID && t != EOS_ID)
            .collect();
        if !content.is_empty() {
            let mut mean = vec![0.0; d];
            for &tok in &content {
                for (m, v) in mean.iter_mut().zip(self.vector(tok)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= content.len() as f64;
            }
            normalize(&mut mean);
            data[eos_index * d..(eos_index + 1) * d].copy_from_slice(&mean);
        }
        Ok(PromptEmbedding {
            vectors: Matrix::new(n, d, data)?,
            eos_index,
            tokens: tokens.to_vec(),
            source_text: String::new(),
        })
    }

    /// Tokenize and encode in one call, keeping the source text.
    pub fn embed_text(&self, text: &str) -> PromptEmbedding {
        let tokens = self.tokenize(text);
        let mut e = self
            .encode(&tokens)
            .expect("tokenize always yields BOS and EOS");
        e.source_text = text.to_string();
        e
    }
}

fn unit_gaussian(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedder() -> TextEmbedder {
        TextEmbedder::new(EmbedConfig::default().seed)
    }

    #[test]
    fn empty_prompt_is_markers_only() {
        let e = embedder();
        let tokens = e.tokenize("");
        assert_eq!(tokens, vec![BOS_ID, EOS_ID]);
        let emb = e.encode(&tokens).unwrap();
        assert_eq!(emb.eos_index(), 1);
    }

    #[test]
    fn three_word_prompt_counts() {
        let e = embedder();
        let tokens = e.tokenize("a nude person");
        assert_eq!(tokens.len(), 5);
        let emb = e.encode(&tokens).unwrap();
        assert_eq!(emb.eos_index(), 4);
        assert_eq!(emb.content_tokens().len(), 3);
    }

    #[test]
    fn tokenize_is_deterministic() {
        let e = embedder();
        assert_eq!(e.tokenize("A Nude, person!"), e.tokenize("a nude person"));
        assert_eq!(e.tokenize("same words"), e.tokenize("same words"));
    }

    #[test]
    fn truncation_respects_max_len() {
        let e = embedder();
        let long: String = (0..200).map(|i| format!("w{i} ")).collect();
        let tokens = e.tokenize(&long);
        assert_eq!(tokens.len(), 77);
        assert_eq!(*tokens.last().unwrap(), EOS_ID);
    }

    #[test]
    fn same_token_same_vector() {
        let e = embedder();
        let emb = e.embed_text("couch and couch");
        let t = emb.tokens();
        assert_eq!(t[1], t[3]);
        assert_eq!(emb.vectors().row(1), emb.vectors().row(3));
    }

    #[test]
    fn eos_parallel_to_single_content_token() {
        let e = embedder();
        let emb = e.embed_text("bird");
        let c = cosine(emb.eos_vector(), emb.vectors().row(1));
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eos_similarity_orders_related_prompts() {
        let e = embedder();
        let a = e.embed_text("nude person");
        let b = e.embed_text("nude body");
        let c = e.embed_text("green couch");
        let related = cosine(a.eos_vector(), b.eos_vector());
        let unrelated = cosine(a.eos_vector(), c.eos_vector());
        assert!(related > unrelated, "related={related} unrelated={unrelated}");
    }

    #[test]
    fn all_vectors_unit_norm() {
        let e = embedder();
        for text in ["", "bird", "a nude person on a couch", "x y z w"] {
            let emb = e.embed_text(text);
            for r in 0..emb.len() {
                let norm: f64 = emb.vectors().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eos_index_addresses_eos_token() {
        let e = embedder();
        for text in ["", "bird", "many words in this prompt here"] {
            let emb = e.embed_text(text);
            assert_eq!(emb.tokens()[emb.eos_index()], EOS_ID);
        }
    }

    #[test]
    fn content_vectors_share_bos_alignment() {
        let e = embedder();
        let emb = e.embed_text("lake tree sunset");
        for &tok in emb.content_tokens() {
            let c = cosine(e.vector(tok), e.bos_direction());
            assert!((c - e.config().bos_align).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_empty() {
        let e = embedder();
        assert!(e.encode(&[]).is_err());
    }
}
