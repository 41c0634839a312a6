//! Text conditioning: a deterministic hashed-token embedder and a loader for
//! externally computed embeddings stored in the checkpoint container.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub max_tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { max_tokens: 16, dim: 64, seed: 0x7e57_0001 }
    }
}

/// A `[L, D]` token embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Tensor);

impl TextEmbedding {
    pub fn new(tensor: Tensor, cfg: &TextConfig) -> Result<Self> {
        tensor.expect_shape("text_embedding", &[cfg.max_tokens, cfg.dim])?;
        if !tensor.all_finite() {
            return Err(Error::invalid("text_embedding", "non-finite values"));
        }
        Ok(TextEmbedding(tensor))
    }

    /// The all-zero embedding, used as the unconditional input.
    pub fn null(cfg: &TextConfig) -> Self {
        TextEmbedding(Tensor::zeros(&[cfg.max_tokens, cfg.dim]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug)]
pub struct HashEmbedder {
    cfg: TextConfig,
}

impl HashEmbedder {
    pub fn new(cfg: TextConfig) -> Self {
        HashEmbedder { cfg }
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// Row of the seeded table at the token's 64-bit hash. The table is
    /// virtual: rows are regenerated on demand from `seed ^ hash`.
    fn row(&self, token: &str) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ fnv1a(token.as_bytes()));
        Tensor::randn(&[self.cfg.dim], 1.0, &mut rng)
    }

    /// Lowercased whitespace tokens, truncated to `max_tokens`, one table row
    /// each; remaining rows are zero.
    pub fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::invalid("embed_text", "prompt is empty"));
        }
        let (l, d) = (self.cfg.max_tokens, self.cfg.dim);
        let mut data = vec![0.0f32; l * d];
        for (i, tok) in tokens.iter().take(l).enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(self.row(tok).data());
        }
        Ok(TextEmbedding(Tensor::from_parts(vec![l, d], data)))
    }
}

/// Precomputed embeddings keyed by prompt.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    entries: HashMap<String, TextEmbedding>,
}

impl EmbeddingTable {
    pub fn get(&self, prompt: &str) -> Result<&TextEmbedding> {
        self.entries
            .get(prompt)
            .ok_or_else(|| Error::NotFound(format!("no embedding for prompt {prompt:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, prompt: impl Into<String>, emb: TextEmbedding) {
        self.entries.insert(prompt.into(), emb);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> =
            self.entries.iter().map(|(k, v)| (k.clone(), v.tensor().clone())).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        checkpoint::save_checkpoint(&named, path)
    }
}

/// One tensor per prompt; each must be `[max_tokens, dim]`.
pub fn load_embeddings(path: &Path, cfg: &TextConfig) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::default();
    for (name, t) in checkpoint::load_checkpoint(path)? {
        let emb = TextEmbedding::new(t, cfg)
            .map_err(|e| Error::format(path, format!("embedding {name:?}: {e}")))?;
        table.insert(name, emb);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_padded() {
        let e = HashEmbedder::new(TextConfig::default());
        let a = e.embed("A red  square moving right").unwrap();
        let b = e.embed("a red square moving RIGHT").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensor().shape(), &[16, 64]);
        assert!(a.tensor().data()[5 * 64..].iter().all(|&v| v == 0.0));
        assert!(a.tensor().data()[4 * 64..5 * 64].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn different_prompts_differ() {
        let e = HashEmbedder::new(TextConfig::default());
        let dog = e.embed("a dog").unwrap();
        let cat = e.embed("a cat").unwrap();
        assert!(dog.tensor().l2_distance(cat.tensor()) > 0.0);
    }

    #[test]
    fn empty_prompt_rejected() {
        let e = HashEmbedder::new(TextConfig::default());
        assert!(e.embed("   ").is_err());
    }

    #[test]
    fn missing_prompt_is_not_found() {
        let t = EmbeddingTable::default();
        assert!(matches!(t.get("x"), Err(Error::NotFound(_))));
    }
}
