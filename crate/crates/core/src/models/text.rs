//! Hashed bag-of-words text embedder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Neutral prompt anchoring the text direction.
pub const SOURCE_PROMPT: &str = "a plain photo";

pub const DEFAULT_BUCKETS: usize = 4096;

/// Tokens are lowercased whitespace-separated words, each hashed (FNV-1a,
/// seed-salted) into a row of a frozen Gaussian table. The embedding is the
/// normalized sum of the rows, so it ignores word order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder {
    seed: u64,
    table: Tensor,
}

impl TextEmbedder {
    pub fn new(seed: u64, embed_dim: usize) -> Self {
        Self::with_buckets(seed, embed_dim, DEFAULT_BUCKETS)
    }

    pub fn with_buckets(seed: u64, embed_dim: usize, buckets: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0000_0000_0001);
        TextEmbedder {
            seed,
            table: Tensor::randn(&[buckets, embed_dim], 1.0, &mut rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.table.shape()[0] as u64) as usize
    }

    pub fn embed(&self, prompt: &str) -> Result<Tensor> {
        let d = self.embed_dim();
        let mut acc = vec![0.0; d];
        let mut any = false;
        for token in prompt.split_whitespace() {
            any = true;
            let row = self.bucket(&token.to_lowercase());
            for (a, t) in acc.iter_mut().zip(&self.table.data()[row * d..(row + 1) * d]) {
                *a += t;
            }
        }
        if !any {
            return Err(Error::Input("prompt is empty".into()));
        }
        Tensor::from_vec(acc)
            .l2_normalized()
            .map_err(|_| Error::DegeneratePrompt(format!("prompt {prompt:?} hashes to a zero vector")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &Tensor, b: &Tensor) -> f64 {
        a.dot(b).unwrap() / (a.norm() * b.norm())
    }

    #[test]
    fn deterministic_and_unit() {
        let e = TextEmbedder::new(7, 64);
        let a = e.embed("Picasso oil painting").unwrap();
        let b = e.embed("Picasso oil painting").unwrap();
        assert!(a.bitwise_eq(&b));
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!(TextEmbedder::new(7, 64).embed("Picasso oil painting").unwrap().bitwise_eq(&a));
    }

    #[test]
    fn source_and_style_prompts_differ() {
        let e = TextEmbedder::new(7, 64);
        let s = e.embed(SOURCE_PROMPT).unwrap();
        let t = e.embed("Picasso oil painting").unwrap();
        assert!(cosine(&s, &t) < 0.99);
    }

    #[test]
    fn word_order_and_case_do_not_matter() {
        let e = TextEmbedder::new(1, 64);
        let a = e.embed("Oil Painting").unwrap();
        let b = e.embed("painting   oil").unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn empty_prompt_rejected() {
        let e = TextEmbedder::new(1, 64);
        assert!(matches!(e.embed(""), Err(Error::Input(_))));
        assert!(matches!(e.embed("  \t "), Err(Error::Input(_))));
    }
}
