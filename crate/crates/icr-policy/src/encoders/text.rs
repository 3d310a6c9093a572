//! Frozen token-level text embedders.
//!
//! Two implementations share one interface: [`HashedTextEncoder`], a
//! download-free deterministic embedder used for tests and desk-scale runs,
//! and the BERT encoder in [`super::bert`] for full-scale experiments. Both
//! are frozen by construction; [`TextEmbedder::checksum`] lets callers
//! verify that no training run ever touches them.

use sha2::{Digest, Sha256};

use super::{DialogueWindow, SpeakerTokenizer, PAD_ID};
use crate::error::Result;

/// A frozen text embedder producing one vector per window position.
pub trait TextEmbedder: Send + Sync {
    /// Embedding width per token.
    fn width(&self) -> usize;

    fn tokenizer(&self) -> &dyn SpeakerTokenizer;

    /// Row-major `[window.len() x width]` embeddings with padding positions
    /// zeroed. Deterministic: identical windows give identical output.
    fn embed(&self, window: &DialogueWindow) -> Result<Vec<f32>>;

    /// Digest of the frozen parameters (or of the generating rule).
    fn checksum(&self) -> String;

    /// Human-readable identifier recorded in checkpoints.
    fn identifier(&self) -> String;
}

const HASHED_VOCAB: u32 = 32768;
const NUM_SPECIAL: u32 = 3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Whitespace/punctuation tokenizer hashing words into a fixed id space.
pub struct HashedTokenizer;

impl SpeakerTokenizer for HashedTokenizer {
    fn encode_text(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| NUM_SPECIAL + (fnv1a64(w.as_bytes()) % (HASHED_VOCAB - NUM_SPECIAL) as u64) as u32)
            .collect()
    }
}

/// Deterministic lookup embedder: every token id maps to a fixed vector
/// derived from a seeded stream, so the embedding table never has to be
/// stored or downloaded. Speaker tokens get their own vectors; padding
/// embeds to zero.
pub struct HashedTextEncoder {
    width: usize,
    seed: u64,
    tokenizer: HashedTokenizer,
}

impl HashedTextEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        HashedTextEncoder {
            width,
            seed,
            tokenizer: HashedTokenizer,
        }
    }

    fn token_vector(&self, token: u32) -> Vec<f32> {
        if token == PAD_ID {
            return vec![0.0; self.width];
        }
        // splitmix-style stream per (seed, token); cheap and stable.
        let mut state = self.seed ^ (token as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let mut next = || {
            state = state.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        };
        (0..self.width)
            .map(|_| {
                let u = (next() >> 11) as f64 / (1u64 << 53) as f64;
                ((u - 0.5) * 2.0 * 0.1) as f32
            })
            .collect()
    }
}

impl TextEmbedder for HashedTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn tokenizer(&self) -> &dyn SpeakerTokenizer {
        &self.tokenizer
    }

    fn embed(&self, window: &DialogueWindow) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(window.len() * self.width);
        for (pos, &tok) in window.token_ids.iter().enumerate() {
            if window.attention_mask[pos] {
                out.extend(self.token_vector(tok));
            } else {
                out.extend(std::iter::repeat(0.0).take(self.width));
            }
        }
        Ok(out)
    }

    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"hashed-text-encoder-v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update(HASHED_VOCAB.to_le_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn identifier(&self) -> String {
        format!("hashed:width={},seed={}", self.width, self.seed)
    }
}
