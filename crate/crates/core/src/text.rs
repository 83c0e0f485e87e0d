//! Deterministic toy prompt encoder standing in for a pretrained text model.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Axis};

use crate::attention::PromptEmbedding;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

/// Maps each lowercase word to a fixed pseudo-random vector. The vocabulary is
/// open: a word's vector depends only on its spelling and `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    pub dim: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEncoder {
    pub fn new(dim: usize) -> Self {
        TextEncoder { dim }
    }

    /// `[n_words, dim]`
    pub fn encode<T: Real>(&self, prompt: &str) -> Array2<T> {
        let words = tokenize(prompt);
        let mut out = Array2::zeros((words.len(), self.dim));
        for (row, word) in out.rows_mut().into_iter().zip(&words) {
            let mut r = rng::stream(fnv1a(word.as_bytes()), rng::streams::TEXT_ENCODER);
            let v: ndarray::Array1<T> = rng::vector(&mut r, self.dim, 1.0);
            v.assign_to(row);
        }
        out
    }

    /// Embedding for a background-only run: no foreground tokens.
    pub fn background<T: Real>(&self, prompt: &str) -> Result<PromptEmbedding<T>> {
        let tokens = self.encode::<T>(prompt);
        if tokens.nrows() == 0 {
            return Err(Error::Invalid(format!("prompt {prompt:?} has no tokens")));
        }
        PromptEmbedding::new(tokens, BTreeSet::new())
    }

    /// Foreground prompt tokens followed by background prompt tokens; the
    /// foreground positions are recorded in the embedding.
    pub fn layer<T: Real>(&self, foreground: &str, background: &str) -> Result<PromptEmbedding<T>> {
        let fg = self.encode::<T>(foreground);
        if fg.nrows() == 0 {
            return Err(Error::Invalid(format!("prompt {foreground:?} has no tokens")));
        }
        let bg = self.encode::<T>(background);
        let fg_tokens = (0..fg.nrows()).collect();
        let tokens = concatenate(Axis(0), &[fg.view(), bg.view()]).expect("same width");
        PromptEmbedding::new(tokens, fg_tokens)
    }
}
