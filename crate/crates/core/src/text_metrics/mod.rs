//! Caption scoring: CIDEr(-D), Short-cut CIDEr, CHAIR and CLIPScore.

mod chair;
mod cider;

use std::collections::HashMap;

pub use chair::{aggregate as aggregate_chair, chair, chair_detail, ChairDetail, ChairLexicon, ChairResult};
pub use cider::{
    cider, cider_with, is_empty_caption, shortcut_cider, CiderVariant, DocumentFrequency, LENGTH_SIGMA,
    SHORTCUT_REFS,
};

use crate::error::Result;
use crate::retrieval::cosine_similarity;

pub const MAX_N: usize = 4;
pub const CLIPSCORE_WEIGHT: f64 = 2.5;

/// Lowercase, then split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// n-gram counts for n = 1..=4. Keys are the n tokens joined by one space,
/// which is unambiguous since tokens never contain spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramProfile {
    grams: Vec<HashMap<String, u32>>,
    tokens: usize,
}

impl NGramProfile {
    pub fn new(text: &str) -> Self {
        let tokens = tokenize(text);
        let mut grams = vec![HashMap::new(); MAX_N];
        for n in 1..=MAX_N {
            for window in tokens.windows(n) {
                *grams[n - 1].entry(window.join(" ")).or_default() += 1;
            }
        }
        Self {
            grams,
            tokens: tokens.len(),
        }
    }

    pub fn grams(&self, n: usize) -> &HashMap<String, u32> {
        &self.grams[n - 1]
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }
}

/// `2.5 * max(cos(image, text), 0)`.
pub fn clipscore(image_emb: &[f32], text_emb: &[f32]) -> Result<f64> {
    Ok(CLIPSCORE_WEIGHT * cosine_similarity(image_emb, text_emb)?.max(0.0))
}
