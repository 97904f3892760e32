use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize;
use crate::assignment::CaptionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct LexiconFile {
    categories: Vec<String>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
}

/// Object vocabulary with surface forms. Category names are surface forms of
/// themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ChairLexicon {
    categories: BTreeSet<String>,
    /// Tokenized surface form to category.
    surfaces: HashMap<Vec<String>, String>,
    longest: usize,
}

impl ChairLexicon {
    pub fn new<C, S>(categories: C, synonyms: S) -> Result<Self>
    where
        C: IntoIterator<Item = String>,
        S: IntoIterator<Item = (String, String)>,
    {
        let categories: BTreeSet<String> = categories.into_iter().collect();
        let mut surfaces: HashMap<Vec<String>, String> = HashMap::new();
        for (surface, category) in synonyms {
            if !categories.contains(&category) {
                return Err(Error::data(format!(
                    "synonym `{surface}` maps to unknown category `{category}`"
                )));
            }
            let tokens = tokenize(&surface);
            if tokens.is_empty() {
                return Err(Error::data(format!("synonym `{surface}` has no word characters")));
            }
            if let Some(prev) = surfaces.insert(tokens, category.clone()) {
                return Err(Error::data(format!(
                    "surface form `{surface}` is ambiguous ({prev} vs {category})"
                )));
            }
        }
        for category in &categories {
            let tokens = tokenize(category);
            if tokens.is_empty() {
                return Err(Error::data(format!("category `{category}` has no word characters")));
            }
            match surfaces.get(&tokens) {
                Some(existing) if existing != category => {
                    return Err(Error::data(format!(
                        "category name `{category}` is also a synonym of `{existing}`"
                    )))
                }
                Some(_) => {}
                None => {
                    surfaces.insert(tokens, category.clone());
                }
            }
        }
        let longest = surfaces.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            categories,
            surfaces,
            longest,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: LexiconFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(file.categories, file.synonyms)
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    /// Object categories mentioned in `caption`, one entry per occurrence.
    /// Matching is greedy longest-first, left to right, on tokens.
    pub fn mentions(&self, caption: &str) -> Vec<String> {
        let tokens = tokenize(caption);
        let mut found = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            let max_len = self.longest.min(tokens.len() - pos);
            let hit = (1..=max_len)
                .rev()
                .find_map(|len| self.surfaces.get(&tokens[pos..pos + len]).map(|c| (len, c)));
            match hit {
                Some((len, category)) => {
                    found.push(category.clone());
                    pos += len;
                }
                None => pos += 1,
            }
        }
        found
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairDetail {
    pub image_id: String,
    pub mentions: Vec<String>,
    pub hallucinated: Vec<String>,
}

impl ChairDetail {
    pub fn has_hallucination(&self) -> bool {
        !self.hallucinated.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairResult {
    /// Hallucinated mentions over all mentions; 0 when nothing is mentioned.
    pub chair_i: f64,
    /// Fraction of captions with at least one hallucinated mention.
    pub chair_s: f64,
    pub details: Vec<ChairDetail>,
}

pub fn chair_detail(image_id: &str, caption: &str, ds: &CaptionDataset, lex: &ChairLexicon) -> Result<ChairDetail> {
    let gt = ds
        .gt_objects(image_id)
        .ok_or_else(|| Error::data(format!("image `{image_id}` has no ground-truth objects")))?;
    let mentions = lex.mentions(caption);
    let hallucinated = mentions.iter().filter(|m| !gt.contains(*m)).cloned().collect();
    Ok(ChairDetail {
        image_id: image_id.to_owned(),
        mentions,
        hallucinated,
    })
}

pub fn chair<S: AsRef<str>>(captions: &[(S, S)], ds: &CaptionDataset, lex: &ChairLexicon) -> Result<ChairResult> {
    let details = captions
        .iter()
        .map(|(id, cap)| chair_detail(id.as_ref(), cap.as_ref(), ds, lex))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(details))
}

pub fn aggregate(details: Vec<ChairDetail>) -> ChairResult {
    let mentions: usize = details.iter().map(|d| d.mentions.len()).sum();
    let hallucinated: usize = details.iter().map(|d| d.hallucinated.len()).sum();
    let flagged = details.iter().filter(|d| d.has_hallucination()).count();
    ChairResult {
        chair_i: if mentions == 0 { 0.0 } else { hallucinated as f64 / mentions as f64 },
        chair_s: if details.is_empty() { 0.0 } else { flagged as f64 / details.len() as f64 },
        details,
    }
}
