use std::collections::{BTreeMap, HashMap, HashSet};

use super::{tokenize, NGramProfile, MAX_N};

/// Standard deviation of the Gaussian length penalty.
pub const LENGTH_SIGMA: f64 = 6.0;

/// Number of ICE captions Short-cut CIDEr compares against.
pub const SHORTCUT_REFS: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum CiderVariant {
    /// Clipped TF-IDF and a length penalty (the COCO evaluation variant).
    #[default]
    CiderD,
    /// Plain cosine over TF-IDF vectors.
    Plain,
}

/// Document frequencies over a reference corpus. One document is the whole
/// reference set of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocumentFrequency {
    n_docs: usize,
    counts: HashMap<String, u32>,
}

impl DocumentFrequency {
    pub fn from_documents<D, S>(documents: D) -> Self
    where
        D: IntoIterator,
        D::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u32> = HashMap::new();
        let mut n_docs = 0;
        for doc in documents {
            n_docs += 1;
            let mut grams: HashSet<String> = HashSet::new();
            for caption in doc {
                let profile = NGramProfile::new(caption.as_ref());
                for n in 1..=MAX_N {
                    grams.extend(profile.grams(n).keys().cloned());
                }
            }
            for g in grams {
                *counts.entry(g).or_default() += 1;
            }
        }
        Self { n_docs, counts }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, gram: &str) -> u32 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    fn idf(&self, gram: &str) -> f64 {
        (self.n_docs as f64).ln() - (self.df(gram).max(1) as f64).ln()
    }
}

struct Weighted {
    // Ordered so that floating-point sums do not depend on hash seeds.
    vecs: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn weigh(profile: &NGramProfile, df: &DocumentFrequency) -> Weighted {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<String, f64> = profile
            .grams(n)
            .iter()
            .map(|(g, &tf)| (g.clone(), tf as f64 * df.idf(g)))
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    Weighted {
        vecs,
        norms,
        length: profile.token_count(),
    }
}

fn similarity(cand: &Weighted, reference: &Weighted, variant: CiderVariant) -> f64 {
    let delta = cand.length as f64 - reference.length as f64;
    let penalty = match variant {
        CiderVariant::CiderD => (-(delta * delta) / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)).exp(),
        CiderVariant::Plain => 1.0,
    };
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for (g, &c) in &cand.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(g) {
                val += match variant {
                    CiderVariant::CiderD => c.min(r) * r,
                    CiderVariant::Plain => c * r,
                };
            }
        }
        if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= cand.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

/// Consensus score of `candidate` against `refs` under `df`.
///
/// Returns 0 for a candidate with no tokens and for an empty reference list.
pub fn cider_with(candidate: &str, refs: &[&str], df: &DocumentFrequency, variant: CiderVariant) -> f64 {
    let cand_profile = NGramProfile::new(candidate);
    if cand_profile.token_count() == 0 || refs.is_empty() {
        return 0.0;
    }
    let cand = weigh(&cand_profile, df);
    let sum: f64 = refs
        .iter()
        .map(|r| similarity(&cand, &weigh(&NGramProfile::new(r), df), variant))
        .sum();
    10.0 * sum / refs.len() as f64
}

pub fn cider(candidate: &str, refs: &[&str], df: &DocumentFrequency) -> f64 {
    cider_with(candidate, refs, df, CiderVariant::CiderD)
}

/// CIDEr against the first four ICE captions, with those captions (one
/// document each) as the document-frequency corpus. High values flag copying.
pub fn shortcut_cider(generated: &str, ice_captions: &[&str]) -> f64 {
    let refs = &ice_captions[..ice_captions.len().min(SHORTCUT_REFS)];
    let df = DocumentFrequency::from_documents(refs.iter().map(|r| [*r]));
    cider(generated, refs, &df)
}

/// True when `caption` produces no tokens and would score 0.
pub fn is_empty_caption(caption: &str) -> bool {
    tokenize(caption).is_empty()
}
