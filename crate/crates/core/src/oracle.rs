//! Brute-force reference implementations, kept deliberately naive so that
//! any number produced by the fast paths can be audited against them.

use crate::attention_metrics::Metric;
use crate::error::{Error, Result};
use crate::interchange::{AttentionRecord, Variant};
use crate::segmentation::{Role, TokenSegmentation};

fn flow(rec: &AttentionRecord, layer: usize, i: usize, j: usize) -> f64 {
    let mut total = 0.0;
    for h in 0..rec.n_heads() {
        total += rec.weight(layer, h, j, i) as f64;
    }
    total / rec.n_heads() as f64
}

fn is_anchor(role: Role) -> bool {
    role == Role::Bos || role == Role::ImageMark || role == Role::Period || role == Role::Delim
}

fn mean_over(rec: &AttentionRecord, layer: usize, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &(i, j) in pairs {
        total += flow(rec, layer, i, j);
    }
    Some(total / pairs.len() as f64)
}

fn divide(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Reference value of `which` at `layer`, enumerating every pair set from
/// the raw token labels.
pub fn oracle_metric(
    which: Metric,
    rec_with: &AttentionRecord,
    rec_without: Option<&AttentionRecord>,
    seg: &TokenSegmentation,
    layer: usize,
) -> Result<f64> {
    let labels = seg.labels();
    let n = labels.len();
    if rec_with.seq_len() != n || layer >= rec_with.n_layers() {
        return Err(Error::domain("record does not match segmentation or layer"));
    }
    let mut anchors = Vec::new();
    let mut context = Vec::new();
    let query = vec![n - 2, n - 1];
    for t in labels {
        if t.role == Role::Query {
            continue;
        }
        if is_anchor(t.role) {
            anchors.push(t.index);
        } else if t.ice_index.is_some() {
            context.push(t.index);
        }
    }
    let pairs = |keys: &[usize], queries: &[usize]| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &i in keys {
            for &j in queries {
                if i <= j {
                    out.push((i, j));
                }
            }
        }
        out
    };

    match which {
        Metric::Acar => {
            if anchors.is_empty() || context.is_empty() {
                return Err(Error::domain("need anchor and context tokens"));
            }
            let a = mean_over(rec_with, layer, &pairs(&anchors, &query)).unwrap_or(0.0);
            let c = mean_over(rec_with, layer, &pairs(&context, &query)).unwrap_or(0.0);
            Ok(divide(a, c))
        }
        Metric::Iear => {
            let n_ices = labels.iter().filter_map(|t| t.ice_index).max().map_or(0, |m| m + 1);
            if n_ices < 2 {
                return Err(Error::domain("need at least 2 examples"));
            }
            let mut terms = Vec::new();
            for k in 0..n_ices {
                let own: Vec<usize> = context.iter().copied().filter(|&i| labels[i].ice_index == Some(k)).collect();
                let others: Vec<usize> =
                    context.iter().copied().filter(|&i| labels[i].ice_index != Some(k)).collect();
                let mut intra_rows = Vec::new();
                let mut extra_rows = Vec::new();
                for &j in &own {
                    let extra = mean_over(rec_with, layer, &pairs(&others, &[j]));
                    let intra = mean_over(rec_with, layer, &pairs(&own, &[j]));
                    if let (Some(e), Some(i)) = (extra, intra) {
                        intra_rows.push(i);
                        extra_rows.push(e);
                    }
                }
                if intra_rows.is_empty() {
                    continue;
                }
                let num = intra_rows.iter().sum::<f64>() / intra_rows.len() as f64;
                let den = extra_rows.iter().sum::<f64>() / extra_rows.len() as f64;
                terms.push(divide(num, den));
            }
            if terms.is_empty() {
                return Err(Error::domain("no inter-example pairs"));
            }
            Ok(terms.iter().sum::<f64>() / terms.len() as f64)
        }
        Metric::Vcar => {
            let without = rec_without.ok_or_else(|| Error::domain("VCAR needs the without-image record"))?;
            if rec_with.variant() != Variant::WithQueryImage || without.variant() != Variant::WithoutQueryImage {
                return Err(Error::domain("wrong variants"));
            }
            if without.seq_len() != n || without.n_layers() != rec_with.n_layers() {
                return Err(Error::domain("records differ in shape"));
            }
            if context.is_empty() {
                return Err(Error::domain("need context tokens"));
            }
            let qq = pairs(&query, &query);
            let with_qq = mean_over(rec_with, layer, &qq).unwrap_or(0.0);
            let without_qq = mean_over(without, layer, &qq).unwrap_or(0.0);
            let cq = mean_over(rec_with, layer, &pairs(&context, &query)).unwrap_or(0.0);
            Ok(divide(with_qq - without_qq, cq))
        }
    }
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if tokens.len() >= n {
        for s in 0..=tokens.len() - n {
            out.push(tokens[s..s + n].to_vec());
        }
    }
    out
}

fn count(grams: &[Vec<String>], g: &[String]) -> f64 {
    grams.iter().filter(|x| x.as_slice() == g).count() as f64
}

fn distinct(grams: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in grams {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// CIDEr-D by direct transcription: per n, clipped TF-IDF cosine with a
/// Gaussian length penalty (σ = 6), averaged over n = 1..4 and references,
/// times 10. `corpus` holds one reference set per image.
pub fn oracle_cider(candidate: &str, refs: &[&str], corpus: &[Vec<String>]) -> f64 {
    let cand_tokens = words(candidate);
    if cand_tokens.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let n_docs = corpus.len() as f64;
    let df = |g: &[String]| -> f64 {
        let mut d = 0.0;
        for doc in corpus {
            if doc.iter().any(|c| count(&ngrams(&words(c), g.len()), g) > 0.0) {
                d += 1.0;
            }
        }
        d
    };
    let mut per_ref = Vec::new();
    for r in refs {
        let ref_tokens = words(r);
        let delta = cand_tokens.len() as f64 - ref_tokens.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * 6.0 * 6.0)).exp();
        let mut score = 0.0;
        for n in 1..=4 {
            let cg = ngrams(&cand_tokens, n);
            let rg = ngrams(&ref_tokens, n);
            let weight = |grams: &[Vec<String>], g: &[String]| count(grams, g) * (n_docs.ln() - df(g).max(1.0).ln());
            let mut dot = 0.0;
            let mut cn = 0.0;
            let mut rn = 0.0;
            for g in distinct(&cg) {
                let c = weight(&cg, &g);
                cn += c * c;
                if count(&rg, &g) > 0.0 {
                    let rv = weight(&rg, &g);
                    dot += c.min(rv) * rv;
                }
            }
            for g in distinct(&rg) {
                let rv = weight(&rg, &g);
                rn += rv * rv;
            }
            let cos = if cn > 0.0 && rn > 0.0 { dot / (cn.sqrt() * rn.sqrt()) } else { dot };
            score += cos * penalty;
        }
        per_ref.push(score / 4.0);
    }
    10.0 * per_ref.iter().sum::<f64>() / per_ref.len() as f64
}
