//! Attention-based ratios over a segmented prompt.
//!
//! * ACAR: attention the query tokens pay to anchors versus context.
//! * IEAR: attention within an example's context versus from other examples.
//! * VCAR: query self-attention gained from the query image, relative to the
//!   attention the query pays to context.
//!
//! Heads are averaged. Only causal pairs (key <= query) are ever counted. A
//! zero denominator yields `f64::INFINITY`, the sentinel value; see
//! [`is_sentinel`].

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{AttentionRecord, Variant};
use crate::segmentation::TokenSegmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acar,
    Iear,
    Vcar,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Acar, Metric::Iear, Metric::Vcar];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Acar => "acar",
            Metric::Iear => "iear",
            Metric::Vcar => "vcar",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acar" => Ok(Metric::Acar),
            "iear" => Ok(Metric::Iear),
            "vcar" => Ok(Metric::Vcar),
            other => Err(Error::Config(format!("unknown attention metric `{other}`"))),
        }
    }
}

pub fn is_sentinel(value: f64) -> bool {
    !value.is_finite()
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

fn check_layer(rec: &AttentionRecord, seg: &TokenSegmentation, layer: usize) -> Result<()> {
    if layer >= rec.n_layers() {
        return Err(Error::domain(format!(
            "layer {layer} out of range for {} layers",
            rec.n_layers()
        )));
    }
    if rec.seq_len() != seg.len() {
        return Err(Error::domain(format!(
            "record `{}` has {} tokens but the segmentation has {}",
            rec.sample_id(),
            rec.seq_len(),
            seg.len()
        )));
    }
    Ok(())
}

/// Head-averaged attention paid by `query` to `key` at `layer`.
pub fn attention_flow(rec: &AttentionRecord, layer: usize, key: usize, query: usize) -> Result<f64> {
    if layer >= rec.n_layers() || key >= rec.seq_len() || query >= rec.seq_len() {
        return Err(Error::domain(format!(
            "index (layer {layer}, key {key}, query {query}) out of range"
        )));
    }
    if key > query {
        return Err(Error::domain(format!("key {key} is after query {query}; pair is not causal")));
    }
    let sum: f64 = (0..rec.n_heads()).map(|h| rec.weight(layer, h, query, key) as f64).sum();
    Ok(sum / rec.n_heads() as f64)
}

/// Head-averaged row of one query position.
fn mean_row(rec: &AttentionRecord, layer: usize, query: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; query + 1];
    for h in 0..rec.n_heads() {
        for (a, &w) in acc.iter_mut().zip(&rec.row(layer, h, query)[..=query]) {
            *a += w as f64;
        }
    }
    let scale = 1.0 / rec.n_heads() as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    acc
}

/// Mean of `row[key]` over the given keys that are causal for `query`.
/// Returns (sum, count).
fn causal_sum(row: &[f64], keys: &[usize], query: usize) -> (f64, usize) {
    keys.iter()
        .take_while(|&&k| k <= query)
        .fold((0.0, 0), |(s, c), &k| (s + row[k], c + 1))
}

/// Pooled mean over all causal (key, query) pairs.
fn pooled_mean(rec: &AttentionRecord, layer: usize, keys: &[usize], queries: &[usize]) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0);
    for &q in queries {
        let row = mean_row(rec, layer, q);
        let (s, c) = causal_sum(&row, keys, q);
        sum += s;
        count += c;
    }
    (count > 0).then(|| sum / count as f64)
}

fn require_nonempty(set: &[usize], name: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::domain(format!("segmentation has no {name} tokens")));
    }
    Ok(())
}

pub fn acar(rec: &AttentionRecord, seg: &TokenSegmentation, layer: usize) -> Result<f64> {
    check_layer(rec, seg, layer)?;
    require_nonempty(seg.anchors(), "anchor")?;
    require_nonempty(seg.context(), "context")?;
    let anchor = pooled_mean(rec, layer, seg.anchors(), seg.query()).unwrap_or(0.0);
    let context = pooled_mean(rec, layer, seg.context(), seg.query()).unwrap_or(0.0);
    Ok(ratio(anchor, context))
}

/// Per-example IEAR terms. `None` marks an example with no causal
/// inter-example pairs (always the first one), which is left out of the
/// average.
///
/// Within-example attention is averaged per query row before averaging
/// rows, because rows deeper into an example see more keys of their own
/// example than rows near its start.
pub fn iear_terms(rec: &AttentionRecord, seg: &TokenSegmentation, layer: usize) -> Result<Vec<Option<f64>>> {
    check_layer(rec, seg, layer)?;
    if seg.n_ices() < 2 {
        return Err(Error::domain(format!(
            "IEAR needs at least 2 in-context examples, segmentation has {}",
            seg.n_ices()
        )));
    }
    let mut terms = Vec::with_capacity(seg.n_ices());
    for k in 0..seg.n_ices() {
        let own = seg.ice_context(k);
        let others: Vec<usize> = seg.context().iter().copied().filter(|i| !own.contains(i)).collect();
        let (mut intra, mut extra, mut rows) = (0.0, 0.0, 0usize);
        for &j in own {
            let row = mean_row(rec, layer, j);
            let (es, ec) = causal_sum(&row, &others, j);
            if ec == 0 {
                continue;
            }
            let (is, ic) = causal_sum(&row, own, j);
            intra += is / ic as f64;
            extra += es / ec as f64;
            rows += 1;
        }
        terms.push((rows > 0).then(|| ratio(intra, extra)));
    }
    Ok(terms)
}

pub fn iear(rec: &AttentionRecord, seg: &TokenSegmentation, layer: usize) -> Result<f64> {
    let terms: Vec<f64> = iear_terms(rec, seg, layer)?.into_iter().flatten().collect();
    if terms.is_empty() {
        return Err(Error::domain("no example has causal inter-example context pairs"));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// `(ATT_QQ(with) - ATT_QQ(without)) / ATT_CQ(with)`; negative values are kept.
pub fn vcar(
    rec_with: &AttentionRecord,
    rec_without: &AttentionRecord,
    seg: &TokenSegmentation,
    layer: usize,
) -> Result<f64> {
    if rec_with.variant() != Variant::WithQueryImage || rec_without.variant() != Variant::WithoutQueryImage {
        return Err(Error::domain(format!(
            "VCAR needs (with_query_image, without_query_image) records, got ({}, {})",
            rec_with.variant(),
            rec_without.variant()
        )));
    }
    if rec_with.seq_len() != rec_without.seq_len() || rec_with.n_layers() != rec_without.n_layers() {
        return Err(Error::domain("with/without-image records differ in shape"));
    }
    check_layer(rec_with, seg, layer)?;
    require_nonempty(seg.context(), "context")?;
    let q = seg.query();
    let with = pooled_mean(rec_with, layer, q, q).unwrap_or(0.0);
    let without = pooled_mean(rec_without, layer, q, q).unwrap_or(0.0);
    let context = pooled_mean(rec_with, layer, seg.context(), q).unwrap_or(0.0);
    Ok(ratio(with - without, context))
}

/// Per-layer values of one metric and their mean over non-sentinel layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub metric: Metric,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sentinel_layers: Vec<usize>,
}

impl LayerProfile {
    pub fn from_values(metric: Metric, values: Vec<f64>) -> Result<Self> {
        let sentinel_layers: Vec<usize> = (0..values.len()).filter(|&l| is_sentinel(values[l])).collect();
        let finite: Vec<f64> = values.iter().copied().filter(|v| !is_sentinel(*v)).collect();
        if finite.is_empty() {
            return Err(Error::domain(format!("{metric}: every layer is a sentinel")));
        }
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        Ok(Self {
            metric,
            values,
            mean,
            sentinel_layers,
        })
    }
}

pub fn metric_at(
    metric: Metric,
    rec_with: &AttentionRecord,
    rec_without: Option<&AttentionRecord>,
    seg: &TokenSegmentation,
    layer: usize,
) -> Result<f64> {
    match metric {
        Metric::Acar => acar(rec_with, seg, layer),
        Metric::Iear => iear(rec_with, seg, layer),
        Metric::Vcar => {
            let without = rec_without.ok_or_else(|| Error::domain("VCAR needs the without-image record"))?;
            vcar(rec_with, without, seg, layer)
        }
    }
}

/// Computes `metric` on every layer, in parallel.
pub fn layer_profile(
    metric: Metric,
    rec_with: &AttentionRecord,
    rec_without: Option<&AttentionRecord>,
    seg: &TokenSegmentation,
) -> Result<LayerProfile> {
    let values = (0..rec_with.n_layers())
        .into_par_iter()
        .map(|l| metric_at(metric, rec_with, rec_without, seg, l))
        .collect::<Result<Vec<_>>>()?;
    LayerProfile::from_values(metric, values)
}
