//! Demonstration-set construction and the caption / attention reports built
//! on top of the metric modules.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, build_sequence, CaptionDataset, CaptionSource, IceItem, PromptTemplate, RenderedSequence};
use crate::attention_metrics::{is_sentinel, metric_at, Metric};
use crate::error::{Error, Result};
use crate::interchange::{GeneratedCaption, RunBundle, Variant};
use crate::retrieval::{rs_sample, siir_retrieve, EmbeddingTable, RetrievalMethod, ScoredItem};
use crate::text_metrics::{
    chair_detail, cider_with, clipscore, is_empty_caption, shortcut_cider, ChairLexicon, CiderVariant,
    DocumentFrequency,
};

pub const DEMO_SET_VERSION: u32 = 1;

/// ICE order written into every demonstration set: retrieval rank reversed,
/// so the most similar example sits next to the query.
pub const ICE_ORDER: &str = "most_similar_last";

/// Seed of the `idx`-th query's random draw.
pub fn query_seed(seed: u64, idx: usize) -> u64 {
    seed.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub sample_id: String,
    /// Retrieved items in rank order (before ICE reordering).
    pub retrieval: Vec<ScoredItem>,
    #[serde(flatten)]
    pub rendered: RenderedSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub version: u32,
    pub retrieval: RetrievalMethod,
    pub caption_source: CaptionSource,
    pub shots: usize,
    pub seed: u64,
    pub ice_order: String,
    pub template: PromptTemplate,
    pub entries: Vec<DemoEntry>,
}

impl DemoSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("demo set serializes")
    }
}

pub struct BuildRequest<'a> {
    pub method: RetrievalMethod,
    pub source: CaptionSource,
    pub shots: usize,
    pub seed: u64,
    pub queries: &'a [String],
    pub template: &'a PromptTemplate,
}

/// One demonstration sequence per query. Every size check runs before any
/// sequence is built.
pub fn build_demos(req: &BuildRequest<'_>, ds: &CaptionDataset, table: Option<&EmbeddingTable>) -> Result<DemoSet> {
    let corpus_len = match req.method {
        RetrievalMethod::Rs => ds.images().len(),
        RetrievalMethod::Siir => table
            .ok_or_else(|| Error::Config("SIIR retrieval needs paths.embeddings".into()))?
            .len(),
    };
    if req.shots + 1 > corpus_len {
        return Err(Error::Config(format!(
            "shots = {} but the corpus has only {} images besides the query",
            req.shots,
            corpus_len.saturating_sub(1)
        )));
    }
    let ids = ds.ids();
    let entries = req
        .queries
        .par_iter()
        .enumerate()
        .map(|(idx, query)| {
            if ds.get(query).is_none() {
                return Err(Error::data(format!("query image `{query}` is not in the caption dataset")));
            }
            let result = match req.method {
                RetrievalMethod::Rs => rs_sample(&ids, req.shots, query_seed(req.seed, idx), query)?,
                RetrievalMethod::Siir => siir_retrieve(query, table.expect("checked above"), req.shots)?,
            };
            let ices = result
                .items
                .iter()
                .rev()
                .map(|item| {
                    Ok(IceItem {
                        image_id: item.id.clone(),
                        caption: assign(&item.id, req.source, ds)?,
                        source: req.source,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DemoEntry {
                sample_id: query.clone(),
                retrieval: result.items,
                rendered: build_sequence(&ices, query, req.template)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoSet {
        version: DEMO_SET_VERSION,
        retrieval: req.method,
        caption_source: req.source,
        shots: req.shots,
        seed: req.seed,
        ice_order: ICE_ORDER.to_owned(),
        template: req.template.clone(),
        entries,
    })
}

pub fn load_captions(path: &Path) -> Result<Vec<GeneratedCaption>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub query_image_id: String,
    pub cider: Option<f64>,
    pub clipscore: Option<f64>,
    pub chair_mentions: Option<usize>,
    pub chair_hallucinated: Option<usize>,
    /// Per-caption CHAIRi, hallucinated over mentioned (0 with no mentions).
    pub chair_i: Option<f64>,
    /// 1 when the caption has a hallucinated mention.
    pub chair_s: Option<u8>,
    pub shortcut_cider: Option<f64>,
    pub empty_caption: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreAggregates {
    pub n_samples: usize,
    pub cider: Option<f64>,
    pub clipscore: Option<f64>,
    /// Pooled over all mentions.
    pub chair_i: Option<f64>,
    pub chair_s: Option<f64>,
    pub shortcut_cider: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ScoreAggregates {
    pub fn from_rows(rows: &[ScoreRow]) -> Self {
        let mentions: usize = rows.iter().filter_map(|r| r.chair_mentions).sum();
        let hallucinated: usize = rows.iter().filter_map(|r| r.chair_hallucinated).sum();
        let any_chair = rows.iter().any(|r| r.chair_mentions.is_some());
        Self {
            n_samples: rows.len(),
            cider: mean_of(rows.iter().filter_map(|r| r.cider)),
            clipscore: mean_of(rows.iter().filter_map(|r| r.clipscore)),
            chair_i: any_chair.then(|| if mentions == 0 { 0.0 } else { hallucinated as f64 / mentions as f64 }),
            chair_s: mean_of(rows.iter().filter_map(|r| r.chair_s.map(f64::from))),
            shortcut_cider: mean_of(rows.iter().filter_map(|r| r.shortcut_cider)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ScoreRow>,
    pub aggregates: ScoreAggregates,
    pub warnings: Vec<String>,
}

/// Column order of the per-sample score CSV.
pub const SCORE_COLUMNS: [&str; 10] = [
    "sample_id",
    "query_image_id",
    "cider",
    "clipscore",
    "chair_mentions",
    "chair_hallucinated",
    "chair_i",
    "chair_s",
    "shortcut_cider",
    "empty_caption",
];

pub struct ScoreInputs<'a> {
    pub demos: &'a DemoSet,
    pub captions: &'a [GeneratedCaption],
    pub dataset: &'a CaptionDataset,
    pub lexicon: Option<&'a ChairLexicon>,
    pub image_embeddings: Option<&'a EmbeddingTable>,
    pub caption_embeddings: Option<&'a EmbeddingTable>,
    pub toggles: &'a crate::config::MetricToggles,
}

/// Scores generated captions against their demonstration entries.
///
/// CIDEr references are the query image's human captions; document
/// frequencies come from the human captions of all scored query images, one
/// document per image.
pub fn score(inputs: &ScoreInputs<'_>) -> Result<Report> {
    let by_id: HashMap<&str, &crate::report::DemoEntry> =
        inputs.demos.entries.iter().map(|e| (e.sample_id.as_str(), e)).collect();
    let mut seen = BTreeSet::new();
    let mut orphans = Vec::new();
    for c in inputs.captions {
        if !by_id.contains_key(c.sample_id.as_str()) {
            orphans.push(c.sample_id.clone());
        } else if !seen.insert(c.sample_id.as_str()) {
            return Err(Error::data(format!("caption for `{}` given twice", c.sample_id)));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::data(format!(
            "captions without a demonstration entry: {}",
            orphans.join(", ")
        )));
    }

    let mut warnings = Vec::new();
    if inputs.captions.is_empty() {
        warnings.push("captions file is empty; report has no rows".to_owned());
    }
    let unscored = inputs.demos.entries.len() - seen.len();
    if unscored > 0 && !inputs.captions.is_empty() {
        warnings.push(format!("{unscored} demonstration entries have no generated caption"));
    }

    let t = inputs.toggles;
    let lexicon = match (t.chair, inputs.lexicon) {
        (true, None) => {
            warnings.push("no lexicon given; CHAIR columns disabled".to_owned());
            None
        }
        (true, Some(l)) => Some(l),
        (false, _) => None,
    };
    let clip_tables = match (t.clipscore, inputs.image_embeddings, inputs.caption_embeddings) {
        (true, Some(i), Some(c)) => Some((i, c)),
        (true, _, _) => {
            warnings.push("image or caption embeddings missing; CLIPScore column disabled".to_owned());
            None
        }
        (false, _, _) => None,
    };

    let queries: BTreeSet<&str> = inputs
        .captions
        .iter()
        .map(|c| by_id[c.sample_id.as_str()].rendered.sequence.query_image_id.as_str())
        .collect();
    let df = if t.cider {
        let docs = queries
            .iter()
            .map(|q| {
                inputs
                    .dataset
                    .get(q)
                    .map(|e| e.human_captions.clone())
                    .ok_or_else(|| Error::data(format!("query image `{q}` is not in the caption dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(DocumentFrequency::from_documents(docs))
    } else {
        None
    };
    let variant = if t.plain_cider { CiderVariant::Plain } else { CiderVariant::CiderD };

    let scored: Vec<(ScoreRow, Vec<String>)> = inputs
        .captions
        .par_iter()
        .map(|c| {
            let entry = by_id[c.sample_id.as_str()];
            let query = &entry.rendered.sequence.query_image_id;
            let mut notes = Vec::new();
            let empty = is_empty_caption(&c.caption);
            if empty {
                notes.push(format!("`{}`: caption has no tokens; text scores are 0", c.sample_id));
            }
            let cider = match &df {
                Some(df) => {
                    let refs: Vec<&str> = inputs
                        .dataset
                        .get(query)
                        .map(|e| e.human_captions.iter().map(String::as_str).collect())
                        .unwrap_or_default();
                    if refs.is_empty() {
                        notes.push(format!("`{}`: query image has no human captions; CIDEr skipped", c.sample_id));
                        None
                    } else {
                        Some(cider_with(&c.caption, &refs, df, variant))
                    }
                }
                None => None,
            };
            let clipscore = match clip_tables {
                Some((images, captions)) => match (images.get(query), captions.get(&c.sample_id)) {
                    (Some(a), Some(b)) => Some(clipscore(a, b)?),
                    _ => {
                        notes.push(format!("`{}`: no embedding pair; CLIPScore skipped", c.sample_id));
                        None
                    }
                },
                None => None,
            };
            let chair = lexicon
                .map(|lex| chair_detail(query, &c.caption, inputs.dataset, lex))
                .transpose()?;
            let shortcut = t.shortcut.then(|| {
                let ices: Vec<&str> = entry.rendered.sequence.ices.iter().map(|i| i.caption.as_str()).collect();
                shortcut_cider(&c.caption, &ices)
            });
            let row = ScoreRow {
                sample_id: c.sample_id.clone(),
                query_image_id: query.clone(),
                cider,
                clipscore,
                chair_mentions: chair.as_ref().map(|d| d.mentions.len()),
                chair_hallucinated: chair.as_ref().map(|d| d.hallucinated.len()),
                chair_i: chair.as_ref().map(|d| {
                    if d.mentions.is_empty() {
                        0.0
                    } else {
                        d.hallucinated.len() as f64 / d.mentions.len() as f64
                    }
                }),
                chair_s: chair.as_ref().map(|d| u8::from(d.has_hallucination())),
                shortcut_cider: shortcut,
                empty_caption: empty,
            };
            Ok((row, notes))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(scored.len());
    for (row, notes) in scored {
        rows.push(row);
        warnings.extend(notes);
    }
    Ok(Report {
        aggregates: ScoreAggregates::from_rows(&rows),
        rows,
        warnings,
    })
}

/// Long-format rows `(sample_id, metric, value)` for every present value.
pub fn long_rows(rows: &[ScoreRow]) -> Vec<(String, &'static str, f64)> {
    let mut out = Vec::new();
    for r in rows {
        let values = [
            ("cider", r.cider),
            ("clipscore", r.clipscore),
            ("chair_i", r.chair_i),
            ("chair_s", r.chair_s.map(f64::from)),
            ("shortcut_cider", r.shortcut_cider),
        ];
        for (name, v) in values {
            if let Some(v) = v {
                out.push((r.sample_id.clone(), name, v));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttnSampleRow {
    pub sample_id: String,
    pub layer: usize,
    pub metric: Metric,
    pub value: f64,
    pub sentinel_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttnLayerRow {
    pub layer: usize,
    pub metric: Metric,
    /// Mean over samples with a finite value at this layer.
    pub value: f64,
    pub sentinel_flag: bool,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttnMean {
    pub metric: Metric,
    /// Mean over non-sentinel layers of the layer rows; `None` if every
    /// layer is a sentinel.
    pub mean: Option<f64>,
    pub sentinel_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttnReport {
    pub samples: Vec<AttnSampleRow>,
    pub layers: Vec<AttnLayerRow>,
    pub means: Vec<AttnMean>,
    pub head_aggregation: &'static str,
    pub warnings: Vec<String>,
}

/// Per-layer attention metrics over every sample of a run. Metrics whose
/// inputs are missing for a sample are skipped with a warning.
pub fn attention_report(bundle: &RunBundle, metrics: &[Metric]) -> Result<AttnReport> {
    let per_sample: Vec<(Vec<AttnSampleRow>, Vec<String>)> = bundle
        .samples
        .par_iter()
        .map(|s| {
            let mut rows = Vec::new();
            let mut notes = Vec::new();
            let with = s.record(Variant::WithQueryImage);
            let without = s.record(Variant::WithoutQueryImage);
            for &m in metrics {
                let primary = match (m, with, without) {
                    (Metric::Vcar, Some(w), Some(_)) => w,
                    (Metric::Vcar, _, _) => {
                        notes.push(format!("`{}`: VCAR skipped, needs both variants", s.sample_id));
                        continue;
                    }
                    (_, Some(w), _) => w,
                    (_, None, Some(wo)) => {
                        notes.push(format!("`{}`: {m} computed on the without-image record", s.sample_id));
                        wo
                    }
                    (_, None, None) => continue,
                };
                let mut values = Vec::with_capacity(primary.n_layers());
                for layer in 0..primary.n_layers() {
                    match metric_at(m, primary, without, &s.segmentation, layer) {
                        Ok(v) => values.push(v),
                        Err(Error::Domain(msg)) => {
                            notes.push(format!("`{}`: {m} skipped: {msg}", s.sample_id));
                            values.clear();
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                rows.extend(values.into_iter().enumerate().map(|(layer, value)| AttnSampleRow {
                    sample_id: s.sample_id.clone(),
                    layer,
                    metric: m,
                    value,
                    sentinel_flag: is_sentinel(value),
                }));
            }
            Ok((rows, notes))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    let mut warnings = bundle.warnings.clone();
    for (rows, notes) in per_sample {
        samples.extend(rows);
        warnings.extend(notes);
    }

    let mut grouped: BTreeMap<(Metric, usize), Vec<f64>> = BTreeMap::new();
    for r in &samples {
        grouped.entry((r.metric, r.layer)).or_default().push(r.value);
    }
    let layers: Vec<AttnLayerRow> = grouped
        .into_iter()
        .map(|((metric, layer), values)| {
            let finite: Vec<f64> = values.into_iter().filter(|v| !is_sentinel(*v)).collect();
            AttnLayerRow {
                layer,
                metric,
                value: mean_of(finite.iter().copied()).unwrap_or(f64::INFINITY),
                sentinel_flag: finite.is_empty(),
                n_samples: finite.len(),
            }
        })
        .collect();
    let means = metrics
        .iter()
        .filter(|m| layers.iter().any(|r| r.metric == **m))
        .map(|&metric| {
            let rows: Vec<&AttnLayerRow> = layers.iter().filter(|r| r.metric == metric).collect();
            AttnMean {
                metric,
                mean: mean_of(rows.iter().filter(|r| !r.sentinel_flag).map(|r| r.value)),
                sentinel_layers: rows.iter().filter(|r| r.sentinel_flag).map(|r| r.layer).collect(),
            }
        })
        .collect();
    for m in metrics {
        if !layers.iter().any(|r| r.metric == *m) {
            warnings.push(format!("{m} absent from the report: no sample provided its inputs"));
        }
    }
    Ok(AttnReport {
        samples,
        layers,
        means,
        head_aggregation: "mean",
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::ImageEntry;

    fn dataset(n: usize) -> CaptionDataset {
        CaptionDataset::new(
            (0..n)
                .map(|i| ImageEntry {
                    id: format!("img{i}"),
                    human_captions: vec![format!("a photo of thing {i}"), format!("thing number {i} here")],
                    machine_captions: Default::default(),
                    gt_objects: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn request<'a>(queries: &'a [String], template: &'a PromptTemplate, shots: usize) -> BuildRequest<'a> {
        BuildRequest {
            method: RetrievalMethod::Rs,
            source: CaptionSource::Fhl,
            shots,
            seed: 9,
            queries,
            template,
        }
    }

    #[test]
    fn rs_build_is_deterministic() {
        let ds = dataset(6);
        let q = ds.ids();
        let tpl = PromptTemplate::default();
        let a = build_demos(&request(&q, &tpl, 3), &ds, None).unwrap();
        let b = build_demos(&request(&q, &tpl, 3), &ds, None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        for e in &a.entries {
            assert_eq!(e.rendered.sequence.ices.len(), 3);
            assert!(e.rendered.sequence.ices.iter().all(|i| i.image_id != e.sample_id));
        }
    }

    #[test]
    fn too_many_shots() {
        let ds = dataset(4);
        let q = ds.ids();
        let tpl = PromptTemplate::default();
        assert!(build_demos(&request(&q, &tpl, 4), &ds, None).is_err());
        assert!(build_demos(&request(&q, &tpl, 3), &ds, None).is_ok());
    }

    #[test]
    fn aggregates_recompute() {
        let row = |c: f64, m: usize, h: usize| ScoreRow {
            sample_id: "s".into(),
            query_image_id: "q".into(),
            cider: Some(c),
            clipscore: None,
            chair_mentions: Some(m),
            chair_hallucinated: Some(h),
            chair_i: Some(if m == 0 { 0.0 } else { h as f64 / m as f64 }),
            chair_s: Some(u8::from(h > 0)),
            shortcut_cider: Some(c / 2.0),
            empty_caption: false,
        };
        let rows = vec![row(1.0, 2, 1), row(3.0, 0, 0), row(2.0, 2, 0)];
        let agg = ScoreAggregates::from_rows(&rows);
        assert_eq!(agg.cider, Some(2.0));
        assert_eq!(agg.chair_i, Some(0.25));
        assert_eq!(agg.chair_s, Some(1.0 / 3.0));
        assert_eq!(agg.clipscore, None);
        assert_eq!(long_rows(&rows).len(), 12);
    }

    #[test]
    fn query_seeds_differ() {
        assert_ne!(query_seed(1, 0), query_seed(1, 1));
        assert_eq!(query_seed(5, 0), 5);
    }
}
