//! Attention-mask plans, token-prune plans and KV-cache accounting.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{write_atomic, write_tensor_file, Tensor};
use crate::segmentation::TokenSegmentation;

/// Host-model dimensions that drive KV-cache size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCfg {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub kv_bytes_per_element: usize,
}

impl ModelCfg {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, kv_bytes_per_element: usize) -> Result<Self> {
        let cfg = Self {
            n_layers,
            n_heads,
            head_dim,
            kv_bytes_per_element,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.kv_bytes_per_element == 0 {
            return Err(Error::domain(format!("model dimensions must all be positive: {self:?}")));
        }
        Ok(())
    }

    /// Bytes of K and V cached per token per layer.
    pub fn bytes_per_token_layer(&self) -> u64 {
        2 * (self.kv_bytes_per_element * self.n_heads * self.head_dim) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Inside the layer range, every row sees only anchor and query keys.
    AnchorCentric,
    /// Inside the layer range, rows of an example see only that example,
    /// anchors and query keys.
    ContextCentric,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::AnchorCentric => "anchor_centric",
            MaskKind::ContextCentric => "context_centric",
        })
    }
}

/// Per-layer boolean attention masks; `true` means the pair is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub kind: MaskKind,
    pub layer_start: usize,
    pub layer_end: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    allowed: Vec<bool>,
}

/// Structured-text description written next to the mask tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlanMeta {
    pub kind: MaskKind,
    pub layer_start: usize,
    pub layer_end: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    /// Keys every row may see inside the range (subject to causality).
    pub always_visible: Vec<usize>,
    /// Context-centric only: token range of each example, `[start, end)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<[usize; 2]>,
    pub predicate: String,
    pub mask_file: String,
}

fn check_range(start: usize, end: usize, n_layers: usize) -> Result<()> {
    if start > end || end >= n_layers {
        return Err(Error::domain(format!(
            "layer range [{start}, {end}] invalid for {n_layers} layers"
        )));
    }
    Ok(())
}

fn build_mask(
    kind: MaskKind,
    start: usize,
    end: usize,
    n_layers: usize,
    seq_len: usize,
    allow: impl Fn(usize, usize) -> bool,
) -> Result<MaskPlan> {
    check_range(start, end, n_layers)?;
    let mut restricted = vec![false; seq_len * seq_len];
    for q in 0..seq_len {
        for k in 0..=q {
            restricted[q * seq_len + k] = allow(q, k);
        }
    }
    let mut causal = vec![false; seq_len * seq_len];
    for q in 0..seq_len {
        for k in 0..=q {
            causal[q * seq_len + k] = true;
        }
    }
    let mut allowed = Vec::with_capacity(n_layers * seq_len * seq_len);
    for l in 0..n_layers {
        allowed.extend_from_slice(if (start..=end).contains(&l) { &restricted } else { &causal });
    }
    Ok(MaskPlan {
        kind,
        layer_start: start,
        layer_end: end,
        n_layers,
        seq_len,
        allowed,
    })
}

fn visible_set(seg: &TokenSegmentation) -> Vec<bool> {
    let mut visible = vec![false; seg.len()];
    for &i in seg.anchors().iter().chain(seg.query()) {
        visible[i] = true;
    }
    visible
}

pub fn anchor_mask(seg: &TokenSegmentation, start: usize, end: usize, n_layers: usize) -> Result<MaskPlan> {
    let visible = visible_set(seg);
    build_mask(MaskKind::AnchorCentric, start, end, n_layers, seg.len(), |_, k| visible[k])
}

pub fn context_mask(seg: &TokenSegmentation, start: usize, end: usize, n_layers: usize) -> Result<MaskPlan> {
    let visible = visible_set(seg);
    build_mask(MaskKind::ContextCentric, start, end, n_layers, seg.len(), |q, k| {
        match seg.ice_of(q) {
            Some(ice) => visible[k] || seg.ice_of(k) == Some(ice),
            None => true,
        }
    })
}

impl MaskPlan {
    pub fn allows(&self, layer: usize, query: usize, key: usize) -> bool {
        let s = self.seq_len;
        self.allowed[(layer * s + query) * s + key]
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        let n = self.seq_len * self.seq_len;
        &self.allowed[layer * n..(layer + 1) * n]
    }

    /// Layer-wise intersection of two plans of the same kind and shape.
    pub fn compose(&self, other: &MaskPlan) -> Result<MaskPlan> {
        if self.kind != other.kind || self.n_layers != other.n_layers || self.seq_len != other.seq_len {
            return Err(Error::domain("cannot compose mask plans of different kind or shape"));
        }
        Ok(MaskPlan {
            kind: self.kind,
            layer_start: self.layer_start.min(other.layer_start),
            layer_end: self.layer_end.max(other.layer_end),
            n_layers: self.n_layers,
            seq_len: self.seq_len,
            allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_mask(
            vec![self.n_layers as u64, self.seq_len as u64, self.seq_len as u64],
            &self.allowed,
        )
        .expect("mask shape is consistent")
    }

    pub fn meta(&self, seg: &TokenSegmentation, mask_file: &str) -> MaskPlanMeta {
        let always_visible: Vec<usize> = (0..seg.len()).filter(|&i| visible_set(seg)[i]).collect();
        let (groups, predicate) = match self.kind {
            MaskKind::AnchorCentric => (
                Vec::new(),
                "in range: allow (q, k) iff k <= q and k in always_visible".to_owned(),
            ),
            MaskKind::ContextCentric => (
                (0..seg.n_ices())
                    .map(|k| {
                        let r = seg.ice_span(k);
                        [r.start, r.end]
                    })
                    .collect(),
                "in range: allow (q, k) iff k <= q and (q in no group or k in q's group or k in always_visible)"
                    .to_owned(),
            ),
        };
        MaskPlanMeta {
            kind: self.kind,
            layer_start: self.layer_start,
            layer_end: self.layer_end,
            n_layers: self.n_layers,
            seq_len: self.seq_len,
            always_visible,
            groups,
            predicate,
            mask_file: mask_file.to_owned(),
        }
    }

    /// Writes `<stem>.iclt` (u8 masks) and `<stem>.json` into `dir`.
    pub fn save(&self, seg: &TokenSegmentation, dir: &Path, stem: &str) -> Result<()> {
        let mask_file = format!("{stem}.iclt");
        write_tensor_file(&self.to_tensor(), &dir.join(&mask_file))?;
        let meta = serde_json::to_string_pretty(&self.meta(seg, &mask_file)).expect("meta serializes");
        write_atomic(&dir.join(format!("{stem}.json")), meta.as_bytes())
    }
}

/// Token-retention schedule: full sequence below `start_layer`, anchors and
/// query only from there, and optionally the full sequence again from
/// `prediction_layer` on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub start_layer: usize,
    pub prediction_layer: usize,
    pub recover: bool,
    pub n_layers: usize,
    pub full_len: usize,
    pub kept_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_indices: Option<Vec<usize>>,
    pub effective_lengths: Vec<usize>,
}

impl PrunePlan {
    /// Plan from token counts alone. `start_layer == n_layers` means no
    /// pruning; otherwise `start_layer < prediction_layer <= n_layers`.
    pub fn from_lengths(
        full_len: usize,
        kept_len: usize,
        start_layer: usize,
        prediction_layer: usize,
        recover: bool,
        n_layers: usize,
    ) -> Result<Self> {
        if n_layers == 0 || full_len == 0 {
            return Err(Error::domain("prune plan needs positive layer count and length"));
        }
        if kept_len > full_len {
            return Err(Error::domain(format!("kept {kept_len} tokens out of {full_len}")));
        }
        let identity = start_layer == n_layers;
        if !identity && !(start_layer < prediction_layer && prediction_layer <= n_layers) {
            return Err(Error::domain(format!(
                "need start layer < prediction layer <= {n_layers}, got {start_layer} and {prediction_layer}"
            )));
        }
        let effective_lengths = (0..n_layers)
            .map(|l| {
                if identity || l < start_layer || (l >= prediction_layer && recover) {
                    full_len
                } else {
                    kept_len
                }
            })
            .collect();
        Ok(Self {
            start_layer,
            prediction_layer,
            recover,
            n_layers,
            full_len,
            kept_len,
            kept_indices: None,
            effective_lengths,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.effective_lengths.iter().all(|&l| l == self.full_len)
    }

    pub fn total_token_layers(&self) -> u64 {
        self.effective_lengths.iter().map(|&l| l as u64).sum()
    }
}

pub fn prune_plan(
    seg: &TokenSegmentation,
    start_layer: usize,
    recover: bool,
    prediction_layer: usize,
    n_layers: usize,
) -> Result<PrunePlan> {
    let kept = seg.kept_tokens();
    let mut plan = PrunePlan::from_lengths(seg.len(), kept.len(), start_layer, prediction_layer, recover, n_layers)?;
    plan.kept_indices = Some(kept);
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KvEstimate {
    pub bytes: u64,
    pub baseline_bytes: u64,
    /// `1 - bytes / baseline_bytes`.
    pub savings: f64,
}

/// Prompt-only KV-cache size of the decoder self-attention layers.
pub fn kv_estimate(cfg: &ModelCfg, plan: Option<&PrunePlan>, full_len: usize) -> Result<KvEstimate> {
    cfg.validate()?;
    let per = cfg.bytes_per_token_layer();
    let baseline_bytes = per * cfg.n_layers as u64 * full_len as u64;
    let bytes = match plan {
        None => baseline_bytes,
        Some(p) => {
            if p.n_layers != cfg.n_layers || p.full_len != full_len {
                return Err(Error::domain(format!(
                    "plan covers {} layers x {} tokens, model/prompt is {} x {full_len}",
                    p.n_layers, p.full_len, cfg.n_layers
                )));
            }
            per * p.total_token_layers()
        }
    };
    let savings = if baseline_bytes == 0 {
        0.0
    } else {
        1.0 - bytes as f64 / baseline_bytes as f64
    };
    Ok(KvEstimate {
        bytes,
        baseline_bytes,
        savings,
    })
}
