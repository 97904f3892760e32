//! Per-token role labels and in-context-example membership.
//!
//! A segmentation partitions the prompt into anchors (`BOS`, image markers,
//! the terminal period of every example, delimiters), context (caption text
//! of the examples) and the query (the final two generation-cue tokens).

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Bos,
    ImageMark,
    ContextText,
    Period,
    Delim,
    Query,
    /// Untyped filler, e.g. extra cue tokens before the two query tokens.
    Other,
}

impl Role {
    pub fn is_anchor(self) -> bool {
        matches!(self, Role::Bos | Role::ImageMark | Role::Period | Role::Delim)
    }
}

/// One record of the segmentation file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub index: usize,
    pub role: Role,
    pub ice_index: Option<usize>,
}

/// Validated segmentation with the derived token sets precomputed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSegmentation {
    labels: Vec<TokenLabel>,
    anchors: Vec<usize>,
    context: Vec<usize>,
    query: Vec<usize>,
    /// Token range of each example, anchors included.
    ice_spans: Vec<Range<usize>>,
    /// Context (non-anchor) tokens of each example.
    ice_context: Vec<Vec<usize>>,
}

impl TokenSegmentation {
    pub fn new(labels: Vec<TokenLabel>) -> Result<Self> {
        let bad = |msg: String| Error::data(format!("invalid segmentation: {msg}"));
        let n = labels.len();
        if n < 2 {
            return Err(bad(format!("{n} tokens; need at least the two query tokens")));
        }

        let mut anchors = Vec::new();
        let mut context = Vec::new();
        let mut query = Vec::new();
        let mut ice_spans: Vec<Range<usize>> = Vec::new();
        let mut ice_context: Vec<Vec<usize>> = Vec::new();

        for (pos, label) in labels.iter().enumerate() {
            if label.index != pos {
                return Err(bad(format!("record {pos} carries index {}", label.index)));
            }
            match (label.role, label.ice_index) {
                (Role::Bos | Role::Query, Some(k)) => {
                    return Err(bad(format!("token {pos} ({:?}) cannot belong to example {k}", label.role)))
                }
                (Role::ContextText | Role::Period | Role::Delim, None) => {
                    return Err(bad(format!("token {pos} ({:?}) must belong to an example", label.role)))
                }
                _ => {}
            }

            if let Some(k) = label.ice_index {
                match ice_spans.len() {
                    len if k == len => {
                        ice_spans.push(pos..pos + 1);
                        ice_context.push(Vec::new());
                    }
                    len if k + 1 == len => {
                        let span = ice_spans.last_mut().expect("non-empty");
                        if span.end != pos {
                            return Err(bad(format!("example {k} is not contiguous at token {pos}")));
                        }
                        span.end = pos + 1;
                    }
                    len => {
                        return Err(bad(format!(
                            "token {pos} has example index {k}; expected {} or {len}",
                            len.saturating_sub(1)
                        )))
                    }
                }
            }

            if label.role.is_anchor() {
                anchors.push(pos);
            } else if label.role == Role::ContextText {
                context.push(pos);
                ice_context
                    .last_mut()
                    .expect("context tokens carry an example index")
                    .push(pos);
            } else if label.role == Role::Query {
                query.push(pos);
            }
        }

        if query != [n - 2, n - 1] {
            return Err(bad(format!(
                "query tokens must be exactly the last two indices [{}, {}], found {query:?}",
                n - 2,
                n - 1
            )));
        }

        Ok(Self {
            labels,
            anchors,
            context,
            query,
            ice_spans,
            ice_context,
        })
    }

    /// Canonical layout: `BOS`, then per example `<image>`, `m` caption
    /// tokens, period, delimiter, then the query `<image>` and two cue tokens.
    pub fn from_context_lengths(context_lengths: &[usize]) -> Self {
        let mut labels = Vec::new();
        let mut push = |role, ice_index| {
            let index = labels.len();
            labels.push(TokenLabel { index, role, ice_index });
        };
        push(Role::Bos, None);
        for (k, &m) in context_lengths.iter().enumerate() {
            push(Role::ImageMark, Some(k));
            for _ in 0..m {
                push(Role::ContextText, Some(k));
            }
            push(Role::Period, Some(k));
            push(Role::Delim, Some(k));
        }
        push(Role::ImageMark, None);
        push(Role::Query, None);
        push(Role::Query, None);
        Self::new(labels).expect("canonical layout is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: Vec<TokenLabel> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(labels).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.labels).expect("labels serialize")
    }

    pub fn labels(&self) -> &[TokenLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn role(&self, index: usize) -> Role {
        self.labels[index].role
    }

    pub fn ice_of(&self, index: usize) -> Option<usize> {
        self.labels[index].ice_index
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn context(&self) -> &[usize] {
        &self.context
    }

    pub fn query(&self) -> &[usize] {
        &self.query
    }

    pub fn n_ices(&self) -> usize {
        self.ice_spans.len()
    }

    pub fn ice_span(&self, k: usize) -> Range<usize> {
        self.ice_spans[k].clone()
    }

    /// Context tokens of example `k` (anchors excluded).
    pub fn ice_context(&self, k: usize) -> &[usize] {
        &self.ice_context[k]
    }

    /// Sorted union of anchors and query tokens: what survives pruning.
    pub fn kept_tokens(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.anchors.iter().chain(&self.query).copied().collect();
        set.into_iter().collect()
    }
}
