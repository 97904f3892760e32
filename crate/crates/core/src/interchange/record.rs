use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

/// Row sums must land within this distance of 1. Wide enough for
/// half-precision softmax exports.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WithQueryImage,
    WithoutQueryImage,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::WithQueryImage => "with_query_image",
            Variant::WithoutQueryImage => "without_query_image",
        })
    }
}

/// Post-softmax attention of one sample, shape `[layers][heads][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    sample_id: String,
    variant: Variant,
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    dtype: DType,
    weights: Vec<f32>,
}

impl AttentionRecord {
    /// Wraps a rank-4 tensor after checking causality and row-stochasticity.
    pub fn new(sample_id: impl Into<String>, variant: Variant, tensor: Tensor) -> Result<Self> {
        let sample_id = sample_id.into();
        let inconsistent = |message: String| Error::Consistency {
            sample_id: sample_id.clone(),
            message,
        };
        let shape = tensor.shape().to_vec();
        if shape.len() != 4 {
            return Err(inconsistent(format!(
                "{variant} attention must have rank 4 [layers, heads, seq, seq], got shape {shape:?}"
            )));
        }
        if shape[2] != shape[3] {
            return Err(inconsistent(format!("{variant} attention is not square: {shape:?}")));
        }
        let dtype = tensor.dtype();
        if dtype == DType::U8 {
            return Err(inconsistent(format!("{variant} attention stored as u8")));
        }
        let [n_layers, n_heads, seq_len, _] = [shape[0], shape[1], shape[2], shape[3]].map(|e| e as usize);
        let weights = tensor.into_data();

        for l in 0..n_layers {
            for h in 0..n_heads {
                let base = (l * n_heads + h) * seq_len * seq_len;
                for q in 0..seq_len {
                    let row = &weights[base + q * seq_len..base + (q + 1) * seq_len];
                    if let Some(k) = (q + 1..seq_len).find(|&k| row[k] != 0.0) {
                        return Err(inconsistent(format!(
                            "{variant} layer {l} head {h}: query {q} attends to future key {k} ({})",
                            row[k]
                        )));
                    }
                    if let Some(v) = row[..=q].iter().find(|v| !v.is_finite() || **v < 0.0) {
                        return Err(inconsistent(format!(
                            "{variant} layer {l} head {h} row {q}: invalid weight {v}"
                        )));
                    }
                    let sum: f64 = row[..=q].iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(inconsistent(format!(
                            "{variant} layer {l} head {h} row {q} sums to {sum}"
                        )));
                    }
                }
            }
        }

        Ok(Self {
            sample_id,
            variant,
            n_layers,
            n_heads,
            seq_len,
            dtype,
            weights,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Stored weight of `query` attending to `key`.
    #[inline]
    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        let s = self.seq_len;
        self.weights[((layer * self.n_heads + head) * s + query) * s + key]
    }

    /// Row of one head: weights of `query` over every key.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let s = self.seq_len;
        let start = ((layer * self.n_heads + head) * s + query) * s;
        &self.weights[start..start + s]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.dtype,
            vec![self.n_layers as u64, self.n_heads as u64, self.seq_len as u64, self.seq_len as u64],
            self.weights.clone(),
        )
        .expect("record shape is consistent")
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }
}
