//! Synthetic attention with tunable anchor and window structure.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{AttentionRecord, Tensor, Variant};
use crate::retrieval::seeded_rng;
use crate::segmentation::TokenSegmentation;

/// A strength that is either shared by all layers or given per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Strength {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl Default for Strength {
    fn default() -> Self {
        Strength::Uniform(0.0)
    }
}

impl From<f64> for Strength {
    fn from(v: f64) -> Self {
        Strength::Uniform(v)
    }
}

impl Strength {
    pub fn at(&self, layer: usize) -> f64 {
        match self {
            Strength::Uniform(v) => *v,
            Strength::PerLayer(v) => v[layer],
        }
    }

    fn check(&self, name: &str, n_layers: usize) -> Result<()> {
        let values: &[f64] = match self {
            Strength::Uniform(v) => std::slice::from_ref(v),
            Strength::PerLayer(v) => {
                if v.len() != n_layers {
                    return Err(Error::domain(format!(
                        "{name} lists {} layers, spec has {n_layers}",
                        v.len()
                    )));
                }
                v
            }
        };
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain(format!("{name} must be finite and >= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seg: TokenSegmentation,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Extra weight on anchor keys (α).
    pub anchor_strength: Strength,
    /// Extra weight on keys in the row's own example (ω).
    pub window_strength: Strength,
    /// Scale of U[0, 1) noise added to every visible key (ε).
    pub noise: f64,
    /// Extra weight on query-to-query pairs, applied only to the
    /// with-query-image variant.
    pub query_strength: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(seg: TokenSegmentation, n_layers: usize, n_heads: usize) -> Self {
        Self {
            seg,
            n_layers,
            n_heads,
            anchor_strength: Strength::default(),
            window_strength: Strength::default(),
            noise: 0.0,
            query_strength: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::domain("synth spec needs at least one layer and one head"));
        }
        self.anchor_strength.check("anchor_strength", self.n_layers)?;
        self.window_strength.check("window_strength", self.n_layers)?;
        for (name, v) in [("noise", self.noise), ("query_strength", self.query_strength)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Builds a causal, row-normalized record of shape
/// `[n_layers, n_heads, S, S]`.
///
/// Unnormalized weight of visible key `i` in row `j`:
/// `1 + α[i is anchor] + ω[i, j in the same example] + ε·u`, plus the query
/// strength when both are query tokens and `variant` is with-image. Noise
/// draws `u` come from [`seeded_rng`] in (layer, head, row, key) order, so
/// both variants of one spec share them.
pub fn gen_attention(spec: &SynthSpec, variant: Variant) -> Result<AttentionRecord> {
    spec.validate()?;
    let seg = &spec.seg;
    let s = seg.len();
    let is_anchor: Vec<bool> = (0..s).map(|i| seg.role(i).is_anchor()).collect();
    let is_query: Vec<bool> = (0..s).map(|i| seg.query().contains(&i)).collect();
    let boost_query = variant == Variant::WithQueryImage;

    let mut rng = seeded_rng(spec.seed);
    let mut data = vec![0.0f32; spec.n_layers * spec.n_heads * s * s];
    let mut row = vec![0.0f64; s];
    for l in 0..spec.n_layers {
        let alpha = spec.anchor_strength.at(l);
        let omega = spec.window_strength.at(l);
        for h in 0..spec.n_heads {
            for j in 0..s {
                let own = seg.ice_of(j);
                for (i, w) in row.iter_mut().enumerate().take(j + 1) {
                    let u: f64 = rng.gen();
                    let mut v = 1.0 + spec.noise * u;
                    if is_anchor[i] {
                        v += alpha;
                    }
                    if own.is_some() && seg.ice_of(i) == own {
                        v += omega;
                    }
                    if boost_query && is_query[i] && is_query[j] {
                        v += spec.query_strength;
                    }
                    *w = v;
                }
                let z: f64 = row[..=j].iter().sum();
                let base = ((l * spec.n_heads + h) * s + j) * s;
                for i in 0..=j {
                    data[base + i] = (row[i] / z) as f32;
                }
            }
        }
    }
    let tensor = Tensor::from_f32(
        vec![spec.n_layers as u64, spec.n_heads as u64, s as u64, s as u64],
        data,
    )?;
    AttentionRecord::new(format!("synth-{}", spec.seed), variant, tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_metrics::{acar, iear, vcar};

    fn spec() -> SynthSpec {
        SynthSpec::new(TokenSegmentation::from_context_lengths(&[3, 2, 4]), 2, 2)
    }

    #[test]
    fn flat_case_is_uniform() {
        let rec = gen_attention(&spec(), Variant::WithQueryImage).unwrap();
        for q in 0..rec.seq_len() {
            for k in 0..=q {
                assert_eq!(rec.weight(0, 1, q, k), 1.0 / (q + 1) as f32);
            }
        }
    }

    #[test]
    fn closed_forms() {
        let mut sp = spec();
        sp.anchor_strength = 3.0.into();
        sp.window_strength = 1.5.into();
        let rec = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        let seg = &sp.seg;
        assert!((acar(&rec, seg, 0).unwrap() - 4.0).abs() < 1e-9);
        assert!((iear(&rec, seg, 1).unwrap() - 2.5).abs() < 1e-6);
    }

    #[test]
    fn per_layer_strength() {
        let mut sp = spec();
        sp.anchor_strength = Strength::PerLayer(vec![0.0, 2.0]);
        let rec = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        assert!((acar(&rec, &sp.seg, 0).unwrap() - 1.0).abs() < 1e-9);
        // 3/Z and 1/Z round independently to f32
        assert!((acar(&rec, &sp.seg, 1).unwrap() - 3.0).abs() < 1e-6);
        sp.anchor_strength = Strength::PerLayer(vec![1.0]);
        assert!(gen_attention(&sp, Variant::WithQueryImage).is_err());
    }

    #[test]
    fn seeds_and_validity() {
        let mut sp = spec();
        sp.noise = 0.7;
        sp.seed = 1;
        let a = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        let again = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        sp.seed = 2;
        let b = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        assert_eq!(a, again);
        assert_ne!(a.to_tensor().data(), b.to_tensor().data());
        for rec in [&a, &b] {
            for q in 0..rec.seq_len() {
                let sum: f64 = rec.row(0, 0, q).iter().map(|&w| w as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn query_strength_moves_vcar() {
        let mut sp = spec();
        sp.query_strength = 2.0;
        let with = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        let without = gen_attention(&sp, Variant::WithoutQueryImage).unwrap();
        assert!(vcar(&with, &without, &sp.seg, 0).unwrap() > 0.0);
        sp.query_strength = 0.0;
        let with0 = gen_attention(&sp, Variant::WithQueryImage).unwrap();
        let same = with0.to_tensor();
        let without0 = AttentionRecord::new("x", Variant::WithoutQueryImage, same).unwrap();
        assert_eq!(vcar(&with0, &without0, &sp.seg, 0).unwrap(), 0.0);
    }

    #[test]
    fn negative_strength_rejected() {
        let mut sp = spec();
        sp.noise = -1.0;
        assert!(gen_attention(&sp, Variant::WithQueryImage).is_err());
    }
}
