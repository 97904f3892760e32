#![allow(dead_code)]

use std::path::{Path, PathBuf};

use icl_lens::interchange::{AttentionRecord, Variant};
use icl_lens::segmentation::{Role, TokenLabel, TokenSegmentation};
use icl_lens::synth::{gen_attention, SynthSpec};
use proptest::prelude::*;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn segmentation(roles: &[(Role, Option<usize>)]) -> TokenSegmentation {
    TokenSegmentation::new(
        roles
            .iter()
            .enumerate()
            .map(|(index, &(role, ice_index))| TokenLabel { index, role, ice_index })
            .collect(),
    )
    .unwrap()
}

/// Valid segmentations of at most `max_tokens` tokens: optional BOS, up to
/// three examples of 1-3 tokens with mixed roles, optional filler, then the
/// two query tokens.
pub fn arb_seg(max_tokens: usize) -> impl Strategy<Value = TokenSegmentation> {
    (
        prop::collection::vec(prop::collection::vec(0u8..6, 1..=3), 0..=3),
        any::<bool>(),
        0u8..3,
    )
        .prop_filter_map("too many tokens", move |(ices, bos, filler)| {
            let mut roles = Vec::new();
            if bos {
                roles.push((Role::Bos, None));
            }
            for (k, ice) in ices.iter().enumerate() {
                for &code in ice {
                    let role = match code {
                        0..=2 => Role::ContextText,
                        3 => Role::Period,
                        4 => Role::Delim,
                        _ => Role::ImageMark,
                    };
                    roles.push((role, Some(k)));
                }
            }
            match filler {
                1 => roles.push((Role::ImageMark, None)),
                2 => roles.push((Role::Other, None)),
                _ => {}
            }
            roles.push((Role::Query, None));
            roles.push((Role::Query, None));
            (roles.len() <= max_tokens).then(|| segmentation(&roles))
        })
}

/// Synthetic spec over an arbitrary small segmentation with random
/// strengths, noise and seed.
pub fn arb_spec(max_tokens: usize, max_layers: usize, max_heads: usize) -> impl Strategy<Value = SynthSpec> {
    (
        arb_seg(max_tokens),
        1..=max_layers,
        1..=max_heads,
        0.0f64..8.0,
        0.0f64..8.0,
        0.0f64..5.0,
        0.0f64..4.0,
        any::<u64>(),
    )
        .prop_map(|(seg, l, h, alpha, omega, noise, q, seed)| {
            let mut spec = SynthSpec::new(seg, l, h);
            spec.anchor_strength = alpha.into();
            spec.window_strength = omega.into();
            spec.noise = noise;
            spec.query_strength = q;
            spec.seed = seed;
            spec
        })
}

pub fn both_variants(spec: &SynthSpec) -> (AttentionRecord, AttentionRecord) {
    let mut without_spec = spec.clone();
    without_spec.seed = spec.seed.wrapping_add(1);
    (
        gen_attention(spec, Variant::WithQueryImage).unwrap(),
        gen_attention(&without_spec, Variant::WithoutQueryImage).unwrap(),
    )
}

/// Equal within `tol`, with matching infinities counted as equal.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        a == b
    } else {
        (a - b).abs() <= tol
    }
}
