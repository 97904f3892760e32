use std::path::{Path, PathBuf};

use icl_lens::attention_metrics::{acar, attention_flow};
use icl_lens::interchange::{load_run, read_tensor, read_tensor_file, write_tensor, DType, Tensor, Variant};
use icl_lens::Error;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn six_token_fixture_loads() {
    let bundle = load_run(&fixtures().join("run6")).unwrap();
    assert_eq!(bundle.samples.len(), 1);
    assert!(bundle.warnings.is_empty());
    let s = &bundle.samples[0];
    let rec = s.record(Variant::WithQueryImage).unwrap();
    assert_eq!(rec.to_tensor().shape(), &[2, 1, 6, 6]);
    assert_eq!(s.segmentation.anchors(), &[0, 2, 3]);
    assert_eq!(s.segmentation.query(), &[4, 5]);
    let gen = bundle.model.generation.as_ref().unwrap();
    assert_eq!((gen.temperature, gen.shot_count), (0.2, 1));

    // anchors {0,2,3}, context {1}, queries {4,5}
    // layer 0: anchor mean (0.8 + 0.7) / 6 = 0.25, context 0.1
    // layer 1: anchor mean (0.85 + 0.75) / 6, context 0.05
    assert!((acar(rec, &s.segmentation, 0).unwrap() - 2.5).abs() < 1e-6);
    assert!((acar(rec, &s.segmentation, 1).unwrap() - 16.0 / 3.0).abs() < 1e-5);
    assert!((attention_flow(rec, 0, 0, 4).unwrap() - 0.4).abs() < 1e-7);
}

#[test]
fn manifest_path_or_directory() {
    let a = load_run(&fixtures().join("run6")).unwrap();
    let b = load_run(&fixtures().join("run6/manifest.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_run() {
    let bundle = load_run(&fixtures().join("run6/manifest_empty.json")).unwrap();
    assert!(bundle.samples.is_empty());
}

#[test]
fn seq_len_mismatch_names_sample() {
    match load_run(&fixtures().join("run6/manifest_mismatch.json")) {
        Err(Error::Consistency { sample_id, .. }) => assert_eq!(sample_id, "bad"),
        other => panic!("expected consistency error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_named() {
    let err = load_run(&fixtures().join("run6/manifest_missing.json")).unwrap_err();
    assert!(err.to_string().contains("absent.iclt"), "{err}");
}

#[test]
fn half_precision_fixture_matches_f32() {
    let full = read_tensor_file(&fixtures().join("run6/attn.iclt")).unwrap();
    let half = read_tensor_file(&fixtures().join("run6/attn_f16.iclt")).unwrap();
    assert_eq!(half.dtype(), DType::F16);
    for (a, b) in full.data().iter().zip(half.data()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn independent_writer_bytes_round_trip() {
    // The fixture was packed by a separate script; re-encoding must
    // reproduce it byte for byte.
    let path = fixtures().join("run6/attn.iclt");
    let bytes = std::fs::read(&path).unwrap();
    let t = read_tensor(&bytes[..]).unwrap();
    let mut again = Vec::new();
    write_tensor(&t, &mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn scalar_header_layout() {
    let t = Tensor::from_f32(vec![], vec![0.0]).unwrap();
    let mut bytes = Vec::new();
    write_tensor(&t, &mut bytes).unwrap();
    assert_eq!(bytes, b"ICLT\x01\x01\x00\x00\x00\x00\x00\x00");
}

fn copy_run(dir: &Path) {
    for entry in std::fs::read_dir(fixtures().join("run6")).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dir.join(entry.file_name())).unwrap();
    }
}

/// Every corruption must fail the whole load.
#[test]
fn corrupt_fixture_suite() {
    let good = std::fs::read(fixtures().join("run6/attn.iclt")).unwrap();
    let mut cases: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut m = good.clone();
    m[..4].copy_from_slice(b"XXXX");
    cases.push(("magic", m));
    let mut m = good.clone();
    m[4] = 2;
    cases.push(("version", m));
    let mut m = good.clone();
    m[5] = 7;
    cases.push(("dtype", m));
    let mut m = good.clone();
    m[7] = 1;
    cases.push(("padding", m));
    cases.push(("truncated payload", good[..good.len() - 3].to_vec()));
    cases.push(("truncated extents", good[..12].to_vec()));
    cases.push(("trailing", [good.clone(), vec![0]].concat()));
    let mut m = good.clone();
    m[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    cases.push(("extent overflow", m));
    let mut m = good.clone();
    m[6] = 3;
    cases.push(("rank", m));
    // A future-key weight breaks causality.
    let mut m = good.clone();
    let off = 8 + 4 * 8 + 4;
    m[off..off + 4].copy_from_slice(&0.5f32.to_le_bytes());
    cases.push(("non-causal", m));
    // Row 0 no longer sums to one.
    let mut m = good.clone();
    m[40..44].copy_from_slice(&0.5f32.to_le_bytes());
    cases.push(("row sum", m));
    let mut m = good.clone();
    m[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
    cases.push(("nan", m));

    for (name, bytes) in cases {
        let dir = tempfile::tempdir().unwrap();
        copy_run(dir.path());
        std::fs::write(dir.path().join("attn.iclt"), &bytes).unwrap();
        assert!(load_run(dir.path()).is_err(), "corruption `{name}` was accepted");
    }

    let manifest_cases = [
        ("version", r#"{"version": 2, "model": {"n_layers": 2, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2}}"#),
        ("zero dims", r#"{"version": 1, "model": {"n_layers": 0, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2}}"#),
        ("layer count", r#"{"version": 1, "model": {"n_layers": 3, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2},
            "samples": [{"sample_id": "s0", "segmentation": "seg.json", "attention": {"with_query_image": "attn.iclt"}}]}"#),
        ("duplicate id", r#"{"version": 1, "model": {"n_layers": 2, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2},
            "samples": [{"sample_id": "s0", "segmentation": "seg.json", "attention": {"with_query_image": "attn.iclt"}},
                        {"sample_id": "s0", "segmentation": "seg.json", "attention": {"with_query_image": "attn.iclt"}}]}"#),
        ("no variants", r#"{"version": 1, "model": {"n_layers": 2, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2},
            "samples": [{"sample_id": "s0", "segmentation": "seg.json", "attention": {}}]}"#),
        ("bad variant", r#"{"version": 1, "model": {"n_layers": 2, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2},
            "samples": [{"sample_id": "s0", "segmentation": "seg.json", "attention": {"sideways": "attn.iclt"}}]}"#),
        ("bad captions", r#"{"version": 1, "model": {"n_layers": 2, "n_heads": 1, "head_dim": 4, "kv_bytes_per_element": 2},
            "samples": [], "files": {"captions": "seg.json"}}"#),
        ("not json", "{"),
    ];
    for (name, text) in manifest_cases {
        let dir = tempfile::tempdir().unwrap();
        copy_run(dir.path());
        std::fs::write(dir.path().join("manifest.json"), text).unwrap();
        assert!(load_run(dir.path()).is_err(), "manifest corruption `{name}` was accepted");
    }

    let seg_cases = [
        ("query not last", r#"[{"index":0,"role":"QUERY","ice_index":null},{"index":1,"role":"BOS","ice_index":null},
            {"index":2,"role":"BOS","ice_index":null},{"index":3,"role":"BOS","ice_index":null},
            {"index":4,"role":"QUERY","ice_index":null},{"index":5,"role":"QUERY","ice_index":null}]"#),
        ("unknown role", r#"[{"index":0,"role":"NOUN","ice_index":null}]"#),
        ("context outside ICE", r#"[{"index":0,"role":"BOS","ice_index":null},{"index":1,"role":"CONTEXT_TEXT","ice_index":null},
            {"index":2,"role":"PERIOD","ice_index":0},{"index":3,"role":"IMAGE_MARK","ice_index":null},
            {"index":4,"role":"QUERY","ice_index":null},{"index":5,"role":"QUERY","ice_index":null}]"#),
    ];
    for (name, text) in seg_cases {
        let dir = tempfile::tempdir().unwrap();
        copy_run(dir.path());
        std::fs::write(dir.path().join("seg.json"), text).unwrap();
        assert!(load_run(dir.path()).is_err(), "segmentation corruption `{name}` was accepted");
    }
}

#[test]
fn load_is_deterministic() {
    let a = load_run(&fixtures().join("run6")).unwrap();
    let b = load_run(&fixtures().join("run6")).unwrap();
    assert_eq!(a, b);
}
