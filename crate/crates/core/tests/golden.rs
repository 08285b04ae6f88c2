mod common;

use common::*;
use fliq_core::io::{decode_dataset, decode_model, encode_dataset, encode_model, ModelArtifact};

/// Compares against the committed file, or rewrites it when `FLIQ_BLESS` is set.
fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden_dir().join(name);
    if std::env::var_os("FLIQ_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let golden = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(golden, bytes, "{name} layout changed");
}

#[test]
fn float_model_layout() {
    let m = fixture_float_model();
    let bytes = encode_model(&ModelArtifact::Float(m.clone()), Some(1)).unwrap();
    check_golden("lite2_float.fliq", &bytes);
    let r = ref_parse_model(&bytes);
    assert_eq!(r.version, 1);
    assert_eq!(r.manifest["config"]["enc_hidden"], serde_json::json!([2]));
    assert_eq!(r.manifest["seed"], 1);
    let names: Vec<(String, &[f64])> = m.named_params().into_iter().map(|(n, t)| (n, t.data())).collect();
    assert_eq!(r.tensors.len(), names.len());
    for (t, (name, data)) in r.tensors.iter().zip(names) {
        assert_eq!(t.name, name);
        assert_eq!(t.dtype, 0);
        assert_eq!(t.scale, 0.0);
        let want: Vec<f64> = data.iter().map(|v| *v as f32 as f64).collect();
        assert_eq!(t.values, want);
    }
    assert!(decode_model(&bytes).is_ok());
}

#[test]
fn quantized_model_layout() {
    let qm = fixture_quant_model();
    let bytes = encode_model(&ModelArtifact::Quantized(qm.clone()), None).unwrap();
    check_golden("lite2_int8.fliq", &bytes);
    let r = ref_parse_model(&bytes);
    assert_eq!(r.manifest["quant"]["bits"], "8");
    for (t, (name, q)) in r.tensors.iter().zip(&qm.tensors) {
        assert_eq!(&t.name, name);
        assert_eq!(t.dtype, 1);
        assert_eq!(t.scale, q.scale);
        let want: Vec<f64> = q.q.iter().map(|v| *v as f64).collect();
        assert_eq!(t.values, want);
    }
    let back = decode_model(&bytes).unwrap();
    assert_eq!(back.artifact, ModelArtifact::Quantized(qm));
}

#[test]
fn dataset_layout() {
    let ds = fixture_dataset();
    let bytes = encode_dataset(&ds).unwrap();
    check_golden("mono2x16.flid", &bytes);
    let r = ref_parse_dataset(&bytes);
    assert_eq!((r.version, r.seed, r.n_gates, r.gate_width), (1, 5, 16, 0.5));
    assert_eq!(r.records.len(), 2);
    for (row, rec) in r.records.iter().zip(&ds.records) {
        assert_eq!(row[..16], rec.tpsf.iter().map(|v| *v as f32).collect::<Vec<_>>()[..]);
        assert_eq!(row[16..32], rec.sfd.iter().map(|v| *v as f32).collect::<Vec<_>>()[..]);
        assert_eq!(row[32..], [0.0, 1.0, 1.0, rec.peak_counts as f32]);
    }
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(encode_dataset(&back).unwrap(), bytes);
}
