//! Fixtures and a byte-level reference reader for the on-disk formats,
//! written against the documented layout rather than the library decoder.

#![allow(dead_code)]

use std::path::PathBuf;

use fliq_core::datagen::{mono_dataset, DatasetSpec, FliDataset, TimeGrid};
use fliq_core::quant::{Bits, QuantizedModel, ScaleMode};
use fliq_core::{ModelConfig, SeqModel};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn fixture_float_model() -> SeqModel {
    SeqModel::init(ModelConfig::lite(2, 8), 1).unwrap()
}

pub fn fixture_quant_model() -> QuantizedModel {
    QuantizedModel::quantize_weights(&fixture_float_model(), Bits::Eight, ScaleMode::SignedSymmetric).unwrap()
}

pub fn fixture_dataset() -> FliDataset {
    let spec = DatasetSpec::new(TimeGrid::new(16, 8.0).unwrap(), 5);
    mono_dataset(2, 1.0, &spec).unwrap()
}

struct Bytes<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Bytes<'a> {
    fn get(&mut self, n: usize) -> &'a [u8] {
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.get(1)[0]
    }
    fn u16(&mut self) -> u16 {
        let s = self.get(2);
        s[0] as u16 | (s[1] as u16) << 8
    }
    fn u32(&mut self) -> u32 {
        let s = self.get(4);
        (0..4).map(|i| (s[i] as u32) << (8 * i)).sum()
    }
    fn u64(&mut self) -> u64 {
        let s = self.get(8);
        (0..8).map(|i| (s[i] as u64) << (8 * i)).sum()
    }
    fn f32(&mut self) -> f32 {
        f32::from_bits(self.u32())
    }
}

#[derive(Debug)]
pub struct RefTensor {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<u32>,
    pub scale: f32,
    /// Payload widened to f64 (floats) or integer values.
    pub values: Vec<f64>,
}

#[derive(Debug)]
pub struct RefModel {
    pub version: u16,
    pub manifest: serde_json::Value,
    pub tensors: Vec<RefTensor>,
}

pub fn ref_parse_model(b: &[u8]) -> RefModel {
    assert_eq!(&b[..5], b"FLIQ1");
    let mut r = Bytes { b, at: 5 };
    let version = r.u16();
    let mlen = r.u32() as usize;
    let manifest: serde_json::Value = serde_json::from_slice(r.get(mlen)).unwrap();
    let count = r.u32();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = r.u16() as usize;
        let name = String::from_utf8(r.get(nlen).to_vec()).unwrap();
        let dtype = r.u8();
        let rank = r.u8();
        let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect();
        let scale = r.f32();
        let n: u32 = dims.iter().product();
        let values = (0..n)
            .map(|_| match dtype {
                0 => r.f32() as f64,
                1 => r.u8() as i8 as f64,
                2 => r.u16() as i16 as f64,
                d => panic!("dtype {d}"),
            })
            .collect();
        tensors.push(RefTensor { name, dtype, dims, scale, values });
    }
    assert_eq!(r.at, b.len(), "trailing bytes");
    RefModel { version, manifest, tensors }
}

#[derive(Debug)]
pub struct RefDataset {
    pub version: u16,
    pub seed: u64,
    pub n_gates: u32,
    pub gate_width: f32,
    /// tpsf, sfd, then a_r, tau1, tau2, peak_counts
    pub records: Vec<Vec<f32>>,
}

pub fn ref_parse_dataset(b: &[u8]) -> RefDataset {
    assert_eq!(&b[..5], b"FLID1");
    let mut r = Bytes { b, at: 5 };
    let version = r.u16();
    let seed = r.u64();
    let n = r.u32();
    let n_gates = r.u32();
    let gate_width = r.f32();
    let records = (0..n).map(|_| (0..2 * n_gates + 4).map(|_| r.f32()).collect()).collect();
    assert_eq!(r.at, b.len(), "trailing bytes");
    RefDataset { version, seed, n_gates, gate_width, records }
}
