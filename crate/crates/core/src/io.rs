//! Binary model and dataset containers. Also FPGA export and CSV helpers.
//!
//! All multi-byte values are little-endian.
//!
//! Model file: `"FLIQ1"`, version `u16`, manifest length `u32`, JSON
//! manifest, tensor count `u32`, then per tensor: name length `u16`, name,
//! dtype `u8` (f32 = 0, i8 = 1, i16 = 2), rank `u8`, dims `u32 × rank`,
//! scale `f32` (0 for float tensors), payload.
//!
//! Dataset file: `"FLID1"`, version `u16`, seed `u64`, record count `u32`,
//! gate count `u32`, gate width `f32`, then per record `tpsf f32[n]`,
//! `sfd f32[n]`, `a_r`, `tau1`, `tau2`, `peak_counts` as `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DecayParams, DecayRecord, FliDataset, TimeGrid, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeqModel};
use crate::quant::{Bits, CalibrationStats, Lut, LutKind, QuantizedModel, QuantizedTensor, ScaleMode, LUT_ENTRIES, LUT_RANGE};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"FLIQ1";
pub const MODEL_VERSION: u16 = 1;
pub const DATASET_MAGIC: &[u8; 5] = b"FLID1";
pub const DATASET_VERSION: u16 = 1;
pub const FPGA_VERSION: u16 = 1;
pub const FPGA_MANIFEST: &str = "manifest.json";

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;
const DTYPE_I16: u8 = 2;

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &dyn Fn() -> String) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 5]) -> Result<()> {
    let head = &bytes[..bytes.len().min(magic.len())];
    if head != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(head).into_owned(),
        });
    }
    Ok(())
}

fn ctx(s: &'static str) -> impl Fn() -> String {
    move || s.to_string()
}

/// A persisted model: float weights or a quantized model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelArtifact {
    Float(SeqModel),
    Quantized(QuantizedModel),
}

impl ModelArtifact {
    pub fn config(&self) -> &ModelConfig {
        match self {
            ModelArtifact::Float(m) => &m.config,
            ModelArtifact::Quantized(q) => &q.config,
        }
    }

    pub fn as_float(&self) -> Result<SeqModel> {
        match self {
            ModelArtifact::Float(m) => Ok(m.clone()),
            ModelArtifact::Quantized(q) => q.dequantize(),
        }
    }

    pub fn as_quantized(&self) -> Result<&QuantizedModel> {
        match self {
            ModelArtifact::Quantized(q) => Ok(q),
            ModelArtifact::Float(_) => Err(Error::NotQuantized),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub bits: Bits,
    pub act_bits: Bits,
    pub mode: ScaleMode,
    pub calibration: Option<CalibrationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub generator: String,
    /// Seed of the run that produced the weights, when known.
    pub seed: Option<u64>,
    pub config: ModelConfig,
    pub quant: Option<QuantManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub manifest: ModelManifest,
    pub artifact: ModelArtifact,
}

fn generator() -> String {
    concat!("fliq/", env!("CARGO_PKG_VERSION")).to_string()
}

fn push_tensor_header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize], scale: f32) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Input(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&scale.to_le_bytes());
    Ok(())
}

fn push_int_payload(out: &mut Vec<u8>, q: &[i32], bits: Bits) {
    for &v in q {
        match bits {
            Bits::Eight => out.push(v as i8 as u8),
            Bits::Sixteen => out.extend_from_slice(&(v as i16).to_le_bytes()),
        }
    }
}

fn dtype_for(bits: Bits) -> u8 {
    match bits {
        Bits::Eight => DTYPE_I8,
        Bits::Sixteen => DTYPE_I16,
    }
}

pub fn encode_model(artifact: &ModelArtifact, seed: Option<u64>) -> Result<Vec<u8>> {
    let manifest = ModelManifest {
        generator: generator(),
        seed,
        config: artifact.config().clone(),
        quant: match artifact {
            ModelArtifact::Float(_) => None,
            ModelArtifact::Quantized(q) => Some(QuantManifest {
                bits: q.bits,
                act_bits: q.act_bits,
                mode: q.mode,
                calibration: q.calibration.clone(),
            }),
        },
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    match artifact {
        ModelArtifact::Float(m) => {
            m.validate()?;
            let named = m.named_params();
            out.extend_from_slice(&(named.len() as u32).to_le_bytes());
            for (name, t) in named {
                push_tensor_header(&mut out, &name, DTYPE_F32, t.shape(), 0.0)?;
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        ModelArtifact::Quantized(q) => {
            out.extend_from_slice(&(q.tensors.len() as u32).to_le_bytes());
            for (name, t) in &q.tensors {
                push_tensor_header(&mut out, name, dtype_for(t.bits), &t.shape, t.scale)?;
                push_int_payload(&mut out, &t.q, t.bits);
            }
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<LoadedModel> {
    check_magic(bytes, MODEL_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(MODEL_MAGIC.len(), &ctx("magic"))?;
    let version = r.u16(&ctx("version"))?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let len = r.u32(&ctx("manifest length"))? as usize;
    let json = r.take(len, &ctx("manifest"))?;
    let manifest: ModelManifest =
        serde_json::from_slice(json).map_err(|e| Error::Manifest(format!("unreadable manifest: {e}")))?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let skeleton = SeqModel::zeros(manifest.config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = skeleton
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32(&ctx("tensor count"))? as usize;
    if count != expected.len() {
        return Err(Error::Manifest(format!(
            "manifest architecture has {} tensors, table lists {count}",
            expected.len()
        )));
    }
    let want_dtype = manifest.quant.as_ref().map_or(DTYPE_F32, |q| dtype_for(q.bits));
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    for (i, (exp_name, exp_dims)) in expected.iter().enumerate() {
        let entry = move || format!("tensor table entry {i}");
        let name_len = r.u16(&entry)? as usize;
        let name = String::from_utf8(r.take(name_len, &entry)?.to_vec())
            .map_err(|_| Error::Format(format!("tensor name of entry {i} is not UTF-8")))?;
        let at_name = || format!("tensor {name}");
        let dtype = r.u8(&at_name)?;
        let rank = r.u8(&at_name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&at_name)? as usize);
        }
        let scale = r.f32(&at_name)?;
        if &name != exp_name || &dims != exp_dims {
            return Err(Error::Manifest(format!(
                "tensor {name} {dims:?} does not match manifest slot {exp_name} {exp_dims:?}"
            )));
        }
        if dtype != want_dtype {
            return Err(Error::Manifest(format!("tensor {name} has dtype {dtype}, manifest implies {want_dtype}")));
        }
        let n: usize = dims.iter().product();
        match dtype {
            DTYPE_F32 => {
                let payload = r.take(n * 4, &at_name)?;
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                floats.push(Tensor::new(dims, data)?);
            }
            DTYPE_I8 => {
                let payload = r.take(n, &at_name)?;
                let q = payload.iter().map(|&b| b as i8 as i32).collect();
                ints.push((name.clone(), QuantizedTensor::new(dims, q, scale, Bits::Eight)?));
            }
            DTYPE_I16 => {
                let payload = r.take(n * 2, &at_name)?;
                let q = payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as i32)
                    .collect();
                ints.push((name.clone(), QuantizedTensor::new(dims, q, scale, Bits::Sixteen)?));
            }
            other => return Err(Error::Format(format!("unknown dtype code {other} for tensor {name}"))),
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after tensor table", r.remaining())));
    }
    let artifact = match &manifest.quant {
        None => {
            let mut m = skeleton;
            for (slot, t) in m.params_mut().into_iter().zip(floats) {
                *slot = t;
            }
            ModelArtifact::Float(m)
        }
        Some(q) => ModelArtifact::Quantized(QuantizedModel {
            config: manifest.config.clone(),
            bits: q.bits,
            act_bits: q.act_bits,
            mode: q.mode,
            tensors: ints,
            calibration: q.calibration.clone(),
        }),
    };
    Ok(LoadedModel { manifest, artifact })
}

pub fn save_model(artifact: &ModelArtifact, seed: Option<u64>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(artifact, seed)?)
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    decode_model(&fs::read(path)?)
}

const DATASET_HEADER: usize = 5 + 2 + 8 + 4 + 4 + 4;

fn record_bytes(n_gates: usize) -> usize {
    (2 * n_gates + 4) * 4
}

pub fn encode_dataset(ds: &FliDataset) -> Result<Vec<u8>> {
    let n = ds.grid.n_gates;
    let mut out = Vec::with_capacity(DATASET_HEADER + ds.len() * record_bytes(n));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(ds.grid.gate_width_ns as f32).to_le_bytes());
    for rec in &ds.records {
        if rec.tpsf.len() != n || rec.sfd.len() != n {
            return Err(Error::shape("dataset record", &[rec.tpsf.len(), rec.sfd.len()], &[n, n]));
        }
        for v in rec.tpsf.iter().chain(&rec.sfd) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in [rec.params.a_r, rec.params.tau1_ns, rec.params.tau2_ns, rec.peak_counts] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FliDataset> {
    check_magic(bytes, DATASET_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(DATASET_MAGIC.len(), &ctx("magic"))?;
    let version = r.u16(&ctx("version"))?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let seed = r.u64(&ctx("header"))?;
    let n_records = r.u32(&ctx("header"))? as usize;
    let n_gates = r.u32(&ctx("header"))? as usize;
    let width = r.f32(&ctx("header"))?;
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::Format(format!("gate width must be positive, got {width}")));
    }
    let grid = TimeGrid {
        n_gates,
        gate_width_ns: width as f64,
    };
    grid.validate().map_err(|e| Error::Format(e.to_string()))?;
    let expected = n_records as u64 * record_bytes(n_gates) as u64;
    let actual = r.remaining() as u64;
    if actual < expected {
        return Err(Error::Truncated(format!(
            "record data: header promises {n_records} records ({expected} bytes), file holds {actual}"
        )));
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n_records} records",
            actual - expected
        )));
    }
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let body = r.take(record_bytes(n_gates), &ctx("record"))?;
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tail = &vals[2 * n_gates..];
        records.push(DecayRecord {
            params: DecayParams {
                a_r: tail[0],
                tau1_ns: tail[1],
                tau2_ns: tail[2],
            },
            tpsf: vals[..n_gates].to_vec(),
            sfd: vals[n_gates..2 * n_gates].to_vec(),
            pixel_xy: None,
            peak_counts: tail[3],
        });
    }
    Ok(FliDataset {
        grid,
        records,
        seed,
        generator: GENERATOR_VERSION.to_string(),
    })
}

pub fn save_dataset(ds: &FliDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<FliDataset> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpgaTensor {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
    pub bits: u32,
    pub scale: f32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpgaLut {
    pub kind: LutKind,
    pub file: String,
    pub entries: usize,
    pub input_range: f64,
    pub out_scale: f32,
    pub bits: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpgaManifest {
    pub format_version: u16,
    pub generator: String,
    pub config: ModelConfig,
    pub bits: Bits,
    pub act_bits: Bits,
    pub mode: ScaleMode,
    pub tensors: Vec<FpgaTensor>,
    pub activation_scales: CalibrationStats,
    pub luts: Vec<FpgaLut>,
    /// Sum of all binary file sizes listed above.
    pub total_bytes: u64,
}

fn engine_luts() -> [Lut; 2] {
    [Lut::q15(LutKind::Sigmoid), Lut::q15(LutKind::Tanh)]
}

/// Writes raw integer payloads, LUT binaries and a JSON manifest to `dir`.
pub fn export_fpga(qm: &QuantizedModel, dir: &Path) -> Result<FpgaManifest> {
    let calib = qm.calibration.clone().filter(|c| c.is_frozen()).ok_or(Error::Uncalibrated)?;
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in &qm.tensors {
        let mut payload = Vec::new();
        push_int_payload(&mut payload, &t.q, t.bits);
        let file = format!("{name}.bin");
        write_atomic(&dir.join(&file), &payload)?;
        tensors.push(FpgaTensor {
            name: name.clone(),
            file,
            dims: t.shape.clone(),
            bits: t.bits.width(),
            scale: t.scale,
            bytes: payload.len() as u64,
        });
    }
    let mut luts = Vec::new();
    for lut in engine_luts() {
        let mut payload = Vec::new();
        push_int_payload(&mut payload, &lut.table, lut.out_bits);
        let file = format!("lut_{}.bin", serde_json::to_value(lut.kind).unwrap().as_str().unwrap());
        write_atomic(&dir.join(&file), &payload)?;
        luts.push(FpgaLut {
            kind: lut.kind,
            file,
            entries: LUT_ENTRIES,
            input_range: LUT_RANGE,
            out_scale: lut.out_scale,
            bits: lut.out_bits.width(),
            bytes: payload.len() as u64,
        });
    }
    let total_bytes = tensors.iter().map(|t| t.bytes).chain(luts.iter().map(|l| l.bytes)).sum();
    let manifest = FpgaManifest {
        format_version: FPGA_VERSION,
        generator: generator(),
        config: qm.config.clone(),
        bits: qm.bits,
        act_bits: qm.act_bits,
        mode: qm.mode,
        tensors,
        activation_scales: calib,
        luts,
        total_bytes,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(FPGA_MANIFEST), &json)?;
    Ok(manifest)
}

fn read_ints(path: &Path, bits: Bits, n: usize, what: &str) -> Result<Vec<i32>> {
    let bytes = fs::read(path)?;
    let width = (bits.width() / 8) as usize;
    if bytes.len() != n * width {
        return Err(Error::Manifest(format!(
            "{what}: expected {} bytes, file has {}",
            n * width,
            bytes.len()
        )));
    }
    Ok(match bits {
        Bits::Eight => bytes.iter().map(|&b| b as i8 as i32).collect(),
        Bits::Sixteen => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
    })
}

/// Rebuilds a quantized model from an export directory.
pub fn import_fpga(dir: &Path) -> Result<QuantizedModel> {
    let raw = fs::read(dir.join(FPGA_MANIFEST))?;
    let m: FpgaManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Manifest(format!("unreadable export manifest: {e}")))?;
    if m.format_version != FPGA_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            supported: FPGA_VERSION,
        });
    }
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for t in &m.tensors {
        let bits = Bits::from_width(t.bits)?;
        let n = t.dims.iter().product();
        let q = read_ints(&dir.join(&t.file), bits, n, &t.name)?;
        tensors.push((t.name.clone(), QuantizedTensor::new(t.dims.clone(), q, t.scale, bits)?));
    }
    for (entry, lut) in m.luts.iter().zip(engine_luts()) {
        let table = read_ints(&dir.join(&entry.file), Bits::from_width(entry.bits)?, entry.entries, &entry.file)?;
        if entry.kind != lut.kind || table != lut.table {
            return Err(Error::Manifest(format!("{} does not match the engine lookup table", entry.file)));
        }
    }
    let qm = QuantizedModel {
        config: m.config,
        bits: m.bits,
        act_bits: m.act_bits,
        mode: m.mode,
        tensors,
        calibration: Some(m.activation_scales),
    };
    // architecture consistency
    qm.dequantize().map_err(|e| Error::Manifest(e.to_string()))?;
    Ok(qm)
}

/// Reads curves from CSV: one curve per line, comma-separated values. Lines
/// starting with `#` and blank lines are skipped.
pub fn read_curves_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: not a number: {f:?}", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_curves_csv(curves: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for c in curves {
        let row: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
