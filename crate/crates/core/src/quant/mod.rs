//! Per-tensor symmetric quantization and post-training quantization of
//! whole models. Fake quantization for QAT lives here too.

mod engine;
mod fixed;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::FliDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeqModel};
use crate::tensor::Tensor;

pub use engine::{int_infer, simulate_fake_quant, IntEngine};
pub use fixed::{int_matvec, lut_activation, requantize, FixedMultiplier, Lut, LutKind, LUT_ENTRIES, LUT_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bits {
    #[serde(rename = "8")]
    Eight,
    #[serde(rename = "16")]
    Sixteen,
}

impl Bits {
    pub fn from_width(w: u32) -> Result<Self> {
        match w {
            8 => Ok(Bits::Eight),
            16 => Ok(Bits::Sixteen),
            _ => Err(Error::Config(format!("unsupported bit width {w}"))),
        }
    }

    pub fn width(self) -> u32 {
        match self {
            Bits::Eight => 8,
            Bits::Sixteen => 16,
        }
    }

    /// Largest representable magnitude of the signed type, `2^(b−1) − 1`.
    pub fn qmax(self) -> i32 {
        (1 << (self.width() - 1)) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `s = max|x| / (2^(b−1) − 1)`: the full signed range is used.
    SignedSymmetric,
    /// `s = max|x| / (2^b − 1)`: the literal formula; values beyond the
    /// signed range saturate.
    PaperLiteral,
}

pub fn compute_scale(x: &[f64], bits: Bits, mode: ScaleMode) -> f32 {
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return 1.0;
    }
    let levels = match mode {
        ScaleMode::SignedSymmetric => bits.qmax() as f64,
        ScaleMode::PaperLiteral => ((1u64 << bits.width()) - 1) as f64,
    };
    (max_abs / levels) as f32
}

/// `clamp(round_half_even(x / s))` to the signed range of `bits`.
#[inline]
pub fn quantize_value(x: f64, scale: f32, bits: Bits) -> i32 {
    let q = (x / scale as f64).round_ties_even();
    let m = bits.qmax() as f64;
    q.clamp(-m, m) as i32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub q: Vec<i32>,
    pub scale: f32,
    pub bits: Bits,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, q: Vec<i32>, scale: f32, bits: Bits) -> Result<Self> {
        if shape.iter().product::<usize>() != q.len() {
            return Err(Error::shape("QuantizedTensor", &shape, &[q.len()]));
        }
        let m = bits.qmax();
        if q.iter().any(|v| v.abs() > m) {
            return Err(Error::Input(format!("quantized value outside the {}-bit range", bits.width())));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Input(format!("invalid scale {scale}")));
        }
        Ok(QuantizedTensor { shape, q, scale, bits })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

pub fn quantize_tensor(x: &Tensor, bits: Bits, mode: ScaleMode) -> QuantizedTensor {
    let scale = compute_scale(x.data(), bits, mode);
    QuantizedTensor {
        shape: x.shape().to_vec(),
        q: x.data().iter().map(|&v| quantize_value(v, scale, bits)).collect(),
        scale,
        bits,
    }
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> Tensor {
    let s = q.scale as f64;
    Tensor::new(q.shape.clone(), q.q.iter().map(|&v| v as f64 * s).collect())
        .expect("quantized tensor shape is consistent")
}

/// Quantize-then-dequantize.
pub fn fake_quant(x: &Tensor, bits: Bits, mode: ScaleMode) -> Tensor {
    fake_quant_with_mask(x, bits, mode).0
}

/// Fake quantization plus the straight-through mask: `true` where the
/// element was inside the representable range (gradient passes), `false`
/// where it saturated (gradient blocked).
pub fn fake_quant_with_mask(x: &Tensor, bits: Bits, mode: ScaleMode) -> (Tensor, Vec<bool>) {
    let scale = compute_scale(x.data(), bits, mode);
    let s = scale as f64;
    let m = bits.qmax() as f64;
    let mut mask = Vec::with_capacity(x.len());
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let r = (v / s).round_ties_even();
            mask.push(r.abs() <= m);
            r.clamp(-m, m) * s
        })
        .collect();
    (Tensor::new(x.shape().to_vec(), data).expect("same shape"), mask)
}

/// Fake-quantizes every parameter tensor of `model`; returns the quantized
/// copy and one straight-through mask per tensor in canonical order.
pub fn fake_quant_model(model: &SeqModel, bits: Bits, mode: ScaleMode) -> (SeqModel, Vec<Vec<bool>>) {
    let mut out = model.clone();
    let mut masks = Vec::new();
    for t in out.params_mut() {
        let (fq, mask) = fake_quant_with_mask(t, bits, mode);
        *t = fq;
        masks.push(mask);
    }
    (out, masks)
}

pub const CALIBRATION_DECAY: f64 = 0.99;
pub const MIN_CALIBRATION_RECORDS: usize = 64;
pub const CALIBRATION_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub running_max: f64,
    pub bits: Bits,
    /// Frozen scale; `None` until calibration finishes.
    pub scale: Option<f32>,
}

/// Activation ranges observed at each named site of the integer datapath.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub sites: BTreeMap<String, SiteStats>,
    pub batches: usize,
}

impl CalibrationStats {
    /// Folds one batch's max-abs values into the running EMA.
    pub fn observe_batch(&mut self, batch_max: &BTreeMap<String, (f64, Bits)>) {
        for (name, &(m, bits)) in batch_max {
            self.sites
                .entry(name.clone())
                .and_modify(|s| s.running_max = CALIBRATION_DECAY * s.running_max + (1.0 - CALIBRATION_DECAY) * m)
                .or_insert(SiteStats {
                    running_max: m,
                    bits,
                    scale: None,
                });
        }
        self.batches += 1;
    }

    pub fn freeze(&mut self) {
        for s in self.sites.values_mut() {
            let m = if s.running_max > 0.0 { s.running_max } else { 1.0 };
            s.scale = Some((m / s.bits.qmax() as f64) as f32);
        }
    }

    pub fn is_frozen(&self) -> bool {
        !self.sites.is_empty() && self.sites.values().all(|s| s.scale.is_some())
    }

    pub fn scale(&self, site: &str) -> Result<f32> {
        self.sites
            .get(site)
            .and_then(|s| s.scale)
            .ok_or(Error::Uncalibrated)
    }
}

/// Activation width of the integer engine. 16×16-bit products summed over a
/// hidden dimension overflow 32-bit accumulators, so activations stay 8-bit
/// for both weight widths.
pub const ACT_BITS: Bits = Bits::Eight;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub bits: Bits,
    /// Width of the activations fed to the integer matrix-vector products.
    pub act_bits: Bits,
    pub mode: ScaleMode,
    /// Parameter tensors in the canonical order of [`SeqModel::named_params`].
    pub tensors: Vec<(String, QuantizedTensor)>,
    pub calibration: Option<CalibrationStats>,
}

impl QuantizedModel {
    /// Weight-only quantization, no activation calibration.
    pub fn quantize_weights(model: &SeqModel, bits: Bits, mode: ScaleMode) -> Result<Self> {
        model.validate()?;
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, quantize_tensor(t, bits, mode)))
            .collect();
        Ok(QuantizedModel {
            config: model.config.clone(),
            bits,
            act_bits: ACT_BITS,
            mode,
            tensors,
            calibration: None,
        })
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.as_ref().is_some_and(|c| c.is_frozen())
    }

    pub fn tensor(&self, name: &str) -> Result<&QuantizedTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    /// Float model carrying the dequantized weights.
    pub fn dequantize(&self) -> Result<SeqModel> {
        let mut model = SeqModel::zeros(self.config.clone())?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Format("tensor table does not match architecture".into()));
        }
        for ((name, slot), (qname, qt)) in names.iter().zip(model.params_mut()).zip(&self.tensors) {
            if name != qname || slot.shape() != qt.shape.as_slice() {
                return Err(Error::Format(format!("tensor {qname} does not match architecture slot {name}")));
            }
            *slot = dequantize_tensor(qt);
        }
        Ok(model)
    }
}

/// Post-training quantization: per-tensor weights plus activation scales
/// from an EMA max-abs calibration pass over `calib`.
pub fn ptq_model(model: &SeqModel, bits: Bits, mode: ScaleMode, calib: &FliDataset) -> Result<QuantizedModel> {
    if calib.len() < MIN_CALIBRATION_RECORDS {
        return Err(Error::Input(format!(
            "calibration needs at least {MIN_CALIBRATION_RECORDS} records, got {}",
            calib.len()
        )));
    }
    if calib.grid.n_gates != model.config.seq_len {
        return Err(Error::shape("calibration", &[calib.grid.n_gates], &[model.config.seq_len]));
    }
    let mut qm = QuantizedModel::quantize_weights(model, bits, mode)?;
    let deq = qm.dequantize()?;
    let mut stats = CalibrationStats::default();
    for chunk in calib.records.chunks(CALIBRATION_BATCH) {
        let mut batch_max: BTreeMap<String, (f64, Bits)> = BTreeMap::new();
        for rec in chunk {
            engine::observe_sites(&deq, qm.act_bits, &rec.tpsf, &mut batch_max)?;
        }
        stats.observe_batch(&batch_max);
    }
    stats.freeze();
    qm.calibration = Some(stats);
    // Fails early on configurations whose accumulators could overflow.
    IntEngine::new(&qm)?;
    Ok(qm)
}
