//! Integer-only GRU inference and its floating-point mirror.
//!
//! Activation sites, in datapath order per layer `i`:
//! `L{i}.az`, `L{i}.ar` (gate preactivations, 16-bit), `L{i}.rh` (reset-gated
//! state, activation width), `L{i}.ah` (candidate preactivation, 16-bit),
//! `L{i}.h` (hidden state fed to matrix products, activation width).
//! The network input is `input` and the dense head output is `output`.
//! Gates and the running hidden state are kept in Q15.

use std::collections::BTreeMap;

use super::fixed::{check_accumulator, clamp_bits, matvec_i32, round_shift, FixedMultiplier, Lut, LutKind};
use super::{quantize_value, Bits, QuantizedModel};
use crate::error::{Error, Result};
use crate::model::{sigmoid, SeqModel};

const SITES_PER_LAYER: usize = 5;
const AZ: usize = 0;
const AR: usize = 1;
const RH: usize = 2;
const AH: usize = 3;
const H: usize = 4;
const Q15_ONE: f64 = 32768.0;

fn site_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["input".to_string()];
    for l in 0..n_layers {
        for suffix in ["az", "ar", "rh", "ah", "h"] {
            names.push(format!("L{l}.{suffix}"));
        }
    }
    names.push("output".to_string());
    names
}

fn site_bits(site: usize, n_layers: usize, act: Bits) -> Bits {
    if site == 0 {
        return act;
    }
    if site == 1 + SITES_PER_LAYER * n_layers {
        return Bits::Sixteen;
    }
    match (site - 1) % SITES_PER_LAYER {
        RH | H => act,
        _ => Bits::Sixteen,
    }
}

#[inline]
fn site(layer: usize, kind: usize) -> usize {
    1 + layer * SITES_PER_LAYER + kind
}

fn dot(row: &[f64], x: &[f64]) -> f64 {
    row.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Float forward pass of the quantized datapath. `hook` sees every site's
/// values and may rewrite them in place.
fn float_path(model: &SeqModel, tpsf: &[f64], hook: &mut dyn FnMut(usize, &mut [f64])) -> Result<Vec<f64>> {
    let t_len = model.config.seq_len;
    if tpsf.len() != t_len {
        return Err(Error::shape("quantized forward", &[tpsf.len()], &[t_len]));
    }
    if tpsf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input decay".into()));
    }
    let mut seq: Vec<Vec<f64>> = tpsf.iter().map(|&v| vec![v]).collect();
    for x in seq.iter_mut() {
        hook(0, x);
    }
    for (l, w) in model.layers().enumerate() {
        let (hid, inp) = (w.hidden(), w.input());
        let mut h = vec![0.0; hid];
        let mut h_q = vec![0.0; hid];
        let mut az = vec![0.0; hid];
        let mut ar = vec![0.0; hid];
        let mut ah = vec![0.0; hid];
        let mut rh = vec![0.0; hid];
        let mut out = Vec::with_capacity(t_len);
        for x in &seq {
            for j in 0..hid {
                let (wi, ui) = (j * inp..(j + 1) * inp, j * hid..(j + 1) * hid);
                az[j] = dot(&w.w_z.data()[wi.clone()], x) + dot(&w.u_z.data()[ui.clone()], &h_q) + w.b_z.data()[j];
                ar[j] = dot(&w.w_r.data()[wi], x) + dot(&w.u_r.data()[ui], &h_q) + w.b_r.data()[j];
            }
            hook(site(l, AZ), &mut az);
            hook(site(l, AR), &mut ar);
            let z: Vec<f64> = az.iter().map(|&a| sigmoid(a)).collect();
            for j in 0..hid {
                rh[j] = sigmoid(ar[j]) * h[j];
            }
            hook(site(l, RH), &mut rh);
            for j in 0..hid {
                ah[j] = dot(&w.w_h.data()[j * inp..(j + 1) * inp], x)
                    + dot(&w.u_h.data()[j * hid..(j + 1) * hid], &rh)
                    + w.b_h.data()[j];
            }
            hook(site(l, AH), &mut ah);
            for j in 0..hid {
                h[j] += z[j] * (ah[j].tanh() - h[j]);
            }
            h_q.copy_from_slice(&h);
            hook(site(l, H), &mut h_q);
            out.push(h_q.clone());
        }
        seq = out;
    }
    let out_site = 1 + SITES_PER_LAYER * model.config.layer_dims().len();
    let mut y: Vec<f64> = seq
        .iter()
        .map(|h| dot(model.dense_w.data(), h) + model.dense_b.data()[0])
        .collect();
    hook(out_site, &mut y);
    Ok(y)
}

/// Records max-abs per site for calibration, merging into `batch_max`.
pub(crate) fn observe_sites(
    model: &SeqModel,
    act_bits: Bits,
    tpsf: &[f64],
    batch_max: &mut BTreeMap<String, (f64, Bits)>,
) -> Result<()> {
    let n_layers = model.config.layer_dims().len();
    let names = site_names(n_layers);
    let mut local = vec![0.0f64; names.len()];
    float_path(model, tpsf, &mut |s, v| {
        for x in v.iter() {
            local[s] = local[s].max(x.abs());
        }
    })?;
    for (s, (name, m)) in names.into_iter().zip(local).enumerate() {
        let bits = site_bits(s, n_layers, act_bits);
        let e = batch_max.entry(name).or_insert((0.0, bits));
        e.0 = e.0.max(m);
    }
    Ok(())
}

fn site_scales(qm: &QuantizedModel) -> Result<Vec<f32>> {
    let calib = qm.calibration.as_ref().ok_or(Error::Uncalibrated)?;
    if !calib.is_frozen() {
        return Err(Error::Uncalibrated);
    }
    site_names(qm.config.layer_dims().len())
        .iter()
        .map(|n| calib.scale(n))
        .collect()
}

/// Float reference of the integer engine. Uses dequantized weights and exact
/// nonlinearities, with fake quantization at every calibrated site.
pub fn simulate_fake_quant(qm: &QuantizedModel, tpsf: &[f64]) -> Result<Vec<f64>> {
    let scales = site_scales(qm)?;
    let model = qm.dequantize()?;
    let n_layers = qm.config.layer_dims().len();
    let act = qm.act_bits;
    float_path(&model, tpsf, &mut |s, v| {
        let bits = site_bits(s, n_layers, act);
        for x in v.iter_mut() {
            *x = quantize_value(*x, scales[s], bits) as f64 * scales[s] as f64;
        }
    })
}

#[derive(Debug, Clone)]
struct IntLayer {
    hidden: usize,
    input: usize,
    /// Input-side weights for z, r, h gates, `hidden × input` row-major.
    w: [Vec<i32>; 3],
    /// Recurrent weights for z, r, h gates, `hidden × hidden` row-major.
    u: [Vec<i32>; 3],
    bias: [Vec<i32>; 3],
    m_w: [FixedMultiplier; 3],
    m_u: [FixedMultiplier; 3],
    pos_z: FixedMultiplier,
    pos_r: FixedMultiplier,
    pos_h: FixedMultiplier,
    /// Q30 product `r · h` to the `rh` grid.
    m_rh: FixedMultiplier,
    /// Q15 hidden state to the `h` grid.
    m_h: FixedMultiplier,
}

/// Precomputed integer datapath for one quantized model.
#[derive(Debug, Clone)]
pub struct IntEngine {
    act_bits: Bits,
    seq_len: usize,
    input_scale: f32,
    output_scale: f32,
    layers: Vec<IntLayer>,
    dense_w: Vec<i32>,
    dense_b: i32,
    m_out: FixedMultiplier,
    sigmoid: Lut,
    tanh: Lut,
}

fn max_abs_i(v: &[i32]) -> u64 {
    v.iter().map(|x| x.unsigned_abs() as u64).max().unwrap_or(0)
}

fn bias_codes(qm: &QuantizedModel, name: &str, scale: f32) -> Result<Vec<i32>> {
    let t = qm.tensor(name)?;
    Ok(t.q
        .iter()
        .map(|&q| {
            let real = q as f64 * t.scale as f64;
            quantize_value(real, scale, Bits::Sixteen)
        })
        .collect())
}

impl IntEngine {
    pub fn new(qm: &QuantizedModel) -> Result<Self> {
        let scales = site_scales(qm)?;
        let dims = qm.config.layer_dims();
        let act = qm.act_bits;
        let amax = act.qmax() as u64;
        let names: Vec<String> = {
            let mut v = Vec::new();
            for (prefix, n) in [("enc", qm.config.enc_hidden.len()), ("dec", qm.config.dec_hidden().len())] {
                for i in 0..n {
                    v.push(format!("{prefix}{i}"));
                }
            }
            v
        };
        let mut layers = Vec::with_capacity(dims.len());
        for (l, (&(inp, hid), prefix)) in dims.iter().zip(&names).enumerate() {
            let s_in = scales[if l == 0 { 0 } else { site(l - 1, H) }] as f64;
            let s_h = scales[site(l, H)] as f64;
            let s_rh = scales[site(l, RH)] as f64;
            let s_a = [
                scales[site(l, AZ)] as f64,
                scales[site(l, AR)] as f64,
                scales[site(l, AH)] as f64,
            ];
            let get = |n: &str| qm.tensor(&format!("{prefix}.{n}"));
            let ws = [get("w_z")?, get("w_r")?, get("w_h")?];
            let us = [get("u_z")?, get("u_r")?, get("u_h")?];
            for (g, t) in ws.iter().enumerate() {
                if t.shape != [hid, inp] || us[g].shape != [hid, hid] {
                    return Err(Error::Format(format!("{prefix} gate tensors do not match the architecture")));
                }
                check_accumulator(inp, max_abs_i(&t.q), amax)?;
                check_accumulator(hid, max_abs_i(&us[g].q), amax)?;
            }
            let u_in = [s_h, s_h, s_rh];
            let mut m_w = [FixedMultiplier { multiplier: 0, shift: 0 }; 3];
            let mut m_u = m_w;
            for g in 0..3 {
                m_w[g] = FixedMultiplier::from_ratio(s_in * ws[g].scale as f64 / s_a[g])?;
                m_u[g] = FixedMultiplier::from_ratio(u_in[g] * us[g].scale as f64 / s_a[g])?;
            }
            layers.push(IntLayer {
                hidden: hid,
                input: inp,
                w: [ws[0].q.clone(), ws[1].q.clone(), ws[2].q.clone()],
                u: [us[0].q.clone(), us[1].q.clone(), us[2].q.clone()],
                bias: [
                    bias_codes(qm, &format!("{prefix}.b_z"), s_a[0] as f32)?,
                    bias_codes(qm, &format!("{prefix}.b_r"), s_a[1] as f32)?,
                    bias_codes(qm, &format!("{prefix}.b_h"), s_a[2] as f32)?,
                ],
                m_w,
                m_u,
                pos_z: Lut::position_multiplier(s_a[0] as f32)?,
                pos_r: Lut::position_multiplier(s_a[1] as f32)?,
                pos_h: Lut::position_multiplier(s_a[2] as f32)?,
                m_rh: FixedMultiplier::from_ratio(1.0 / (Q15_ONE * Q15_ONE) / s_rh)?,
                m_h: FixedMultiplier::from_ratio(1.0 / Q15_ONE / s_h)?,
            });
        }
        let s_top = scales[site(dims.len() - 1, H)] as f64;
        let s_y = scales[scales.len() - 1];
        let dw = qm.tensor("dense.w")?;
        let h_last = qm.config.last_hidden();
        if dw.shape != [1, h_last] {
            return Err(Error::Format("dense head does not match the architecture".into()));
        }
        check_accumulator(h_last, max_abs_i(&dw.q), amax)?;
        let dense_b = bias_codes(qm, "dense.b", s_y)?[0];
        Ok(IntEngine {
            act_bits: act,
            seq_len: qm.config.seq_len,
            input_scale: scales[0],
            output_scale: s_y,
            layers,
            dense_w: dw.q.clone(),
            dense_b,
            m_out: FixedMultiplier::from_ratio(s_top * dw.scale as f64 / s_y as f64)?,
            sigmoid: Lut::q15(LutKind::Sigmoid),
            tanh: Lut::q15(LutKind::Tanh),
        })
    }

    /// Integer output codes on the `output` grid, one per gate.
    pub fn infer_codes(&self, tpsf: &[f64]) -> Result<Vec<i32>> {
        if tpsf.len() != self.seq_len {
            return Err(Error::shape("int_infer", &[tpsf.len()], &[self.seq_len]));
        }
        if tpsf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input decay".into()));
        }
        let act = self.act_bits;
        let mut seq: Vec<i32> = tpsf
            .iter()
            .map(|&v| quantize_value(v, self.input_scale, act))
            .collect();
        for layer in &self.layers {
            let (hid, inp) = (layer.hidden, layer.input);
            let mut out = Vec::with_capacity(self.seq_len * hid);
            let mut h15 = vec![0i32; hid];
            let mut h_a = vec![0i32; hid];
            let mut rh = vec![0i32; hid];
            let mut z = vec![0i32; hid];
            let mut acc_w = vec![0i32; hid];
            let mut acc_u = vec![0i32; hid];
            let preact = |acc_w: &[i32], acc_u: &[i32], g: usize, j: usize| -> i32 {
                let v = layer.m_w[g].apply(acc_w[j] as i64)
                    + layer.m_u[g].apply(acc_u[j] as i64)
                    + layer.bias[g][j] as i64;
                clamp_bits(v, Bits::Sixteen)
            };
            for x in seq.chunks_exact(inp) {
                matvec_i32(&layer.w[0], inp, x, &mut acc_w);
                matvec_i32(&layer.u[0], hid, &h_a, &mut acc_u);
                for j in 0..hid {
                    z[j] = self.sigmoid.lookup(preact(&acc_w, &acc_u, 0, j), &layer.pos_z);
                }
                matvec_i32(&layer.w[1], inp, x, &mut acc_w);
                matvec_i32(&layer.u[1], hid, &h_a, &mut acc_u);
                for j in 0..hid {
                    let r = self.sigmoid.lookup(preact(&acc_w, &acc_u, 1, j), &layer.pos_r);
                    rh[j] = clamp_bits(layer.m_rh.apply(r as i64 * h15[j] as i64), act);
                }
                matvec_i32(&layer.w[2], inp, x, &mut acc_w);
                matvec_i32(&layer.u[2], hid, &rh, &mut acc_u);
                for j in 0..hid {
                    let cand = self.tanh.lookup(preact(&acc_w, &acc_u, 2, j), &layer.pos_h) as i64;
                    let delta = round_shift((z[j] as i64 * (cand - h15[j] as i64)) as i128, 15) as i64;
                    h15[j] = clamp_bits(h15[j] as i64 + delta, Bits::Sixteen);
                    h_a[j] = clamp_bits(layer.m_h.apply(h15[j] as i64), act);
                }
                out.extend_from_slice(&h_a);
            }
            seq = out;
        }
        let h_last = self.dense_w.len();
        let mut acc = [0i32; 1];
        Ok(seq
            .chunks_exact(h_last)
            .map(|h| {
                matvec_i32(&self.dense_w, h_last, h, &mut acc);
                clamp_bits(self.m_out.apply(acc[0] as i64) + self.dense_b as i64, Bits::Sixteen)
            })
            .collect())
    }

    pub fn output_scale(&self) -> f32 {
        self.output_scale
    }

    pub fn infer(&self, tpsf: &[f64]) -> Result<Vec<f64>> {
        let s = self.output_scale as f64;
        Ok(self.infer_codes(tpsf)?.into_iter().map(|q| q as f64 * s).collect())
    }
}

/// Integer-only inference; errors with [`Error::Uncalibrated`] when the model
/// has no frozen activation scales.
pub fn int_infer(qm: &QuantizedModel, tpsf: &[f64]) -> Result<Vec<f64>> {
    IntEngine::new(qm)?.infer(tpsf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, synthetic_digits, DatasetSpec, TimeGrid};
    use crate::model::ModelConfig;
    use crate::quant::{ptq_model, ScaleMode};

    fn calib_set(seq_len: usize) -> crate::datagen::FliDataset {
        let imgs = synthetic_digits(1, 5);
        let spec = DatasetSpec::new(TimeGrid::new(seq_len, 10.0).unwrap(), 11);
        let ds = build_dataset(&imgs, &spec).unwrap();
        ds.head(96)
    }

    #[test]
    fn zero_model_outputs_bias() {
        let cfg = ModelConfig::lite(4, 32);
        let mut m = SeqModel::zeros(cfg).unwrap();
        m.dense_b = crate::tensor::Tensor::from_vec(vec![0.3]).unwrap();
        let qm = ptq_model(&m, Bits::Eight, ScaleMode::SignedSymmetric, &calib_set(32)).unwrap();
        let y = int_infer(&qm, &vec![0.5; 32]).unwrap();
        let s = IntEngine::new(&qm).unwrap().output_scale() as f64;
        for v in y {
            assert!((v - 0.3).abs() <= s, "{v}");
        }
    }

    #[test]
    fn uncalibrated_model_is_rejected() {
        let m = SeqModel::init(ModelConfig::lite(4, 32), 1).unwrap();
        let qm = QuantizedModel::quantize_weights(&m, Bits::Eight, ScaleMode::SignedSymmetric).unwrap();
        assert!(matches!(int_infer(&qm, &[0.0; 32]), Err(Error::Uncalibrated)));
        assert!(matches!(simulate_fake_quant(&qm, &[0.0; 32]), Err(Error::Uncalibrated)));
    }

    #[test]
    fn engine_tracks_fake_quant_reference() {
        let m = SeqModel::init(ModelConfig::teacher(8, 4, 32), 2).unwrap();
        let calib = calib_set(32);
        for bits in [Bits::Eight, Bits::Sixteen] {
            let qm = ptq_model(&m, bits, ScaleMode::SignedSymmetric, &calib).unwrap();
            let engine = IntEngine::new(&qm).unwrap();
            for rec in calib.records.iter().take(10) {
                let a = engine.infer(&rec.tpsf).unwrap();
                let b = simulate_fake_quant(&qm, &rec.tpsf).unwrap();
                let float = m.predict(&rec.tpsf).unwrap();
                let range = float.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-3);
                for ((x, y), _) in a.iter().zip(&b).zip(&float) {
                    assert!((x - y).abs() < 0.05 * range + 0.01, "{bits:?}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn integer_inference_is_deterministic() {
        let m = SeqModel::init(ModelConfig::lite(6, 32), 9).unwrap();
        let calib = calib_set(32);
        let qm = ptq_model(&m, Bits::Eight, ScaleMode::SignedSymmetric, &calib).unwrap();
        let a = IntEngine::new(&qm).unwrap().infer_codes(&calib.records[0].tpsf).unwrap();
        let b = IntEngine::new(&qm).unwrap().infer_codes(&calib.records[0].tpsf).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn site_layout() {
        let names = site_names(2);
        assert_eq!(names.len(), 12);
        assert_eq!(names[site(1, H)], "L1.h");
        assert_eq!(site_bits(site(0, AZ), 2, Bits::Eight), Bits::Sixteen);
        assert_eq!(site_bits(site(0, RH), 2, Bits::Eight), Bits::Eight);
        assert_eq!(site_bits(11, 2, Bits::Eight), Bits::Sixteen);
    }
}
