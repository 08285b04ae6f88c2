//! Per-record reconstruction metrics and lifetime fitting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DecayParams, FliDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::model::SeqModel;
use crate::quant::{Bits, IntEngine, QuantizedModel};

fn check_pair(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::Input(format!("{op}: empty sequence")));
    }
    Ok(())
}

fn sse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum()
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, "rmse")?;
    Ok((sse(pred, truth) / pred.len() as f64).sqrt())
}

/// Coefficient of determination; `None` when the truth is constant.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_pair(pred, truth, "r2")?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - sse(pred, truth) / ss_tot))
}

/// Unnormalized residual norm.
pub fn l2_norm(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, "l2_norm")?;
    Ok(sse(pred, truth).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dtw {
    pub raw: f64,
    /// `raw / (len(a) + len(b))`
    pub normalized: f64,
}

/// Dynamic time warping with cost `|a_i − b_j|` and match/insert/delete steps.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<Dtw> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("dtw: empty sequence".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let raw = prev[m];
    Ok(Dtw {
        raw,
        normalized: raw / (a.len() + m) as f64,
    })
}

/// Fraction of the peak at which the fit window ends.
pub const FIT_CUTOFF: f64 = 0.01;
pub const MIN_FIT_GATES: usize = 4;

/// Log-linear least-squares lifetime over the window from the peak to the
/// first gate below 1% of the peak.
pub fn fit_lifetime(sfd: &[f64], grid: &TimeGrid) -> Result<f64> {
    if sfd.len() != grid.n_gates {
        return Err(Error::shape("fit_lifetime", &[sfd.len()], &[grid.n_gates]));
    }
    let peak_idx = crate::datagen::argmax(sfd);
    let peak = sfd[peak_idx];
    if !(peak > 0.0) {
        return Err(Error::Input("fit_lifetime: curve has no positive peak".into()));
    }
    let end = sfd[peak_idx..]
        .iter()
        .position(|&v| v < FIT_CUTOFF * peak)
        .map_or(sfd.len(), |p| peak_idx + p);
    let window = &sfd[peak_idx..end];
    if window.len() < MIN_FIT_GATES {
        return Err(Error::Input(format!(
            "fit_lifetime: {} usable gates, need {MIN_FIT_GATES}",
            window.len()
        )));
    }
    if window.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Input("fit_lifetime: non-positive value inside fit window".into()));
    }
    let n = window.len() as f64;
    let ts: Vec<f64> = (peak_idx..end).map(|i| grid.time(i)).collect();
    let ys: Vec<f64> = window.iter().map(|v| v.ln()).collect();
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Input(format!("fit_lifetime: non-decaying curve (slope {slope})")));
    }
    Ok(-1.0 / slope)
}

pub fn amplitude_weighted_tau(p: &DecayParams) -> f64 {
    p.a_r * p.tau1_ns + (1.0 - p.a_r) * p.tau2_ns
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineTag {
    Float,
    Int8,
    Int16,
}

impl EngineTag {
    pub fn for_bits(bits: Bits) -> Self {
        match bits {
            Bits::Eight => EngineTag::Int8,
            Bits::Sixteen => EngineTag::Int16,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Aggregate { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub rmse: f64,
    pub r2: Option<f64>,
    pub l2: f64,
    pub dtw: f64,
    pub dtw_raw: f64,
}

impl RecordMetrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        let d = dtw(pred, truth)?;
        Ok(RecordMetrics {
            rmse: rmse(pred, truth)?,
            r2: r2(pred, truth)?,
            l2: l2_norm(pred, truth)?,
            dtw: d.normalized,
            dtw_raw: d.raw,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub engine: EngineTag,
    pub records: Vec<RecordMetrics>,
    pub rmse: Aggregate,
    pub r2: Aggregate,
    pub l2: Aggregate,
    pub dtw: Aggregate,
    /// Records whose R² is undefined and left out of the R² aggregate.
    pub r2_excluded: usize,
}

/// Summary without the per-record rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub engine: EngineTag,
    pub n_records: usize,
    pub r2_excluded: usize,
    pub rmse: Aggregate,
    pub r2: Aggregate,
    pub l2: Aggregate,
    pub dtw: Aggregate,
}

impl MetricsReport {
    pub fn from_records(engine: EngineTag, records: Vec<RecordMetrics>) -> Self {
        let col = |f: fn(&RecordMetrics) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let r2s: Vec<f64> = records.iter().filter_map(|r| r.r2).collect();
        MetricsReport {
            engine,
            rmse: Aggregate::of(&col(|r| r.rmse)),
            r2: Aggregate::of(&r2s),
            l2: Aggregate::of(&col(|r| r.l2)),
            dtw: Aggregate::of(&col(|r| r.dtw)),
            r2_excluded: records.len() - r2s.len(),
            records,
        }
    }

    pub fn from_predictions(engine: EngineTag, preds: &[Vec<f64>], truths: &[&[f64]]) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::shape("evaluate", &[preds.len()], &[truths.len()]));
        }
        let records = preds
            .iter()
            .zip(truths)
            .map(|(p, t)| RecordMetrics::compute(p, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_records(engine, records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            engine: self.engine,
            n_records: self.records.len(),
            r2_excluded: self.r2_excluded,
            rmse: self.rmse,
            r2: self.r2,
            l2: self.l2,
            dtw: self.dtw,
        }
    }

    /// One row per record, then `mean` and `std` footer rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("record,rmse,r2,l2,dtw,dtw_raw\n");
        for (i, r) in self.records.iter().enumerate() {
            let r2 = r.r2.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{i},{},{r2},{},{},{}", r.rmse, r.l2, r.dtw, r.dtw_raw);
        }
        let _ = writeln!(s, "mean,{},{},{},{},", self.rmse.mean, self.r2.mean, self.l2.mean, self.dtw.mean);
        let _ = writeln!(s, "std,{},{},{},{},", self.rmse.std, self.r2.std, self.l2.std, self.dtw.std);
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::io::write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        let json = serde_json::to_vec_pretty(&self.summary()).map_err(|e| Error::Format(e.to_string()))?;
        crate::io::write_atomic(&dir.join(format!("{stem}.json")), &json)?;
        Ok(())
    }
}

fn check_grid(ds: &FliDataset, seq_len: usize) -> Result<()> {
    if ds.grid.n_gates != seq_len {
        return Err(Error::shape("evaluate", &[ds.grid.n_gates], &[seq_len]));
    }
    if ds.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    Ok(())
}

fn truths(ds: &FliDataset) -> Vec<&[f64]> {
    ds.records.iter().map(|r| r.sfd.as_slice()).collect()
}

/// Float-engine predictions for every record.
pub fn predict_dataset(model: &SeqModel, ds: &FliDataset) -> Result<Vec<Vec<f64>>> {
    check_grid(ds, model.config.seq_len)?;
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.records.chunks(256) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|r| r.tpsf.as_slice()).collect();
        out.extend(model.predict_batch(&inputs)?);
    }
    Ok(out)
}

pub fn evaluate_float(model: &SeqModel, ds: &FliDataset) -> Result<MetricsReport> {
    let preds = predict_dataset(model, ds)?;
    MetricsReport::from_predictions(EngineTag::Float, &preds, &truths(ds))
}

/// Runs the integer engine over every record.
pub fn evaluate_int(qm: &QuantizedModel, ds: &FliDataset) -> Result<MetricsReport> {
    check_grid(ds, qm.config.seq_len)?;
    let engine = IntEngine::new(qm)?;
    let preds = ds
        .records
        .iter()
        .map(|r| engine.infer(&r.tpsf))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_predictions(EngineTag::for_bits(qm.bits), &preds, &truths(ds))
}
