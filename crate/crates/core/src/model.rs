//! GRU encoder–decoder models with analytic backpropagation through time.
//!
//! The teacher stacks two GRU layers in the encoder and mirrors them (sizes
//! reversed) in the decoder; the lite student uses one layer on each side.
//! The decoder consumes the encoder's per-step output sequence and every
//! layer starts from a zero hidden state. A linear dense head maps each
//! decoder step to one output sample.
//!
//! Cell update:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! ĥ  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ ĥ
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hidden sizes explored for weight reduction.
pub const STUDIED_HIDDEN_SIZES: [usize; 5] = [128, 64, 45, 32, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Lite,
}

impl ModelKind {
    pub fn encoder_layers(self) -> usize {
        match self {
            ModelKind::Teacher => 2,
            ModelKind::Lite => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub enc_hidden: Vec<usize>,
    pub seq_len: usize,
}

impl ModelConfig {
    pub const INPUT_DIM: usize = 1;
    pub const OUTPUT_DIM: usize = 1;

    pub fn teacher(h1: usize, h2: usize, seq_len: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Teacher,
            enc_hidden: vec![h1, h2],
            seq_len,
        }
    }

    pub fn lite(hidden: usize, seq_len: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Lite,
            enc_hidden: vec![hidden],
            seq_len,
        }
    }

    pub fn dec_hidden(&self) -> Vec<usize> {
        self.enc_hidden.iter().rev().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_hidden.len() != self.kind.encoder_layers() {
            return Err(Error::Config(format!(
                "{:?} model needs {} encoder layer(s), got {}",
                self.kind,
                self.kind.encoder_layers(),
                self.enc_hidden.len()
            )));
        }
        if self.enc_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        Ok(())
    }

    /// `(input_dim, hidden)` for every GRU layer, encoder first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let sizes: Vec<usize> = self.enc_hidden.iter().chain(self.dec_hidden().iter()).copied().collect();
        let mut dims = Vec::with_capacity(sizes.len());
        let mut input = Self::INPUT_DIM;
        for h in sizes {
            dims.push((input, h));
            input = h;
        }
        dims
    }

    pub fn last_hidden(&self) -> usize {
        self.enc_hidden[0]
    }

    /// Closed-form parameter count: each layer contributes `3·h·in + 3·h·h + 3·h`,
    /// the dense head `h_last + 1`.
    pub fn param_count(&self) -> usize {
        let gru: usize = self
            .layer_dims()
            .iter()
            .map(|&(i, h)| 3 * h * i + 3 * h * h + 3 * h)
            .sum();
        gru + self.last_hidden() * Self::OUTPUT_DIM + Self::OUTPUT_DIM
    }

    /// Architecture label in the `64x16` style.
    pub fn label(&self) -> String {
        self.enc_hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayerWeights {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

pub(crate) const LAYER_TENSOR_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruLayerWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruLayerWeights {
            w_z: Tensor::zeros(&[hidden, input]),
            w_r: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, input]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        GruLayerWeights {
            w_z: Tensor::uniform(&[hidden, input], bound, rng),
            w_r: Tensor::uniform(&[hidden, input], bound, rng),
            w_h: Tensor::uniform(&[hidden, input], bound, rng),
            u_z: Tensor::uniform(&[hidden, hidden], bound, rng),
            u_r: Tensor::uniform(&[hidden, hidden], bound, rng),
            u_h: Tensor::uniform(&[hidden, hidden], bound, rng),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.len()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    fn check(&self, input: usize, hidden: usize) -> Result<()> {
        for (i, t) in self.tensors().iter().enumerate() {
            let expected: Vec<usize> = match i {
                0..=2 => vec![hidden, input],
                3..=5 => vec![hidden, hidden],
                _ => vec![hidden],
            };
            if t.shape() != expected.as_slice() {
                return Err(Error::shape("GruLayerWeights", t.shape(), &expected));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step for a single sequence element.
pub fn gru_step(x_t: &Tensor, h_prev: &Tensor, w: &GruLayerWeights) -> Result<Tensor> {
    let (input, hidden) = (w.input(), w.hidden());
    w.check(input, hidden)?;
    if x_t.len() != input {
        return Err(Error::shape("gru_step input", x_t.shape(), &[input]));
    }
    if h_prev.len() != hidden {
        return Err(Error::shape("gru_step hidden", h_prev.shape(), &[hidden]));
    }
    let mut scratch = CellScratch::new(hidden);
    let mut h = vec![0.0; hidden];
    let tw = TransposedLayer::new(w);
    tw.step(x_t.data(), h_prev.data(), &mut scratch, &mut h);
    Tensor::from_vec(h)
}

/// Transposed copies of a layer's matrices so that the inner loops of the
/// recurrence run over contiguous output rows.
struct TransposedLayer<'a> {
    input: usize,
    hidden: usize,
    wt: [Vec<f64>; 3],
    ut: [Vec<f64>; 3],
    w: &'a GruLayerWeights,
}

struct CellScratch {
    z: Vec<f64>,
    r: Vec<f64>,
    hh: Vec<f64>,
    rh: Vec<f64>,
}

impl CellScratch {
    fn new(hidden: usize) -> Self {
        CellScratch {
            z: vec![0.0; hidden],
            r: vec![0.0; hidden],
            hh: vec![0.0; hidden],
            rh: vec![0.0; hidden],
        }
    }
}

fn transpose_raw(t: &Tensor) -> Vec<f64> {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    out
}

/// `out += Σ_k v[k] · mt[k, :]` with `mt` laid out `len(v) × len(out)`.
#[inline]
fn acc_transposed(out: &mut [f64], mt: &[f64], v: &[f64]) {
    let n = out.len();
    for (k, &vk) in v.iter().enumerate() {
        let row = &mt[k * n..(k + 1) * n];
        for (o, &m) in out.iter_mut().zip(row) {
            *o += vk * m;
        }
    }
}

/// `out += Σ_j d[j] · m[j, :]` with `m` laid out `len(d) × len(out)`.
#[inline]
fn acc_rows(out: &mut [f64], m: &[f64], d: &[f64]) {
    acc_transposed(out, m, d)
}

/// `g[j, :] += d[j] · v` (outer-product accumulate).
#[inline]
fn acc_outer(g: &mut [f64], d: &[f64], v: &[f64]) {
    let n = v.len();
    for (j, &dj) in d.iter().enumerate() {
        if dj == 0.0 {
            continue;
        }
        let row = &mut g[j * n..(j + 1) * n];
        for (gk, &vk) in row.iter_mut().zip(v) {
            *gk += dj * vk;
        }
    }
}

impl<'a> TransposedLayer<'a> {
    fn new(w: &'a GruLayerWeights) -> Self {
        TransposedLayer {
            input: w.input(),
            hidden: w.hidden(),
            wt: [transpose_raw(&w.w_z), transpose_raw(&w.w_r), transpose_raw(&w.w_h)],
            ut: [transpose_raw(&w.u_z), transpose_raw(&w.u_r), transpose_raw(&w.u_h)],
            w,
        }
    }

    /// Fills `s.z`, `s.r`, `s.hh` and writes the new hidden state to `h_out`.
    fn step(&self, x: &[f64], h: &[f64], s: &mut CellScratch, h_out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input);
        debug_assert_eq!(h.len(), self.hidden);
        s.z.copy_from_slice(self.w.b_z.data());
        acc_transposed(&mut s.z, &self.wt[0], x);
        acc_transposed(&mut s.z, &self.ut[0], h);
        s.r.copy_from_slice(self.w.b_r.data());
        acc_transposed(&mut s.r, &self.wt[1], x);
        acc_transposed(&mut s.r, &self.ut[1], h);
        for j in 0..self.hidden {
            s.z[j] = sigmoid(s.z[j]);
            s.r[j] = sigmoid(s.r[j]);
            s.rh[j] = s.r[j] * h[j];
        }
        s.hh.copy_from_slice(self.w.b_h.data());
        acc_transposed(&mut s.hh, &self.wt[2], x);
        acc_transposed(&mut s.hh, &self.ut[2], &s.rh);
        for j in 0..self.hidden {
            s.hh[j] = s.hh[j].tanh();
            h_out[j] = (1.0 - s.z[j]) * h[j] + s.z[j] * s.hh[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub encoder: Vec<GruLayerWeights>,
    pub decoder: Vec<GruLayerWeights>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

/// Gradients share the parameter layout of the model they belong to.
pub type Gradients = SeqModel;

impl SeqModel {
    /// Uniform `[-√(1/h), √(1/h)]` weights, zero biases; deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let n_enc = config.enc_hidden.len();
        let mut layers: Vec<GruLayerWeights> = dims.iter().map(|&(i, h)| GruLayerWeights::init(i, h, &mut rng)).collect();
        let decoder = layers.split_off(n_enc);
        let h_last = config.last_hidden();
        let bound = (1.0 / h_last as f64).sqrt();
        let dense_w = Tensor::uniform(&[ModelConfig::OUTPUT_DIM, h_last], bound, &mut rng);
        Ok(SeqModel {
            config,
            encoder: layers,
            decoder,
            dense_w,
            dense_b: Tensor::zeros(&[ModelConfig::OUTPUT_DIM]),
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let n_enc = config.enc_hidden.len();
        let mut layers: Vec<GruLayerWeights> = dims.iter().map(|&(i, h)| GruLayerWeights::zeros(i, h)).collect();
        let decoder = layers.split_off(n_enc);
        let h_last = config.last_hidden();
        Ok(SeqModel {
            config,
            encoder: layers,
            decoder,
            dense_w: Tensor::zeros(&[ModelConfig::OUTPUT_DIM, h_last]),
            dense_b: Tensor::zeros(&[ModelConfig::OUTPUT_DIM]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        SeqModel::zeros(self.config.clone()).expect("config was validated at construction")
    }

    /// Checks that every tensor has the shape implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if self.encoder.len() + self.decoder.len() != dims.len() {
            return Err(Error::Config("layer count does not match config".into()));
        }
        for (layer, &(i, h)) in self.layers().zip(&dims) {
            layer.check(i, h)?;
        }
        let h_last = self.config.last_hidden();
        if self.dense_w.shape() != [ModelConfig::OUTPUT_DIM, h_last] {
            return Err(Error::shape("dense_w", self.dense_w.shape(), &[1, h_last]));
        }
        if self.dense_b.shape() != [ModelConfig::OUTPUT_DIM] {
            return Err(Error::shape("dense_b", self.dense_b.shape(), &[1]));
        }
        Ok(())
    }

    /// All GRU layers in execution order (encoder, then decoder).
    pub fn layers(&self) -> impl Iterator<Item = &GruLayerWeights> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    /// Named parameter tensors in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (li, layer) in layers.iter().enumerate() {
                for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                    out.push((format!("{prefix}{li}.{name}"), t));
                }
            }
        }
        out.push(("dense.w".to_string(), &self.dense_w));
        out.push(("dense.b".to_string(), &self.dense_b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.dense_w);
        out.push(&mut self.dense_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("load_flat", &[flat.len()], &[self.param_count()]));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.params().iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for t in self.params_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over parameter bits.
        let mut h: u64 = 0xcbf29ce484222325;
        for t in self.params() {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Runs one sequence through the network.
    pub fn forward(&self, tpsf: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (mut out, cache) = self.forward_batch(&[tpsf.data()])?;
        Ok((Tensor::from_vec(out.remove(0))?, cache))
    }

    /// Inference without keeping the activation cache.
    pub fn predict(&self, tpsf: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&[tpsf])?.0.remove(0))
    }

    pub fn predict_batch(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_batch(inputs)?.0)
    }

    /// Forward pass over a batch of equal-length sequences. Each sequence is
    /// computed independently, so results do not depend on batch composition.
    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        let t_len = self.config.seq_len;
        let batch = inputs.len();
        if batch == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        for x in inputs {
            if x.len() != t_len {
                return Err(Error::shape("forward input", &[x.len()], &[t_len]));
            }
        }
        // Time-major input buffer, input_dim = 1.
        let mut seq = vec![0.0; t_len * batch];
        for (b, x) in inputs.iter().enumerate() {
            for t in 0..t_len {
                seq[t * batch + b] = x[t];
            }
        }
        let mut in_dim = ModelConfig::INPUT_DIM;
        let mut caches = Vec::new();
        for layer in self.layers() {
            let lc = run_layer(layer, &seq, in_dim, t_len, batch);
            in_dim = layer.hidden();
            // the layer output is h[1..=T]
            seq = lc.h[batch * in_dim..].to_vec();
            caches.push(lc);
        }
        let h_last = in_dim;
        let wd = self.dense_w.data();
        let bd = self.dense_b.data()[0];
        let mut out = vec![vec![0.0; t_len]; batch];
        for t in 0..t_len {
            for (b, o) in out.iter_mut().enumerate() {
                let h = &seq[(t * batch + b) * h_last..(t * batch + b + 1) * h_last];
                let mut y = bd;
                for (w, hv) in wd.iter().zip(h) {
                    y += w * hv;
                }
                o[t] = y;
            }
        }
        let cache = ForwardCache {
            batch,
            seq_len: t_len,
            fingerprint: self.fingerprint(),
            layers: caches,
        };
        Ok((out, cache))
    }

    /// Gradient of `Σ_b Σ_t d_out[b][t] · y[b][t]` with respect to every
    /// parameter, given the cache of the matching forward call.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Tensor) -> Result<Gradients> {
        self.backward_batch(cache, &[d_out.data().to_vec()])
    }

    pub fn backward_batch(&self, cache: &ForwardCache, d_out: &[Vec<f64>]) -> Result<Gradients> {
        let t_len = self.config.seq_len;
        let batch = cache.batch;
        if cache.seq_len != t_len || cache.layers.len() != self.encoder.len() + self.decoder.len() {
            return Err(Error::Input("forward cache does not belong to this model".into()));
        }
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::Input("stale forward cache: model weights changed since forward".into()));
        }
        if d_out.len() != batch || d_out.iter().any(|d| d.len() != t_len) {
            return Err(Error::shape("backward d_out", &[d_out.len()], &[batch, t_len]));
        }
        let mut grads = self.zeros_like();
        let h_last = self.config.last_hidden();
        let top = cache.layers.last().expect("at least one layer");
        // Dense head.
        let wd = self.dense_w.data();
        let mut d_seq = vec![0.0; t_len * batch * h_last];
        {
            let gw = grads.dense_w.data_mut();
            let mut gb = 0.0;
            for t in 0..t_len {
                for (b, d) in d_out.iter().enumerate() {
                    let dy = d[t];
                    gb += dy;
                    let off = ((t + 1) * batch + b) * h_last;
                    let h = &top.h[off..off + h_last];
                    for k in 0..h_last {
                        gw[k] += dy * h[k];
                    }
                    let ds = &mut d_seq[(t * batch + b) * h_last..(t * batch + b + 1) * h_last];
                    for k in 0..h_last {
                        ds[k] = dy * wd[k];
                    }
                }
            }
            grads.dense_b.data_mut()[0] = gb;
        }
        let layers: Vec<&GruLayerWeights> = self.layers().collect();
        let n_enc = self.encoder.len();
        for li in (0..layers.len()).rev() {
            let layer = layers[li];
            let lc = &cache.layers[li];
            let g = if li < n_enc {
                &mut grads.encoder[li]
            } else {
                &mut grads.decoder[li - n_enc]
            };
            d_seq = backprop_layer(layer, lc, &d_seq, t_len, batch, g, li > 0);
        }
        Ok(grads)
    }
}

/// Activations of one layer over a batch, time-major.
#[derive(Debug, Clone)]
struct LayerCache {
    in_dim: usize,
    hidden: usize,
    /// `T × B × in`
    input: Vec<f64>,
    /// `(T + 1) × B × h`; slot 0 holds the zero initial state.
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    hh: Vec<f64>,
}

/// Activations retained by [`SeqModel::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    seq_len: usize,
    fingerprint: u64,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn run_layer(layer: &GruLayerWeights, input: &[f64], in_dim: usize, t_len: usize, batch: usize) -> LayerCache {
    let hidden = layer.hidden();
    let tl = TransposedLayer::new(layer);
    let mut h = vec![0.0; (t_len + 1) * batch * hidden];
    let mut z = vec![0.0; t_len * batch * hidden];
    let mut r = vec![0.0; t_len * batch * hidden];
    let mut hh = vec![0.0; t_len * batch * hidden];
    let mut s = CellScratch::new(hidden);
    let mut h_new = vec![0.0; hidden];
    for t in 0..t_len {
        for b in 0..batch {
            let x = &input[(t * batch + b) * in_dim..(t * batch + b + 1) * in_dim];
            let prev_off = (t * batch + b) * hidden;
            tl.step(x, &h[prev_off..prev_off + hidden], &mut s, &mut h_new);
            let cur_off = ((t + 1) * batch + b) * hidden;
            h[cur_off..cur_off + hidden].copy_from_slice(&h_new);
            let o = (t * batch + b) * hidden;
            z[o..o + hidden].copy_from_slice(&s.z);
            r[o..o + hidden].copy_from_slice(&s.r);
            hh[o..o + hidden].copy_from_slice(&s.hh);
        }
    }
    LayerCache {
        in_dim,
        hidden,
        input: input.to_vec(),
        h,
        z,
        r,
        hh,
    }
}

/// Backpropagates `d_out` (`T × B × h`, gradient w.r.t. this layer's output
/// sequence) through one layer, accumulating weight gradients into `g` and
/// returning the gradient w.r.t. the layer input when `need_input` is set.
fn backprop_layer(
    w: &GruLayerWeights,
    lc: &LayerCache,
    d_out: &[f64],
    t_len: usize,
    batch: usize,
    g: &mut GruLayerWeights,
    need_input: bool,
) -> Vec<f64> {
    let (hd, id) = (lc.hidden, lc.in_dim);
    let mut d_in = if need_input {
        vec![0.0; t_len * batch * id]
    } else {
        Vec::new()
    };
    let mut carry = vec![0.0; batch * hd];
    let mut dh = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    let mut da_r = vec![0.0; hd];
    let mut da_h = vec![0.0; hd];
    let mut d_rh = vec![0.0; hd];
    let mut rh = vec![0.0; hd];
    let mut dprev = vec![0.0; hd];
    let (uz, ur, uh) = (w.u_z.data(), w.u_r.data(), w.u_h.data());
    let (wz, wr, wh) = (w.w_z.data(), w.w_r.data(), w.w_h.data());
    for t in (0..t_len).rev() {
        for b in 0..batch {
            let o = (t * batch + b) * hd;
            let h_prev = &lc.h[o..o + hd];
            let z = &lc.z[o..o + hd];
            let r = &lc.r[o..o + hd];
            let hh = &lc.hh[o..o + hd];
            let x = &lc.input[(t * batch + b) * id..(t * batch + b + 1) * id];
            let c = &mut carry[b * hd..(b + 1) * hd];
            for j in 0..hd {
                dh[j] = d_out[o + j] + c[j];
                da_z[j] = dh[j] * (hh[j] - h_prev[j]) * z[j] * (1.0 - z[j]);
                da_h[j] = dh[j] * z[j] * (1.0 - hh[j] * hh[j]);
                dprev[j] = dh[j] * (1.0 - z[j]);
                rh[j] = r[j] * h_prev[j];
                d_rh[j] = 0.0;
            }
            // candidate path
            acc_outer(g.w_h.data_mut(), &da_h, x);
            acc_outer(g.u_h.data_mut(), &da_h, &rh);
            acc_rows(&mut d_rh, uh, &da_h);
            for j in 0..hd {
                da_r[j] = d_rh[j] * h_prev[j] * r[j] * (1.0 - r[j]);
                dprev[j] += d_rh[j] * r[j];
            }
            acc_outer(g.w_z.data_mut(), &da_z, x);
            acc_outer(g.u_z.data_mut(), &da_z, h_prev);
            acc_outer(g.w_r.data_mut(), &da_r, x);
            acc_outer(g.u_r.data_mut(), &da_r, h_prev);
            for (bj, d) in g.b_z.data_mut().iter_mut().zip(&da_z) {
                *bj += d;
            }
            for (bj, d) in g.b_r.data_mut().iter_mut().zip(&da_r) {
                *bj += d;
            }
            for (bj, d) in g.b_h.data_mut().iter_mut().zip(&da_h) {
                *bj += d;
            }
            acc_rows(&mut dprev, uz, &da_z);
            acc_rows(&mut dprev, ur, &da_r);
            c.copy_from_slice(&dprev);
            if need_input {
                let dx = &mut d_in[(t * batch + b) * id..(t * batch + b + 1) * id];
                acc_rows(dx, wz, &da_z);
                acc_rows(dx, wr, &da_r);
                acc_rows(dx, wh, &da_h);
            }
        }
    }
    d_in
}
