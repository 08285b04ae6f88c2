//! Integer kernels of the fixed-point datapath. Products accumulate in 32
//! bits and are rescaled with a multiplier/shift pair; nonlinearities are
//! table lookups.

use serde::{Deserialize, Serialize};

use super::{Bits, QuantizedTensor};
use crate::error::{Error, Result};

/// Real factor `multiplier · 2^−(31 + shift)` with `multiplier` in
/// `[2^30, 2^31)`. Negative shifts encode factors of one or more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub multiplier: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(Error::Config(format!("cannot encode rescale factor {ratio}")));
        }
        // ratio = frac · 2^exp with frac in [0.5, 1)
        let mut exp = ratio.log2().floor() as i32 + 1;
        let mut frac = ratio / 2f64.powi(exp);
        if frac >= 1.0 {
            frac /= 2.0;
            exp += 1;
        } else if frac < 0.5 {
            frac *= 2.0;
            exp -= 1;
        }
        let mut m = (frac * 2f64.powi(31)).round() as i64;
        if m == 1 << 31 {
            m >>= 1;
            exp += 1;
        }
        let shift = -exp;
        if !(-31..=62).contains(&shift) {
            return Err(Error::Config(format!("rescale factor {ratio} outside the fixed-point range")));
        }
        Ok(FixedMultiplier {
            multiplier: m as i32,
            shift,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-(31 + self.shift))
    }

    /// `round(x · ratio)`, ties away from zero, exact in 128-bit integers.
    #[inline]
    pub fn apply(&self, x: i64) -> i64 {
        let total = (31 + self.shift) as u32;
        let prod = x as i128 * self.multiplier as i128;
        round_shift(prod, total) as i64
    }
}

/// `round(v / 2^n)` with ties away from zero.
#[inline]
pub(crate) fn round_shift(v: i128, n: u32) -> i128 {
    if n == 0 {
        return v;
    }
    let half = 1i128 << (n - 1);
    if v >= 0 {
        (v + half) >> n
    } else {
        -((-v + half) >> n)
    }
}

#[inline]
pub(crate) fn clamp_bits(v: i64, bits: Bits) -> i32 {
    let m = bits.qmax() as i64;
    v.clamp(-m, m) as i32
}

/// Rescales a 32-bit accumulator onto an output grid:
/// `clamp(round(acc · multiplier · 2^−(31 + shift)))`, saturating at the
/// signed range of `bits`.
pub fn requantize(acc: i32, multiplier: i32, shift: u32, bits: Bits) -> i32 {
    let prod = acc as i128 * multiplier as i128;
    clamp_bits(round_shift(prod, 31 + shift) as i64, bits)
}

/// Exact integer matrix-vector product with 32-bit accumulators summed in
/// ascending column order.
pub fn int_matvec(w: &QuantizedTensor, x: &[i32]) -> Result<Vec<i32>> {
    let (rows, cols) = (w.rows(), w.cols());
    if x.len() != cols {
        return Err(Error::shape("int_matvec", &w.shape, &[x.len()]));
    }
    let wmax = w.q.iter().map(|v| v.unsigned_abs() as u64).max().unwrap_or(0);
    let xmax = x.iter().map(|v| v.unsigned_abs() as u64).max().unwrap_or(0);
    check_accumulator(cols, wmax, xmax)?;
    let mut out = vec![0; rows];
    matvec_i32(&w.q, cols, x, &mut out);
    Ok(out)
}

pub(crate) fn check_accumulator(k: usize, wmax: u64, xmax: u64) -> Result<()> {
    if (k as u64).saturating_mul(wmax).saturating_mul(xmax) >= 1 << 31 {
        return Err(Error::Config(format!(
            "32-bit accumulator may overflow: {k} terms of |w| ≤ {wmax}, |x| ≤ {xmax}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn matvec_i32(w: &[i32], cols: usize, x: &[i32], out: &mut [i32]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0i32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

pub const LUT_ENTRIES: usize = 1024;
/// Tables cover real inputs in `[−LUT_RANGE, LUT_RANGE]`.
pub const LUT_RANGE: f64 = 8.0;
const FRAC_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LutKind {
    Sigmoid,
    Tanh,
}

impl LutKind {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            LutKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            LutKind::Tanh => x.tanh(),
        }
    }
}

/// Uniform table of `f(x_i)`, `x_i = −8 + i·16/1023`, stored on an integer
/// output grid. Lookups interpolate linearly between neighbouring entries
/// in fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lut {
    pub kind: LutKind,
    pub out_scale: f32,
    pub out_bits: Bits,
    pub table: Vec<i32>,
}

impl Lut {
    /// Output grid used inside the engine: 16-bit with scale 2^−15.
    pub const Q15_SCALE: f32 = 1.0 / 32768.0;

    pub fn new(kind: LutKind, out_scale: f32, out_bits: Bits) -> Self {
        let table = (0..LUT_ENTRIES)
            .map(|i| {
                let x = Self::entry_input(i);
                let q = (kind.eval(x) / out_scale as f64).round_ties_even() as i64;
                clamp_bits(q, out_bits)
            })
            .collect();
        Lut {
            kind,
            out_scale,
            out_bits,
            table,
        }
    }

    pub fn q15(kind: LutKind) -> Self {
        Lut::new(kind, Self::Q15_SCALE, Bits::Sixteen)
    }

    pub fn step() -> f64 {
        2.0 * LUT_RANGE / (LUT_ENTRIES - 1) as f64
    }

    pub fn entry_input(i: usize) -> f64 {
        -LUT_RANGE + i as f64 * Self::step()
    }

    /// Maps an input code at `in_scale` to a table position with 16
    /// fractional bits.
    pub fn position_multiplier(in_scale: f32) -> Result<FixedMultiplier> {
        FixedMultiplier::from_ratio(in_scale as f64 / Self::step() * (1u64 << FRAC_BITS) as f64)
    }

    #[inline]
    pub fn lookup(&self, qx: i32, pos: &FixedMultiplier) -> i32 {
        // (x + 8) / step, with the offset 511.5 expressed in 16.16 fixed point
        let offset = ((LUT_ENTRIES as i64 - 1) << FRAC_BITS) / 2;
        let max_pos = ((LUT_ENTRIES - 1) as i64) << FRAC_BITS;
        let p = (pos.apply(qx as i64) + offset).clamp(0, max_pos);
        let idx = ((p >> FRAC_BITS) as usize).min(LUT_ENTRIES - 2);
        let frac = p - ((idx as i64) << FRAC_BITS);
        let lo = self.table[idx] as i64;
        let hi = self.table[idx + 1] as i64;
        let v = lo + round_shift(((hi - lo) * frac) as i128, FRAC_BITS) as i64;
        clamp_bits(v, self.out_bits)
    }
}

/// Applies a table nonlinearity to an integer code at `in_scale`, returning
/// a code on the table's output grid.
pub fn lut_activation(lut: &Lut, qx: i32, in_scale: f32) -> Result<i32> {
    let pos = Lut::position_multiplier(in_scale)?;
    Ok(lut.lookup(qx, &pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multiplier_precision() {
        for &r in &[0.05, 1e-7, 0.999_999, 0.5, 3.7, 1234.5, 2f64.powi(-20)] {
            let m = FixedMultiplier::from_ratio(r).unwrap();
            assert!(m.multiplier >= 1 << 30);
            assert!(((m.ratio() - r) / r).abs() < 2f64.powi(-24), "{r}");
        }
        assert!(FixedMultiplier::from_ratio(0.0).is_err());
        assert!(FixedMultiplier::from_ratio(-1.0).is_err());
    }

    #[test]
    fn requantize_cases() {
        let m = FixedMultiplier::from_ratio(0.05).unwrap();
        let shift = m.shift as u32;
        assert_eq!(requantize(0, m.multiplier, shift, Bits::Eight), 0);
        assert_eq!(requantize(100, m.multiplier, shift, Bits::Eight), 5);
        assert_eq!(requantize(-100, m.multiplier, shift, Bits::Eight), -5);
        // exact ties: 2 · 0.25 = 0.5 rounds away from zero
        let q = FixedMultiplier::from_ratio(0.25).unwrap();
        assert_eq!(requantize(2, q.multiplier, q.shift as u32, Bits::Eight), 1);
        assert_eq!(requantize(-2, q.multiplier, q.shift as u32, Bits::Eight), -1);
        assert_eq!(requantize(6, q.multiplier, q.shift as u32, Bits::Eight), 2);
        assert_eq!(requantize(1_000_000, m.multiplier, shift, Bits::Eight), 127);
        assert_eq!(requantize(-1_000_000, m.multiplier, shift, Bits::Eight), -127);
        assert_eq!(requantize(1_000_000, m.multiplier, shift, Bits::Sixteen), 32767);
    }

    #[test]
    fn requantize_matches_exact_rational_oracle() {
        // exact oracle: round(acc · m / 2^(31+s)) by integer long division
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let acc: i32 = rng.gen_range(-5_000_000..5_000_000);
            let r: f64 = rng.gen_range(1e-6..0.9);
            let m = FixedMultiplier::from_ratio(r).unwrap();
            let num = acc as i128 * m.multiplier as i128;
            let den = 1i128 << (31 + m.shift);
            let q = num / den;
            let rem = (num % den).abs();
            let exact = if 2 * rem >= den { q + num.signum() } else { q };
            let expected = exact.clamp(-32767, 32767) as i32;
            assert_eq!(requantize(acc, m.multiplier, m.shift as u32, Bits::Sixteen), expected);
        }
    }

    #[test]
    fn matvec_cases() {
        let w = QuantizedTensor::new(vec![1, 2], vec![4, 5], 1.0, Bits::Eight).unwrap();
        assert_eq!(int_matvec(&w, &[2, -3]).unwrap(), vec![-7]);
        assert_eq!(int_matvec(&w, &[0, 0]).unwrap(), vec![0]);
        assert!(int_matvec(&w, &[1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q: Vec<i32> = (0..25).map(|_| rng.gen_range(-127..=127)).collect();
        let x: Vec<i32> = (0..5).map(|_| rng.gen_range(-127..=127)).collect();
        let w = QuantizedTensor::new(vec![5, 5], q.clone(), 0.1, Bits::Eight).unwrap();
        let got = int_matvec(&w, &x).unwrap();
        for i in 0..5 {
            let wide: i64 = (0..5).map(|k| q[i * 5 + k] as i64 * x[k] as i64).sum();
            assert_eq!(got[i] as i64, wide);
        }
    }

    #[test]
    fn matvec_rejects_overflowing_configuration() {
        let w = QuantizedTensor::new(vec![1, 4], vec![32767; 4], 1.0, Bits::Sixteen).unwrap();
        assert!(int_matvec(&w, &[32767; 4]).is_err());
        assert!(int_matvec(&w, &[127; 4]).is_ok());
    }

    #[test]
    fn lut_fixed_points() {
        let sig = Lut::q15(LutKind::Sigmoid);
        let tanh = Lut::q15(LutKind::Tanh);
        let s = 8.0 / 32767.0;
        assert!((lut_activation(&sig, 0, s).unwrap() - 16384).abs() <= 1);
        assert_eq!(lut_activation(&tanh, 0, s).unwrap(), 0);
        let sig8 = Lut::new(LutKind::Sigmoid, 1.0 / 127.0, Bits::Eight);
        let v = lut_activation(&sig8, 0, 0.01).unwrap() as f64 / 127.0;
        assert!((v - 0.5).abs() <= 1.0 / 127.0);
    }

    #[test]
    fn lut_dense_sweep_error() {
        for kind in [LutKind::Sigmoid, LutKind::Tanh] {
            let lut = Lut::q15(kind);
            let in_scale = 10.0f32 / 32767.0;
            let pos = Lut::position_multiplier(in_scale).unwrap();
            let mut worst = 0.0f64;
            for i in 0..10_000 {
                let x = -10.0 + 20.0 * i as f64 / 9_999.0;
                let q = (x / in_scale as f64).round() as i32;
                let y = lut.lookup(q, &pos) as f64 * lut.out_scale as f64;
                worst = worst.max((y - kind.eval(x)).abs());
            }
            assert!(worst <= 0.002, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn lut_saturates_outside_range() {
        let lut = Lut::q15(LutKind::Tanh);
        let s = 1.0 / 32767.0 * 20.0;
        assert_eq!(lut_activation(&lut, 32767, s).unwrap(), lut.table[LUT_ENTRIES - 1]);
        assert_eq!(lut_activation(&lut, -32767, s).unwrap(), lut.table[0]);
    }
}
