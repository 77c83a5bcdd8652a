//! Learnable-step fake quantization.
//!
//! Every quantized layer carries one [`PrecisionParam`]: a continuous `beta`
//! whose rounded product with the precision range `n` gives the layer's bit
//! width. The step size is `range / (2^bits - 1)` and values are snapped onto
//! the affine grid `z + s * k`, `k = 0..2^bits`, with `z = min(x)`.
//!
//! Gradients use the straight-through construction: the data path sees an
//! identity (masked to the representable range) and `beta` receives the
//! learned-step-size residual `r - v` chained through `ds/dbeta`, which is
//! taken on the continuous surrogate `beta * n` so it never vanishes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bit widths at or above this are treated as full precision.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Floor applied to the dynamic range of weights and activations.
pub const MIN_RANGE: f64 = 1e-8;

/// Floor applied to the dynamic range of gradients.
pub const MIN_GRAD_RANGE: f64 = 1e-12;

// Normalized values this close past either end of the grid still count as in
// range; (max - min) / s can overshoot 2^bits - 1 by a few ulps.
const RANGE_TOLERANCE: f64 = 1e-6;

// A gradient whose normalized value is this close to an integer is on the grid.
const GRID_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionParam {
    pub layer_id: usize,
    pub beta: f64,
    pub n: u32,
    pub b_min: u32,
    pub b_max: u32,
    pub lr_beta: f64,
}

impl PrecisionParam {
    /// Starts at the highest precision (`beta = b_max / n`).
    pub fn new(layer_id: usize, n: u32, b_min: u32, b_max: u32, lr_beta: f64) -> Result<Self> {
        if n == 0 || n > FULL_PRECISION_BITS {
            return Err(Error::config("n", format!("must be in 1..=32, got {n}")));
        }
        if b_min < 2 {
            return Err(Error::config(
                "b_min",
                format!("must be at least 2, got {b_min}"),
            ));
        }
        if b_max != n {
            return Err(Error::config(
                "b_max",
                format!("must equal n ({n}), got {b_max}"),
            ));
        }
        if b_min > b_max {
            return Err(Error::config(
                "b_min",
                format!("{b_min} exceeds b_max {b_max}"),
            ));
        }
        Ok(PrecisionParam {
            layer_id,
            beta: b_max as f64 / n as f64,
            n,
            b_min,
            b_max,
            lr_beta,
        })
    }

    pub fn beta_min(&self) -> f64 {
        self.b_min as f64 / self.n as f64
    }

    pub fn beta_max(&self) -> f64 {
        self.b_max as f64 / self.n as f64
    }

    /// Sets `beta`, projected onto `[b_min / n, b_max / n]`.
    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta.clamp(self.beta_min(), self.beta_max());
    }

    pub fn bits(&self) -> u32 {
        bits_of(self)
    }
}

/// `Round(beta * n)` clamped to `[b_min, b_max]`, ties away from zero.
pub fn bits_of(p: &PrecisionParam) -> u32 {
    let raw = (p.beta * p.n as f64).round();
    (raw.max(0.0) as u32).clamp(p.b_min, p.b_max)
}

fn levels(bits: u32) -> f64 {
    2f64.powi(bits as i32) - 1.0
}

/// Step size at the current bit width and its derivative with respect to
/// `beta` on the smooth surrogate `b = beta * n`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn step_size(p: &PrecisionParam, r_range: f64) -> Result<(f64, f64)> {
    if !(r_range > 0.0) {
        return Err(Error::Range(r_range));
    }
    let s = r_range / levels(bits_of(p));
    Ok((s, step_size_slope(p, r_range)))
}

fn step_size_slope(p: &PrecisionParam, r_range: f64) -> f64 {
    let n = p.n as f64;
    let pow = 2f64.powf(p.beta * n);
    -r_range * n * std::f64::consts::LN_2 * pow / ((pow - 1.0) * (pow - 1.0))
}

/// Everything `fake_quantize_backward` needs from the forward pass.
#[derive(Clone, Debug)]
pub struct QuantCache {
    pub shape: Vec<usize>,
    pub bits: u32,
    /// Normalized values `(x - z) / s`.
    pub v: Vec<f64>,
    /// Integer levels `Round(clamp(v, 0, 2^bits - 1))`.
    pub r: Vec<u32>,
    pub s: f64,
    pub z: f64,
    pub in_range: Vec<bool>,
    pub ds_dbeta: f64,
}

impl QuantCache {
    /// Full-precision passthrough: nothing was rounded.
    pub fn is_bypass(&self) -> bool {
        self.bits >= FULL_PRECISION_BITS
    }
}

/// Fake-quantizes with the learnable precision `p`; the cache records
/// `ds/dbeta` so the backward pass can produce a `beta` gradient.
pub fn fake_quantize(x: &Tensor, p: &PrecisionParam) -> Result<(Tensor, QuantCache)> {
    let (z, r_range) = dynamic_grid(x)?;
    let bits = bits_of(p);
    if bits >= FULL_PRECISION_BITS {
        return Ok(fake_quantize_with(x, 0.0, z, bits));
    }
    let (s, ds_dbeta) = step_size(p, r_range)?;
    let (out, mut cache) = fake_quantize_with(x, s, z, bits);
    cache.ds_dbeta = ds_dbeta;
    Ok((out, cache))
}

/// Fake-quantizes at a fixed bit width with a per-tensor min/max grid.
/// The resulting cache carries no `beta` sensitivity.
pub fn fake_quantize_bits(x: &Tensor, bits: u32) -> Result<(Tensor, QuantCache)> {
    let (z, r_range) = dynamic_grid(x)?;
    let s = if bits >= FULL_PRECISION_BITS {
        0.0
    } else {
        r_range / levels(bits)
    };
    Ok(fake_quantize_with(x, s, z, bits))
}

/// Zero point `min(x)` and floored dynamic range `max(x) - min(x)`.
fn dynamic_grid(x: &Tensor) -> Result<(f64, f64)> {
    let (lo, hi) = x.min_max().ok_or(Error::Empty("fake_quantize"))?;
    let z = lo as f64;
    Ok((z, (hi as f64 - z).max(MIN_RANGE)))
}

/// Fake-quantizes onto a caller-supplied grid `(s, z)`.
pub fn fake_quantize_with(x: &Tensor, s: f64, z: f64, bits: u32) -> (Tensor, QuantCache) {
    if bits >= FULL_PRECISION_BITS {
        let cache = QuantCache {
            shape: x.shape().to_vec(),
            bits,
            v: Vec::new(),
            r: Vec::new(),
            s,
            z,
            in_range: Vec::new(),
            ds_dbeta: 0.0,
        };
        return (x.clone(), cache);
    }
    let qmax = levels(bits);
    let n = x.numel();
    let mut v = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut in_range = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for &xi in x.data() {
        let vi = (xi as f64 - z) / s;
        let ri = vi.clamp(0.0, qmax).round();
        v.push(vi);
        r.push(ri as u32);
        in_range.push(vi >= -RANGE_TOLERANCE && vi <= qmax + RANGE_TOLERANCE);
        out.push((s * ri + z) as f32);
    }
    let cache = QuantCache {
        shape: x.shape().to_vec(),
        bits,
        v,
        r,
        s,
        z,
        in_range,
        ds_dbeta: 0.0,
    };
    let out = Tensor::new(x.shape().to_vec(), out).expect("shape preserved");
    (out, cache)
}

/// Straight-through backward: returns the input gradient and the `beta`
/// gradient contributed by this quantization site.
pub fn fake_quantize_backward(upstream: &Tensor, cache: &QuantCache) -> Result<(Tensor, f64)> {
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::Dimension {
            op: "fake_quantize_backward",
            lhs: upstream.shape().to_vec(),
            rhs: cache.shape.clone(),
        });
    }
    if cache.is_bypass() {
        return Ok((upstream.clone(), 0.0));
    }
    let qmax = levels(cache.bits);
    let mut dx = Vec::with_capacity(upstream.numel());
    let mut sensitivity = 0.0f64;
    for (i, &g) in upstream.data().iter().enumerate() {
        let vi = cache.v[i];
        let ds_elem = if cache.in_range[i] {
            cache.r[i] as f64 - vi
        } else if vi < 0.0 {
            0.0
        } else {
            qmax
        };
        dx.push(if cache.in_range[i] { g } else { 0.0 });
        sensitivity += g as f64 * ds_elem;
    }
    let dx = Tensor::new(cache.shape.clone(), dx)?;
    Ok((dx, sensitivity * cache.ds_dbeta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradQuantSpec {
    pub bits: u32,
    pub rng_seed: u64,
}

impl GradQuantSpec {
    pub fn new(bits: u32, rng_seed: u64) -> Result<Self> {
        if bits < 2 {
            return Err(Error::config(
                "bw_bits",
                format!("must be at least 2, got {bits}"),
            ));
        }
        Ok(GradQuantSpec { bits, rng_seed })
    }
}

/// Rounds `v` down with probability `1 - frac(v)`, otherwise up.
pub fn stochastic_round<R: Rng + ?Sized>(v: f64, rng: &mut R) -> f64 {
    let lo = v.floor();
    let frac = v - lo;
    if frac > 0.0 && rng.gen::<f64>() < frac {
        lo + 1.0
    } else {
        lo
    }
}

/// Stochastically rounds a gradient onto its per-tensor min/max grid with
/// `2^bits` levels. Elements already on the grid are returned untouched.
pub fn quantize_gradient<R: Rng + ?Sized>(g: &Tensor, bits: u32, rng: &mut R) -> Result<Tensor> {
    let (lo, hi) = g.min_max().ok_or(Error::Empty("quantize_gradient"))?;
    if bits >= FULL_PRECISION_BITS {
        return Ok(g.clone());
    }
    let qmax = levels(bits);
    let z = lo as f64;
    let s = (hi as f64 - z).max(MIN_GRAD_RANGE) / qmax;
    let data = g
        .data()
        .iter()
        .map(|&gi| {
            let v = (gi as f64 - z) / s;
            if (v - v.round()).abs() <= GRID_TOLERANCE {
                gi
            } else {
                let level = stochastic_round(v, rng).clamp(0.0, qmax);
                (z + s * level) as f32
            }
        })
        .collect();
    Tensor::new(g.shape().to_vec(), data)
}

/// Plain SGD on `beta` followed by projection onto `[b_min / n, b_max / n]`.
pub fn beta_sgd_step(p: &mut PrecisionParam, g_total: f64) {
    let next = p.beta - p.lr_beta * g_total;
    p.set_beta(next);
}
