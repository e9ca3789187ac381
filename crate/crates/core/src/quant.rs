//! Quantization-aware training primitives.
//!
//! Weights are mapped to symmetric signed levels
//! `k ∈ [-(2^(N-1) - 1), 2^(N-1) - 1]` scaled by `s_w = max|w| / (2^(N-1) - 1)`,
//! using stochastic rounding in the forward pass and a straight-through
//! gradient in the backward pass.
//!
//! The levels stand in for programmed RRAM conductance states. For 3-bit
//! synapses the programming targets are one high-resistance state and seven
//! partial-SET low-resistance states reached with 10 µs current pulses:
//!
//! | state | pulse amplitude |
//! |-------|-----------------|
//! | HRS   | 10 µA           |
//! | LRS1  | 50 µA           |
//! | LRS2  | 80 µA           |
//! | LRS3  | 110 µA          |
//! | LRS4  | 140 µA          |
//! | LRS5  | 180 µA          |
//! | LRS6  | 230 µA          |
//! | LRS7  | 300 µA          |
//!
//! Device physics is not simulated; the optional read noise perturbs each
//! read around its level while keeping adjacent levels apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{self, Tape, Value};

/// Relative slack on the clamp range, so that `max|w| / s_w` landing one ulp
/// above the top level does not count as saturated.
const CLAMP_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit width must be at least 2, got {0}")]
    BadBits(u32),
    #[error("read noise sigma {sigma} must be below half the level gap")]
    NoiseTooLarge { sigma: f64 },
    #[error("cannot quantize an empty tensor")]
    Empty,
    #[error(transparent)]
    Tape(#[from] tape::TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Stochastic,
    Nearest,
}

/// How the scale is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// `max|w| / (2^(N-1) - 1)`, recomputed at every quantization.
    #[default]
    MaxAbs,
    /// A fixed scale; values beyond the top level saturate.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantSpec {
    /// Bit width; `None` means full precision.
    pub n_bits: Option<u32>,
    pub rounding: Rounding,
    pub scale: ScaleMode,
    /// Zero the straight-through gradient where the input saturated.
    pub ste_clip: bool,
    /// Read noise standard deviation, in units of one level gap.
    pub read_noise_sigma: f64,
    pub seed: u64,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            n_bits: None,
            rounding: Rounding::Stochastic,
            scale: ScaleMode::MaxAbs,
            ste_clip: true,
            read_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl QuantSpec {
    pub fn full_precision() -> Self {
        Self::default()
    }

    pub fn bits(n: u32) -> Self {
        QuantSpec {
            n_bits: Some(n),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if let Some(n) = self.n_bits {
            if !(2..=32).contains(&n) {
                return Err(QuantError::BadBits(n));
            }
        }
        if !(self.read_noise_sigma >= 0.0 && self.read_noise_sigma < 0.5) {
            return Err(QuantError::NoiseTooLarge {
                sigma: self.read_noise_sigma,
            });
        }
        Ok(())
    }

    /// Short label used in tables: `FP`, `8`, `4`, `3`.
    pub fn label(&self) -> String {
        match self.n_bits {
            None => "FP".into(),
            Some(n) => n.to_string(),
        }
    }
}

/// Largest level index for `n_bits`: `2^(N-1) - 1`.
pub fn max_level(n_bits: u32) -> i64 {
    (1i64 << (n_bits - 1)) - 1
}

/// `max|w| / (2^(N-1) - 1)`, or 1 for an all-zero tensor.
pub fn scale(w: &[f64], n_bits: u32) -> f64 {
    let m = max_abs(w);
    if m == 0.0 {
        1.0
    } else {
        m / max_level(n_bits) as f64
    }
}

fn max_abs(w: &[f64]) -> f64 {
    w.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Counter-based random stream: a seed plus a stream id select an
/// independent ChaCha sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rounds up with probability `frac(x)`, so `E[sround(x)] = x`.
pub fn sround<R: Rng + ?Sized>(x: f64, rng: &mut R) -> i64 {
    let fl = x.floor();
    let frac = x - fl;
    let up = frac > 0.0 && rng.random::<f64>() < frac;
    fl as i64 + i64::from(up)
}

/// Result of quantizing a tensor.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Re-scaled forward value (physical weight magnitudes).
    pub value: Value,
    pub levels: Vec<i64>,
    pub scale: f64,
}

/// Quantizes `w` on the tape with a straight-through gradient.
///
/// Forward: `clamp(sround(w / s_w)) · s_w` (plus read noise when
/// configured). Backward: identity, zeroed where `|w / s_w|` exceeded the
/// top level if `ste_clip` is set. A full-precision spec is the identity.
pub fn quantize_ste<R: Rng + ?Sized>(
    tape: &mut Tape,
    w: &Value,
    spec: &QuantSpec,
    rng: &mut R,
) -> Result<Quantized, QuantError> {
    spec.validate()?;
    let Some(n) = spec.n_bits else {
        return Ok(Quantized {
            value: w.clone(),
            levels: Vec::new(),
            scale: 1.0,
        });
    };
    if w.is_empty() {
        return Err(QuantError::Empty);
    }
    let top = max_level(n);
    let m = max_abs(w.data());
    let (s, top_value) = match spec.scale {
        ScaleMode::MaxAbs if m == 0.0 => (1.0, top as f64),
        ScaleMode::MaxAbs => (m / top as f64, m),
        ScaleMode::Fixed(s) => (s, top as f64 * s),
    };
    let limit = top as f64 * (1.0 + CLAMP_SLACK);
    let mut levels = Vec::with_capacity(w.len());
    let mut values = Vec::with_capacity(w.len());
    let mut derivs = Vec::with_capacity(w.len());
    for &x in w.data() {
        let scaled = x / s;
        let k = match spec.rounding {
            Rounding::Stochastic => sround(scaled, rng),
            Rounding::Nearest => scaled.round() as i64,
        }
        .clamp(-top, top);
        levels.push(k);
        let v = if k.abs() == top {
            top_value.copysign(k as f64)
        } else {
            k as f64 * s
        };
        values.push(v);
        let saturated = scaled.abs() > limit;
        derivs.push(if saturated && spec.ste_clip { 0.0 } else { 1.0 });
    }
    if spec.read_noise_sigma > 0.0 {
        let noise = read_noise(levels.len(), spec.read_noise_sigma, rng)?;
        for (v, e) in values.iter_mut().zip(noise) {
            *v += e * s;
        }
    }
    let value = tape.elementwise("quantize_ste", w, values, derivs)?;
    Ok(Quantized {
        value,
        levels,
        scale: s,
    })
}

fn read_noise<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>, QuantError> {
    if !(sigma >= 0.0 && sigma < 0.5) {
        return Err(QuantError::NoiseTooLarge { sigma });
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    Ok((0..n)
        .map(|_| loop {
            let e: f64 = normal.sample(rng);
            if e.abs() < 0.5 {
                break e;
            }
        })
        .collect())
}

/// One noisy read of programmed levels: `(k + ε) · s_w` with
/// `ε ~ N(0, σ)` truncated to half a level gap.
pub fn apply_read_noise<R: Rng + ?Sized>(
    levels: &[i64],
    scale: f64,
    spec: &QuantSpec,
    rng: &mut R,
) -> Result<Vec<f64>, QuantError> {
    let noise = read_noise(levels.len(), spec.read_noise_sigma, rng)?;
    Ok(levels
        .iter()
        .zip(noise)
        .map(|(&k, e)| (k as f64 + e) * scale)
        .collect())
}

/// Deployment record of a quantized weight matrix: the signed level
/// indices to program, the scale and the bit width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedExport {
    pub n_bits: u32,
    pub scale: f64,
    pub rows: usize,
    pub cols: usize,
    pub levels: Vec<i64>,
}

impl QuantizedExport {
    /// Deterministic (nearest-level) export of a trained matrix.
    pub fn from_weights(w: &[f64], rows: usize, cols: usize, n_bits: u32) -> Self {
        let top = max_level(n_bits);
        let s = scale(w, n_bits);
        let levels = w
            .iter()
            .map(|&x| ((x / s).round() as i64).clamp(-top, top))
            .collect();
        QuantizedExport {
            n_bits,
            scale: s,
            rows,
            cols,
            levels,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.levels.iter().map(|&k| k as f64 * self.scale).collect()
    }
}
