//! Normalize, discretize, denormalize.
//!
//! Activations map to `[0, 1]` by `clip(x / v_x, 0, 1)` and weights by
//! `(clip(w / v_w, -1, 1) + 1) / 2`. The normalized value is snapped to the
//! grid `s * round(z / s)` with `s = 1 / (2^k - 1)` and
//! `round(x) = ceil(x - 0.5)`, so exact midpoints go to the lower code.
//!
//! Graph versions pass gradients straight through the rounding and through
//! the clip only inside the range. The interval receives gradient from the
//! denormalizing factor and from the unclipped division, never from the clip
//! boundary indicator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{register_custom_grad, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Widest rung a ladder may hold.
pub const MAX_LADDER_BITS: u32 = 8;
/// Most rungs a ladder may hold.
pub const MAX_LADDER_RUNGS: usize = 4;

// x / s lands a few ulps off an exact midpoint depending on how z was
// computed; within this band the point is treated as the midpoint so that the
// recursive and direct discretizations agree.
const MIDPOINT_TOL: f64 = 1e-10;

/// `ceil(x - 0.5)`, with near-midpoints resolved downward.
pub fn round_half_down(x: f64) -> f64 {
    (x - 0.5 - MIDPOINT_TOL).ceil() + 0.0
}

/// Normalized step size for `bits`-bit codes.
pub fn step_size(bits: u32) -> f64 {
    1.0 / ((2.0_f64).powi(bits as i32) - 1.0)
}

/// Ordered candidate bitwidths `b_1 < ... < b_K`, each rung an integer
/// multiple (at least 2x) of the previous one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct BitLadder {
    bits: Vec<u32>,
}

impl BitLadder {
    pub fn new(bits: Vec<u32>) -> Result<Self> {
        let bad = |detail: &str| Error::InvalidLadder {
            bits: bits.clone(),
            detail: detail.to_string(),
        };
        if bits.is_empty() {
            return Err(bad("empty"));
        }
        if bits.len() > MAX_LADDER_RUNGS {
            return Err(bad("too many rungs"));
        }
        if bits[0] == 0 {
            return Err(bad("bitwidths must be positive"));
        }
        if *bits.last().unwrap() > MAX_LADDER_BITS {
            return Err(bad("bitwidths above 8 are not supported"));
        }
        for w in bits.windows(2) {
            if w[1] % w[0] != 0 || w[1] / w[0] < 2 {
                return Err(bad(&format!(
                    "{} is not an integer multiple (>= 2) of {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn base(&self) -> u32 {
        self.bits[0]
    }

    pub fn top(&self) -> u32 {
        *self.bits.last().unwrap()
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| step_size(b)).collect()
    }

    /// Multipliers `gamma_j = b_j / b_{j-1}` for `j > 1`.
    pub fn multipliers(&self) -> Vec<u32> {
        self.bits.windows(2).map(|w| w[1] / w[0]).collect()
    }

    pub fn contains(&self, bits: u32) -> bool {
        self.bits.contains(&bits)
    }
}

impl Default for BitLadder {
    fn default() -> Self {
        Self {
            bits: vec![2, 4, 8],
        }
    }
}

impl TryFrom<Vec<u32>> for BitLadder {
    type Error = Error;

    fn try_from(bits: Vec<u32>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<BitLadder> for Vec<u32> {
    fn from(l: BitLadder) -> Self {
        l.bits
    }
}

/// Learnable quantization ranges for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantInterval {
    pub v_w: f64,
    pub v_x: f64,
}

impl QuantInterval {
    /// Floor applied after every update to keep both ranges positive.
    pub const MIN: f64 = 1e-6;

    /// `v_w = max|w|` so the initial clip is lossless; `v_x = 1`.
    pub fn for_weights(w: &Tensor) -> Self {
        Self {
            v_w: w.max_abs().max(Self::MIN),
            v_x: 1.0,
        }
    }

    pub fn clamp(&mut self) {
        self.v_w = self.v_w.max(Self::MIN);
        self.v_x = self.v_x.max(Self::MIN);
    }
}

fn check_interval(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            name,
            format!("interval must be positive, got {v}"),
        ))
    }
}

fn check_step(s: f64) -> Result<()> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "s",
            format!("step size must lie in (0, 1], got {s}"),
        ))
    }
}

fn check_bits(k: u32) -> Result<()> {
    if (1..=52).contains(&k) {
        Ok(())
    } else {
        Err(Error::invalid(
            "k",
            format!("bitwidth must be in 1..=52, got {k}"),
        ))
    }
}

pub fn normalize_act(x: &Tensor, v_x: f64) -> Result<Tensor> {
    check_interval("v_x", v_x)?;
    Ok(x.map(|v| (v / v_x).clamp(0.0, 1.0)))
}

pub fn normalize_wt(w: &Tensor, v_w: f64) -> Result<Tensor> {
    check_interval("v_w", v_w)?;
    Ok(w.map(|v| ((v / v_w).clamp(-1.0, 1.0) + 1.0) / 2.0))
}

/// `s * round(z / s)`. Defined for any real `z`; residuals are negative.
pub fn discretize(z: &Tensor, s: f64) -> Result<Tensor> {
    check_step(s)?;
    Ok(z.map(|v| discretize_value(v, s)))
}

pub(crate) fn discretize_value(z: f64, s: f64) -> f64 {
    s * round_half_down(z / s)
}

pub fn quantize_act(x: &Tensor, v_x: f64, k: u32) -> Result<Tensor> {
    check_bits(k)?;
    let z = normalize_act(x, v_x)?;
    let s = step_size(k);
    Ok(z.map(|v| v_x * discretize_value(v, s)))
}

pub fn quantize_wt(w: &Tensor, v_w: f64, k: u32) -> Result<Tensor> {
    check_bits(k)?;
    let z = normalize_wt(w, v_w)?;
    let s = step_size(k);
    Ok(z.map(|v| v_w * (2.0 * discretize_value(v, s) - 1.0)))
}

/// Discretization with an identity backward (straight-through).
pub fn discretize_op(s: f64) -> Result<CustomOp> {
    check_step(s)?;
    Ok(register_custom_grad(
        "discretize",
        move |xs| Ok(xs[0].map(|v| discretize_value(v, s))),
        |_, _, up| vec![up.clone()],
    ))
}

pub fn discretize_var(g: &mut Graph, z: Var, s: f64) -> Result<Var> {
    let op = discretize_op(s)?;
    g.apply(&op, &[z])
}

pub fn normalize_act_var(g: &mut Graph, x: Var, v_x: Var) -> Result<Var> {
    check_interval("v_x", g.scalar_value(v_x))?;
    let r = g.div(x, v_x)?;
    Ok(g.clip(r, 0.0, 1.0))
}

pub fn normalize_wt_var(g: &mut Graph, w: Var, v_w: Var) -> Result<Var> {
    check_interval("v_w", g.scalar_value(v_w))?;
    let r = g.div(w, v_w)?;
    let c = g.clip(r, -1.0, 1.0);
    let c = g.offset(c, 1.0);
    Ok(g.scale(c, 0.5))
}

/// `v_x * z`, mapping a normalized activation code back to its range.
pub fn denormalize_act_var(g: &mut Graph, z: Var, v_x: Var) -> Result<Var> {
    g.mul(z, v_x)
}

/// `v_w * (2z - 1)`.
pub fn denormalize_wt_var(g: &mut Graph, z: Var, v_w: Var) -> Result<Var> {
    let t = g.scale(z, 2.0);
    let t = g.offset(t, -1.0);
    g.mul(t, v_w)
}

pub fn quantize_act_var(g: &mut Graph, x: Var, v_x: Var, k: u32) -> Result<Var> {
    check_bits(k)?;
    let z = normalize_act_var(g, x, v_x)?;
    let q = discretize_var(g, z, step_size(k))?;
    denormalize_act_var(g, q, v_x)
}

pub fn quantize_wt_var(g: &mut Graph, w: Var, v_w: Var, k: u32) -> Result<Var> {
    check_bits(k)?;
    let z = normalize_wt_var(g, w, v_w)?;
    let q = discretize_var(g, z, step_size(k))?;
    denormalize_wt_var(g, q, v_w)
}
