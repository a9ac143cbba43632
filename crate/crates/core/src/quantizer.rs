//! Uniform fake quantization.
//!
//! A quantizer is a scale `s` plus fixed signed integer bounds derived from
//! the bitwidth: `z_min = -2^(b-1)`, `z_max = 2^(b-1)-1`. Only the scale is
//! calibrated or learned. Rounding is half-away-from-zero throughout, so
//! grid tests can be bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Node, Tensor};

/// Bit budget for one tensor class. `Full` is the no-quantization sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bitwidth {
    Full,
    Bits(u32),
}

impl Bitwidth {
    pub fn as_bits(self) -> Option<u32> {
        match self {
            Bitwidth::Full => None,
            Bitwidth::Bits(b) => Some(b),
        }
    }
}

impl std::fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bitwidth::Full => write!(f, "full"),
            Bitwidth::Bits(b) => write!(f, "{b}"),
        }
    }
}

impl std::str::FromStr for Bitwidth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") || s.eq_ignore_ascii_case("fp") {
            return Ok(Bitwidth::Full);
        }
        s.parse::<u32>()
            .map(Bitwidth::Bits)
            .map_err(|_| Error::Config(format!("invalid bitwidth {s:?}")))
    }
}

impl Serialize for Bitwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bitwidth::Full => s.serialize_str("full"),
            Bitwidth::Bits(b) => s.serialize_u32(*b),
        }
    }
}

impl<'de> Deserialize<'de> for Bitwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => Ok(Bitwidth::Bits(b)),
            Raw::Text(t) if t.eq_ignore_ascii_case("full") || t.eq_ignore_ascii_case("fp") => {
                Ok(Bitwidth::Full)
            }
            Raw::Text(t) => Err(D::Error::custom(format!("invalid bitwidth {t:?}"))),
        }
    }
}

/// Scale plus integer clipping bounds defining one rounding function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub z_min: i64,
    pub z_max: i64,
    pub bits: u32,
}

impl QuantParams {
    /// Signed-symmetric params for a bitwidth: z_min = -2^(b-1),
    /// z_max = 2^(b-1) - 1.
    pub fn signed(bits: u32, scale: f64) -> Result<Self> {
        if bits < 2 {
            return Err(Error::Config(format!("bitwidth must be >= 2, got {bits}")));
        }
        if bits > 32 {
            return Err(Error::Config(format!("bitwidth {bits} out of range")));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Domain(format!("scale must be positive, got {scale}")));
        }
        let half = 1i64 << (bits - 1);
        Ok(Self {
            scale,
            z_min: -half,
            z_max: half - 1,
            bits,
        })
    }

    /// Same bounds, different scale.
    pub fn with_scale(self, scale: f64) -> Result<Self> {
        QuantParams::signed(self.bits, scale)
    }
}

/// Fake-quantize a tensor: `s * clip(round(x/s), z_min, z_max)`.
pub fn quantize(x: &Tensor, q: &QuantParams) -> Tensor {
    let s = q.scale;
    let lo = q.z_min as f64;
    let hi = q.z_max as f64;
    x.map(|v| s * (v / s).round().clamp(lo, hi))
}

/// Mean squared quantization error of a tensor under `q`.
pub fn quant_mse(x: &Tensor, q: &QuantParams) -> f64 {
    let n = x.numel() as f64;
    let xq = quantize(x, q);
    x.data()
        .iter()
        .zip(xq.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Differentiable fake quantization with the learned-step-size gradient.
///
/// Forward matches [`quantize`] with the scale read from the `scale` leaf.
/// Backward: d/dx is 1 inside the clip range and 0 outside; d/ds is
/// `round(x/s) - x/s` inside and `z_min` / `z_max` outside, with the
/// accumulated scale gradient multiplied by `1/sqrt(n_elements * z_max)`.
pub fn quantize_node<'g>(x: Node<'g>, scale: Node<'g>, q: &QuantParams) -> Result<Node<'g>> {
    let s = scale.value().item();
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Domain(format!(
            "quantize_node requires positive scale, got {s}"
        )));
    }
    let xv = x.value();
    let lo = q.z_min as f64;
    let hi = q.z_max as f64;
    let ratio = xv.map(|v| v / s);
    let rounded = ratio.map(f64::round);
    let value = rounded.map(|r| s * r.clamp(lo, hi));
    let grad_scale = 1.0 / ((xv.numel() as f64) * (q.z_max as f64)).sqrt();

    let node = x.graph().custom(value, &[x, scale], move |g| {
        let mut gx = Vec::with_capacity(g.numel());
        let mut gs = 0.0;
        for ((&gi, &qi), &ri) in g.data().iter().zip(ratio.data()).zip(rounded.data()) {
            let inside = (lo..=hi).contains(&qi);
            gx.push(if inside { gi } else { 0.0 });
            let ds = if inside {
                ri - qi
            } else if qi < lo {
                lo
            } else {
                hi
            };
            gs += gi * ds;
        }
        Ok(vec![
            Tensor::new(ratio.shape().to_vec(), gx)?,
            Tensor::scalar(grad_scale * gs),
        ])
    });
    Ok(node)
}

/// Pass-through node used where a `Bitwidth::Full` context asks for a
/// quantizer: forward is the identity, the scale leaf receives zero gradient.
pub fn identity_node<'g>(x: Node<'g>, scale: Node<'g>) -> Node<'g> {
    x.graph()
        .custom(x.value(), &[x, scale], |g| {
            Ok(vec![g.clone(), Tensor::scalar(0.0)])
        })
}

/// Number of candidate scales scanned by [`calibrate_scale`].
pub const SCALE_GRID: usize = 200;

/// l_p-minimizing scale search over the fixed candidate grid
/// `s_k = (k/200) * max|x| / z_max`, k = 1..=200. Ties prefer the smaller
/// scale.
pub fn calibrate_scale(samples: &Tensor, bits: u32, p: f64) -> Result<QuantParams> {
    if p.is_nan() || p <= 0.0 {
        return Err(Error::Config(format!("l_p exponent must be positive, got {p}")));
    }
    let proto = QuantParams::signed(bits, 1.0)?;
    let max_abs = samples.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Err(Error::Domain(
            "cannot calibrate scale on all-zero samples".into(),
        ));
    }
    let mut best_scale = f64::NAN;
    let mut best_cost = f64::INFINITY;
    for k in 1..=SCALE_GRID {
        let s = (k as f64 / SCALE_GRID as f64) * max_abs / proto.z_max as f64;
        let q = proto.with_scale(s)?;
        let xq = quantize(samples, &q);
        let cost: f64 = samples
            .data()
            .iter()
            .zip(xq.data())
            .map(|(a, b)| (a - b).abs().powf(p))
            .sum();
        if cost < best_cost {
            best_cost = cost;
            best_scale = s;
        }
    }
    proto.with_scale(best_scale)
}

/// Calibrate and apply in one step; returns the quantized tensor and the
/// chosen params.
pub fn quantize_tensor_lp(t: &Tensor, bits: u32, p: f64) -> Result<(Tensor, QuantParams)> {
    let q = calibrate_scale(t, bits, p)?;
    Ok((quantize(t, &q), q))
}

/// Quantizers attached to one linear layer: the static weight quantizer
/// (absent when weights run at full precision) and one activation quantizer
/// per timestep group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantTable {
    pub layer: usize,
    pub weight: Option<QuantParams>,
    pub groups: Vec<QuantParams>,
}

/// Statically fake-quantize every linear layer's weights via the l_p grid
/// search; biases stay full precision. Returns the new parameters and the
/// per-layer weight quantizers (`None` per layer for the `Full` sentinel).
pub fn quantize_weights(
    params: &crate::diffusion::DenoiserParams,
    bits: Bitwidth,
    p: f64,
) -> Result<(crate::diffusion::DenoiserParams, Vec<Option<QuantParams>>)> {
    let b = match bits {
        Bitwidth::Full => {
            return Ok((params.clone(), vec![None; params.n_layers()]));
        }
        Bitwidth::Bits(b) => b,
    };
    let mut out = params.clone();
    let mut qs = Vec::with_capacity(params.n_layers());
    for layer in &mut out.layers {
        let (wq, q) = quantize_tensor_lp(&layer.weight, b, p)?;
        layer.weight = wq;
        qs.push(Some(q));
    }
    Ok((out, qs))
}
