//! Time-conditioned MLP noise predictor.
//!
//! Input is the 2-D latent concatenated with a sinusoidal embedding of the
//! timestep; hidden layers use the smooth activation x*sigmoid(x). The same
//! forward pass runs in three flavors: plain tensors (sampling), plain with
//! fake quantization (quantized sampling), and on the autodiff graph
//! (training and search).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groupsearch::GroupAssignment;
use crate::numerics::rng::{normal_vec, Rng};
use crate::numerics::{Graph, Node, Tensor};
use crate::quantizer::{quantize, Bitwidth, LayerQuantTable};

/// Shape descriptor; fully determines every parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            time_embed_dim: 32,
            hidden: vec![128, 128, 128],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() {
            return Err(Error::Config("degenerate architecture".into()));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "time embedding dim must be even and >= 2".into(),
            ));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of each linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim + self.time_embed_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.input_dim));
        dims
    }

    /// Layer indices whose input activation is quantized: every hidden
    /// activation, i.e. the inputs of layers 1..n. The raw network input
    /// (layer 0) stays full precision.
    pub fn quantized_sites(&self) -> Vec<usize> {
        (1..=self.hidden.len()).collect()
    }
}

/// One linear layer; weight is `[fan_in, fan_out]`, bias `[1, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All denoiser parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub layers: Vec<LinearLayer>,
}

impl DenoiserParams {
    /// He-style normal init for weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| {
                let std = (2.0 / fan_in as f64).sqrt();
                let w = normal_vec(rng, fan_in * fan_out)
                    .iter()
                    .map(|v| v * std)
                    .collect();
                Ok(LinearLayer {
                    weight: Tensor::new(vec![fan_in, fan_out], w)?,
                    bias: Tensor::zeros(vec![1, fan_out]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, layers })
    }

    /// All-zero parameters (predicts zero noise everywhere).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| LinearLayer {
                weight: Tensor::zeros(vec![fan_in, fan_out]),
                bias: Tensor::zeros(vec![1, fan_out]),
            })
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameters flattened as `[w0, b0, w1, b1, ...]` for the optimizer.
    pub fn flat_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// Rebuild from the `flat_tensors` ordering.
    pub fn from_flat(arch: Architecture, tensors: &[Tensor]) -> Result<Self> {
        let dims = arch.layer_dims();
        if tensors.len() != 2 * dims.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                2 * dims.len(),
                tensors.len()
            )));
        }
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let w = &tensors[2 * i];
                let b = &tensors[2 * i + 1];
                if w.shape() != [fan_in, fan_out] || b.shape() != [1, fan_out] {
                    return Err(Error::Shape(format!("layer {i} tensor shapes mismatch")));
                }
                Ok(LinearLayer {
                    weight: w.clone(),
                    bias: b.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, layers })
    }
}

/// Sinusoidal embedding of a timestep: `dim/2` sines then `dim/2` cosines
/// over geometrically spaced frequencies from 1 down to 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    let freq = |i: usize| -> f64 {
        let e = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        10_000f64.powf(-e)
    };
    for i in 0..half {
        v.push((t as f64 * freq(i)).sin());
    }
    for i in 0..half {
        v.push((t as f64 * freq(i)).cos());
    }
    v
}

/// `[B, D]` latents plus per-row timesteps -> `[B, D+E]` network input.
pub fn embed_inputs(x: &Tensor, ts: &[usize], embed_dim: usize) -> Result<Tensor> {
    let shape = x.shape();
    let (b, d) = match shape {
        [b, d] => (*b, *d),
        _ => return Err(Error::Shape("expected [batch, dim] latents".into())),
    };
    if ts.len() != b {
        return Err(Error::Shape(format!(
            "{} timesteps for batch of {b}",
            ts.len()
        )));
    }
    let mut data = Vec::with_capacity(b * (d + embed_dim));
    for (i, &t) in ts.iter().enumerate() {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        data.extend_from_slice(&time_embedding(t, embed_dim));
    }
    Tensor::new(vec![b, d + embed_dim], data)
}

/// Resolves which quantizer applies at each activation site for a timestep.
#[derive(Clone, Copy)]
pub struct QuantContext<'a> {
    pub act_bits: Bitwidth,
    pub tables: &'a [LayerQuantTable],
    pub assignment: &'a GroupAssignment,
}

impl QuantContext<'_> {
    /// Activation quantizer for the input of `layer` at timestep `t`;
    /// `None` when the context is full precision.
    pub fn site_quantizer(
        &self,
        layer: usize,
        t: usize,
    ) -> Result<Option<crate::quantizer::QuantParams>> {
        match self.act_bits {
            Bitwidth::Full => Ok(None),
            Bitwidth::Bits(_) => {
                let table = self
                    .tables
                    .iter()
                    .find(|tb| tb.layer == layer)
                    .ok_or_else(|| {
                        Error::Config(format!("no activation quantizer for layer {layer}"))
                    })?;
                let g = self.assignment.group_of(t)?;
                let q = table.groups.get(g as usize - 1).ok_or_else(|| {
                    Error::Config(format!("layer {layer} has no quantizer for group {g}"))
                })?;
                Ok(Some(*q))
            }
        }
    }
}

/// Predicted noise for a batch of latents at timestep `t`. With a quant
/// context, hidden activations pass through fake quantization (the weights
/// in `params` are expected to be statically quantized already).
pub fn denoise(
    params: &DenoiserParams,
    x: &Tensor,
    t: usize,
    ctx: Option<&QuantContext<'_>>,
) -> Result<Tensor> {
    Ok(forward_plain(params, x, t, ctx, false)?.0)
}

/// Full-precision forward that also returns the pre-quantization activation
/// at every quantized site, in site order.
pub fn denoise_with_activations(
    params: &DenoiserParams,
    x: &Tensor,
    t: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    forward_plain(params, x, t, None, true)
}

fn forward_plain(
    params: &DenoiserParams,
    x: &Tensor,
    t: usize,
    ctx: Option<&QuantContext<'_>>,
    capture: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    if t < 1 {
        return Err(Error::Domain("timesteps are 1-indexed".into()));
    }
    let batch = match x.shape() {
        [b, d] if *d == params.arch.input_dim => *b,
        other => {
            return Err(Error::Shape(format!(
                "latent shape {other:?} does not match input dim {}",
                params.arch.input_dim
            )))
        }
    };
    let ts = vec![t; batch];
    let mut h = embed_inputs(x, &ts, params.arch.time_embed_dim)?;
    let mut acts = Vec::new();
    let n = params.layers.len();
    for (i, layer) in params.layers.iter().enumerate() {
        if i > 0 {
            if capture {
                acts.push(h.clone());
            }
            if let Some(ctx) = ctx {
                if let Some(q) = ctx.site_quantizer(i, t)? {
                    h = quantize(&h, &q);
                }
            }
        }
        let z = h.matmul(&layer.weight)?.add_rowvec(&layer.bias)?;
        h = if i + 1 < n { z.silu() } else { z };
    }
    Ok((h, acts))
}

/// Graph nodes for every layer's parameters, as leaves (trainable) or
/// constants (frozen).
pub fn layer_nodes<'g>(
    graph: &'g Graph,
    params: &DenoiserParams,
    trainable: bool,
) -> Vec<(Node<'g>, Node<'g>)> {
    params
        .layers
        .iter()
        .map(|l| {
            if trainable {
                (graph.leaf(l.weight.clone()), graph.leaf(l.bias.clone()))
            } else {
                (
                    graph.constant(l.weight.clone()),
                    graph.constant(l.bias.clone()),
                )
            }
        })
        .collect()
}

/// Forward pass on the graph. `site_transform` is applied to the activation
/// entering each layer with index >= 1 (identity for plain training, a
/// quantizer mixture during search).
pub fn forward_nodes<'g>(
    graph: &'g Graph,
    layers: &[(Node<'g>, Node<'g>)],
    input: &Tensor,
    site_transform: &mut dyn FnMut(usize, Node<'g>) -> Result<Node<'g>>,
) -> Result<Node<'g>> {
    let batch = input.shape()[0];
    let ones = graph.constant(Tensor::ones(vec![batch, 1]));
    let mut h = graph.constant(input.clone());
    let n = layers.len();
    for (i, (w, b)) in layers.iter().enumerate() {
        if i > 0 {
            h = site_transform(i, h)?;
        }
        // Bias enters as ones * b so the graph only ever sees full-shape adds.
        let z = h.matmul(*w)?.add(ones.matmul(*b)?)?;
        h = if i + 1 < n { z.silu() } else { z };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seed_rng;
    use crate::numerics::tensor::sigmoid;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 2,
            time_embed_dim: 4,
            hidden: vec![5, 3],
        }
    }

    #[test]
    fn zero_params_predict_zero() {
        let p = DenoiserParams::zeros(tiny_arch()).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![2.0, 1.0]]).unwrap();
        let out = denoise(&p, &x, 5, None).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_handrolled_reimplementation() {
        // Straight-line oracle: nested loops over the same parameters.
        let arch = tiny_arch();
        let p = DenoiserParams::init(arch.clone(), &mut seed_rng(7)).unwrap();
        let x = Tensor::from_rows(&[vec![0.25, -1.5]]).unwrap();
        let t = 13;
        let got = denoise(&p, &x, t, None).unwrap();

        let mut h: Vec<f64> = vec![0.25, -1.5];
        h.extend(time_embedding(t, arch.time_embed_dim));
        for (i, layer) in p.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            assert_eq!(h.len(), fan_in);
            let mut z = vec![0.0; fan_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = layer.bias.data()[j];
                for (k, &hk) in h.iter().enumerate() {
                    acc += hk * layer.weight.data()[k * fan_out + j];
                }
                *zj = acc;
            }
            h = if i + 1 < p.layers.len() {
                z.iter().map(|&v| v * sigmoid(v)).collect()
            } else {
                z
            };
        }
        for (a, b) in got.data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let p = DenoiserParams::init(tiny_arch(), &mut seed_rng(9)).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.8], vec![0.0, 0.0]]).unwrap();
        let plain = denoise(&p, &x, 3, None).unwrap();

        let g = Graph::new();
        let layers = layer_nodes(&g, &p, false);
        let input = embed_inputs(&x, &[3, 3, 3], p.arch.time_embed_dim).unwrap();
        let out = forward_nodes(&g, &layers, &input, &mut |_, h| Ok(h)).unwrap();
        for (a, b) in out.value().data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_checks_batch_size() {
        let x = Tensor::zeros(vec![2, 2]);
        assert!(embed_inputs(&x, &[1], 4).is_err());
    }

    #[test]
    fn quant_context_demands_layer_tables() {
        use crate::quantizer::QuantParams;
        let p = DenoiserParams::init(tiny_arch(), &mut seed_rng(1)).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let assignment = GroupAssignment::single(10);
        // Table for layer 1 only; layer 2 lookup must fail.
        let tables = vec![LayerQuantTable {
            layer: 1,
            weight: Some(QuantParams::signed(8, 0.1).unwrap()),
            groups: vec![QuantParams::signed(8, 0.1).unwrap()],
        }];
        let ctx = QuantContext {
            act_bits: Bitwidth::Bits(8),
            tables: &tables,
            assignment: &assignment,
        };
        assert!(denoise(&p, &x, 2, Some(&ctx)).is_err());

        // Full-precision sentinel ignores tables entirely and matches FP.
        let ctx_full = QuantContext {
            act_bits: Bitwidth::Full,
            tables: &[],
            assignment: &assignment,
        };
        let a = denoise(&p, &x, 2, Some(&ctx_full)).unwrap();
        let b = denoise(&p, &x, 2, None).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
