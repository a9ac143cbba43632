//! Differentiable assignment of timesteps to quantizer groups.
//!
//! Every quantized activation site holds one learnable scale per group. At
//! timestep t the site output is the importance-weighted sum over all group
//! quantizers, with weights softmax(logits[t]). The joint objective distills
//! the full-precision model's noise prediction into the quantized one and
//! pushes the weights toward one-hot via an entropy penalty; after training
//! each timestep keeps its argmax group.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise, embed_inputs, forward_nodes, layer_nodes, DenoiserParams};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, Node, Tensor};
use crate::quantizer::{identity_node, quantize_node, Bitwidth, QuantParams};

/// Final timestep-to-group mapping; group indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub groups: Vec<u32>,
    pub group_count: u32,
}

impl GroupAssignment {
    pub fn new(groups: Vec<u32>, group_count: u32) -> Result<Self> {
        if group_count == 0 {
            return Err(Error::Config("group count must be >= 1".into()));
        }
        if groups.iter().any(|&g| g < 1 || g > group_count) {
            return Err(Error::Config(format!(
                "group indices must lie in [1, {group_count}]"
            )));
        }
        Ok(Self {
            groups,
            group_count,
        })
    }

    /// Everything in group 1.
    pub fn single(timesteps: usize) -> Self {
        Self {
            groups: vec![1; timesteps],
            group_count: 1,
        }
    }

    pub fn group_of(&self, t: usize) -> Result<u32> {
        self.groups
            .get(t.checked_sub(1).ok_or_else(|| {
                Error::Domain("timesteps are 1-indexed".into())
            })?)
            .copied()
            .ok_or_else(|| Error::Domain(format!("timestep {t} outside assignment")))
    }

    pub fn timesteps(&self) -> usize {
        self.groups.len()
    }
}

/// Scale multipliers seeding the G group quantizers of one site. A single
/// group gets exactly 1.0; larger G spreads geometrically over [0.5, 2.0]
/// so the groups are distinguishable from the first step (identical seeds
/// would leave both gradients and importance weights symmetric forever, and
/// near-identical seeds drown the group preference in batch noise).
pub fn ladder_factors(group_count: usize) -> Vec<f64> {
    if group_count == 1 {
        return vec![1.0];
    }
    let (lo, hi) = (0.5f64, 2.0f64);
    (0..group_count)
        .map(|g| lo * (hi / lo).powf(g as f64 / (group_count - 1) as f64))
        .collect()
}

/// Learnable search state: per-timestep group logits plus per-(site, group)
/// quantizer scales, with Adam moments for both.
pub struct GroupSearchState {
    pub timesteps: usize,
    pub group_count: usize,
    pub lambda: f64,
    pub act_bits: Bitwidth,
    /// Layer indices whose input activation is quantized.
    pub sites: Vec<usize>,
    logits: Tensor,
    scales: Vec<Vec<Tensor>>,
    adam: Adam,
}

impl GroupSearchState {
    /// `base_scales[i]` seeds all groups of site `i` through the ladder.
    pub fn new(
        timesteps: usize,
        group_count: usize,
        lambda: f64,
        act_bits: Bitwidth,
        sites: Vec<usize>,
        base_scales: &[f64],
    ) -> Result<Self> {
        if group_count == 0 || timesteps == 0 {
            return Err(Error::Config("empty search state".into()));
        }
        if base_scales.len() != sites.len() {
            return Err(Error::Config(format!(
                "{} base scales for {} sites",
                base_scales.len(),
                sites.len()
            )));
        }
        if let Bitwidth::Bits(b) = act_bits {
            // Validates the bitwidth once up front.
            QuantParams::signed(b, 1.0)?;
        }
        let factors = ladder_factors(group_count);
        let scales = base_scales
            .iter()
            .map(|&s| {
                if !s.is_finite() || s <= 0.0 {
                    return Err(Error::Domain(format!("base scale must be positive, got {s}")));
                }
                Ok(factors.iter().map(|f| Tensor::scalar(s * f)).collect())
            })
            .collect::<Result<Vec<Vec<Tensor>>>>()?;
        let mut sizes = vec![timesteps * group_count];
        sizes.extend(std::iter::repeat_n(1, sites.len() * group_count));
        Ok(Self {
            timesteps,
            group_count,
            lambda,
            act_bits,
            sites,
            logits: Tensor::zeros(vec![timesteps, group_count]),
            scales,
            adam: Adam::new(AdamConfig::default(), &sizes),
        })
    }

    /// Importance weights softmax(logits[t]).
    pub fn sigma(&self, t: usize) -> Vec<f64> {
        let g = self.group_count;
        let row = &self.logits.data()[(t - 1) * g..t * g];
        softmax(row)
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    #[cfg(test)]
    pub(crate) fn set_logits_for_tests(&mut self, vals: &[f64]) {
        self.logits = Tensor::new(
            vec![self.timesteps, self.group_count],
            vals.to_vec(),
        )
        .expect("test logits shape");
    }

    pub fn scale(&self, site_idx: usize, group: usize) -> f64 {
        self.scales[site_idx][group].item()
    }

    /// Learned scales as quantizer params per site, group-major.
    pub fn scale_params(&self) -> Result<Vec<Vec<QuantParams>>> {
        let b = match self.act_bits {
            Bitwidth::Full => return Ok(vec![Vec::new(); self.sites.len()]),
            Bitwidth::Bits(b) => b,
        };
        self.scales
            .iter()
            .map(|site| {
                site.iter()
                    .map(|s| QuantParams::signed(b, s.item()))
                    .collect()
            })
            .collect()
    }

    /// Argmax group per timestep; ties pick the lowest group index.
    pub fn finalize(&self) -> GroupAssignment {
        let g = self.group_count;
        let groups = (1..=self.timesteps)
            .map(|t| {
                let row = &self.logits.data()[(t - 1) * g..t * g];
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                (best + 1) as u32
            })
            .collect();
        GroupAssignment {
            groups,
            group_count: g as u32,
        }
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Entropy of a probability vector with 0*log(0) = 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

struct TimestepNodes<'g> {
    sigma_elems: Vec<Node<'g>>,
    entropy: Node<'g>,
}

/// Per-step view of the search state on a fresh graph: leaves for the logits
/// and every scale, with softmax rows built (and cached) on demand.
pub struct SearchGraph<'g> {
    pub logits: Node<'g>,
    pub scales: Vec<Vec<Node<'g>>>,
    group_count: usize,
    act_bits: Bitwidth,
    rows: RefCell<HashMap<usize, (Vec<Node<'g>>, Node<'g>)>>,
}

impl<'g> SearchGraph<'g> {
    pub fn build(graph: &'g Graph, state: &GroupSearchState) -> Self {
        let logits = graph.leaf(state.logits.clone());
        let scales = state
            .scales
            .iter()
            .map(|site| site.iter().map(|s| graph.leaf(s.clone())).collect())
            .collect();
        Self {
            logits,
            scales,
            group_count: state.group_count,
            act_bits: state.act_bits,
            rows: RefCell::new(HashMap::new()),
        }
    }

    /// Softmax weights and entropy for timestep `t`, built once per graph.
    ///
    /// The entropy uses the identity H = (m + log Z) - sum(sigma * logits),
    /// which stays finite even when a weight underflows to exactly zero.
    fn timestep_nodes(&self, t: usize) -> Result<TimestepNodes<'g>> {
        if let Some((sigma_elems, entropy)) = self.rows.borrow().get(&t) {
            return Ok(TimestepNodes {
                sigma_elems: sigma_elems.clone(),
                entropy: *entropy,
            });
        }
        let row = self.logits.row(t - 1)?;
        let m = row.max(None)?;
        let shifted = row.sub(m)?;
        let e = shifted.exp()?;
        let z = e.sum(None)?;
        let sigma = e.div(z)?;
        let log_z_eff = m.add(z.log()?)?;
        let weighted = sigma.mul(row)?.sum(None)?;
        let entropy = log_z_eff.sub(weighted)?;
        let sigma_elems = (0..self.group_count)
            .map(|g| sigma.elem(g))
            .collect::<Result<Vec<_>>>()?;
        self.rows
            .borrow_mut()
            .insert(t, (sigma_elems.clone(), entropy));
        Ok(TimestepNodes {
            sigma_elems,
            entropy,
        })
    }

    /// Importance-weighted sum of all group quantizers applied to `x` at
    /// timestep `t` for site `site_idx`.
    pub fn mixture_quantize(
        &self,
        x: Node<'g>,
        t: usize,
        site_idx: usize,
    ) -> Result<Node<'g>> {
        let nodes = self.timestep_nodes(t)?;
        let mut acc: Option<Node<'g>> = None;
        for g in 0..self.group_count {
            let scale_leaf = self.scales[site_idx][g];
            let quantized = match self.act_bits {
                Bitwidth::Full => identity_node(x, scale_leaf),
                Bitwidth::Bits(b) => {
                    let q = QuantParams::signed(b, scale_leaf.value().item())?;
                    quantize_node(x, scale_leaf, &q)?
                }
            };
            let term = nodes.sigma_elems[g].mul(quantized)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        Ok(acc.expect("group_count >= 1"))
    }

    /// Entropy of sigma^t as a graph node.
    pub fn entropy_node(&self, t: usize) -> Result<Node<'g>> {
        Ok(self.timestep_nodes(t)?.entropy)
    }
}

/// Scalar loss pieces of one objective evaluation.
pub struct Objective<'g> {
    pub j: Node<'g>,
    pub j_d: Node<'g>,
    pub j_e: Node<'g>,
}

/// Mean entropy over the batch's timesteps: mean_i H(sigma^{t_i}).
pub fn entropy_term<'g>(
    sg: &SearchGraph<'g>,
    graph: &'g Graph,
    ts: &[usize],
) -> Result<Node<'g>> {
    if ts.is_empty() {
        return Err(Error::Config("entropy term over empty batch".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in ts {
        *counts.entry(t).or_insert(0) += 1;
    }
    let total = ts.len() as f64;
    let mut acc: Option<Node<'g>> = None;
    for (t, c) in counts {
        let h = sg.entropy_node(t)?;
        let w = graph.constant(Tensor::scalar(c as f64));
        let term = h.mul(w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    let inv = graph.constant(Tensor::scalar(1.0 / total));
    acc.expect("non-empty batch").mul(inv)
}

/// Joint objective J = J_d + lambda * J_e over a batch of (x_t, t) pairs.
///
/// J_d is the mean squared distance between the full-precision teacher's
/// predicted noise and the quantized model's prediction; the student runs
/// with the mixture quantizer at every quantized site. `targets` may carry
/// precomputed teacher outputs (one row per batch row); otherwise the
/// teacher runs here.
#[allow(clippy::too_many_arguments)]
pub fn search_objective<'g>(
    graph: &'g Graph,
    sg: &SearchGraph<'g>,
    state: &GroupSearchState,
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    x: &Tensor,
    ts: &[usize],
    targets: Option<&Tensor>,
) -> Result<Objective<'g>> {
    let batch = x.shape()[0];
    if ts.len() != batch || batch == 0 {
        return Err(Error::Shape("batch rows and timesteps disagree".into()));
    }
    // Group rows by timestep: sigma is shared within a group.
    let mut by_t: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in ts.iter().enumerate() {
        by_t.entry(t).or_default().push(i);
    }
    let d = x.shape()[1];
    let layers = layer_nodes(graph, student, false);

    let mut j_d: Option<Node<'g>> = None;
    for (&t, rows) in &by_t {
        let mut sub = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            sub.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let sub_x = Tensor::new(vec![rows.len(), d], sub)?;
        let target = match targets {
            Some(tg) => {
                let mut out = Vec::with_capacity(rows.len() * d);
                for &i in rows {
                    out.extend_from_slice(&tg.data()[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![rows.len(), d], out)?
            }
            None => denoise(teacher, &sub_x, t, None)?,
        };
        let input = embed_inputs(&sub_x, &vec![t; rows.len()], student.arch.time_embed_dim)?;
        let site_of = |layer: usize| state.sites.iter().position(|&s| s == layer);
        let pred = forward_nodes(graph, &layers, &input, &mut |layer, h| {
            match site_of(layer) {
                Some(site_idx) => sg.mixture_quantize(h, t, site_idx),
                None => Ok(h),
            }
        })?;
        let diff = pred.sub(graph.constant(target))?;
        let ssq = diff.mul(diff)?.sum(None)?;
        j_d = Some(match j_d {
            None => ssq,
            Some(a) => a.add(ssq)?,
        });
    }
    let inv_b = graph.constant(Tensor::scalar(1.0 / batch as f64));
    let j_d = j_d.expect("non-empty batch").mul(inv_b)?;
    let j_e = entropy_term(sg, graph, ts)?;
    let lambda = graph.constant(Tensor::scalar(state.lambda));
    let j = j_d.add(j_e.mul(lambda)?)?;
    Ok(Objective { j, j_d, j_e })
}

/// Loss values recorded by one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub j: f64,
    pub j_d: f64,
    pub j_e: f64,
}

/// One Adam step on logits and scales; scales are projected to >= 1e-8.
pub fn search_step(
    state: &mut GroupSearchState,
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    x: &Tensor,
    ts: &[usize],
    targets: Option<&Tensor>,
    lr: f64,
) -> Result<StepLoss> {
    let graph = Graph::new();
    let sg = SearchGraph::build(&graph, state);
    let obj = search_objective(&graph, &sg, state, teacher, student, x, ts, targets)?;
    let loss = StepLoss {
        j: obj.j.value().item(),
        j_d: obj.j_d.value().item(),
        j_e: obj.j_e.value().item(),
    };
    if !loss.j.is_finite() {
        return Err(Error::NonFinite(format!(
            "search loss diverged: J={} (J_d={}, J_e={})",
            loss.j, loss.j_d, loss.j_e
        )));
    }
    let grads = graph.backward(obj.j)?;

    let mut params = vec![state.logits.clone()];
    let mut grad_list = vec![grads
        .get(sg.logits)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(state.logits.shape().to_vec()))];
    for (site_idx, site) in sg.scales.iter().enumerate() {
        for (g, leaf) in site.iter().enumerate() {
            params.push(state.scales[site_idx][g].clone());
            grad_list.push(
                grads
                    .get(*leaf)
                    .cloned()
                    .unwrap_or_else(|| Tensor::scalar(0.0)),
            );
        }
    }
    state.adam.step(lr, &mut params, &grad_list)?;

    let mut it = params.into_iter();
    state.logits = it.next().expect("logits slot");
    for site in state.scales.iter_mut() {
        for s in site.iter_mut() {
            let updated = it.next().expect("scale slot");
            *s = Tensor::scalar(updated.item().max(1e-8));
        }
    }
    Ok(loss)
}
