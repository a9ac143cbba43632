//! Calibration-set construction with active timestep selection.
//!
//! Calibration samples are latents recorded from full-precision sampling
//! trajectories. Each round picks one timestep, generates a batch of latents
//! at that noise level, and interleaves a training pass over the growing set;
//! once the set is full, the search trains for the configured epochs. The
//! active criterion scores timesteps by importance-weight entropy plus a
//! count-based exploration bonus.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_sample_until, denoise, denoise_with_activations, DenoiserParams, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::groupsearch::{
    entropy, search_step, GroupAssignment, GroupSearchState, StepLoss,
};
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;
use crate::quantizer::{calibrate_scale, quantize_weights, Bitwidth, LayerQuantTable, QuantParams};

/// How calibration timesteps are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// argmax of s1 + eta * s2.
    Active,
    /// Uniform over all timesteps.
    Random,
    /// Gaussian draw around 0.4 * T with std T/2, rounded and clamped.
    Heuristic,
    /// argmax of s1 + eta * sqrt(ln(sum N + 1) / (N_t + 1)).
    UcbFull,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Strategy::Active),
            "random" => Ok(Strategy::Random),
            "heuristic" => Ok(Strategy::Heuristic),
            "ucb-full" => Ok(Strategy::UcbFull),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Active => "active",
            Strategy::Random => "random",
            Strategy::Heuristic => "heuristic",
            Strategy::UcbFull => "ucb-full",
        };
        write!(f, "{s}")
    }
}

/// One calibration sample: a latent, its timestep, and the cached teacher
/// prediction used as the distillation target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibSample {
    pub x: Vec<f64>,
    pub t: usize,
    pub teacher_eps: Vec<f64>,
}

/// Per-timestep sampling counts and the accumulated calibration set.
#[derive(Clone, Debug)]
pub struct CalibState {
    pub counts: Vec<u64>,
    pub samples: Vec<CalibSample>,
    pub eta: f64,
    pub strategy: Strategy,
}

impl CalibState {
    pub fn new(timesteps: usize, eta: f64, strategy: Strategy) -> Self {
        Self {
            counts: vec![0; timesteps],
            samples: Vec::new(),
            eta,
            strategy,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.counts.len()
    }

    pub fn rounds_performed(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Empirical-risk criterion: entropy of the importance weights at `t`.
/// Before the search state exists (cold start), selection falls back to the
/// count criterion alone, expressed here as zero entropy for every t.
pub fn criterion_s1(state: Option<&GroupSearchState>, t: usize) -> f64 {
    match state {
        Some(s) => entropy(&s.sigma(t)),
        None => 0.0,
    }
}

/// Exploration criterion 1/(N_t + 1).
pub fn criterion_s2(calib: &CalibState, t: usize) -> f64 {
    1.0 / (calib.counts[t - 1] as f64 + 1.0)
}

/// Outcome of one selection, kept for the CSV log.
#[derive(Clone, Copy, Debug)]
pub struct SelectionRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub t_star: usize,
    pub s1: f64,
    pub s2: f64,
    pub score: f64,
}

/// Pick the next calibration timestep per the configured strategy and
/// increment its count. Score ties resolve to the lowest timestep.
pub fn select_timestep(
    state: Option<&GroupSearchState>,
    calib: &mut CalibState,
    rng: &mut Rng,
) -> SelectionRecord {
    let t_max = calib.timesteps();
    let round = calib.rounds_performed() as usize + 1;
    let t_star = match calib.strategy {
        Strategy::Active => argmax_score(t_max, |t| {
            criterion_s1(state, t) + calib.eta * criterion_s2(calib, t)
        }),
        Strategy::UcbFull => {
            let total = calib.rounds_performed() as f64;
            argmax_score(t_max, |t| {
                criterion_s1(state, t)
                    + calib.eta
                        * ((total + 1.0).ln() / (calib.counts[t - 1] as f64 + 1.0)).sqrt()
            })
        }
        Strategy::Random => rng.random_range(1..=t_max),
        Strategy::Heuristic => {
            let mu = 0.4 * t_max as f64;
            let std = t_max as f64 / 2.0;
            let z: f64 = rng.sample(StandardNormal);
            let t = (mu + std * z).round();
            (t.max(1.0) as usize).min(t_max)
        }
    };
    calib.counts[t_star - 1] += 1;
    let s1 = criterion_s1(state, t_star);
    let s2 = criterion_s2(calib, t_star); // after increment, as logged
    let score = match calib.strategy {
        Strategy::Active | Strategy::UcbFull => s1 + calib.eta * s2,
        _ => f64::NAN,
    };
    SelectionRecord {
        round,
        strategy: calib.strategy,
        t_star,
        s1,
        s2,
        score,
    }
}

fn argmax_score(t_max: usize, score: impl Fn(usize) -> f64) -> usize {
    let mut best_t = 1;
    let mut best = f64::NEG_INFINITY;
    for t in 1..=t_max {
        let s = score(t);
        if s > best {
            best = s;
            best_t = t;
        }
    }
    best_t
}

/// Run the full-precision sampler from fresh noise down to `t_star` and
/// append one sample per chain, with the teacher prediction cached.
pub fn build_calibration_round(
    fp_model: &DenoiserParams,
    sched: &NoiseSchedule,
    t_star: usize,
    batch_size: usize,
    calib: &mut CalibState,
    rng: &mut Rng,
) -> Result<()> {
    let latents = ddim_sample_until(fp_model, sched, batch_size, t_star, rng)?;
    let eps = denoise(fp_model, &latents, t_star, None)?;
    let d = fp_model.arch.input_dim;
    for i in 0..batch_size {
        calib.samples.push(CalibSample {
            x: latents.data()[i * d..(i + 1) * d].to_vec(),
            t: t_star,
            teacher_eps: eps.data()[i * d..(i + 1) * d].to_vec(),
        });
    }
    Ok(())
}

/// Everything run_calibration is configured by.
#[derive(Clone, Debug)]
pub struct CalibConfig {
    pub group_count: usize,
    pub lambda: f64,
    pub eta: f64,
    pub calib_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub strategy: Strategy,
    pub weight_bits: Bitwidth,
    pub act_bits: Bitwidth,
    /// l_p exponent for range calibration.
    pub lp_exponent: f64,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl CalibConfig {
    /// Search learning rate keyed to the activation bitwidth: 5e-3 at 8 bits
    /// and above, 3e-3 below.
    pub fn default_lr(act_bits: Bitwidth) -> f64 {
        match act_bits {
            Bitwidth::Bits(b) if b < 8 => 3e-3,
            _ => 5e-3,
        }
    }
}

/// One row of the importance-weight evolution log.
#[derive(Clone, Copy, Debug)]
pub struct SigmaRow {
    pub epoch: usize,
    pub t: usize,
    pub group: usize,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub j: f64,
    pub j_d: f64,
    pub j_e: f64,
}

/// Logs accumulated over a calibration run.
#[derive(Clone, Debug, Default)]
pub struct CalibrationLogs {
    pub selections: Vec<SelectionRecord>,
    pub steps: Vec<StepRecord>,
    pub sigma_trace: Vec<SigmaRow>,
    /// Mean over all timesteps of the importance-weight entropy, per epoch.
    pub entropy_per_epoch: Vec<f64>,
    /// Mean over all timesteps of max_g sigma_g^t, per epoch.
    pub max_sigma_per_epoch: Vec<f64>,
}

/// Quantized model bundle produced by calibration.
#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    /// Teacher parameters with statically fake-quantized weights.
    pub student: DenoiserParams,
    pub weight_params: Vec<Option<QuantParams>>,
    pub tables: Vec<LayerQuantTable>,
    pub assignment: GroupAssignment,
    pub calib: CalibState,
    pub logs: CalibrationLogs,
}

/// Alternate {select timestep, generate a batch, one training pass over the
/// growing set} until the calibration set is full, then train for the
/// configured epochs. The learning rate decays exponentially from
/// `lr_start` to `lr_end` over all steps of the run.
pub fn run_calibration(
    teacher: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &CalibConfig,
    rng: &mut Rng,
) -> Result<CalibrationOutcome> {
    if cfg.calib_size == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("calibration sizes must be >= 1".into()));
    }
    let t_max = sched.timesteps;
    let (student, weight_params) =
        quantize_weights(teacher, cfg.weight_bits, cfg.lp_exponent)?;
    let sites = teacher.arch.quantized_sites();
    let mut calib = CalibState::new(t_max, cfg.eta, cfg.strategy);
    let mut logs = CalibrationLogs::default();

    let rounds = cfg.calib_size.div_ceil(cfg.batch_size);
    // Collection segments walk over sets of size b, 2b, ..., Rb; training
    // adds `epochs` passes over the full set.
    let steps_per_pass = |n: usize| n.div_ceil(cfg.batch_size);
    let total_steps: usize = (1..=rounds)
        .map(|r| steps_per_pass((r * cfg.batch_size).min(cfg.calib_size)))
        .sum::<usize>()
        + cfg.epochs * steps_per_pass(cfg.calib_size);
    let lr_at = |step: usize| -> f64 {
        if total_steps <= 1 {
            return cfg.lr_start;
        }
        let frac = step as f64 / (total_steps - 1) as f64;
        cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
    };

    let mut state: Option<GroupSearchState> = None;
    let mut step_idx = 0usize;
    let mut epoch_idx = 0usize;

    for round in 0..rounds {
        let sel = select_timestep(state.as_ref(), &mut calib, rng);
        logs.selections.push(sel);
        let want = (cfg.calib_size - calib.samples.len()).min(cfg.batch_size);
        build_calibration_round(teacher, sched, sel.t_star, want, &mut calib, rng)?;

        if round == 0 {
            state = Some(init_state(teacher, &calib, cfg, &sites)?);
        }
        let st = state.as_mut().expect("state initialized in round 0");
        run_epoch(
            st, teacher, &student, &mut calib, cfg, rng, &mut step_idx, &lr_at, &mut logs,
        )?;
        snapshot_sigma(st, epoch_idx, &mut logs);
        epoch_idx += 1;
    }

    let st = state.as_mut().expect("at least one round");
    for _ in 0..cfg.epochs {
        run_epoch(
            st, teacher, &student, &mut calib, cfg, rng, &mut step_idx, &lr_at, &mut logs,
        )?;
        snapshot_sigma(st, epoch_idx, &mut logs);
        epoch_idx += 1;
    }

    let state = state.expect("state exists");
    let assignment = state.finalize();
    let scale_params = state.scale_params()?;
    let tables = match cfg.act_bits {
        Bitwidth::Full => Vec::new(),
        Bitwidth::Bits(_) => sites
            .iter()
            .enumerate()
            .map(|(i, &layer)| LayerQuantTable {
                layer,
                weight: weight_params[layer],
                groups: scale_params[i].clone(),
            })
            .collect(),
    };
    Ok(CalibrationOutcome {
        student,
        weight_params,
        tables,
        assignment,
        calib,
        logs,
    })
}

/// Initial search state: one base scale per site from the l_p grid search on
/// that site's activations pooled over the current calibration set.
fn init_state(
    teacher: &DenoiserParams,
    calib: &CalibState,
    cfg: &CalibConfig,
    sites: &[usize],
) -> Result<GroupSearchState> {
    let t_max = calib.timesteps();
    let base_scales = match cfg.act_bits {
        Bitwidth::Full => vec![1.0; sites.len()],
        Bitwidth::Bits(b) => {
            let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); sites.len()];
            for (x, t) in batches_by_timestep(calib, teacher.arch.input_dim) {
                let (_, acts) = denoise_with_activations(teacher, &x, t)?;
                for (site_idx, a) in acts.iter().enumerate() {
                    pooled[site_idx].extend_from_slice(a.data());
                }
            }
            pooled
                .into_iter()
                .map(|vals| {
                    Ok(calibrate_scale(&Tensor::from_slice(&vals), b, cfg.lp_exponent)?.scale)
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    GroupSearchState::new(
        t_max,
        cfg.group_count,
        cfg.lambda,
        cfg.act_bits,
        sites.to_vec(),
        &base_scales,
    )
}

/// Calibration samples grouped by timestep as `[n, D]` tensors.
fn batches_by_timestep(calib: &CalibState, d: usize) -> Vec<(Tensor, usize)> {
    let mut by_t: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for s in &calib.samples {
        by_t.entry(s.t).or_default().extend_from_slice(&s.x);
    }
    by_t.into_iter()
        .map(|(t, data)| {
            let n = data.len() / d;
            (Tensor::new(vec![n, d], data).expect("consistent sample dims"), t)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    state: &mut GroupSearchState,
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    calib: &mut CalibState,
    cfg: &CalibConfig,
    rng: &mut Rng,
    step_idx: &mut usize,
    lr_at: &dyn Fn(usize) -> f64,
    logs: &mut CalibrationLogs,
) -> Result<()> {
    use rand::seq::SliceRandom;
    let n = calib.samples.len();
    let d = teacher.arch.input_dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for chunk in order.chunks(cfg.batch_size) {
        let mut x = Vec::with_capacity(chunk.len() * d);
        let mut targets = Vec::with_capacity(chunk.len() * d);
        let mut ts = Vec::with_capacity(chunk.len());
        for &i in chunk {
            x.extend_from_slice(&calib.samples[i].x);
            targets.extend_from_slice(&calib.samples[i].teacher_eps);
            ts.push(calib.samples[i].t);
        }
        let x = Tensor::new(vec![chunk.len(), d], x)?;
        let targets = Tensor::new(vec![chunk.len(), d], targets)?;
        let lr = lr_at(*step_idx);
        let loss: StepLoss =
            search_step(state, teacher, student, &x, &ts, Some(&targets), lr)?;
        logs.steps.push(StepRecord {
            step: *step_idx,
            lr,
            j: loss.j,
            j_d: loss.j_d,
            j_e: loss.j_e,
        });
        *step_idx += 1;
    }
    Ok(())
}

fn snapshot_sigma(state: &GroupSearchState, epoch: usize, logs: &mut CalibrationLogs) {
    let mut entropy_sum = 0.0;
    let mut max_sigma_sum = 0.0;
    for t in 1..=state.timesteps {
        let sigma = state.sigma(t);
        entropy_sum += entropy(&sigma);
        max_sigma_sum += sigma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (g, &s) in sigma.iter().enumerate() {
            logs.sigma_trace.push(SigmaRow {
                epoch,
                t,
                group: g + 1,
                sigma: s,
            });
        }
    }
    logs.entropy_per_epoch
        .push(entropy_sum / state.timesteps as f64);
    logs.max_sigma_per_epoch
        .push(max_sigma_sum / state.timesteps as f64);
}
