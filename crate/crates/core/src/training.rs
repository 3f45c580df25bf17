//! Gradients, plain SGD and the offline, transfer and online training schedules.
//!
//! Every step draws its samples from an RNG keyed by `(seed, stage, step)`,
//! so a run resumed from a checkpoint replays exactly the steps it skipped.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::beamforming::{sca_hybrid, AnalogPhases, HybridBeamformers, HybridVars, ScaConfig};
use crate::channel::{equivalent_channel, pilot_noise, ChannelRealization, SystemDims};
use crate::error::{Error, Result};
use crate::metrics::{sum_rate, sum_rate_var};
use crate::numerics::{CMatrix, Rng};
use crate::unfolding::cedun::{
    cedun_estimate_var, cedun_forward, cedun_forward_full_var, equivalent_channel_var, pilots_var, received_pilot_var,
};
use crate::unfolding::hbdun::{hbdun_analog_var, hbdun_digital_var, hbdun_forward, hbdun_forward_eq, hbdun_forward_var};
use crate::unfolding::{BlackboxParams, CedunParams, HbdunParams, ParamStore};

/// Draws one channel realization from the given stream.
pub type Sampler<'a> = &'a dyn Fn(&mut Rng) -> ChannelRealization;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate.
    pub eta: f64,
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    /// Steps per stage when fine-tuning on changed statistics.
    pub finetune_steps: usize,
    pub seed: u64,
    /// Step of the central finite-difference oracle.
    pub finite_diff_step: f64,
    /// `ρ^t = (1 + t)^(−rho_exponent)` for stochastic SCA comparisons.
    pub rho_exponent: f64,
    /// Inner SCA iterations per stochastic SCA step.
    pub ssca_inner_iters: usize,
    /// Caps the joint gradient norm of a step; the direction is unchanged.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 1e-3,
            batch_size: 32,
            steps_stage1: 2000,
            steps_stage2: 2000,
            finetune_steps: 200,
            seed: 0,
            finite_diff_step: 1e-5,
            rho_exponent: 0.8,
            ssca_inner_iters: 10,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("train.eta", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config("train.grad_clip", "must be positive and finite"));
            }
        }
        if !(self.finite_diff_step > 0.0) {
            return Err(Error::config("train.finite_diff_step", "must be positive"));
        }
        Ok(())
    }
}

/// One gradient block per parameter block, same shapes. Entry `a + ib`
/// holds `∂L/∂Re + i ∂L/∂Im`; real blocks have zero imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<CMatrix>,
}

impl GradientSet {
    pub fn zeros(store: &ParamStore) -> Self {
        GradientSet {
            blocks: store.blocks.iter().map(|b| CMatrix::zeros(b.value.rows(), b.value.cols())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a = &*a + &b.scale_real(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.frob_norm_sqr()).sum::<f64>().sqrt()
    }
}

/// One row of a training trace. `rate` is the batch-mean sum rate when the
/// loss is a negative sum rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub rate: Option<f64>,
}

pub fn write_trace_csv(out: &mut dyn Write, trace: &[TracePoint]) -> Result<()> {
    writeln!(out, "step,stage,loss,sum_rate")?;
    for p in trace {
        let rate = p.rate.map(|r| r.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", p.step, p.stage, p.loss, rate)?;
    }
    Ok(())
}

/// `−Σ_k Σ_l log2(1 + Γ_kl)`.
pub fn loss_sum_rate(bf: &HybridBeamformers, h_eq: &[CMatrix], dims: &SystemDims) -> f64 {
    -sum_rate(bf, h_eq, dims).total
}

pub fn loss_sum_rate_var<'t>(tape: &'t Tape, bf: &HybridVars<'t>, h_eq: &[Var<'t>], dims: &SystemDims) -> Var<'t> {
    sum_rate_var(tape, bf, h_eq, dims).neg()
}

/// Taped loss over leaves of several stores.
pub type LossFn<'a> = dyn for<'t> FnMut(&'t Tape, &[Vec<Var<'t>>]) -> Result<Var<'t>> + 'a;

/// Reverse-mode gradient of `loss` w.r.t. every block accepted by `trainable`.
/// Other blocks get zero gradients.
pub fn grad(
    stores: &[&ParamStore],
    trainable: &dyn Fn(&str) -> bool,
    loss: &mut LossFn<'_>,
) -> Result<(f64, Vec<GradientSet>)> {
    let tape = Tape::new();
    let leaves: Vec<Vec<Var>> = stores.iter().map(|s| s.leaves(&tape, trainable)).collect();
    let out = loss(&tape, &leaves)?;
    let value = out.scalar_value().re;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let g = tape.gradient(out);
    let sets = leaves
        .iter()
        .map(|ls| GradientSet {
            blocks: ls.iter().map(|v| g.wrt(*v)).collect(),
        })
        .collect();
    Ok((value, sets))
}

/// Central finite differences of a plain-value loss w.r.t. block `block` of
/// store `store`, real and imaginary parts separately (imaginary only for
/// complex blocks). Optionally restricted to some flat entry indices.
pub fn finite_difference_block(
    loss: &mut dyn FnMut(&[ParamStore]) -> Result<f64>,
    stores: &[ParamStore],
    store: usize,
    block: usize,
    step: f64,
    entries: Option<&[usize]>,
) -> Result<CMatrix> {
    let mut work: Vec<ParamStore> = stores.to_vec();
    let real = work[store].blocks[block].real;
    let at = work[store].blocks[block].value.clone();
    let mut f = |m: &CMatrix| -> f64 {
        work[store].blocks[block].value = m.clone();
        loss(&work).unwrap_or(f64::NAN)
    };
    let g = crate::autodiff::finite_difference(&mut f, &at, step, real, entries);
    if !g.is_finite() {
        return Err(Error::NonFinite("finite-difference loss".into()));
    }
    Ok(g)
}

/// Rescales all sets together so their joint norm is at most `max_norm`.
pub fn clip_gradients(sets: &mut [GradientSet], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = sets.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in sets.iter_mut() {
            for b in &mut g.blocks {
                *b = b.scale_real(s);
            }
        }
    }
}

/// `θ ← θ − η g` on every block.
pub fn sgd_step(store: &mut ParamStore, g: &GradientSet, eta: f64) {
    sgd_step_masked(store, g, eta, &|_| true);
}

/// `θ ← θ − η g` on blocks accepted by `update`; other blocks are untouched.
pub fn sgd_step_masked(store: &mut ParamStore, g: &GradientSet, eta: f64, update: &dyn Fn(&str) -> bool) {
    for (b, gb) in store.blocks.iter_mut().zip(&g.blocks) {
        if !update(&b.name) {
            continue;
        }
        let step = if b.real { gb.real_part() } else { gb.clone() };
        b.value = &b.value - &step.scale_real(eta);
    }
}

/// Per-sample taped loss. Receives the sample and an RNG for per-sample noise.
pub type SampleLoss<'a> =
    dyn for<'t> FnMut(&'t Tape, &[Vec<Var<'t>>], &ChannelRealization, &mut Rng) -> Result<Var<'t>> + 'a;

/// Pins a closure to the higher-ranked [`SampleLoss`] signature.
fn per_sample<F>(f: F) -> F
where
    F: for<'t> FnMut(&'t Tape, &[Vec<Var<'t>>], &ChannelRealization, &mut Rng) -> Result<Var<'t>>,
{
    f
}

/// Stable identifiers of the RNG streams of each stage.
mod stream {
    pub const STAGE1: u64 = 1;
    pub const STAGE2: u64 = 2;
    pub const SEPARATE_CE: u64 = 3;
    pub const SEPARATE_BF: u64 = 4;
    pub const ONE_STAGE: u64 = 5;
    pub const FINETUNE1: u64 = 6;
    pub const FINETUNE2: u64 = 7;
    pub const ONLINE_SHORT: u64 = 8;
    pub const ONLINE_LONG: u64 = 9;
    pub const BLACKBOX: u64 = 10;
    pub const ONLINE_SLOT: u64 = 11;
}

/// Runs `steps` SGD steps, numbered from `start`, on the given stores.
#[allow(clippy::too_many_arguments)]
fn run_sgd(
    cfg: &TrainConfig,
    stage: &str,
    stream_id: u64,
    start: usize,
    steps: usize,
    stores: &mut [&mut ParamStore],
    trainable: &dyn Fn(&str) -> bool,
    sampler: Sampler<'_>,
    sample_loss: &mut SampleLoss<'_>,
    is_rate: bool,
) -> Result<Vec<TracePoint>> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed).derive(stream_id);
    let mut trace = Vec::with_capacity(steps);
    for step in start..start + steps {
        let mut rng = base.derive(step as u64);
        let mut total = stores.iter().map(|s| GradientSet::zeros(s)).collect::<Vec<_>>();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let h = sampler(&mut rng);
            let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
            let (value, g) = grad(&views, trainable, &mut |tape, leaves| sample_loss(tape, leaves, &h, &mut rng))
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                    other => other,
                })?;
            loss_sum += value;
            for (acc, gi) in total.iter_mut().zip(&g) {
                acc.add_scaled(gi, 1.0 / cfg.batch_size as f64);
            }
        }
        if !total.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        clip_gradients(&mut total, cfg.grad_clip);
        for (s, g) in stores.iter_mut().zip(&total) {
            sgd_step_masked(s, g, cfg.eta, trainable);
            if !s.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
        }
        let loss = loss_sum / cfg.batch_size as f64;
        trace.push(TracePoint {
            step,
            stage: stage.into(),
            loss,
            rate: is_rate.then_some(-loss),
        });
    }
    Ok(trace)
}

fn is_hbdun(name: &str) -> bool {
    name.starts_with("hbdun.")
}

fn is_digital(name: &str) -> bool {
    is_hbdun(name) && !HbdunParams::is_phase_block(name)
}

fn is_cedun(name: &str) -> bool {
    name.starts_with("cedun.")
}

/// Sample loss of the analog and digital networks on perfect equivalent CSI.
pub fn stage1_loss<'t>(
    tape: &'t Tape,
    hb: &HbdunParams,
    leaves: &[Var<'t>],
    h: &ChannelRealization,
    dims: &SystemDims,
) -> Result<Var<'t>> {
    let (bf, h_eq) = hbdun_forward_var(tape, hb, leaves, h, dims)?;
    Ok(loss_sum_rate_var(tape, &bf, &h_eq, dims))
}

/// Sample loss of pilots, estimator and digital network: beamformers are
/// designed on the estimated equivalent channels and scored on the true ones.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<'t>(
    tape: &'t Tape,
    hb: &HbdunParams,
    hb_leaves: &[Var<'t>],
    ce: &CedunParams,
    ce_leaves: &[Var<'t>],
    h: &ChannelRealization,
    noise: &[CMatrix],
    dims: &SystemDims,
) -> Result<Var<'t>> {
    let (f_rf, w_rf) = hbdun_analog_var(hb, hb_leaves);
    let h_eq = equivalent_channel_var(tape, h, &f_rf, &w_rf);
    let pilots = pilots_var(ce, ce_leaves);
    let y = received_pilot_var(tape, h, &f_rf, &w_rf, &h_eq, &pilots, noise);
    let h_hat = cedun_estimate_var(tape, ce, ce_leaves, &pilots, &y);
    let (f_bb, w_bb) = hbdun_digital_var(tape, hb, hb_leaves, &h_hat, &f_rf, dims)?;
    let bf = HybridVars { f_rf, w_rf, f_bb, w_bb };
    Ok(loss_sum_rate_var(tape, &bf, &h_eq, dims))
}

/// Pooled NMSE of the equivalent-channel estimate.
pub fn nmse_loss<'t>(
    tape: &'t Tape,
    hb: &HbdunParams,
    hb_leaves: &[Var<'t>],
    ce: &CedunParams,
    ce_leaves: &[Var<'t>],
    h: &ChannelRealization,
    noise: &[CMatrix],
) -> Var<'t> {
    let (f_rf, w_rf) = hbdun_analog_var(hb, hb_leaves);
    let h_eq = equivalent_channel_var(tape, h, &f_rf, &w_rf);
    let pilots = pilots_var(ce, ce_leaves);
    let y = received_pilot_var(tape, h, &f_rf, &w_rf, &h_eq, &pilots, noise);
    let h_hat = cedun_estimate_var(tape, ce, ce_leaves, &pilots, &y);
    let err: Vec<Var<'t>> = h_hat.iter().zip(&h_eq).map(|(a, b)| a.sub(*b).abs2().sum()).collect();
    let refs: Vec<Var<'t>> = h_eq.iter().map(|b| b.abs2().sum()).collect();
    tape.hstack(&err).sum().div(tape.hstack(&refs).sum()).re()
}

/// Long-term sample loss: full channels estimated by `ce_long`, beamformers
/// designed on the implied equivalent channels and scored on the true ones.
#[allow(clippy::too_many_arguments)]
pub fn long_term_loss<'t>(
    tape: &'t Tape,
    hb: &HbdunParams,
    hb_leaves: &[Var<'t>],
    ce_long: &CedunParams,
    long_leaves: &[Var<'t>],
    h: &ChannelRealization,
    noise: &[CMatrix],
    dims: &SystemDims,
) -> Result<Var<'t>> {
    let (f_rf, w_rf) = hbdun_analog_var(hb, hb_leaves);
    let h_eq = equivalent_channel_var(tape, h, &f_rf, &w_rf);
    let h_full = cedun_forward_full_var(tape, ce_long, long_leaves, h, noise);
    let design: Vec<Var<'t>> = (0..dims.users)
        .map(|k| w_rf[k].adjoint().matmul(h_full[k]).matmul(f_rf[k]))
        .collect();
    let (f_bb, w_bb) = hbdun_digital_var(tape, hb, hb_leaves, &design, &f_rf, dims)?;
    let bf = HybridVars { f_rf, w_rf, f_bb, w_bb };
    Ok(loss_sum_rate_var(tape, &bf, &h_eq, dims))
}

/// First stage: analog phases and digital network on perfect equivalent CSI.
pub fn train_stage1(
    cfg: &TrainConfig,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    dims: &SystemDims,
    start: usize,
) -> Result<Vec<TracePoint>> {
    stage1_schedule(cfg, "stage1", stream::STAGE1, start, cfg.steps_stage1, sampler, hb, dims)
}

#[allow(clippy::too_many_arguments)]
fn stage1_schedule(
    cfg: &TrainConfig,
    stage: &str,
    stream_id: u64,
    start: usize,
    steps: usize,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    dims: &SystemDims,
) -> Result<Vec<TracePoint>> {
    let layout = hb.clone();
    let mut loss = per_sample(|tape, leaves, h, _| {
        stage1_loss(tape, &layout, &leaves[0], h, dims)
    });
    run_sgd(cfg, stage, stream_id, start, steps, &mut [&mut hb.store], &is_hbdun, sampler, &mut loss, true)
}

/// Second stage: pilots, estimator and digital network trained end to end on
/// the sum rate with the analog phases frozen.
pub fn train_stage2(
    cfg: &TrainConfig,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    ce: &mut CedunParams,
    dims: &SystemDims,
    start: usize,
) -> Result<Vec<TracePoint>> {
    stage2_schedule(cfg, "stage2", stream::STAGE2, start, cfg.steps_stage2, sampler, hb, ce, dims)
}

#[allow(clippy::too_many_arguments)]
fn stage2_schedule(
    cfg: &TrainConfig,
    stage: &str,
    stream_id: u64,
    start: usize,
    steps: usize,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    ce: &mut CedunParams,
    dims: &SystemDims,
) -> Result<Vec<TracePoint>> {
    let (hl, cl) = (hb.clone(), ce.clone());
    let len = ce.layout.layers;
    let mut loss = per_sample(|tape, leaves, h, rng| {
        let noise = pilot_noise(dims, len, rng);
        joint_loss(tape, &hl, &leaves[0], &cl, &leaves[1], h, &noise, dims)
    });
    let trainable = |n: &str| is_digital(n) || is_cedun(n);
    run_sgd(cfg, stage, stream_id, start, steps, &mut [&mut hb.store, &mut ce.store], &trainable, sampler, &mut loss, true)
}

/// Separate design: the estimator is trained on NMSE alone, then the digital
/// network is trained on the sum rate with the estimator frozen.
pub fn train_separate(
    cfg: &TrainConfig,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    ce: &mut CedunParams,
    dims: &SystemDims,
) -> Result<Vec<TracePoint>> {
    let (hl, cl) = (hb.clone(), ce.clone());
    let len = ce.layout.layers;
    let mut nmse = per_sample(|tape, leaves, h, rng| {
        let noise = pilot_noise(dims, len, rng);
        Ok(nmse_loss(tape, &hl, &leaves[0], &cl, &leaves[1], h, &noise))
    });
    let mut trace = run_sgd(
        cfg,
        "separate_ce",
        stream::SEPARATE_CE,
        0,
        cfg.steps_stage2,
        &mut [&mut hb.store, &mut ce.store],
        &is_cedun,
        sampler,
        &mut nmse,
        false,
    )?;
    let cl = ce.clone();
    let mut rate = per_sample(|tape, leaves, h, rng| {
        let noise = pilot_noise(dims, len, rng);
        joint_loss(tape, &hl, &leaves[0], &cl, &leaves[1], h, &noise, dims)
    });
    trace.extend(run_sgd(
        cfg,
        "separate_bf",
        stream::SEPARATE_BF,
        0,
        cfg.steps_stage2,
        &mut [&mut hb.store, &mut ce.store],
        &is_digital,
        sampler,
        &mut rate,
        true,
    )?);
    Ok(trace)
}

/// Single-stage alternative: phases, digital network and estimator trained
/// together on the sum rate for `steps` steps.
pub fn train_one_stage(
    cfg: &TrainConfig,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    ce: &mut CedunParams,
    dims: &SystemDims,
    steps: usize,
) -> Result<Vec<TracePoint>> {
    let (hl, cl) = (hb.clone(), ce.clone());
    let len = ce.layout.layers;
    let mut loss = per_sample(|tape, leaves, h, rng| {
        let noise = pilot_noise(dims, len, rng);
        joint_loss(tape, &hl, &leaves[0], &cl, &leaves[1], h, &noise, dims)
    });
    let trainable = |n: &str| is_hbdun(n) || is_cedun(n);
    run_sgd(
        cfg,
        "one_stage",
        stream::ONE_STAGE,
        0,
        steps,
        &mut [&mut hb.store, &mut ce.store],
        &trainable,
        sampler,
        &mut loss,
        true,
    )
}

/// Resumes both stages for `finetune_steps` each on samples from changed statistics.
pub fn transfer_finetune(
    cfg: &TrainConfig,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    ce: &mut CedunParams,
    dims: &SystemDims,
) -> Result<Vec<TracePoint>> {
    let n = cfg.finetune_steps;
    let mut trace = stage1_schedule(cfg, "finetune1", stream::FINETUNE1, 0, n, sampler, hb, dims)?;
    trace.extend(stage2_schedule(cfg, "finetune2", stream::FINETUNE2, 0, n, sampler, hb, ce, dims)?);
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub frames: usize,
    /// Slots per frame, each carrying one channel realization.
    pub slots: usize,
    /// Short-term SGD steps per slot.
    pub short_steps: usize,
    /// Long-term SGD steps at each frame end.
    pub long_steps: usize,
    /// Learning rate of the long-term update; `None` reuses the training rate.
    pub long_eta: Option<f64>,
    /// Blocks trained by the long-term update.
    pub long_scope: LongTermScope,
}

/// Parameter blocks updated at each frame end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongTermScope {
    /// Analog phases only.
    Phases,
    /// Analog phases and digital network.
    Beamformer,
    /// Analog phases, digital network and the full-CSI estimator.
    All,
}

impl LongTermScope {
    fn trains(self, name: &str) -> bool {
        match self {
            LongTermScope::Phases => HbdunParams::is_phase_block(name),
            LongTermScope::Beamformer => is_hbdun(name),
            LongTermScope::All => is_hbdun(name) || name.starts_with("cedun_long."),
        }
    }
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            frames: 40,
            slots: 8,
            short_steps: 1,
            long_steps: 4,
            long_eta: None,
            long_scope: LongTermScope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineOutput {
    /// Mean sum rate of the slots of each frame, each measured before that slot's update.
    pub frame_rates: Vec<f64>,
    pub trace: Vec<TracePoint>,
}

/// Mixed-timescale online schedule.
///
/// In every slot the current networks serve one fresh channel (its rate is
/// recorded), then the estimator and digital network take `short_steps`
/// single-sample steps on it with the phases frozen. The slot also yields a
/// full-CSI sample estimated by `ce_long` from full-width pilots. At the end
/// of each frame the phases take `long_steps` first-stage steps on the
/// samples collected during the frame; `ce_long` itself is not trained.
pub fn online_schedule(
    cfg: &TrainConfig,
    ocfg: &OnlineConfig,
    sampler: Sampler<'_>,
    hb: &mut HbdunParams,
    ce: &mut CedunParams,
    ce_long: &mut CedunParams,
    dims: &SystemDims,
) -> Result<OnlineOutput> {
    cfg.validate()?;
    let slot_base = online_slot_stream(cfg.seed);
    let short_cfg = TrainConfig {
        batch_size: 1,
        ..cfg.clone()
    };
    let long_cfg = TrainConfig {
        eta: ocfg.long_eta.unwrap_or(cfg.eta),
        batch_size: cfg.batch_size.min(ocfg.slots).max(1),
        ..cfg.clone()
    };
    long_cfg.validate()?;
    let short_trainable = |n: &str| is_digital(n) || is_cedun(n);
    let scope = ocfg.long_scope;
    let long_trainable = |n: &str| scope.trains(n);
    let mut frame_rates = Vec::with_capacity(ocfg.frames);
    let mut trace = Vec::new();
    let mut short_step = 0;
    let mut long_step = 0;
    for frame in 0..ocfg.frames {
        let mut collected = Vec::with_capacity(ocfg.slots);
        let mut rate_sum = 0.0;
        for slot in 0..ocfg.slots {
            let (h, noise) = slot_sample(&slot_base, frame * ocfg.slots + slot, sampler, dims, ce.layout.layers);
            rate_sum += joint_rate(hb, ce, &h, &noise, dims)?;

            let (hl, cl) = (hb.clone(), ce.clone());
            let len = ce.layout.layers;
            let mut loss = per_sample(|tape, leaves, h, rng| {
                let noise = pilot_noise(dims, len, rng);
                joint_loss(tape, &hl, &leaves[0], &cl, &leaves[1], h, &noise, dims)
            });
            let this = |_: &mut Rng| h.clone();
            collected.push(h.clone());
            trace.extend(run_sgd(
                &short_cfg,
                "online_short",
                stream::ONLINE_SHORT,
                short_step,
                ocfg.short_steps,
                &mut [&mut hb.store, &mut ce.store],
                &short_trainable,
                &this,
                &mut loss,
                true,
            )?);
            short_step += ocfg.short_steps;
        }
        frame_rates.push(rate_sum / ocfg.slots as f64);

        let (hl, ll) = (hb.clone(), ce_long.clone());
        let long_len = ce_long.layout.layers;
        let mut loss = per_sample(|tape, leaves, h, rng| {
            let noise = pilot_noise(dims, long_len, rng);
            long_term_loss(tape, &hl, &leaves[0], &ll, &leaves[1], h, &noise, dims)
        });
        let pool = &collected;
        let draw = |r: &mut Rng| pool[r.next_u64() as usize % pool.len()].clone();
        trace.extend(run_sgd(
            &long_cfg,
            "online_long",
            stream::ONLINE_LONG,
            long_step,
            ocfg.long_steps,
            &mut [&mut hb.store, &mut ce_long.store],
            &long_trainable,
            &draw,
            &mut loss,
            true,
        )?);
        long_step += ocfg.long_steps;
    }
    Ok(OnlineOutput { frame_rates, trace })
}

/// Base stream of the per-slot channels and pilot noise of [`online_schedule`].
pub fn online_slot_stream(seed: u64) -> Rng {
    Rng::new(seed).derive(stream::ONLINE_SLOT)
}

/// Channel and pilot noise served in global slot `index`.
pub fn slot_sample(
    base: &Rng,
    index: usize,
    sampler: Sampler<'_>,
    dims: &SystemDims,
    pilot_len: usize,
) -> (ChannelRealization, Vec<CMatrix>) {
    let mut rng = base.derive(index as u64);
    let h = sampler(&mut rng);
    let noise = pilot_noise(dims, pilot_len, &mut rng);
    (h, noise)
}

/// Black-box baseline trained on the sum rate with perfect equivalent CSI.
pub fn train_blackbox(
    cfg: &TrainConfig,
    sampler: Sampler<'_>,
    bb: &mut BlackboxParams,
    dims: &SystemDims,
    steps: usize,
) -> Result<Vec<TracePoint>> {
    let layout = bb.clone();
    let mut loss = per_sample(|tape, leaves, h, _| {
        let (bf, h_eq) = crate::unfolding::blackbox::blackbox_forward_var(tape, &layout, &leaves[0], h, dims)?;
        Ok(loss_sum_rate_var(tape, &bf, &h_eq, dims))
    });
    run_sgd(cfg, "blackbox", stream::BLACKBOX, 0, steps, &mut [&mut bb.store], &|_| true, sampler, &mut loss, true)
}

/// Sum rate of the networks on one channel with estimated equivalent CSI.
pub fn joint_rate(
    hb: &HbdunParams,
    ce: &CedunParams,
    h: &ChannelRealization,
    noise: &[CMatrix],
    dims: &SystemDims,
) -> Result<f64> {
    let (f_rf, w_rf) = hb.phases().analog(dims.users);
    let h_eq = equivalent_channel(h, &f_rf, &w_rf)?.h_eq;
    let h_hat = cedun_forward(ce, h, &f_rf, &w_rf, noise)?;
    let bf = hbdun_forward_eq(hb, &h_hat, dims)?;
    Ok(sum_rate(&bf, &h_eq, dims).total)
}

/// Mean sum rate with perfect equivalent CSI.
pub fn mean_rate_hbdun(hb: &HbdunParams, channels: &[ChannelRealization], dims: &SystemDims) -> Result<f64> {
    let mut total = 0.0;
    for h in channels {
        let bf = hbdun_forward(hb, h, dims)?;
        let h_eq = equivalent_channel(h, &bf.f_rf, &bf.w_rf)?.h_eq;
        total += sum_rate(&bf, &h_eq, dims).total;
    }
    Ok(total / channels.len().max(1) as f64)
}

/// Mean sum rate with estimated CSI; pilot noise drawn from `seed`.
pub fn mean_rate_joint(
    hb: &HbdunParams,
    ce: &CedunParams,
    channels: &[ChannelRealization],
    dims: &SystemDims,
    seed: u64,
) -> Result<f64> {
    let base = Rng::new(seed);
    let mut total = 0.0;
    for (i, h) in channels.iter().enumerate() {
        let mut rng = base.derive(i as u64);
        let noise = pilot_noise(dims, ce.layout.layers, &mut rng);
        total += joint_rate(hb, ce, h, &noise, dims)?;
    }
    Ok(total / channels.len().max(1) as f64)
}

/// Mean sum rate of SCA with perfect CSI at the given phases.
pub fn mean_rate_sca(
    phases: &AnalogPhases,
    channels: &[ChannelRealization],
    dims: &SystemDims,
    cfg: &ScaConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for h in channels {
        let bf = sca_hybrid(h, phases, dims, cfg)?;
        let h_eq = equivalent_channel(h, &bf.f_rf, &bf.w_rf)?.h_eq;
        total += sum_rate(&bf, &h_eq, dims).total;
    }
    Ok(total / channels.len().max(1) as f64)
}

/// Mean sum rate of the black-box baseline.
pub fn mean_rate_blackbox(bb: &BlackboxParams, channels: &[ChannelRealization], dims: &SystemDims) -> Result<f64> {
    let mut total = 0.0;
    for h in channels {
        let bf = crate::unfolding::blackbox::blackbox_forward(bb, h, dims)?;
        let h_eq = equivalent_channel(h, &bf.f_rf, &bf.w_rf)?.h_eq;
        total += sum_rate(&bf, &h_eq, dims).total;
    }
    Ok(total / channels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel, ChannelParams};
    use crate::unfolding::{CedunLayout, HbdunLayout, HbdunMode};
    use crate::unfolding::hbdun::hbdun_analog;

    fn setup(seed: u64) -> (SystemDims, HbdunParams, CedunParams) {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(seed);
        let hb = HbdunParams::init(HbdunLayout::new(&dims, 2, false, HbdunMode::Learned), &dims, &mut rng).unwrap();
        let ce = CedunParams::init(CedunLayout::equivalent(&dims, 3, 1e-3), 0.99, &mut rng).unwrap();
        (dims, hb, ce)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            eta: 1e-3,
            batch_size: 2,
            steps_stage1: 3,
            steps_stage2: 3,
            finetune_steps: 1,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn sampler(dims: SystemDims) -> impl Fn(&mut Rng) -> ChannelRealization {
        move |rng: &mut Rng| sample_channel(&dims, &ChannelParams::default(), rng)
    }

    fn assert_close(tape: &CMatrix, fd: &CMatrix, what: &str) {
        let scale = fd.frob_norm_sqr().sqrt().max(1e-3);
        let err = (tape - fd).frob_norm_sqr().sqrt() / scale;
        assert!(err < 1e-4, "{what}: relative error {err:e}");
    }

    #[test]
    fn quadratic_probe_gradient() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let theta = rng.complex_normal_matrix(2, 3, 1.0);
        let target = rng.complex_normal_matrix(2, 3, 1.0);
        store.push("q", theta.clone(), false);
        let c = target.clone();
        let (value, g) = grad(&[&store], &|_| true, &mut |tape, leaves| {
            Ok(leaves[0][0].sub(tape.constant(c.clone())).abs2().sum().re())
        })
        .unwrap();
        let diff = &theta - &target;
        assert!((value - diff.frob_norm_sqr()).abs() < 1e-12);
        assert!(g[0].blocks[0].max_abs_diff(&diff.scale_real(2.0)) < 1e-12);
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let (dims, hb, _) = setup(2);
        let h = sample_channel(&dims, &ChannelParams::default(), &mut Rng::new(3));
        let (_, g) = grad(&[&hb.store], &is_hbdun, &mut |tape, leaves| stage1_loss(tape, &hb, &leaves[0], &h, &dims))
            .unwrap();
        let mut plain = |stores: &[ParamStore]| -> Result<f64> {
            let p = HbdunParams::from_store(hb.layout.clone(), stores[0].clone())?;
            let bf = hbdun_forward(&p, &h, &dims)?;
            let h_eq = equivalent_channel(&h, &bf.f_rf, &bf.w_rf)?.h_eq;
            Ok(loss_sum_rate(&bf, &h_eq, &dims))
        };
        let stores = [hb.store.clone()];
        for name in ["hbdun.psi_f.b0", "hbdun.psi_w.b1", "hbdun.u0.l0.t_f", "hbdun.u1.l1.mu", "hbdun.u0.l1.d_f"] {
            let idx = hb.store.find(name).unwrap();
            let entries: Vec<usize> = (0..hb.store.get(idx).len().min(2)).collect();
            let fd = finite_difference_block(&mut plain, &stores, 0, idx, 1e-6, Some(&entries)).unwrap();
            let mut tape_g = CMatrix::zeros(fd.rows(), fd.cols());
            for &k in &entries {
                tape_g.data_mut()[k] = g[0].blocks[idx].data()[k];
            }
            assert_close(&tape_g, &fd, name);
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (dims, hb, ce) = setup(4);
        let mut rng = Rng::new(5);
        let h = sample_channel(&dims, &ChannelParams::default(), &mut rng);
        let noise = pilot_noise(&dims, ce.layout.layers, &mut rng);
        let trainable = |n: &str| is_digital(n) || is_cedun(n);
        let (_, g) = grad(&[&hb.store, &ce.store], &trainable, &mut |tape, leaves| {
            joint_loss(tape, &hb, &leaves[0], &ce, &leaves[1], &h, &noise, &dims)
        })
        .unwrap();
        let mut plain = |stores: &[ParamStore]| -> Result<f64> {
            let p = HbdunParams::from_store(hb.layout.clone(), stores[0].clone())?;
            let c = CedunParams::from_store(ce.layout.clone(), stores[1].clone())?;
            Ok(-joint_rate(&p, &c, &h, &noise, &dims)?)
        };
        let stores = [hb.store.clone(), ce.store.clone()];
        for name in ["cedun.u0.pilots", "cedun.u1.l2.t_g", "cedun.u0.l1.gamma"] {
            let idx = ce.store.find(name).unwrap();
            let fd = finite_difference_block(&mut plain, &stores, 1, idx, 1e-6, Some(&[0])).unwrap();
            let mut tape_g = CMatrix::zeros(fd.rows(), fd.cols());
            tape_g.data_mut()[0] = g[1].blocks[idx].data()[0];
            assert_close(&tape_g, &fd, name);
        }
        let psi = hb.store.find("hbdun.psi_f.b0").unwrap();
        assert_eq!(g[0].blocks[psi].frob_norm_sqr(), 0.0);
    }

    #[test]
    fn sgd_step_is_linear_and_keeps_real_blocks_real() {
        let mut store = ParamStore::new();
        store.push("a", CMatrix::from_vec(1, 2, vec![c(1.0, 2.0), c(3.0, -1.0)]), false);
        store.push("b", CMatrix::from_vec(1, 1, vec![c(0.5, 0.0)]), true);
        let g = GradientSet {
            blocks: vec![
                CMatrix::from_vec(1, 2, vec![c(2.0, 4.0), c(-2.0, 0.0)]),
                CMatrix::from_vec(1, 1, vec![c(1.0, 3.0)]),
            ],
        };
        sgd_step(&mut store, &g, 0.5);
        assert_eq!(store.get(0).data(), &[c(0.0, 0.0), c(4.0, -1.0)]);
        assert_eq!(store.get(1).data(), &[c(0.0, 0.0)]);
        let before = store.clone();
        sgd_step_masked(&mut store, &g, 0.5, &|n| n == "b");
        assert_eq!(store.get(0), before.get(0));
    }

    fn c(re: f64, im: f64) -> crate::numerics::C64 {
        crate::numerics::c64(re, im)
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let (dims, mut hb, mut ce) = setup(6);
        let (hb0, ce0) = (hb.clone(), ce.clone());
        let cfg = TrainConfig {
            steps_stage1: 0,
            steps_stage2: 0,
            ..small_cfg()
        };
        let s = sampler(dims.clone());
        assert!(train_stage1(&cfg, &s, &mut hb, &dims, 0).unwrap().is_empty());
        assert!(train_stage2(&cfg, &s, &mut hb, &mut ce, &dims, 0).unwrap().is_empty());
        assert_eq!(hb, hb0);
        assert_eq!(ce, ce0);
    }

    #[test]
    fn stage2_freezes_phases_bitwise() {
        let (dims, mut hb, mut ce) = setup(7);
        let phases = hb.phases();
        let (hb0, ce0) = (hb.clone(), ce.clone());
        let s = sampler(dims.clone());
        let trace = train_stage2(&small_cfg(), &s, &mut hb, &mut ce, &dims, 0).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(hb.phases(), phases);
        assert_eq!(hbdun_analog(&hb), hbdun_analog(&hb0));
        assert_ne!(hb.store, hb0.store);
        assert_ne!(ce.store, ce0.store);
    }

    fn online_run(short_steps: usize, long_steps: usize) -> (HbdunParams, HbdunParams, CedunParams, CedunParams, CedunParams) {
        let (dims, mut hb, mut ce) = setup(11);
        let mut ce_long = CedunParams::init(CedunLayout::full(&dims, 4, 1e-3), 0.99, &mut Rng::new(12)).unwrap();
        let (hb0, ce0, long0) = (hb.clone(), ce.clone(), ce_long.clone());
        let ocfg = OnlineConfig {
            frames: 1,
            slots: 2,
            short_steps,
            long_steps,
            long_eta: None,
            long_scope: LongTermScope::Phases,
        };
        let out = online_schedule(&small_cfg(), &ocfg, &sampler(dims.clone()), &mut hb, &mut ce, &mut ce_long, &dims).unwrap();
        assert_eq!(out.frame_rates.len(), 1);
        assert_eq!(ce_long, long0);
        (hb0, hb, ce0, ce, ce_long)
    }

    #[test]
    fn online_frame_without_long_steps_keeps_phases() {
        let (hb0, hb, ce0, ce, _) = online_run(1, 0);
        assert_eq!(hb.phases(), hb0.phases());
        assert_ne!(hb.store, hb0.store);
        assert_ne!(ce.store, ce0.store);
    }

    #[test]
    fn online_long_steps_move_only_the_phases() {
        let (hb0, hb, ce0, ce, _) = online_run(0, 1);
        assert_ne!(hb.phases(), hb0.phases());
        assert_eq!(ce, ce0);
        let mut reset = hb.clone();
        reset.set_phases(&hb0.phases());
        assert_eq!(reset.store, hb0.store);
    }

    #[test]
    fn resumed_training_replays_the_same_steps() {
        let (dims, hb0, _) = setup(8);
        let s = sampler(dims.clone());
        let cfg = TrainConfig {
            steps_stage1: 4,
            ..small_cfg()
        };
        let mut full = hb0.clone();
        let t_full = train_stage1(&cfg, &s, &mut full, &dims, 0).unwrap();
        let half = TrainConfig {
            steps_stage1: 2,
            ..cfg.clone()
        };
        let mut resumed = hb0.clone();
        let mut t = train_stage1(&half, &s, &mut resumed, &dims, 0).unwrap();
        t.extend(train_stage1(&half, &s, &mut resumed, &dims, 2).unwrap());
        assert_eq!(resumed, full);
        assert_eq!(t, t_full);
    }

    #[test]
    fn trace_csv_has_expected_header() {
        let trace = vec![
            TracePoint {
                step: 0,
                stage: "stage1".into(),
                loss: -2.5,
                rate: Some(2.5),
            },
            TracePoint {
                step: 1,
                stage: "separate_ce".into(),
                loss: 0.1,
                rate: None,
            },
        ];
        let mut out = Vec::new();
        write_trace_csv(&mut out, &trace).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "step,stage,loss,sum_rate\n0,stage1,-2.5,2.5\n1,separate_ce,0.1,\n");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
