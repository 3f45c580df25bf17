//! Conventional hybrid beamforming: SCA digital beamformers, SSCA analog
//! phase updates, zero forcing, phase quantization and power normalization.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::channel::{equivalent_channel, ChannelRealization, SystemDims};
use crate::error::{Error, Result};
use crate::metrics::{sum_rate, sum_rate_var};
use crate::numerics::{c64, CMatrix, Rng, C64};

/// Analog and digital beamformers for every user.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridBeamformers {
    pub f_rf: Vec<CMatrix>,
    pub w_rf: Vec<CMatrix>,
    pub f_bb: Vec<CMatrix>,
    pub w_bb: Vec<CMatrix>,
}

impl HybridBeamformers {
    /// Largest deviation of `|entry|·√N` from 1 over all analog entries.
    pub fn modulus_error(&self) -> f64 {
        let dev = |m: &CMatrix| {
            let s = (m.rows() as f64).sqrt();
            m.data().iter().map(|z| (z.norm() * s - 1.0).abs()).fold(0.0, f64::max)
        };
        self.f_rf.iter().chain(&self.w_rf).map(dev).fold(0.0, f64::max)
    }

    /// Largest deviation of `‖F_RF,k F_BB,k‖²` from `streams`.
    pub fn power_error(&self, streams: usize) -> f64 {
        self.f_rf
            .iter()
            .zip(&self.f_bb)
            .map(|(a, b)| (a.matmul(b).frob_norm_sqr() - streams as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Taped counterpart of [`HybridBeamformers`].
#[derive(Clone)]
pub struct HybridVars<'t> {
    pub f_rf: Vec<Var<'t>>,
    pub w_rf: Vec<Var<'t>>,
    pub f_bb: Vec<Var<'t>>,
    pub w_bb: Vec<Var<'t>>,
}

impl<'t> HybridVars<'t> {
    pub fn constant(tape: &'t Tape, bf: &HybridBeamformers) -> Self {
        let c = |v: &Vec<CMatrix>| v.iter().map(|m| tape.constant(m.clone())).collect();
        HybridVars {
            f_rf: c(&bf.f_rf),
            w_rf: c(&bf.w_rf),
            f_bb: c(&bf.f_bb),
            w_bb: c(&bf.w_bb),
        }
    }

    pub fn value(&self) -> HybridBeamformers {
        let v = |xs: &Vec<Var<'t>>| xs.iter().map(|x| x.value()).collect();
        HybridBeamformers {
            f_rf: v(&self.f_rf),
            w_rf: v(&self.w_rf),
            f_bb: v(&self.f_bb),
            w_bb: v(&self.w_bb),
        }
    }
}

/// `exp(jφ)/√N` entrywise, `N` = number of rows.
pub fn phase_to_analog(phi: &CMatrix) -> CMatrix {
    let s = 1.0 / (phi.rows() as f64).sqrt();
    phi.map(|p| C64::from_polar(s, p.re))
}

pub fn phases_to_analog(phi_f: &CMatrix, phi_w: &CMatrix) -> (CMatrix, CMatrix) {
    (phase_to_analog(phi_f), phase_to_analog(phi_w))
}

pub fn phase_to_analog_var(phi: Var<'_>) -> Var<'_> {
    let s = 1.0 / (phi.shape().0 as f64).sqrt();
    phi.scale(c64(0.0, 1.0)).exp().scale_real(s)
}

/// Phase-shifter angles. One block per user, or a single block shared by all users.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogPhases {
    pub f: Vec<CMatrix>,
    pub w: Vec<CMatrix>,
}

impl AnalogPhases {
    pub fn zeros(dims: &SystemDims, shared: bool) -> Self {
        let blocks = if shared { 1 } else { dims.users };
        AnalogPhases {
            f: vec![CMatrix::zeros(dims.n_t, dims.n_t_rf); blocks],
            w: vec![CMatrix::zeros(dims.n_r, dims.n_r_rf); blocks],
        }
    }

    /// Angles uniform on `[-π, π)`.
    pub fn random(dims: &SystemDims, shared: bool, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(dims, shared);
        for m in p.f.iter_mut().chain(p.w.iter_mut()) {
            *m = rng.uniform_matrix(m.rows(), m.cols(), -PI, PI);
        }
        p
    }

    pub fn is_shared(&self) -> bool {
        self.f.len() == 1
    }

    pub fn block(&self, user: usize) -> usize {
        user.min(self.f.len() - 1)
    }

    pub fn analog(&self, users: usize) -> (Vec<CMatrix>, Vec<CMatrix>) {
        let f = (0..users).map(|k| phase_to_analog(&self.f[self.block(k)])).collect();
        let w = (0..users).map(|k| phase_to_analog(&self.w[self.block(k)])).collect();
        (f, w)
    }

    pub fn quantized(&self, bits: u32) -> Self {
        AnalogPhases {
            f: self.f.iter().map(|m| quantize_phases(m, bits)).collect(),
            w: self.w.iter().map(|m| quantize_phases(m, bits)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        AnalogPhases {
            f: self.f.iter().map(|m| CMatrix::zeros(m.rows(), m.cols())).collect(),
            w: self.w.iter().map(|m| CMatrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut CMatrix> {
        self.f.iter_mut().chain(self.w.iter_mut())
    }

    fn blocks(&self) -> impl Iterator<Item = &CMatrix> {
        self.f.iter().chain(self.w.iter())
    }
}

/// `|1 − wᴴH_k f_kl|² + Σ_{(m,n)≠(k,l)} |wᴴH_k f_mn|² + σ²‖w‖²`.
pub fn stream_mse(h_eq: &[CMatrix], f_bb: &[CMatrix], w: &CMatrix, k: usize, l: usize, noise: f64) -> f64 {
    let a = w.adjoint().matmul(&h_eq[k]);
    let mut eps = noise * w.frob_norm_sqr();
    for (m, f) in f_bb.iter().enumerate() {
        for n in 0..f.cols() {
            let s = a.matmul(&f.col(n)).as_scalar();
            eps += if (m, n) == (k, l) {
                (c64(1.0, 0.0) - s).norm_sqr()
            } else {
                s.norm_sqr()
            };
        }
    }
    eps
}

/// `(Σ_v H F_v F_vᴴ Hᴴ + σ² I)⁻¹ H F_k`.
pub fn mmse_combiner(h_eq_k: &CMatrix, f_bb: &[CMatrix], k: usize, noise: f64) -> Result<CMatrix> {
    let r = h_eq_k.rows();
    let mut cov = CMatrix::identity(r).scale_real(noise);
    for f in f_bb {
        let hf = h_eq_k.matmul(f);
        cov = &cov + &hf.matmul(&hf.adjoint());
    }
    Ok(cov.inverse()?.matmul(&h_eq_k.matmul(&f_bb[k])))
}

pub fn mmse_combiners(h_eq: &[CMatrix], f_bb: &[CMatrix], dims: &SystemDims) -> Result<Vec<CMatrix>> {
    (0..dims.users)
        .map(|k| mmse_combiner(&h_eq[k], f_bb, k, dims.noise[k]))
        .collect()
}

/// Scales `F_BB` so that `‖F_RF F_BB‖² = streams`.
pub fn normalize_precoder(f_rf: &CMatrix, f_bb: &CMatrix, streams: usize) -> Result<CMatrix> {
    let n = f_rf.matmul(f_bb).frob_norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroPrecoder);
    }
    Ok(f_bb.scale_real((streams as f64).sqrt() / n))
}

pub fn normalize_precoder_var<'t>(f_rf: Var<'t>, f_bb: Var<'t>, streams: usize) -> Var<'t> {
    let inv_norm = f_rf.matmul(f_bb).abs2().sum().sqrt().recip();
    f_bb.smul(inv_norm.scale_real((streams as f64).sqrt()))
}

/// All-ones precoders meeting the power constraint.
pub fn initial_precoders(dims: &SystemDims, f_rf: &[CMatrix]) -> Result<Vec<CMatrix>> {
    f_rf.iter()
        .map(|a| normalize_precoder(a, &CMatrix::filled(dims.n_t_rf, dims.streams, c64(1.0, 0.0)), dims.streams))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaConfig {
    /// Base of the log-linear surrogate, `> 1`.
    pub alpha: f64,
    /// Per-user regularizer; `None` uses the noise powers.
    pub tau: Option<Vec<f64>>,
    pub max_iter: usize,
    /// Stop once the objective changes by less than this.
    pub tol: f64,
    /// Renormalize the precoders after every iteration instead of only at the end.
    pub normalize_each: bool,
}

impl Default for ScaConfig {
    fn default() -> Self {
        ScaConfig {
            alpha: std::f64::consts::E,
            tau: None,
            max_iter: 50,
            tol: 1e-6,
            normalize_each: false,
        }
    }
}

impl ScaConfig {
    pub fn tau(&self, dims: &SystemDims, k: usize) -> f64 {
        match &self.tau {
            Some(t) => t[k],
            None => dims.noise[k],
        }
    }
}

/// Iterate of the SCA digital beamformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaState {
    pub f_bb: Vec<CMatrix>,
    pub w_bb: Vec<CMatrix>,
    pub t: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
}

impl ScaState {
    pub fn new(dims: &SystemDims, f_bb: Vec<CMatrix>) -> Self {
        let zeros = vec![vec![0.0; dims.streams]; dims.users];
        ScaState {
            w_bb: vec![CMatrix::zeros(dims.n_r_rf, dims.streams); dims.users],
            f_bb,
            t: zeros.clone(),
            lambda: zeros.clone(),
            eps: zeros,
        }
    }

    pub fn log_mse_sum(&self) -> f64 {
        self.eps.iter().flatten().map(|e| e.ln()).sum()
    }
}

/// Auxiliary update `t + (1 − ε α^t) / ln α`.
pub fn sca_t_update(t: f64, eps: f64, alpha: f64) -> f64 {
    t + (1.0 - eps * alpha.powf(t)) / alpha.ln()
}

/// One SCA iteration: combiners, duals, precoders, MSEs, auxiliaries.
pub fn sca_step(
    state: &mut ScaState,
    h_eq: &[CMatrix],
    dims: &SystemDims,
    f_rf: &[CMatrix],
    cfg: &ScaConfig,
) -> Result<()> {
    let ln_alpha = cfg.alpha.ln();
    state.w_bb = mmse_combiners(h_eq, &state.f_bb, dims)?;
    for k in 0..dims.users {
        for l in 0..dims.streams {
            state.lambda[k][l] = cfg.alpha.powf(state.t[k][l]) / ln_alpha;
        }
    }
    let m = dims.n_t_rf;
    let mut weighted = CMatrix::zeros(m, m);
    for mm in 0..dims.users {
        for n in 0..dims.streams {
            let u = h_eq[mm].adjoint().matmul(&state.w_bb[mm].col(n));
            weighted = &weighted + &u.matmul(&u.adjoint()).scale_real(state.lambda[mm][n]);
        }
    }
    let mut next = Vec::with_capacity(dims.users);
    for k in 0..dims.users {
        let inv = weighted.add_identity(c64(cfg.tau(dims, k), 0.0)).inverse()?;
        let mut f = CMatrix::zeros(m, dims.streams);
        for l in 0..dims.streams {
            let col = inv
                .matmul(&h_eq[k].adjoint().matmul(&state.w_bb[k].col(l)))
                .scale_real(state.lambda[k][l]);
            f.set_col(l, &col);
        }
        if cfg.normalize_each {
            f = normalize_precoder(&f_rf[k], &f, dims.streams)?;
        }
        next.push(f);
    }
    state.f_bb = next;
    for k in 0..dims.users {
        for l in 0..dims.streams {
            let eps = stream_mse(h_eq, &state.f_bb, &state.w_bb[k].col(l), k, l, dims.noise[k]);
            state.eps[k][l] = eps;
            state.t[k][l] = sca_t_update(state.t[k][l], eps, cfg.alpha);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaOutput {
    pub f_bb: Vec<CMatrix>,
    pub w_bb: Vec<CMatrix>,
    /// `Σ log ε` after each iteration.
    pub trace: Vec<f64>,
    pub state: ScaState,
}

/// Runs SCA from `f_init`, then normalizes the precoders and recomputes the combiners.
pub fn sca_digital(
    h_eq: &[CMatrix],
    dims: &SystemDims,
    f_rf: &[CMatrix],
    cfg: &ScaConfig,
    f_init: Vec<CMatrix>,
) -> Result<ScaOutput> {
    let mut state = ScaState::new(dims, f_init);
    let mut trace = Vec::with_capacity(cfg.max_iter);
    for _ in 0..cfg.max_iter {
        sca_step(&mut state, h_eq, dims, f_rf, cfg)?;
        let obj = state.log_mse_sum();
        let done = trace.last().map_or(false, |prev: &f64| (prev - obj).abs() < cfg.tol);
        trace.push(obj);
        if done {
            break;
        }
    }
    let f_bb = state
        .f_bb
        .iter()
        .zip(f_rf)
        .map(|(f, a)| normalize_precoder(a, f, dims.streams))
        .collect::<Result<Vec<_>>>()?;
    let w_bb = mmse_combiners(h_eq, &f_bb, dims)?;
    Ok(ScaOutput {
        f_bb,
        w_bb,
        trace,
        state,
    })
}

/// SCA at the given analog beamformers, returning full hybrid beamformers.
pub fn sca_hybrid(h: &ChannelRealization, phases: &AnalogPhases, dims: &SystemDims, cfg: &ScaConfig) -> Result<HybridBeamformers> {
    let (f_rf, w_rf) = phases.analog(dims.users);
    let eq = equivalent_channel(h, &f_rf, &w_rf)?;
    let init = initial_precoders(dims, &f_rf)?;
    let out = sca_digital(&eq.h_eq, dims, &f_rf, cfg, init)?;
    Ok(HybridBeamformers {
        f_rf,
        w_rf,
        f_bb: out.f_bb,
        w_bb: out.w_bb,
    })
}

/// Zero-forcing precoders from the pseudo-inverse of the stacked equivalent channel.
///
/// With fewer streams than receive RF chains, each user keeps the
/// lowest-norm pseudo-inverse columns of its block.
pub fn zf_digital(h_eq: &[CMatrix], dims: &SystemDims, f_rf: &[CMatrix]) -> Result<(Vec<CMatrix>, Vec<CMatrix>)> {
    let refs: Vec<&CMatrix> = h_eq.iter().collect();
    let stacked = CMatrix::vstack(&refs);
    let gram = stacked.matmul(&stacked.adjoint());
    let condition = gram.condition_one();
    if !(condition <= crate::estimation::MAX_GRAM_CONDITION) {
        return Err(Error::SingularGram { condition });
    }
    let pinv = stacked.adjoint().matmul(&gram.inverse()?);
    let mut f_bb = Vec::with_capacity(dims.users);
    let mut offset = 0;
    for k in 0..dims.users {
        let rows = h_eq[k].rows();
        let mut cols: Vec<usize> = (offset..offset + rows).collect();
        cols.sort_by(|&a, &b| {
            let na = pinv.col(a).frob_norm_sqr();
            let nb = pinv.col(b).frob_norm_sqr();
            na.partial_cmp(&nb).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        cols.truncate(dims.streams);
        cols.sort_unstable();
        f_bb.push(normalize_precoder(&f_rf[k], &pinv.select_cols(&cols), dims.streams)?);
        offset += rows;
    }
    let w_bb = mmse_combiners(h_eq, &f_bb, dims)?;
    Ok((f_bb, w_bb))
}

/// Maps each angle to the nearest of `2^bits` uniform levels on `[-π, π)`;
/// ties go to the lower level.
pub fn quantize_phases(phi: &CMatrix, bits: u32) -> CMatrix {
    let levels = 1u64 << bits;
    let step = 2.0 * PI / levels as f64;
    phi.map(|p| {
        let wrapped = p.re - 2.0 * PI * ((p.re + PI) / (2.0 * PI)).floor();
        let pos = (wrapped + PI) / step;
        let lower = pos.floor();
        let idx = if pos - lower > 0.5 { lower as u64 + 1 } else { lower as u64 } % levels;
        c64(-PI + idx as f64 * step, 0.0)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SscaConfig {
    pub eta: f64,
    /// `ρ^t = (1 + t)^(−rho_exponent)`.
    pub rho_exponent: f64,
    /// Quadratic coefficient of the surrogate; recorded, not used by the update.
    pub tau_reg: f64,
    /// Inner SCA iterations per outer step.
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub sca: ScaConfig,
}

impl Default for SscaConfig {
    fn default() -> Self {
        SscaConfig {
            eta: 0.05,
            rho_exponent: 0.8,
            tau_reg: 0.0,
            inner_iters: 10,
            outer_iters: 100,
            sca: ScaConfig::default(),
        }
    }
}

pub fn rho(t: usize, exponent: f64) -> f64 {
    (1.0 + t as f64).powf(-exponent)
}

/// Running surrogate of the long-term objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateState {
    pub phases: AnalogPhases,
    pub f: f64,
    pub f_phi: AnalogPhases,
    pub eta: f64,
    pub tau_reg: f64,
    pub t: usize,
}

impl SurrogateState {
    pub fn new(phases: AnalogPhases, eta: f64, tau_reg: f64) -> Self {
        SurrogateState {
            f_phi: phases.zeros_like(),
            phases,
            f: 0.0,
            eta,
            tau_reg,
            t: 0,
        }
    }
}

/// `f ← (1−ρ) f + ρ r0`, `f_φ ← (1−ρ) f_φ + ρ ∇r0`.
pub fn ssca_accumulate(state: &mut SurrogateState, r0: f64, grad: &AnalogPhases, rho: f64) {
    state.f = (1.0 - rho) * state.f + rho * r0;
    for (acc, g) in state.f_phi.blocks_mut().zip(grad.blocks()) {
        *acc = &acc.scale_real(1.0 - rho) + &g.scale_real(rho);
    }
    state.t += 1;
}

/// `φ ← φ − η f_φ`.
pub fn ssca_phase_step(state: &mut SurrogateState) {
    let eta = state.eta;
    let grads: Vec<CMatrix> = state.f_phi.blocks().cloned().collect();
    for (p, g) in state.phases.blocks_mut().zip(&grads) {
        *p = &*p - &g.scale_real(eta);
    }
}

/// Negative sum rate at the given phases with fixed digital beamformers,
/// and its gradient w.r.t. the phases. Precoders are renormalized for the
/// analog precoders implied by the phases.
pub fn ssca_objective(
    phases: &AnalogPhases,
    h: &ChannelRealization,
    f_bb: &[CMatrix],
    w_bb: &[CMatrix],
    dims: &SystemDims,
) -> (f64, AnalogPhases) {
    let tape = Tape::new();
    let pf: Vec<Var> = phases.f.iter().map(|m| tape.param(m.clone(), true)).collect();
    let pw: Vec<Var> = phases.w.iter().map(|m| tape.param(m.clone(), true)).collect();
    let block = |k: usize| phases.block(k);
    let f_rf: Vec<Var> = (0..dims.users).map(|k| phase_to_analog_var(pf[block(k)])).collect();
    let w_rf: Vec<Var> = (0..dims.users).map(|k| phase_to_analog_var(pw[block(k)])).collect();
    let h_eq: Vec<Var> = (0..dims.users)
        .map(|k| w_rf[k].adjoint().matmul(tape.constant(h.h[k].clone())).matmul(f_rf[k]))
        .collect();
    let f_bb: Vec<Var> = (0..dims.users)
        .map(|k| normalize_precoder_var(f_rf[k], tape.constant(f_bb[k].clone()), dims.streams))
        .collect();
    let w_bb: Vec<Var> = w_bb.iter().map(|m| tape.constant(m.clone())).collect();
    let vars = HybridVars { f_rf, w_rf, f_bb, w_bb };
    let loss = sum_rate_var(&tape, &vars, &h_eq, dims).neg();
    let grads = tape.gradient(loss);
    let g = AnalogPhases {
        f: pf.iter().map(|v| grads.wrt(*v)).collect(),
        w: pw.iter().map(|v| grads.wrt(*v)).collect(),
    };
    (loss.scalar_value().re, g)
}

/// Stochastic SCA over analog phases. `sampler` yields one channel per outer step.
/// Returns the final phases and the sum rate observed at each outer step.
pub fn ssca_outer(
    sampler: &mut dyn FnMut() -> ChannelRealization,
    dims: &SystemDims,
    cfg: &SscaConfig,
    init: AnalogPhases,
) -> Result<(AnalogPhases, Vec<f64>)> {
    let mut state = SurrogateState::new(init, cfg.eta, cfg.tau_reg);
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let inner = ScaConfig {
        max_iter: cfg.inner_iters,
        ..cfg.sca.clone()
    };
    for t in 0..cfg.outer_iters {
        let h = sampler();
        let bf = sca_hybrid(&h, &state.phases, dims, &inner)?;
        let eq = equivalent_channel(&h, &bf.f_rf, &bf.w_rf)?;
        trace.push(sum_rate(&bf, &eq.h_eq, dims).total);
        let (r0, grad) = ssca_objective(&state.phases, &h, &bf.f_bb, &bf.w_bb, dims);
        ssca_accumulate(&mut state, r0, &grad, rho(t, cfg.rho_exponent));
        ssca_phase_step(&mut state);
    }
    Ok((state.phases, trace))
}
