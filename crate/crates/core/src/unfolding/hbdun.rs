//! SCA-induced hybrid beamforming network.
//!
//! The analog part maps trainable phases to unit-modulus beamformers. The
//! digital part unfolds the SCA iteration into layers with trainable
//! multipliers, offsets, step constant `μ` and, in learned mode, the
//! `C⁺B + D⁻` stand-in for the precoder inverse. Precoders are renormalized
//! after every layer and the output combiners are the MMSE combiners of the
//! final precoders.

use serde::{Deserialize, Serialize};

use super::{real_scalar, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::beamforming::{normalize_precoder_var, phase_to_analog_var, AnalogPhases, HybridBeamformers, HybridVars, ScaState};
use crate::channel::{ChannelRealization, SystemDims};
use crate::error::{Error, Result};
use crate::numerics::{c64, CMatrix, Rng, EPS_DIAG};
use crate::unfolding::cedun::equivalent_channel_var;

/// Block names within one layer, in storage order.
pub const LAYER_FIELDS: [&str; 11] = [
    "t_w", "q_w", "t_lambda", "q_lambda", "t_f", "q_f", "b_f", "d_f", "t_t", "q_t", "mu",
];
const REAL_FIELDS: [&str; 5] = ["t_lambda", "q_lambda", "t_t", "q_t", "mu"];

/// How the precoder sublayer inverts `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HbdunMode {
    /// `C⁺ B_f + D_f⁻` with trainable `B_f`, `D_f`.
    Learned,
    /// Exact `C⁻¹`.
    Reference,
}

/// Shape and fixed constants of a hybrid beamforming network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbdunLayout {
    pub users: usize,
    pub streams: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub n_t_rf: usize,
    pub n_r_rf: usize,
    pub layers: usize,
    pub shared_phases: bool,
    /// Base of the log-linear surrogate.
    pub alpha: f64,
    pub mode: HbdunMode,
}

impl HbdunLayout {
    pub fn new(dims: &SystemDims, layers: usize, shared_phases: bool, mode: HbdunMode) -> Self {
        HbdunLayout {
            users: dims.users,
            streams: dims.streams,
            n_t: dims.n_t,
            n_r: dims.n_r,
            n_t_rf: dims.n_t_rf,
            n_r_rf: dims.n_r_rf,
            layers,
            shared_phases,
            alpha: std::f64::consts::E,
            mode,
        }
    }

    pub fn phase_blocks(&self) -> usize {
        if self.shared_phases {
            1
        } else {
            self.users
        }
    }

    pub fn check_dims(&self, dims: &SystemDims) -> Result<()> {
        let same = self.users == dims.users
            && self.streams == dims.streams
            && self.n_t == dims.n_t
            && self.n_r == dims.n_r
            && self.n_t_rf == dims.n_t_rf
            && self.n_r_rf == dims.n_r_rf;
        if !same {
            return Err(Error::DimensionMismatch("network layout does not match system dimensions".into()));
        }
        if !(self.alpha > 1.0) {
            return Err(Error::config("hbdun.alpha", "must exceed 1"));
        }
        Ok(())
    }
}

/// Values of one layer's blocks for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct HbdunLayer {
    pub t_w: CMatrix,
    pub q_w: CMatrix,
    pub t_lambda: CMatrix,
    pub q_lambda: CMatrix,
    pub t_f: CMatrix,
    pub q_f: CMatrix,
    pub b_f: CMatrix,
    pub d_f: CMatrix,
    pub t_t: CMatrix,
    pub q_t: CMatrix,
    pub mu: f64,
}

impl HbdunLayer {
    /// Multipliers `I`, offsets `0`, `B_f = I`, `D_f = 0`, `μ = 1/ln α` and
    /// `q_t = 1/ln α`, so that a reference-mode layer is one SCA iteration.
    pub fn identity(layout: &HbdunLayout) -> Self {
        let inv_ln = 1.0 / layout.alpha.ln();
        let (m, r, s) = (layout.n_t_rf, layout.n_r_rf, layout.streams);
        HbdunLayer {
            t_w: CMatrix::identity(r),
            q_w: CMatrix::zeros(r, s),
            t_lambda: CMatrix::identity(s),
            q_lambda: CMatrix::zeros(s, 1),
            t_f: CMatrix::identity(m),
            q_f: CMatrix::zeros(m, s),
            b_f: CMatrix::identity(m),
            d_f: CMatrix::zeros(m, m),
            t_t: CMatrix::identity(s),
            q_t: CMatrix::from_real(s, 1, &vec![inv_ln; s]),
            mu: inv_ln,
        }
    }

    fn blocks(&self) -> [CMatrix; 11] {
        [
            self.t_w.clone(),
            self.q_w.clone(),
            self.t_lambda.clone(),
            self.q_lambda.clone(),
            self.t_f.clone(),
            self.q_f.clone(),
            self.b_f.clone(),
            self.d_f.clone(),
            self.t_t.clone(),
            self.q_t.clone(),
            real_scalar(self.mu),
        ]
    }
}

/// Analog phases followed by per-user, per-layer digital blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HbdunParams {
    pub layout: HbdunLayout,
    pub store: ParamStore,
}

impl HbdunParams {
    /// Identity digital layers at the given phases.
    pub fn identity(layout: HbdunLayout, phases: &AnalogPhases) -> Result<Self> {
        if phases.f.len() != layout.phase_blocks() || phases.w.len() != layout.phase_blocks() {
            return Err(Error::DimensionMismatch(format!(
                "{} phase blocks, layout needs {}",
                phases.f.len(),
                layout.phase_blocks()
            )));
        }
        let mut store = ParamStore::new();
        for (j, m) in phases.f.iter().enumerate() {
            store.push(format!("hbdun.psi_f.b{j}"), m.real_part(), true);
        }
        for (j, m) in phases.w.iter().enumerate() {
            store.push(format!("hbdun.psi_w.b{j}"), m.real_part(), true);
        }
        let layer = HbdunLayer::identity(&layout);
        for k in 0..layout.users {
            for i in 0..layout.layers {
                for (field, value) in LAYER_FIELDS.iter().zip(layer.blocks()) {
                    store.push(format!("hbdun.u{k}.l{i}.{field}"), value, REAL_FIELDS.contains(field));
                }
            }
        }
        Ok(HbdunParams { layout, store })
    }

    /// Identity digital layers at phases uniform on `[-π, π)`.
    pub fn init(layout: HbdunLayout, dims: &SystemDims, rng: &mut Rng) -> Result<Self> {
        layout.check_dims(dims)?;
        let phases = AnalogPhases::random(dims, layout.shared_phases, rng);
        Self::identity(layout, &phases)
    }

    pub fn from_store(layout: HbdunLayout, store: ParamStore) -> Result<Self> {
        let nb = layout.phase_blocks();
        let phases = AnalogPhases {
            f: vec![CMatrix::zeros(layout.n_t, layout.n_t_rf); nb],
            w: vec![CMatrix::zeros(layout.n_r, layout.n_r_rf); nb],
        };
        Self::identity(layout.clone(), &phases)?.store.check_same_layout(&store)?;
        Ok(HbdunParams { layout, store })
    }

    /// True for the names of analog phase blocks.
    pub fn is_phase_block(name: &str) -> bool {
        name.starts_with("hbdun.psi_")
    }

    pub fn phase_index_f(&self, block: usize) -> usize {
        block
    }

    pub fn phase_index_w(&self, block: usize) -> usize {
        self.layout.phase_blocks() + block
    }

    pub fn layer_index(&self, user: usize, layer: usize) -> usize {
        2 * self.layout.phase_blocks() + (user * self.layout.layers + layer) * LAYER_FIELDS.len()
    }

    pub fn phases(&self) -> AnalogPhases {
        let nb = self.layout.phase_blocks();
        AnalogPhases {
            f: (0..nb).map(|j| self.store.get(self.phase_index_f(j)).clone()).collect(),
            w: (0..nb).map(|j| self.store.get(self.phase_index_w(j)).clone()).collect(),
        }
    }

    pub fn set_phases(&mut self, phases: &AnalogPhases) {
        for j in 0..self.layout.phase_blocks() {
            let (fi, wi) = (self.phase_index_f(j), self.phase_index_w(j));
            *self.store.get_mut(fi) = phases.f[j].real_part();
            *self.store.get_mut(wi) = phases.w[j].real_part();
        }
    }

    pub fn layer(&self, user: usize, layer: usize) -> HbdunLayer {
        let i = self.layer_index(user, layer);
        let g = |f: usize| self.store.get(i + f).clone();
        HbdunLayer {
            t_w: g(0),
            q_w: g(1),
            t_lambda: g(2),
            q_lambda: g(3),
            t_f: g(4),
            q_f: g(5),
            b_f: g(6),
            d_f: g(7),
            t_t: g(8),
            q_t: g(9),
            mu: self.store.get(i + 10)[(0, 0)].re,
        }
    }

    pub fn set_layer(&mut self, user: usize, layer: usize, values: &HbdunLayer) {
        let i = self.layer_index(user, layer);
        for (f, v) in values.blocks().into_iter().enumerate() {
            *self.store.get_mut(i + f) = v;
        }
    }
}

/// Taped view of one layer for one user.
#[derive(Clone, Copy)]
pub struct HbdunLayerVars<'t> {
    pub t_w: Var<'t>,
    pub q_w: Var<'t>,
    pub t_lambda: Var<'t>,
    pub q_lambda: Var<'t>,
    pub t_f: Var<'t>,
    pub q_f: Var<'t>,
    pub b_f: Var<'t>,
    pub d_f: Var<'t>,
    pub t_t: Var<'t>,
    pub q_t: Var<'t>,
    pub mu: Var<'t>,
}

impl<'t> HbdunLayerVars<'t> {
    pub fn from_leaves(params: &HbdunParams, leaves: &[Var<'t>], user: usize, layer: usize) -> Self {
        let i = params.layer_index(user, layer);
        HbdunLayerVars {
            t_w: leaves[i],
            q_w: leaves[i + 1],
            t_lambda: leaves[i + 2],
            q_lambda: leaves[i + 3],
            t_f: leaves[i + 4],
            q_f: leaves[i + 5],
            b_f: leaves[i + 6],
            d_f: leaves[i + 7],
            t_t: leaves[i + 8],
            q_t: leaves[i + 9],
            mu: leaves[i + 10],
        }
    }

    pub fn constant(tape: &'t Tape, layer: &HbdunLayer) -> Self {
        let c = |m: &CMatrix| tape.constant(m.clone());
        HbdunLayerVars {
            t_w: c(&layer.t_w),
            q_w: c(&layer.q_w),
            t_lambda: c(&layer.t_lambda),
            q_lambda: c(&layer.q_lambda),
            t_f: c(&layer.t_f),
            q_f: c(&layer.q_f),
            b_f: c(&layer.b_f),
            d_f: c(&layer.d_f),
            t_t: c(&layer.t_t),
            q_t: c(&layer.q_t),
            mu: tape.scalar(layer.mu),
        }
    }
}

/// Taped iterate of the digital network. Vectors indexed by user; `t`,
/// `lambda` and `eps` are `streams x 1` real columns.
#[derive(Clone)]
pub struct DigitalVars<'t> {
    pub f_bb: Vec<Var<'t>>,
    pub w_bb: Vec<Var<'t>>,
    pub t: Vec<Var<'t>>,
    pub lambda: Vec<Var<'t>>,
    pub eps: Vec<Var<'t>>,
}

impl<'t> DigitalVars<'t> {
    pub fn constant(tape: &'t Tape, state: &ScaState) -> Self {
        let col = |v: &Vec<f64>| tape.constant(CMatrix::from_real(v.len(), 1, v));
        DigitalVars {
            f_bb: state.f_bb.iter().map(|m| tape.constant(m.clone())).collect(),
            w_bb: state.w_bb.iter().map(|m| tape.constant(m.clone())).collect(),
            t: state.t.iter().map(col).collect(),
            lambda: state.lambda.iter().map(col).collect(),
            eps: state.eps.iter().map(col).collect(),
        }
    }

    pub fn value(&self) -> ScaState {
        let col = |v: &Var<'t>| v.value().data().iter().map(|z| z.re).collect::<Vec<f64>>();
        ScaState {
            f_bb: self.f_bb.iter().map(|v| v.value()).collect(),
            w_bb: self.w_bb.iter().map(|v| v.value()).collect(),
            t: self.t.iter().map(col).collect(),
            lambda: self.lambda.iter().map(col).collect(),
            eps: self.eps.iter().map(col).collect(),
        }
    }
}

/// Taped `(Σ_v H F_v F_vᴴ Hᴴ + σ² I)⁻¹ H F_k` for every user.
pub fn mmse_combiners_var<'t>(
    tape: &'t Tape,
    h_eq: &[Var<'t>],
    f_bb: &[Var<'t>],
    dims: &SystemDims,
) -> Result<Vec<Var<'t>>> {
    let all_f = tape.hstack(f_bb);
    (0..dims.users)
        .map(|k| {
            let hf = h_eq[k].matmul(all_f);
            let cov = hf.matmul(hf.adjoint()).add_identity(c64(dims.noise[k], 0.0));
            Ok(cov.inverse()?.matmul(h_eq[k].matmul(f_bb[k])))
        })
        .collect()
}

/// `t ← T_t (t − μ ε α^t) + q_t`.
pub fn t_sublayer<'t>(t: Var<'t>, eps: Var<'t>, alpha: f64, t_t: Var<'t>, q_t: Var<'t>, mu: Var<'t>) -> Var<'t> {
    let step = eps.hadamard(t.pow_base(alpha)).smul(mu);
    t_t.matmul(t.sub(step)).add(q_t)
}

/// Stream MSEs of user `k` as a `streams x 1` column.
fn stream_mse_var<'t>(
    tape: &'t Tape,
    h_eq_k: Var<'t>,
    all_f: Var<'t>,
    w_k: Var<'t>,
    k: usize,
    dims: &SystemDims,
) -> Var<'t> {
    let s = dims.streams;
    let total = dims.users * s;
    let target = CMatrix::from_fn(s, total, |l, j| if j == k * s + l { c64(1.0, 0.0) } else { c64(0.0, 0.0) });
    let err = w_k.adjoint().matmul(h_eq_k).matmul(all_f).sub(tape.constant(target));
    let noise = w_k.abs2().sum_rows().transpose().scale_real(dims.noise[k]);
    err.abs2().sum_cols().add(noise).re()
}

/// One digital layer for all users.
pub fn hbdun_digital_layer_var<'t>(
    tape: &'t Tape,
    state: &mut DigitalVars<'t>,
    h_eq: &[Var<'t>],
    f_rf: &[Var<'t>],
    dims: &SystemDims,
    layout: &HbdunLayout,
    layer: &[HbdunLayerVars<'t>],
) -> Result<()> {
    let users = dims.users;
    let mmse = mmse_combiners_var(tape, h_eq, &state.f_bb, dims)?;
    let w: Vec<Var<'t>> = (0..users).map(|k| layer[k].t_w.matmul(mmse[k]).add(layer[k].q_w)).collect();
    let alpha_t: Vec<Var<'t>> = state.t.iter().map(|t| t.pow_base(layout.alpha)).collect();
    let lambda: Vec<Var<'t>> = (0..users)
        .map(|k| layer[k].t_lambda.matmul(alpha_t[k].smul(layer[k].mu)).add(layer[k].q_lambda))
        .collect();

    let mut weighted: Option<Var<'t>> = None;
    for m in 0..users {
        let a = h_eq[m].adjoint().matmul(w[m]);
        let term = a.mul_cols(lambda[m].transpose()).matmul(a.adjoint());
        weighted = Some(match weighted {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    let weighted = weighted.expect("at least one user");

    let mut f_next = Vec::with_capacity(users);
    for k in 0..users {
        let c = weighted.add_identity(c64(dims.noise[k], 0.0));
        let inv = match layout.mode {
            HbdunMode::Reference => c.inverse()?,
            HbdunMode::Learned => c.diag_inv_plus(EPS_DIAG)?.matmul(layer[k].b_f).add(layer[k].d_f.zero_diag_imag()),
        };
        let g = inv.matmul(h_eq[k].adjoint().matmul(w[k])).mul_cols(lambda[k].transpose());
        let f = layer[k].t_f.matmul(g).add(layer[k].q_f);
        f_next.push(normalize_precoder_var(f_rf[k], f, dims.streams));
    }

    let all_f = tape.hstack(&f_next);
    let mut eps = Vec::with_capacity(users);
    let mut t_next = Vec::with_capacity(users);
    for k in 0..users {
        let e = stream_mse_var(tape, h_eq[k], all_f, w[k], k, dims);
        t_next.push(t_sublayer(state.t[k], e, layout.alpha, layer[k].t_t, layer[k].q_t, layer[k].mu));
        eps.push(e);
    }
    state.f_bb = f_next;
    state.w_bb = w;
    state.t = t_next;
    state.lambda = lambda;
    state.eps = eps;
    Ok(())
}

/// Plain-value digital layer. `layer[k]` holds user `k`'s blocks.
pub fn hbdun_digital_layer(
    state: &ScaState,
    h_eq: &[CMatrix],
    f_rf: &[CMatrix],
    dims: &SystemDims,
    layout: &HbdunLayout,
    layer: &[HbdunLayer],
) -> Result<ScaState> {
    let tape = Tape::new();
    let mut vars = DigitalVars::constant(&tape, state);
    let h: Vec<Var> = h_eq.iter().map(|m| tape.constant(m.clone())).collect();
    let a: Vec<Var> = f_rf.iter().map(|m| tape.constant(m.clone())).collect();
    let lv: Vec<HbdunLayerVars> = layer.iter().map(|l| HbdunLayerVars::constant(&tape, l)).collect();
    hbdun_digital_layer_var(&tape, &mut vars, &h, &a, dims, layout, &lv)?;
    Ok(vars.value())
}

/// Analog beamformers from taped phases.
pub fn hbdun_analog_var<'t>(params: &HbdunParams, leaves: &[Var<'t>]) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
    let nb = params.layout.phase_blocks();
    let block = |k: usize| k.min(nb - 1);
    let f = (0..params.layout.users)
        .map(|k| phase_to_analog_var(leaves[params.phase_index_f(block(k))]))
        .collect();
    let w = (0..params.layout.users)
        .map(|k| phase_to_analog_var(leaves[params.phase_index_w(block(k))]))
        .collect();
    (f, w)
}

pub fn hbdun_analog(params: &HbdunParams) -> (Vec<CMatrix>, Vec<CMatrix>) {
    params.phases().analog(params.layout.users)
}

/// Digital network on the design channels `h_design`, starting from
/// normalized all-ones precoders. Returns final precoders and their MMSE combiners.
pub fn hbdun_digital_var<'t>(
    tape: &'t Tape,
    params: &HbdunParams,
    leaves: &[Var<'t>],
    h_design: &[Var<'t>],
    f_rf: &[Var<'t>],
    dims: &SystemDims,
) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
    let lay = &params.layout;
    lay.check_dims(dims)?;
    let ones = CMatrix::filled(lay.n_t_rf, lay.streams, c64(1.0, 0.0));
    let f0: Vec<Var<'t>> = f_rf
        .iter()
        .map(|a| normalize_precoder_var(*a, tape.constant(ones.clone()), lay.streams))
        .collect();
    let zeros = || tape.constant(CMatrix::zeros(lay.streams, 1));
    let mut state = DigitalVars {
        w_bb: Vec::new(),
        f_bb: f0,
        t: (0..lay.users).map(|_| zeros()).collect(),
        lambda: Vec::new(),
        eps: Vec::new(),
    };
    for i in 0..lay.layers {
        let lv: Vec<HbdunLayerVars<'t>> = (0..lay.users)
            .map(|k| HbdunLayerVars::from_leaves(params, leaves, k, i))
            .collect();
        hbdun_digital_layer_var(tape, &mut state, h_design, f_rf, dims, lay, &lv)?;
    }
    let w_bb = mmse_combiners_var(tape, h_design, &state.f_bb, dims)?;
    Ok((state.f_bb, w_bb))
}

/// Full network on perfect equivalent CSI. Returns the beamformers and the
/// equivalent channels they were designed for.
pub fn hbdun_forward_var<'t>(
    tape: &'t Tape,
    params: &HbdunParams,
    leaves: &[Var<'t>],
    h: &ChannelRealization,
    dims: &SystemDims,
) -> Result<(HybridVars<'t>, Vec<Var<'t>>)> {
    let (f_rf, w_rf) = hbdun_analog_var(params, leaves);
    let h_eq = equivalent_channel_var(tape, h, &f_rf, &w_rf);
    let (f_bb, w_bb) = hbdun_digital_var(tape, params, leaves, &h_eq, &f_rf, dims)?;
    Ok((HybridVars { f_rf, w_rf, f_bb, w_bb }, h_eq))
}

/// Beamformers designed from `h_design` at the network's own analog beamformers.
pub fn hbdun_forward_eq(params: &HbdunParams, h_design: &[CMatrix], dims: &SystemDims) -> Result<HybridBeamformers> {
    let tape = Tape::new();
    let leaves = params.store.leaves(&tape, &|_| false);
    let (f_rf, w_rf) = hbdun_analog_var(params, &leaves);
    let h: Vec<Var> = h_design.iter().map(|m| tape.constant(m.clone())).collect();
    let (f_bb, w_bb) = hbdun_digital_var(&tape, params, &leaves, &h, &f_rf, dims)?;
    Ok(HybridVars { f_rf, w_rf, f_bb, w_bb }.value())
}

/// Beamformers for a channel realization with perfect equivalent CSI.
pub fn hbdun_forward(params: &HbdunParams, h: &ChannelRealization, dims: &SystemDims) -> Result<HybridBeamformers> {
    let tape = Tape::new();
    let leaves = params.store.leaves(&tape, &|_| false);
    Ok(hbdun_forward_var(&tape, params, &leaves, h, dims)?.0.value())
}
