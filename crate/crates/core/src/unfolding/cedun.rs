//! RLS-induced channel estimation network with trainable pilots.
//!
//! Layer `n` consumes pilot column `n` and applies the four RLS sublayers,
//! each wrapped as `T·(…) + q`. Identity multipliers, zero offsets and
//! `γ = β` reproduce the plain recursion exactly.

use serde::{Deserialize, Serialize};

use super::{real_scalar, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::channel::{scale_pilots, ChannelRealization, SystemDims};
use crate::error::{Error, Result};
use crate::estimation::RlsState;
use crate::numerics::{CMatrix, Rng};

/// Block names within one layer, in storage order.
pub const LAYER_FIELDS: [&str; 9] = ["t_g", "q_g", "t_v", "q_v", "t_p", "q_p", "t_w", "q_w", "gamma"];

/// Shape of a channel estimation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedunLayout {
    pub users: usize,
    /// Pilot dimension, the regressor length.
    pub inputs: usize,
    /// Received dimension.
    pub outputs: usize,
    /// Layer count, equal to the pilot length.
    pub layers: usize,
    /// Per-column pilot power.
    pub power: f64,
    /// Initial inverse correlation is `δ⁻¹ I`.
    pub delta: f64,
    pub prefix: String,
}

impl CedunLayout {
    /// Estimator of the equivalent channels `H_eq,k`.
    pub fn equivalent(dims: &SystemDims, layers: usize, delta: f64) -> Self {
        CedunLayout {
            users: dims.users,
            inputs: dims.n_t_rf,
            outputs: dims.n_r_rf,
            layers,
            power: dims.power,
            delta,
            prefix: "cedun".into(),
        }
    }

    /// Estimator of the full channels `H_k`, used by the long-term online stage.
    pub fn full(dims: &SystemDims, layers: usize, delta: f64) -> Self {
        CedunLayout {
            users: dims.users,
            inputs: dims.n_t,
            outputs: dims.n_r,
            layers,
            power: dims.power,
            delta,
            prefix: "cedun_long".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.inputs == 0 || self.outputs == 0 {
            return Err(Error::config("cedun", "users, inputs and outputs must be positive"));
        }
        if !(self.power > 0.0) || !(self.delta > 0.0) {
            return Err(Error::config("cedun", "power and delta must be positive"));
        }
        Ok(())
    }
}

/// Values of one layer's blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CedunLayer {
    pub t_g: CMatrix,
    pub q_g: CMatrix,
    pub t_v: CMatrix,
    pub q_v: CMatrix,
    pub t_p: CMatrix,
    pub q_p: CMatrix,
    pub t_w: CMatrix,
    pub q_w: CMatrix,
    pub gamma: f64,
}

impl CedunLayer {
    /// `T = I`, `q = 0`, `γ = β`.
    pub fn identity(inputs: usize, outputs: usize, beta: f64) -> Self {
        let eye = CMatrix::identity(inputs);
        CedunLayer {
            t_g: eye.clone(),
            q_g: CMatrix::zeros(inputs, 1),
            t_v: eye.clone(),
            q_v: CMatrix::zeros(inputs, 1),
            t_p: eye.clone(),
            q_p: CMatrix::zeros(inputs, inputs),
            t_w: eye,
            q_w: CMatrix::zeros(inputs, outputs),
            gamma: beta,
        }
    }

    fn blocks(&self) -> [CMatrix; 9] {
        [
            self.t_g.clone(),
            self.q_g.clone(),
            self.t_v.clone(),
            self.q_v.clone(),
            self.t_p.clone(),
            self.q_p.clone(),
            self.t_w.clone(),
            self.q_w.clone(),
            real_scalar(self.gamma),
        ]
    }
}

/// Trainable pilots plus per-user, per-layer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CedunParams {
    pub layout: CedunLayout,
    pub store: ParamStore,
}

impl CedunParams {
    /// Identity layers with forgetting factor `beta` and the given raw pilots.
    pub fn identity(layout: CedunLayout, beta: f64, pilots: &[CMatrix]) -> Result<Self> {
        layout.validate()?;
        if pilots.len() != layout.users {
            return Err(Error::DimensionMismatch(format!(
                "{} pilot blocks for {} users",
                pilots.len(),
                layout.users
            )));
        }
        let mut store = ParamStore::new();
        for (k, x) in pilots.iter().enumerate() {
            if x.shape() != (layout.inputs, layout.layers) {
                return Err(Error::DimensionMismatch(format!(
                    "pilots of user {k} are {:?}, expected {}x{}",
                    x.shape(),
                    layout.inputs,
                    layout.layers
                )));
            }
            store.push(format!("{}.u{k}.pilots", layout.prefix), x.clone(), false);
        }
        let layer = CedunLayer::identity(layout.inputs, layout.outputs, beta);
        for k in 0..layout.users {
            for n in 0..layout.layers {
                for (field, value) in LAYER_FIELDS.iter().zip(layer.blocks()) {
                    store.push(format!("{}.u{k}.l{n}.{field}", layout.prefix), value, *field == "gamma");
                }
            }
        }
        Ok(CedunParams { layout, store })
    }

    /// Identity layers and complex Gaussian pilots.
    pub fn init(layout: CedunLayout, beta: f64, rng: &mut Rng) -> Result<Self> {
        let pilots: Vec<CMatrix> = (0..layout.users)
            .map(|_| rng.complex_normal_matrix(layout.inputs, layout.layers, 1.0))
            .collect();
        Self::identity(layout, beta, &pilots)
    }

    pub fn pilot_index(&self, user: usize) -> usize {
        user
    }

    pub fn layer_index(&self, user: usize, layer: usize) -> usize {
        self.layout.users + (user * self.layout.layers + layer) * LAYER_FIELDS.len()
    }

    /// Pilots of `user` after scaling every column to the power budget.
    pub fn pilots(&self, user: usize) -> CMatrix {
        scale_pilots(self.store.get(self.pilot_index(user)), self.layout.power)
    }

    pub fn layer(&self, user: usize, layer: usize) -> CedunLayer {
        let i = self.layer_index(user, layer);
        let g = |f: usize| self.store.get(i + f).clone();
        CedunLayer {
            t_g: g(0),
            q_g: g(1),
            t_v: g(2),
            q_v: g(3),
            t_p: g(4),
            q_p: g(5),
            t_w: g(6),
            q_w: g(7),
            gamma: self.store.get(i + 8)[(0, 0)].re,
        }
    }

    pub fn from_store(layout: CedunLayout, store: ParamStore) -> Result<Self> {
        let template = Self::identity(
            layout.clone(),
            1.0,
            &vec![CMatrix::zeros(layout.inputs, layout.layers); layout.users],
        )?;
        template.store.check_same_layout(&store)?;
        Ok(CedunParams { layout, store })
    }
}

/// One unfolded RLS layer on plain values.
pub fn cedun_layer(state: &mut RlsState, x: &CMatrix, y: &CMatrix, p: &CedunLayer) {
    let g = &p.t_g.matmul(&state.p.matmul(x)) + &p.q_g;
    let denom = g.adjoint().matmul(x).as_scalar() + p.gamma;
    let v = &p.t_v.matmul(&g.scale(denom.inv())) + &p.q_v;
    let inner = (&state.p - &v.matmul(&g.adjoint())).scale_real(1.0 / p.gamma);
    state.p = &p.t_p.matmul(&inner) + &p.q_p;
    let e = y - &state.w.adjoint().matmul(x);
    state.w = &p.t_w.matmul(&(&state.w + &v.matmul(&e.adjoint()))) + &p.q_w;
    state.beta = p.gamma;
    state.step += 1;
}

/// Runs all layers of `user` over its received block and returns `Ĥ = Wᴴ`.
pub fn cedun_estimate_user(params: &CedunParams, user: usize, y: &CMatrix) -> Result<CMatrix> {
    let lay = &params.layout;
    if y.shape() != (lay.outputs, lay.layers) {
        return Err(Error::DimensionMismatch(format!(
            "received block {:?}, expected {}x{}",
            y.shape(),
            lay.outputs,
            lay.layers
        )));
    }
    let x = params.pilots(user);
    let mut state = RlsState::new(lay.inputs, lay.outputs, 1.0, lay.delta);
    for n in 0..lay.layers {
        cedun_layer(&mut state, &x.col(n), &y.col(n), &params.layer(user, n));
    }
    Ok(state.estimate())
}

pub fn cedun_estimate(params: &CedunParams, y: &[CMatrix]) -> Result<Vec<CMatrix>> {
    (0..params.layout.users).map(|k| cedun_estimate_user(params, k, y.get(k).ok_or_else(|| {
        Error::DimensionMismatch(format!("no received block for user {k}"))
    })?)).collect()
}

/// Synthesizes the received pilots through the analog beamformers and estimates `H_eq`.
pub fn cedun_forward(
    params: &CedunParams,
    h: &ChannelRealization,
    f_rf: &[CMatrix],
    w_rf: &[CMatrix],
    noise: &[CMatrix],
) -> Result<Vec<CMatrix>> {
    let pilots: Vec<CMatrix> = (0..params.layout.users).map(|k| params.pilots(k)).collect();
    let y = crate::channel::received_pilot_with_noise(h, f_rf, w_rf, &pilots, noise, params.layout.power)?;
    cedun_estimate(params, &y)
}

/// Full-channel observation `Y_k = H_k X_k + Z_k` used by the long-term estimator.
pub fn received_full_pilot(h: &ChannelRealization, pilots: &[CMatrix], noise: &[CMatrix]) -> Vec<CMatrix> {
    h.h.iter()
        .zip(pilots)
        .zip(noise)
        .map(|((hk, x), z)| &hk.matmul(x) + z)
        .collect()
}

/// Long-term estimate of the full channels.
pub fn cedun_forward_full(params: &CedunParams, h: &ChannelRealization, noise: &[CMatrix]) -> Result<Vec<CMatrix>> {
    let pilots: Vec<CMatrix> = (0..params.layout.users).map(|k| params.pilots(k)).collect();
    cedun_estimate(params, &received_full_pilot(h, &pilots, noise))
}

/// Taped view of one layer.
#[derive(Clone, Copy)]
pub struct CedunLayerVars<'t> {
    pub t_g: Var<'t>,
    pub q_g: Var<'t>,
    pub t_v: Var<'t>,
    pub q_v: Var<'t>,
    pub t_p: Var<'t>,
    pub q_p: Var<'t>,
    pub t_w: Var<'t>,
    pub q_w: Var<'t>,
    pub gamma: Var<'t>,
}

impl<'t> CedunLayerVars<'t> {
    pub fn from_leaves(params: &CedunParams, leaves: &[Var<'t>], user: usize, layer: usize) -> Self {
        let i = params.layer_index(user, layer);
        CedunLayerVars {
            t_g: leaves[i],
            q_g: leaves[i + 1],
            t_v: leaves[i + 2],
            q_v: leaves[i + 3],
            t_p: leaves[i + 4],
            q_p: leaves[i + 5],
            t_w: leaves[i + 6],
            q_w: leaves[i + 7],
            gamma: leaves[i + 8],
        }
    }
}

/// Taped `(W, P)` pair of the recursion.
#[derive(Clone, Copy)]
pub struct RlsVars<'t> {
    pub w: Var<'t>,
    pub p: Var<'t>,
}

/// Taped counterpart of [`cedun_layer`].
pub fn cedun_layer_var<'t>(state: &mut RlsVars<'t>, x: Var<'t>, y: Var<'t>, p: &CedunLayerVars<'t>) {
    let g = p.t_g.matmul(state.p.matmul(x)).add(p.q_g);
    let denom = g.adjoint().matmul(x).add(p.gamma);
    let v = p.t_v.matmul(g.smul(denom.recip())).add(p.q_v);
    let inner = state.p.sub(v.matmul(g.adjoint())).smul(p.gamma.recip());
    state.p = p.t_p.matmul(inner).add(p.q_p);
    let e = y.sub(state.w.adjoint().matmul(x));
    state.w = p.t_w.matmul(state.w.add(v.matmul(e.adjoint()))).add(p.q_w);
}

/// Scaled pilots of every user as taped values.
pub fn pilots_var<'t>(params: &CedunParams, leaves: &[Var<'t>]) -> Vec<Var<'t>> {
    (0..params.layout.users)
        .map(|k| leaves[params.pilot_index(k)].column_power(params.layout.power))
        .collect()
}

/// Taped estimate of every user's channel from received blocks `y`.
pub fn cedun_estimate_var<'t>(
    tape: &'t Tape,
    params: &CedunParams,
    leaves: &[Var<'t>],
    pilots: &[Var<'t>],
    y: &[Var<'t>],
) -> Vec<Var<'t>> {
    let lay = &params.layout;
    (0..lay.users)
        .map(|k| {
            let init = RlsState::new(lay.inputs, lay.outputs, 1.0, lay.delta);
            let mut state = RlsVars {
                w: tape.constant(init.w),
                p: tape.constant(init.p),
            };
            for n in 0..lay.layers {
                let layer = CedunLayerVars::from_leaves(params, leaves, k, n);
                cedun_layer_var(&mut state, pilots[k].col(n), y[k].col(n), &layer);
            }
            state.w.adjoint()
        })
        .collect()
}

/// Taped received pilots, in the same operation order as
/// [`crate::channel::received_pilot_with_noise`].
pub fn received_pilot_var<'t>(
    tape: &'t Tape,
    h: &ChannelRealization,
    f_rf: &[Var<'t>],
    w_rf: &[Var<'t>],
    h_eq: &[Var<'t>],
    pilots: &[Var<'t>],
    noise: &[CMatrix],
) -> Vec<Var<'t>> {
    let users = h.h.len();
    (0..users)
        .map(|k| {
            let wh = w_rf[k].adjoint();
            let mut y = h_eq[k].matmul(pilots[k]);
            let mut interference: Option<Var<'t>> = None;
            for u in (0..users).filter(|&u| u != k) {
                let term = f_rf[u].matmul(pilots[u]);
                interference = Some(match interference {
                    Some(acc) => acc.add(term),
                    None => term,
                });
            }
            if let Some(s) = interference {
                y = y.add(wh.matmul(tape.constant(h.h[k].clone())).matmul(s));
            }
            y.add(wh.matmul(tape.constant(noise[k].clone())))
        })
        .collect()
}

/// Taped `W_RF,kᴴ H_k F_RF,k` for every user.
pub fn equivalent_channel_var<'t>(
    tape: &'t Tape,
    h: &ChannelRealization,
    f_rf: &[Var<'t>],
    w_rf: &[Var<'t>],
) -> Vec<Var<'t>> {
    h.h.iter()
        .enumerate()
        .map(|(k, hk)| w_rf[k].adjoint().matmul(tape.constant(hk.clone())).matmul(f_rf[k]))
        .collect()
}

/// Taped full-channel estimate for the long-term stage.
pub fn cedun_forward_full_var<'t>(
    tape: &'t Tape,
    params: &CedunParams,
    leaves: &[Var<'t>],
    h: &ChannelRealization,
    noise: &[CMatrix],
) -> Vec<Var<'t>> {
    let pilots = pilots_var(params, leaves);
    let y: Vec<Var<'t>> = h
        .h
        .iter()
        .enumerate()
        .map(|(k, hk)| tape.constant(hk.clone()).matmul(pilots[k]).add(tape.constant(noise[k].clone())))
        .collect();
    cedun_estimate_var(tape, params, leaves, &pilots, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforming::AnalogPhases;
    use crate::channel::{pilot_noise, received_pilot_with_noise, sample_channel, ChannelParams};
    use crate::estimation::{rls_estimate, rls_step};
    use crate::numerics::{c64, C64};

    fn setup(seed: u64) -> (SystemDims, ChannelRealization, Vec<CMatrix>, Vec<CMatrix>) {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(seed);
        let h = sample_channel(&dims, &ChannelParams::default(), &mut rng);
        let (f, w) = AnalogPhases::random(&dims, false, &mut rng).analog(dims.users);
        (dims, h, f, w)
    }

    #[test]
    fn identity_layer_matches_rls_step() {
        let mut rng = Rng::new(3);
        let x = rng.complex_normal_matrix(4, 1, 1.0);
        let y = rng.complex_normal_matrix(2, 1, 1.0);
        let mut a = RlsState::new(4, 2, 0.97, 0.5);
        a.w = rng.complex_normal_matrix(4, 2, 1.0);
        let mut b = a.clone();
        rls_step(&mut a, &x, &y);
        cedun_layer(&mut b, &x, &y, &CedunLayer::identity(4, 2, 0.97));
        assert!(a.w.max_abs_diff(&b.w) < 1e-12);
        assert!(a.p.max_abs_diff(&b.p) < 1e-12);
    }

    #[test]
    fn pure_offset_sets_w() {
        let mut layer = CedunLayer::identity(3, 2, 0.9);
        layer.t_w = CMatrix::zeros(3, 3);
        layer.q_w = CMatrix::filled(3, 2, c64(0.25, 0.0));
        let mut s = RlsState::new(3, 2, 0.9, 1.0);
        cedun_layer(&mut s, &CMatrix::zeros(3, 1), &CMatrix::zeros(2, 1), &layer);
        assert_eq!(s.w, CMatrix::filled(3, 2, c64(0.25, 0.0)));
    }

    #[test]
    fn scalar_layer_matches_hand_unrolled() {
        let mut rng = Rng::new(11);
        let r = |rng: &mut Rng| rng.complex_normal(1.0);
        let (tg, qg, tv, qv, tp, qp, tw, qw) =
            (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
        let gamma = 0.8;
        let (x, y, w0, p0) = (r(&mut rng), r(&mut rng), r(&mut rng), c64(2.0, 0.0));

        let g = tg * (p0 * x) + qg;
        let v = tv * (g / (gamma + g.conj() * x)) + qv;
        let p1 = tp * ((p0 - v * g.conj()) / gamma) + qp;
        let e = y - w0.conj() * x;
        let w1 = tw * (w0 + v * e.conj()) + qw;

        let s = |z: C64| CMatrix::scalar(z);
        let layer = CedunLayer {
            t_g: s(tg),
            q_g: s(qg),
            t_v: s(tv),
            q_v: s(qv),
            t_p: s(tp),
            q_p: s(qp),
            t_w: s(tw),
            q_w: s(qw),
            gamma,
        };
        let mut state = RlsState::new(1, 1, gamma, 0.5);
        state.w = s(w0);
        cedun_layer(&mut state, &s(x), &s(y), &layer);
        assert!((state.w.as_scalar() - w1).norm() < 1e-12);
        assert!((state.p.as_scalar() - p1).norm() < 1e-12);
    }

    #[test]
    fn identity_forward_reduces_to_rls() {
        for seed in 0..10 {
            let (dims, h, f, w) = setup(seed);
            let mut rng = Rng::new(100 + seed);
            let layout = CedunLayout::equivalent(&dims, 16, 1e-6);
            let params = CedunParams::init(layout, 0.999, &mut rng).unwrap();
            let noise = pilot_noise(&dims, 16, &mut rng);
            let est = cedun_forward(&params, &h, &f, &w, &noise).unwrap();
            let pilots: Vec<CMatrix> = (0..dims.users).map(|k| params.pilots(k)).collect();
            let y = received_pilot_with_noise(&h, &f, &w, &pilots, &noise, dims.power).unwrap();
            for k in 0..dims.users {
                let reference = rls_estimate(&pilots[k], &y[k], 0.999, 1e-6).unwrap();
                assert!(est[k].max_abs_diff(&reference) < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn zero_pilots_give_zero_estimate() {
        let (dims, h, f, w) = setup(1);
        let layout = CedunLayout::equivalent(&dims, 8, 1e-3);
        let params = CedunParams::identity(layout, 0.99, &vec![CMatrix::zeros(4, 8); 2]).unwrap();
        let noise = vec![CMatrix::zeros(dims.n_r, 8); 2];
        let est = cedun_forward(&params, &h, &f, &w, &noise).unwrap();
        assert!(est.iter().all(|e| e.max_abs() == 0.0));
    }

    #[test]
    fn taped_forward_matches_plain() {
        let (dims, h, f, w) = setup(4);
        let mut rng = Rng::new(9);
        let mut params = CedunParams::init(CedunLayout::equivalent(&dims, 6, 1e-2), 0.95, &mut rng).unwrap();
        for b in params.store.blocks.iter_mut().skip(dims.users) {
            let noise = if b.real {
                CMatrix::from_real(1, 1, &[rng.uniform(-0.05, 0.05)])
            } else {
                rng.complex_normal_matrix(b.value.rows(), b.value.cols(), 1e-3)
            };
            b.value = &b.value + &noise;
        }
        let noise = pilot_noise(&dims, 6, &mut rng);
        let plain = cedun_forward(&params, &h, &f, &w, &noise).unwrap();

        let tape = Tape::new();
        let leaves = params.store.leaves(&tape, &|_| true);
        let fv: Vec<Var> = f.iter().map(|m| tape.constant(m.clone())).collect();
        let wv: Vec<Var> = w.iter().map(|m| tape.constant(m.clone())).collect();
        let h_eq = equivalent_channel_var(&tape, &h, &fv, &wv);
        let pilots = pilots_var(&params, &leaves);
        let y = received_pilot_var(&tape, &h, &fv, &wv, &h_eq, &pilots, &noise);
        let est = cedun_estimate_var(&tape, &params, &leaves, &pilots, &y);
        for k in 0..dims.users {
            assert!(est[k].value().max_abs_diff(&plain[k]) < 1e-10);
        }
    }

    #[test]
    fn full_estimator_recovers_noiseless_channel() {
        let (dims, h, _, _) = setup(2);
        let mut rng = Rng::new(5);
        let params = CedunParams::init(CedunLayout::full(&dims, 16, 1e-8), 1.0, &mut rng).unwrap();
        let noise = vec![CMatrix::zeros(dims.n_r, 16); dims.users];
        let est = cedun_forward_full(&params, &h, &noise).unwrap();
        for k in 0..dims.users {
            assert!(crate::metrics::nmse(&est[k], &h.h[k]).unwrap() < 1e-6);
        }
    }

    #[test]
    fn from_store_rejects_wrong_layout() {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(0);
        let a = CedunParams::init(CedunLayout::equivalent(&dims, 4, 1e-3), 0.9, &mut rng).unwrap();
        let b = CedunParams::init(CedunLayout::equivalent(&dims, 5, 1e-3), 0.9, &mut rng).unwrap();
        assert!(CedunParams::from_store(a.layout.clone(), b.store).is_err());
        assert!(CedunParams::from_store(a.layout.clone(), a.store.clone()).is_ok());
    }
}
