//! Fully connected baseline: trainable analog phases, then an estimation
//! stack applied per user and a beamforming stack over all users.
//! Hidden layers use rectifiers; batch normalization is not used.

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::autodiff::{Tape, Var};
use crate::beamforming::{normalize_precoder_var, phase_to_analog_var, AnalogPhases, HybridBeamformers, HybridVars};
use crate::channel::{ChannelRealization, SystemDims};
use crate::error::{Error, Result};
use crate::numerics::{c64, CMatrix, Rng};
use crate::unfolding::cedun::equivalent_channel_var;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackboxLayout {
    pub users: usize,
    pub streams: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub n_t_rf: usize,
    pub n_r_rf: usize,
    pub shared_phases: bool,
    /// Hidden widths of the per-user estimation stack.
    pub est_hidden: Vec<usize>,
    /// Hidden widths of the beamforming stack.
    pub bf_hidden: Vec<usize>,
}

impl BlackboxLayout {
    pub fn new(dims: &SystemDims, shared_phases: bool, est_hidden: Vec<usize>, bf_hidden: Vec<usize>) -> Self {
        BlackboxLayout {
            users: dims.users,
            streams: dims.streams,
            n_t: dims.n_t,
            n_r: dims.n_r,
            n_t_rf: dims.n_t_rf,
            n_r_rf: dims.n_r_rf,
            shared_phases,
            est_hidden,
            bf_hidden,
        }
    }

    /// Real-split width of one equivalent channel.
    pub fn channel_width(&self) -> usize {
        2 * self.n_r_rf * self.n_t_rf
    }

    /// Real-split width of one user's `F_BB` and `W_BB`.
    pub fn output_width(&self) -> usize {
        2 * (self.n_t_rf + self.n_r_rf) * self.streams
    }

    fn widths(&self) -> (Vec<usize>, Vec<usize>) {
        let d = self.channel_width();
        let mut est = vec![d];
        est.extend(&self.est_hidden);
        est.push(d);
        let mut bf = vec![self.users * d];
        bf.extend(&self.bf_hidden);
        bf.push(self.users * self.output_width());
        (est, bf)
    }

    fn phase_blocks(&self) -> usize {
        if self.shared_phases {
            1
        } else {
            self.users
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackboxParams {
    pub layout: BlackboxLayout,
    pub store: ParamStore,
}

impl BlackboxParams {
    /// Random phases, He-scaled Gaussian weights and zero biases.
    pub fn init(layout: BlackboxLayout, dims: &SystemDims, rng: &mut Rng) -> Result<Self> {
        let phases = AnalogPhases::random(dims, layout.shared_phases, rng);
        let mut p = Self::zeros(layout)?;
        p.set_phases(&phases);
        for b in p.store.blocks.iter_mut().filter(|b| b.name.ends_with(".weight")) {
            let std = (2.0 / b.value.cols() as f64).sqrt();
            b.value = CMatrix::from_fn(b.value.rows(), b.value.cols(), |_, _| c64(std * rng.standard_normal(), 0.0));
        }
        Ok(p)
    }

    /// Zero phases, weights and biases.
    pub fn zeros(layout: BlackboxLayout) -> Result<Self> {
        if layout.users == 0 || layout.streams == 0 {
            return Err(Error::config("blackbox", "users and streams must be positive"));
        }
        let mut store = ParamStore::new();
        for j in 0..layout.phase_blocks() {
            store.push(format!("blackbox.psi_f.b{j}"), CMatrix::zeros(layout.n_t, layout.n_t_rf), true);
        }
        for j in 0..layout.phase_blocks() {
            store.push(format!("blackbox.psi_w.b{j}"), CMatrix::zeros(layout.n_r, layout.n_r_rf), true);
        }
        let (est, bf) = layout.widths();
        for (stack, widths) in [("est", &est), ("bf", &bf)] {
            for (i, pair) in widths.windows(2).enumerate() {
                store.push(format!("blackbox.{stack}.l{i}.weight"), CMatrix::zeros(pair[1], pair[0]), true);
                store.push(format!("blackbox.{stack}.l{i}.bias"), CMatrix::zeros(pair[1], 1), true);
            }
        }
        Ok(BlackboxParams { layout, store })
    }

    pub fn from_store(layout: BlackboxLayout, store: ParamStore) -> Result<Self> {
        Self::zeros(layout.clone())?.store.check_same_layout(&store)?;
        Ok(BlackboxParams { layout, store })
    }

    pub fn is_phase_block(name: &str) -> bool {
        name.starts_with("blackbox.psi_")
    }

    pub fn phases(&self) -> AnalogPhases {
        let nb = self.layout.phase_blocks();
        AnalogPhases {
            f: (0..nb).map(|j| self.store.get(j).clone()).collect(),
            w: (0..nb).map(|j| self.store.get(nb + j).clone()).collect(),
        }
    }

    pub fn set_phases(&mut self, phases: &AnalogPhases) {
        let nb = self.layout.phase_blocks();
        for j in 0..nb {
            *self.store.get_mut(j) = phases.f[j].real_part();
            *self.store.get_mut(nb + j) = phases.w[j].real_part();
        }
    }

    fn stack_indices(&self, stack: &str) -> Vec<(usize, usize)> {
        let prefix = format!("blackbox.{stack}.l");
        let mut out = Vec::new();
        for (i, b) in self.store.blocks.iter().enumerate() {
            if b.name.starts_with(&prefix) && b.name.ends_with(".weight") {
                out.push((i, i + 1));
            }
        }
        out
    }
}

/// Stacks real parts over imaginary parts of the row-major entries.
pub fn real_split_var<'t>(tape: &'t Tape, m: Var<'t>) -> Var<'t> {
    let (r, c) = m.shape();
    let flat = m.reshape(r * c, 1);
    tape.vstack(&[flat.re(), flat.scale(c64(0.0, -1.0)).re()])
}

/// Inverse of [`real_split_var`] for a `rows x cols` matrix starting at `offset`.
pub fn complex_from_split_var(v: Var<'_>, offset: usize, rows: usize, cols: usize) -> Var<'_> {
    let n = rows * cols;
    let re = v.gather((offset..offset + n).collect(), rows, cols);
    let im = v.gather((offset + n..offset + 2 * n).collect(), rows, cols);
    re.add(im.scale(c64(0.0, 1.0)))
}

fn mlp<'t>(x: Var<'t>, layers: &[(Var<'t>, Var<'t>)]) -> Var<'t> {
    let mut h = x;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = w.matmul(h).add(*b);
        if i + 1 < layers.len() {
            h = h.relu();
        }
    }
    h
}

/// Taped forward pass on perfect equivalent CSI.
///
/// A precoder whose pre-normalization output is exactly zero is replaced by
/// the normalized all-ones precoder.
pub fn blackbox_forward_var<'t>(
    tape: &'t Tape,
    params: &BlackboxParams,
    leaves: &[Var<'t>],
    h: &ChannelRealization,
    dims: &SystemDims,
) -> Result<(HybridVars<'t>, Vec<Var<'t>>)> {
    let lay = &params.layout;
    if lay.users != dims.users || lay.n_t_rf != dims.n_t_rf || lay.n_r_rf != dims.n_r_rf || lay.streams != dims.streams {
        return Err(Error::DimensionMismatch("black-box layout does not match system dimensions".into()));
    }
    let nb = lay.phase_blocks();
    let block = |k: usize| k.min(nb - 1);
    let f_rf: Vec<Var<'t>> = (0..lay.users).map(|k| phase_to_analog_var(leaves[block(k)])).collect();
    let w_rf: Vec<Var<'t>> = (0..lay.users).map(|k| phase_to_analog_var(leaves[nb + block(k)])).collect();
    let h_eq = equivalent_channel_var(tape, h, &f_rf, &w_rf);

    let pick = |idx: Vec<(usize, usize)>| idx.into_iter().map(|(w, b)| (leaves[w], leaves[b])).collect::<Vec<_>>();
    let est = pick(params.stack_indices("est"));
    let bf = pick(params.stack_indices("bf"));
    let estimates: Vec<Var<'t>> = h_eq.iter().map(|m| mlp(real_split_var(tape, *m), &est)).collect();
    let out = mlp(tape.vstack(&estimates), &bf);

    let (m, r, s) = (lay.n_t_rf, lay.n_r_rf, lay.streams);
    let ones = CMatrix::filled(m, s, c64(1.0, 0.0));
    let mut f_bb = Vec::with_capacity(lay.users);
    let mut w_bb = Vec::with_capacity(lay.users);
    for k in 0..lay.users {
        let base = k * lay.output_width();
        let f = complex_from_split_var(out, base, m, s);
        let w = complex_from_split_var(out, base + 2 * m * s, r, s);
        let f = if f.value().frob_norm_sqr() == 0.0 {
            tape.constant(ones.clone())
        } else {
            f
        };
        f_bb.push(normalize_precoder_var(f_rf[k], f, s));
        w_bb.push(w);
    }
    Ok((HybridVars { f_rf, w_rf, f_bb, w_bb }, h_eq))
}

pub fn blackbox_forward(params: &BlackboxParams, h: &ChannelRealization, dims: &SystemDims) -> Result<HybridBeamformers> {
    let tape = Tape::new();
    let leaves = params.store.leaves(&tape, &|_| false);
    Ok(blackbox_forward_var(&tape, params, &leaves, h, dims)?.0.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforming::initial_precoders;
    use crate::channel::{sample_channel, ChannelParams};

    #[test]
    fn split_round_trip() {
        let mut rng = Rng::new(1);
        let m = rng.complex_normal_matrix(2, 3, 1.0);
        let tape = Tape::new();
        let v = real_split_var(&tape, tape.constant(m.clone()));
        let eye = tape.constant(CMatrix::identity(12));
        let through = eye.matmul(v).add(tape.constant(CMatrix::zeros(12, 1)));
        let back = complex_from_split_var(through, 0, 2, 3);
        assert_eq!(back.value(), m);
    }

    #[test]
    fn zero_network_returns_uniform_precoders() {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(2);
        let h = sample_channel(&dims, &ChannelParams::default(), &mut rng);
        let params = BlackboxParams::zeros(BlackboxLayout::new(&dims, false, vec![8], vec![16])).unwrap();
        let bf = blackbox_forward(&params, &h, &dims).unwrap();
        let init = initial_precoders(&dims, &bf.f_rf).unwrap();
        for k in 0..dims.users {
            assert!(bf.f_bb[k].max_abs_diff(&init[k]) < 1e-15);
        }
        assert!(bf.power_error(dims.streams) < 1e-12);
    }

    #[test]
    fn random_network_meets_constraints() {
        let dims = SystemDims::desk(10.0);
        let mut rng = Rng::new(3);
        let params = BlackboxParams::init(BlackboxLayout::new(&dims, false, vec![16], vec![32]), &dims, &mut rng).unwrap();
        for _ in 0..5 {
            let h = sample_channel(&dims, &ChannelParams::default(), &mut rng);
            let bf = blackbox_forward(&params, &h, &dims).unwrap();
            assert!(bf.modulus_error() < 1e-12);
            assert!(bf.power_error(dims.streams) < 1e-9);
        }
    }
}
