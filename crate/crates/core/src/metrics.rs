//! SINR, sum rate, NMSE, pilot-overhead accounting and complexity estimates.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::beamforming::{HybridBeamformers, HybridVars};
use crate::channel::SystemDims;
use crate::error::{Error, Result};
use crate::numerics::CMatrix;

/// Per-stream SINR, per-user rate and total sum rate in bits/s/Hz.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub sinr: Vec<Vec<f64>>,
    pub user_rate: Vec<f64>,
    pub total: f64,
}

/// SINR of stream `l` of user `k`; zero when the combiner column vanishes.
pub fn sinr(bf: &HybridBeamformers, h_eq: &[CMatrix], dims: &SystemDims, k: usize, l: usize) -> f64 {
    let w = bf.w_bb[k].col(l);
    if w.frob_norm_sqr() == 0.0 {
        return 0.0;
    }
    let a = w.adjoint().matmul(&h_eq[k]);
    let mut signal = 0.0;
    let mut interference = 0.0;
    for (i, f) in bf.f_bb.iter().enumerate() {
        for j in 0..f.cols() {
            let p = a.matmul(&f.col(j)).as_scalar().norm_sqr();
            if (i, j) == (k, l) {
                signal = p;
            } else {
                interference += p;
            }
        }
    }
    let noise = dims.noise[k] / dims.power * bf.w_rf[k].matmul(&w).frob_norm_sqr();
    signal / (interference + noise)
}

pub fn sum_rate(bf: &HybridBeamformers, h_eq: &[CMatrix], dims: &SystemDims) -> RateReport {
    let mut all = Vec::with_capacity(dims.users);
    let mut user_rate = Vec::with_capacity(dims.users);
    for k in 0..dims.users {
        let s: Vec<f64> = (0..dims.streams).map(|l| sinr(bf, h_eq, dims, k, l)).collect();
        user_rate.push(s.iter().map(|g| (1.0 + g).log2()).sum());
        all.push(s);
    }
    let total = user_rate.iter().sum();
    RateReport {
        sinr: all,
        user_rate,
        total,
    }
}

/// Differentiable sum rate over taped beamformers and equivalent channels.
pub fn sum_rate_var<'t>(tape: &'t Tape, bf: &HybridVars<'t>, h_eq: &[Var<'t>], dims: &SystemDims) -> Var<'t> {
    let all_f = tape.hstack(&bf.f_bb);
    let total_streams = dims.users * dims.streams;
    let mut rates = Vec::with_capacity(total_streams);
    for k in 0..dims.users {
        for l in 0..dims.streams {
            let w = bf.w_bb[k].col(l);
            if w.value().frob_norm_sqr() == 0.0 {
                continue;
            }
            let powers = w.adjoint().matmul(h_eq[k]).matmul(all_f).abs2();
            let own = k * dims.streams + l;
            let signal = powers.entry(0, own);
            let others: Vec<usize> = (0..total_streams).filter(|&m| m != own).collect();
            let noise = bf.w_rf[k]
                .matmul(w)
                .abs2()
                .sum()
                .scale_real(dims.noise[k] / dims.power);
            let denom = if others.is_empty() {
                noise
            } else {
                powers.gather(others.clone(), 1, others.len()).sum().add(noise)
            };
            let gamma = signal.div(denom);
            rates.push(gamma.add_identity(1.0.into()).ln().re());
        }
    }
    if rates.is_empty() {
        return tape.scalar(0.0);
    }
    let stacked = tape.hstack(&rates);
    stacked.sum().scale_real(1.0 / std::f64::consts::LN_2)
}

/// `‖Ĥ − H‖² / ‖H‖²`.
pub fn nmse(h_hat: &CMatrix, h: &CMatrix) -> Result<f64> {
    if h_hat.shape() != h.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", h_hat.shape(), h.shape())));
    }
    let reference = h.frob_norm_sqr();
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((h_hat - h).frob_norm_sqr() / reference)
}

/// NMSE pooled over users: total error energy over total channel energy.
pub fn nmse_all(h_hat: &[CMatrix], h: &[CMatrix]) -> Result<f64> {
    let mut err = 0.0;
    let mut reference = 0.0;
    for (a, b) in h_hat.iter().zip(h) {
        if a.shape() != b.shape() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        err += (a - b).frob_norm_sqr();
        reference += b.frob_norm_sqr();
    }
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(err / reference)
}

/// Pilot-signalling scheme for overhead accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OverheadScheme {
    /// Full CSI acquired in every slot.
    Single,
    /// Per-slot equivalent CSI plus an up-front batch of full-CSI samples.
    Offline,
    /// Per-slot equivalent CSI plus one full-CSI sample per frame.
    Online,
    /// One full-CSI acquisition.
    PerFrameFull,
    /// One equivalent-CSI acquisition.
    PerSlotEq,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadInputs {
    pub bits: u64,
    pub pilot_len: u64,
    pub frames: u64,
    pub slots: u64,
    pub samples: u64,
    pub n_t: u64,
    pub n_r: u64,
    pub n_t_rf: u64,
    pub n_r_rf: u64,
}

impl OverheadInputs {
    pub fn from_dims(dims: &SystemDims, bits: u64, pilot_len: u64, frames: u64, slots: u64, samples: u64) -> Self {
        OverheadInputs {
            bits,
            pilot_len,
            frames,
            slots,
            samples,
            n_t: dims.n_t as u64,
            n_r: dims.n_r as u64,
            n_t_rf: dims.n_t_rf as u64,
            n_r_rf: dims.n_r_rf as u64,
        }
    }
}

/// Signalling bits for the given scheme.
pub fn pilot_overhead(scheme: OverheadScheme, inp: &OverheadInputs) -> u64 {
    let full = inp.bits * (inp.n_r * inp.n_r_rf + inp.n_t * inp.n_t_rf + inp.n_t_rf * inp.pilot_len);
    let eq = inp.bits * inp.n_t_rf * inp.pilot_len;
    match scheme {
        OverheadScheme::PerFrameFull => full,
        OverheadScheme::PerSlotEq => eq,
        OverheadScheme::Single => inp.frames * inp.slots * full,
        OverheadScheme::Offline => inp.frames * inp.slots * eq + inp.samples * full,
        OverheadScheme::Online => inp.frames * (inp.slots * eq + full),
    }
}

/// Operation-count estimates. The unfolded beamformer's inversion stand-in
/// is costed with exponent 3 (schoolbook multiplication) rather than 2.37.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub rls: u128,
    pub ssca: u128,
    pub ssca_cross_user_term: u128,
    pub cedun: u128,
    pub hbdun: u128,
    pub hbdun_cross_user_term: u128,
    pub blackbox: u128,
    pub schoolbook_exponent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityInputs {
    pub rls_iters: u128,
    pub ssca_iters: u128,
    pub cedun_layers: u128,
    pub hbdun_layers: u128,
    pub estimation_widths: Vec<u128>,
    pub beamforming_widths: Vec<u128>,
}

pub fn complexity_report(dims: &SystemDims, inp: &ComplexityInputs) -> ComplexityReport {
    let k = dims.users as u128;
    let ns = dims.streams as u128;
    let m = dims.n_t_rf as u128;
    let r = dims.n_r_rf as u128;
    let cross = k * k * ns * ns * m * m * r;
    let per_iter = k * ns * m.pow(3) + cross + k * ns * m * m * r;
    let chain = |w: &[u128]| -> u128 { w.windows(2).map(|p| k * p[0] * p[1]).sum() };
    ComplexityReport {
        rls: inp.rls_iters * k * m * m,
        ssca: inp.ssca_iters * per_iter,
        ssca_cross_user_term: inp.ssca_iters * cross,
        cedun: inp.cedun_layers * k * m * m,
        hbdun: inp.hbdun_layers * per_iter,
        hbdun_cross_user_term: inp.hbdun_layers * cross,
        blackbox: chain(&inp.estimation_widths) + chain(&inp.beamforming_widths),
        schoolbook_exponent: true,
    }
}
