//! Clustered geometric channels, equivalent channels and pilot synthesis.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{c64, CMatrix, Rng, C64};

/// Antenna, RF-chain, user and stream counts plus power budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemDims {
    pub n_t: usize,
    pub n_r: usize,
    pub n_t_rf: usize,
    pub n_r_rf: usize,
    pub users: usize,
    pub streams: usize,
    pub power: f64,
    /// Noise power per user.
    pub noise: Vec<f64>,
}

impl SystemDims {
    /// 8x4 antennas, 4/2 RF chains, 2 single-stream users.
    pub fn desk(snr_db: f64) -> Self {
        Self::with_snr(8, 4, 4, 2, 2, 1, snr_db)
    }

    /// 64x32 antennas, 16/4 RF chains, 4 users with 4 streams each.
    pub fn paper_scale(snr_db: f64) -> Self {
        Self::with_snr(64, 32, 16, 4, 4, 4, snr_db)
    }

    /// Unit transmit power and `noise = 10^(-snr/10)` for every user.
    pub fn with_snr(
        n_t: usize,
        n_r: usize,
        n_t_rf: usize,
        n_r_rf: usize,
        users: usize,
        streams: usize,
        snr_db: f64,
    ) -> Self {
        SystemDims {
            n_t,
            n_r,
            n_t_rf,
            n_r_rf,
            users,
            streams,
            power: 1.0,
            noise: vec![10f64.powf(-snr_db / 10.0); users],
        }
    }

    pub fn set_snr(&mut self, snr_db: f64) {
        let v = self.power * 10f64.powf(-snr_db / 10.0);
        self.noise = vec![v; self.users];
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(key, why));
        if self.users == 0 || self.streams == 0 {
            return bad("dims.users", "users and streams must be positive");
        }
        if self.users * self.streams > self.n_t_rf || self.n_t_rf > self.n_t {
            return bad("dims.n_t_rf", "need users*streams <= n_t_rf <= n_t");
        }
        if self.streams > self.n_r_rf || self.n_r_rf > self.n_r {
            return bad("dims.n_r_rf", "need streams <= n_r_rf <= n_r");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad("dims.power", "must be positive");
        }
        if self.noise.len() != self.users {
            return bad("dims.noise", "one noise power per user required");
        }
        if self.noise.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("dims.noise", "noise powers must be positive");
        }
        Ok(())
    }
}

/// Parameters of the clustered channel model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub clusters: usize,
    pub rays: usize,
    pub gain_var: f64,
    pub aoa_range: (f64, f64),
    pub aod_range: (f64, f64),
    pub d_over_lambda: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            clusters: 4,
            rays: 2,
            gain_var: 0.1,
            aoa_range: (-PI / 3.0, PI / 3.0),
            aod_range: (-PI / 3.0, PI / 3.0),
            d_over_lambda: 0.5,
        }
    }
}

impl ChannelParams {
    pub fn with_angle_spread(half_width: f64) -> Self {
        ChannelParams {
            aoa_range: (-half_width, half_width),
            aod_range: (-half_width, half_width),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.rays == 0 {
            return Err(Error::config("channel.clusters", "clusters and rays must be >= 1"));
        }
        if !(self.gain_var > 0.0) {
            return Err(Error::config("channel.gain_var", "must be positive"));
        }
        for (key, (lo, hi)) in [("channel.aoa_range", self.aoa_range), ("channel.aod_range", self.aod_range)] {
            if !(lo > -PI && hi < PI && lo <= hi) {
                return Err(Error::config(key, "range must satisfy -pi < lo <= hi < pi"));
            }
        }
        if !(self.d_over_lambda > 0.0) {
            return Err(Error::config("channel.d_over_lambda", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub aoa: f64,
    pub aod: f64,
    pub gain: C64,
}

/// Full per-user channels `H_k` (n_r x n_t).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<CMatrix>,
    pub rays: Vec<Vec<Ray>>,
}

impl ChannelRealization {
    pub fn from_matrices(h: Vec<CMatrix>) -> Self {
        let rays = vec![Vec::new(); h.len()];
        ChannelRealization { h, rays }
    }
}

/// Reduced per-user channels `W_RF,k^H H_k F_RF,k` (n_r_rf x n_t_rf).
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentChannel {
    pub h_eq: Vec<CMatrix>,
}

/// Uniform linear array response, unit norm.
pub fn array_response(n: usize, d_over_lambda: f64, phi: f64) -> CMatrix {
    let scale = 1.0 / (n as f64).sqrt();
    let k = -2.0 * PI * d_over_lambda * phi.sin();
    CMatrix::from_fn(n, 1, |i, _| C64::from_polar(scale, k * i as f64))
}

pub fn sample_channel(dims: &SystemDims, params: &ChannelParams, rng: &mut Rng) -> ChannelRealization {
    let paths = params.clusters * params.rays;
    let norm = ((dims.n_t * dims.n_r) as f64 / paths as f64).sqrt();
    let mut h = Vec::with_capacity(dims.users);
    let mut all_rays = Vec::with_capacity(dims.users);
    for _ in 0..dims.users {
        let mut hk = CMatrix::zeros(dims.n_r, dims.n_t);
        let mut rays = Vec::with_capacity(paths);
        for _ in 0..paths {
            let gain = rng.complex_normal(params.gain_var);
            let aoa = rng.uniform(params.aoa_range.0, params.aoa_range.1);
            let aod = rng.uniform(params.aod_range.0, params.aod_range.1);
            let ar = array_response(dims.n_r, params.d_over_lambda, aoa);
            let at = array_response(dims.n_t, params.d_over_lambda, aod);
            let outer = ar.matmul(&at.adjoint()).scale(gain * norm);
            hk = &hk + &outer;
            rays.push(Ray { aoa, aod, gain });
        }
        h.push(hk);
        all_rays.push(rays);
    }
    ChannelRealization { h, rays: all_rays }
}

/// Draws `count` consecutive realizations from `rng`.
pub fn sample_batch(dims: &SystemDims, params: &ChannelParams, rng: &mut Rng, count: usize) -> Vec<ChannelRealization> {
    (0..count).map(|_| sample_channel(dims, params, rng)).collect()
}

pub fn equivalent_channel(h: &ChannelRealization, f_rf: &[CMatrix], w_rf: &[CMatrix]) -> Result<EquivalentChannel> {
    let users = h.h.len();
    if f_rf.len() != users || w_rf.len() != users {
        return Err(Error::DimensionMismatch(format!(
            "{users} channels but {} / {} analog beamformers",
            f_rf.len(),
            w_rf.len()
        )));
    }
    let mut h_eq = Vec::with_capacity(users);
    for k in 0..users {
        let hk = &h.h[k];
        if w_rf[k].rows() != hk.rows() || f_rf[k].rows() != hk.cols() {
            return Err(Error::DimensionMismatch(format!(
                "user {k}: channel {:?}, combiner {:?}, precoder {:?}",
                hk.shape(),
                w_rf[k].shape(),
                f_rf[k].shape()
            )));
        }
        h_eq.push(w_rf[k].adjoint().matmul(hk).matmul(&f_rf[k]));
    }
    Ok(EquivalentChannel { h_eq })
}

/// Rescales every nonzero column to squared norm exactly `power`.
pub fn scale_pilots(x: &CMatrix, power: f64) -> CMatrix {
    let s = power.sqrt();
    let mut out = x.clone();
    for j in 0..x.cols() {
        let r = x.col(j).frob_norm();
        for i in 0..x.rows() {
            out[(i, j)] = if r > 0.0 { x[(i, j)] * (s / r) } else { c64(0.0, 0.0) };
        }
    }
    out
}

/// Random pilots with every column at power `power`.
pub fn random_pilots(rows: usize, len: usize, power: f64, rng: &mut Rng) -> CMatrix {
    scale_pilots(&rng.complex_normal_matrix(rows, len, 1.0), power)
}

/// Antenna-domain noise `Z_k` (n_r x len) with CN(0, noise_k) entries.
pub fn pilot_noise(dims: &SystemDims, len: usize, rng: &mut Rng) -> Vec<CMatrix> {
    dims.noise
        .iter()
        .map(|&var| rng.complex_normal_matrix(dims.n_r, len, var))
        .collect()
}

fn check_pilot_power(pilots: &[CMatrix], power: f64) -> Result<()> {
    for (user, x) in pilots.iter().enumerate() {
        for column in 0..x.cols() {
            let p = x.col(column).frob_norm_sqr();
            if p > power * (1.0 + 1e-9) {
                return Err(Error::PilotPowerViolation {
                    user,
                    column,
                    power: p,
                    limit: power,
                });
            }
        }
    }
    Ok(())
}

/// Received pilot blocks for given antenna-domain noise.
///
/// `y_k = H_eq,k x_k + W_RF,k^H H_k Σ_{u≠k} F_RF,u x_u + W_RF,k^H Z_k`
pub fn received_pilot_with_noise(
    h: &ChannelRealization,
    f_rf: &[CMatrix],
    w_rf: &[CMatrix],
    pilots: &[CMatrix],
    noise: &[CMatrix],
    power: f64,
) -> Result<Vec<CMatrix>> {
    check_pilot_power(pilots, power)?;
    let eq = equivalent_channel(h, f_rf, w_rf)?;
    let users = h.h.len();
    let mut out = Vec::with_capacity(users);
    for k in 0..users {
        let wh = w_rf[k].adjoint();
        let mut y = eq.h_eq[k].matmul(&pilots[k]);
        let mut interference: Option<CMatrix> = None;
        for u in (0..users).filter(|&u| u != k) {
            let term = f_rf[u].matmul(&pilots[u]);
            interference = Some(match interference {
                Some(acc) => &acc + &term,
                None => term,
            });
        }
        if let Some(s) = interference {
            y = &y + &wh.matmul(&h.h[k]).matmul(&s);
        }
        y = &y + &wh.matmul(&noise[k]);
        out.push(y);
    }
    Ok(out)
}

/// Received pilot blocks with freshly drawn noise.
pub fn received_pilot(
    h: &ChannelRealization,
    f_rf: &[CMatrix],
    w_rf: &[CMatrix],
    pilots: &[CMatrix],
    dims: &SystemDims,
    rng: &mut Rng,
) -> Result<Vec<CMatrix>> {
    let len = pilots.first().map_or(0, |x| x.cols());
    let noise = pilot_noise(dims, len, rng);
    received_pilot_with_noise(h, f_rf, w_rf, pilots, &noise, dims.power)
}

/// Writes channel samples as CSV: `#` header lines, then one row per
/// (sample, user, antenna row) with interleaved re/im columns.
pub fn write_channels_csv(
    out: &mut dyn Write,
    dims: &SystemDims,
    params: &ChannelParams,
    seed: u64,
    samples: &[ChannelRealization],
) -> Result<()> {
    writeln!(out, "# hbunfold-channels v1")?;
    writeln!(
        out,
        "# dims n_t={} n_r={} n_t_rf={} n_r_rf={} users={} streams={}",
        dims.n_t, dims.n_r, dims.n_t_rf, dims.n_r_rf, dims.users, dims.streams
    )?;
    writeln!(
        out,
        "# params clusters={} rays={} gain_var={} aoa=({},{}) aod=({},{}) d_over_lambda={}",
        params.clusters,
        params.rays,
        params.gain_var,
        params.aoa_range.0,
        params.aoa_range.1,
        params.aod_range.0,
        params.aod_range.1,
        params.d_over_lambda
    )?;
    writeln!(out, "# seed {seed}")?;
    let mut header = String::from("sample,user,row");
    for j in 0..dims.n_t {
        header.push_str(&format!(",re{j},im{j}"));
    }
    writeln!(out, "{header}")?;
    for (s, sample) in samples.iter().enumerate() {
        for (k, hk) in sample.h.iter().enumerate() {
            for i in 0..hk.rows() {
                let mut line = format!("{s},{k},{i}");
                for j in 0..hk.cols() {
                    let z = hk[(i, j)];
                    line.push_str(&format!(",{},{}", z.re, z.im));
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Reads a dump produced by [`write_channels_csv`].
pub fn read_channels_csv(input: &mut dyn BufRead, n_r: usize, n_t: usize) -> Result<Vec<ChannelRealization>> {
    let mut samples: Vec<Vec<CMatrix>> = Vec::new();
    let mut seen_header = false;
    for line in input.lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + 2 * n_t {
            return Err(Error::Schema(format!("expected {} fields, got {}", 3 + 2 * n_t, fields.len())));
        }
        let idx = |i: usize| -> Result<usize> {
            fields[i].parse().map_err(|_| Error::Schema(format!("bad index `{}`", fields[i])))
        };
        let (s, k, i) = (idx(0)?, idx(1)?, idx(2)?);
        if i >= n_r {
            return Err(Error::Schema(format!("row {i} out of range")));
        }
        while samples.len() <= s {
            samples.push(Vec::new());
        }
        while samples[s].len() <= k {
            samples[s].push(CMatrix::zeros(n_r, n_t));
        }
        for j in 0..n_t {
            let parse = |f: &str| -> Result<f64> { f.parse().map_err(|_| Error::Schema(format!("bad number `{f}`"))) };
            samples[s][k][(i, j)] = c64(parse(fields[3 + 2 * j])?, parse(fields[4 + 2 * j])?);
        }
    }
    Ok(samples.into_iter().map(ChannelRealization::from_matrices).collect())
}
