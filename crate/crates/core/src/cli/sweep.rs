//! SNR sweeps of an estimation and beamforming chain (`run-baseline`, `evaluate`).

use std::io::Write;

use super::config::{AnalogDesign, BeamformingMethod, EstimationMethod, Scenario, Scheme};
use super::streams;
use crate::beamforming::{
    initial_precoders, rho, sca_digital, sca_hybrid, ssca_accumulate, ssca_objective, ssca_outer, ssca_phase_step,
    zf_digital, AnalogPhases, HybridBeamformers, ScaConfig, SscaConfig, SurrogateState,
};
use crate::channel::{
    equivalent_channel, pilot_noise, random_pilots, received_pilot_with_noise, sample_batch, sample_channel,
    ChannelRealization, SystemDims,
};
use crate::error::{Error, Result};
use crate::estimation::{ls_estimate, rls_estimate};
use crate::metrics::{nmse_all, sum_rate};
use crate::numerics::{CMatrix, Rng};
use crate::unfolding::blackbox::blackbox_forward;
use crate::unfolding::cedun::cedun_forward;
use crate::unfolding::hbdun::hbdun_forward_eq;
use crate::unfolding::{BlackboxParams, CedunParams, Checkpoint, HbdunParams};

pub const SWEEP_HEADER: &str = "seed,snr_db,sum_rate,nmse";

/// Trained networks available to a sweep.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub hbdun: Option<HbdunParams>,
    pub cedun: Option<CedunParams>,
    pub blackbox: Option<BlackboxParams>,
}

impl Models {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Models {
            hbdun: ck.section("hbdun", None).map(|s| s.to_hbdun()).transpose()?,
            cedun: ck.section("cedun", Some("cedun")).map(|s| s.to_cedun()).transpose()?,
            blackbox: ck.section("blackbox", None).map(|s| s.to_blackbox()).transpose()?,
        })
    }

    /// Trained analog phases, from the network that will beamform.
    fn phases(&self, method: BeamformingMethod) -> Option<AnalogPhases> {
        match method {
            BeamformingMethod::Blackbox => self.blackbox.as_ref().map(|b| b.phases()),
            _ => self.hbdun.as_ref().map(|h| h.phases()),
        }
    }
}

fn missing(key: &str, what: &str) -> Error {
    Error::config(key, format!("{what} needs a trained checkpoint; use `evaluate --checkpoint`"))
}

/// Rejects chains that need networks the checkpoint does not hold.
pub fn check_models(sc: &Scenario, models: &Models) -> Result<()> {
    if sc.estimation.method == EstimationMethod::Cedun && models.cedun.is_none() {
        return Err(missing("estimation.method", "cedun"));
    }
    match sc.beamforming.method {
        BeamformingMethod::Hbdun if models.hbdun.is_none() => Err(missing("beamforming.method", "hbdun")),
        BeamformingMethod::Blackbox if models.blackbox.is_none() => Err(missing("beamforming.method", "blackbox")),
        _ => Ok(()),
    }
}

/// Mean metrics of one SNR point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub sum_rate: f64,
    /// `None` when the chain uses no estimate.
    pub nmse: Option<f64>,
}

/// Runs every SNR point in grid order and writes one CSV row per point.
pub fn run_sweep(sc: &Scenario, seed: u64, models: &Models, out: &mut dyn Write) -> Result<Vec<SweepPoint>> {
    check_models(sc, models)?;
    writeln!(out, "{SWEEP_HEADER}")?;
    let mut points = Vec::with_capacity(sc.sweep.snr_db.len());
    for (i, &snr) in sc.sweep.snr_db.iter().enumerate() {
        let p = sweep_point(sc, seed, i, snr, models)?;
        let nmse = p.nmse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{seed},{},{},{nmse}", p.snr_db, p.sum_rate)?;
        points.push(p);
    }
    Ok(points)
}

/// One SNR point. Channels are shared by all points of a seed; noise,
/// pilots and analog design are drawn per point.
pub fn sweep_point(sc: &Scenario, seed: u64, index: usize, snr_db: f64, models: &Models) -> Result<SweepPoint> {
    let dims = sc.system.dims(snr_db)?;
    let params = sc.channel.params()?;
    let root = Rng::new(seed);
    let channels = sample_batch(&dims, &params, &mut root.derive(streams::SWEEP_CHANNELS), sc.sweep.channels);
    let point = root.derive(streams::SWEEP_POINT).derive(index as u64);
    let bf_cfg = &sc.beamforming;
    let sca = ScaConfig {
        max_iter: bf_cfg.sca_iters,
        ..ScaConfig::default()
    };

    let mut analog = AnalogStrategy::new(sc, &dims, &point, models, &sca)?;
    let est = &sc.estimation;
    let pilots: Vec<CMatrix> = {
        let mut r = point.derive(streams::PILOTS);
        (0..dims.users).map(|_| random_pilots(dims.n_t_rf, est.pilot_len, dims.power, &mut r)).collect()
    };

    let mut rate_total = 0.0;
    let mut nmse_total = 0.0;
    let mut nmse_count = 0usize;
    for (c, h) in channels.iter().enumerate() {
        let phases = analog.phases_for(h, &dims)?;
        let (f_rf, w_rf) = phases.analog(dims.users);
        let h_eq = equivalent_channel(h, &f_rf, &w_rf)?.h_eq;
        let mut noise_rng = point.derive(streams::NOISE).derive(c as u64);

        if bf_cfg.method == BeamformingMethod::Blackbox {
            let mut bb = models.blackbox.clone().expect("checked above");
            bb.set_phases(&phases);
            let bf = blackbox_forward(&bb, h, &dims)?;
            let eq = equivalent_channel(h, &bf.f_rf, &bf.w_rf)?.h_eq;
            let rate = sum_rate(&bf, &eq, &dims).total;
            rate_total += rate;
            analog.observe(h, &bf, &dims);
            continue;
        }

        let h_hat = match est.method {
            EstimationMethod::Perfect => h_eq.clone(),
            EstimationMethod::Cedun => {
                let ce = models.cedun.as_ref().expect("checked above");
                let noise = pilot_noise(&dims, ce.layout.layers, &mut noise_rng);
                cedun_forward(ce, h, &f_rf, &w_rf, &noise)?
            }
            EstimationMethod::Ls | EstimationMethod::Rls => {
                let noise = pilot_noise(&dims, est.pilot_len, &mut noise_rng);
                let y = received_pilot_with_noise(h, &f_rf, &w_rf, &pilots, &noise, dims.power)?;
                y.iter()
                    .zip(&pilots)
                    .map(|(y, x)| match est.method {
                        EstimationMethod::Ls => ls_estimate(y, x),
                        _ => rls_estimate(x, y, est.beta, est.rls_delta),
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if est.method != EstimationMethod::Perfect {
            nmse_total += nmse_all(&h_hat, &h_eq)?;
            nmse_count += 1;
        }

        let bf = match bf_cfg.method {
            BeamformingMethod::Sca => {
                let out = sca_digital(&h_hat, &dims, &f_rf, &sca, initial_precoders(&dims, &f_rf)?)?;
                HybridBeamformers {
                    f_rf,
                    w_rf,
                    f_bb: out.f_bb,
                    w_bb: out.w_bb,
                }
            }
            BeamformingMethod::Zf => {
                let (f_bb, w_bb) = zf_digital(&h_hat, &dims, &f_rf)?;
                HybridBeamformers { f_rf, w_rf, f_bb, w_bb }
            }
            BeamformingMethod::Hbdun => {
                let mut hb = models.hbdun.clone().expect("checked above");
                hb.set_phases(&phases);
                hbdun_forward_eq(&hb, &h_hat, &dims)?
            }
            BeamformingMethod::Blackbox => unreachable!("handled above"),
        };
        rate_total += sum_rate(&bf, &h_eq, &dims).total;
        analog.observe(h, &bf, &dims);
    }
    let n = channels.len() as f64;
    Ok(SweepPoint {
        snr_db,
        sum_rate: rate_total / n,
        nmse: (nmse_count > 0).then(|| nmse_total / nmse_count as f64),
    })
}

/// Analog phases used for each evaluated channel.
enum AnalogStrategy {
    Fixed(AnalogPhases),
    /// Redesigned from the full CSI of every channel.
    PerChannel { init: AnalogPhases, cfg: SscaConfig, bits: Option<u32> },
    /// One stochastic SCA step after every channel, starting from `state`.
    Tracking { state: SurrogateState, rho_exponent: f64, bits: Option<u32> },
}

impl AnalogStrategy {
    fn new(sc: &Scenario, dims: &SystemDims, point: &Rng, models: &Models, sca: &ScaConfig) -> Result<Self> {
        let b = &sc.beamforming;
        let bits = b.quant_bits;
        let quantize = |p: AnalogPhases| bits.map_or(p.clone(), |q| p.quantized(q));
        if let Some(trained) = models.phases(b.method) {
            return Ok(AnalogStrategy::Fixed(quantize(trained)));
        }
        if matches!(b.method, BeamformingMethod::Hbdun | BeamformingMethod::Blackbox) {
            return Err(missing("beamforming.method", "trained beamforming"));
        }
        let init = AnalogPhases::random(dims, b.shared_phases, &mut point.derive(streams::PHASES));
        let ssca = SscaConfig {
            eta: b.ssca_eta,
            rho_exponent: sc.train.rho_exponent,
            inner_iters: sc.train.ssca_inner_iters,
            outer_iters: b.ssca_iters,
            sca: sca.clone(),
            ..SscaConfig::default()
        };
        Ok(match (b.analog, sc.scheme) {
            (AnalogDesign::Random, _) => AnalogStrategy::Fixed(quantize(init)),
            (AnalogDesign::Ssca, Scheme::Offline) => {
                let params = sc.channel.params()?;
                let mut rng = point.derive(streams::SSCA);
                let mut draw = || sample_channel(dims, &params, &mut rng);
                let (phases, _) = ssca_outer(&mut draw, dims, &ssca, init)?;
                AnalogStrategy::Fixed(quantize(phases))
            }
            (AnalogDesign::Ssca, Scheme::Single) => AnalogStrategy::PerChannel { init, cfg: ssca, bits },
            (AnalogDesign::Ssca, Scheme::Online) => AnalogStrategy::Tracking {
                state: SurrogateState::new(init, ssca.eta, ssca.tau_reg),
                rho_exponent: ssca.rho_exponent,
                bits,
            },
        })
    }

    fn phases_for(&mut self, h: &ChannelRealization, dims: &SystemDims) -> Result<AnalogPhases> {
        Ok(match self {
            AnalogStrategy::Fixed(p) => p.clone(),
            AnalogStrategy::PerChannel { init, cfg, bits } => {
                let mut same = || h.clone();
                let (p, _) = ssca_outer(&mut same, dims, cfg, init.clone())?;
                bits.map_or(p.clone(), |q| p.quantized(q))
            }
            AnalogStrategy::Tracking { state, bits, .. } => {
                bits.map_or(state.phases.clone(), |q| state.phases.quantized(q))
            }
        })
    }

    /// Frame-end update of the tracking design, using the channel just served.
    fn observe(&mut self, h: &ChannelRealization, served: &HybridBeamformers, dims: &SystemDims) {
        if let AnalogStrategy::Tracking { state, rho_exponent, .. } = self {
            let redesign = sca_hybrid(h, &state.phases, dims, &ScaConfig::default());
            let (f_bb, w_bb) = match &redesign {
                Ok(bf) => (&bf.f_bb, &bf.w_bb),
                Err(_) => (&served.f_bb, &served.w_bb),
            };
            let (r0, grad) = ssca_objective(&state.phases, h, f_bb, w_bb, dims);
            let t = state.t;
            ssca_accumulate(state, r0, &grad, rho(t, *rho_exponent));
            ssca_phase_step(state);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(text: &str) -> Scenario {
        Scenario::parse(text).unwrap()
    }

    #[test]
    fn empty_grid_writes_header_only() {
        let sc = scenario("[sweep]\nsnr_db = []\n");
        let mut buf = Vec::new();
        run_sweep(&sc, 1, &Models::default(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{SWEEP_HEADER}\n"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let sc = scenario("[sweep]\nsnr_db = [0.0, 10.0]\nchannels = 4\n[beamforming]\nanalog = \"random\"\nsca_iters = 5\n");
        let run = || {
            let mut buf = Vec::new();
            run_sweep(&sc, 3, &Models::default(), &mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    }

    #[test]
    fn perfect_csi_has_no_nmse() {
        let sc = scenario("[sweep]\nchannels = 2\n[estimation]\nmethod = \"perfect\"\n[beamforming]\nanalog = \"random\"\nmethod = \"zf\"\n");
        let p = sweep_point(&sc, 0, 0, 10.0, &Models::default()).unwrap();
        assert!(p.nmse.is_none());
        assert!(p.sum_rate > 0.0);
    }

    #[test]
    fn trained_methods_need_a_checkpoint() {
        for text in ["[estimation]\nmethod = \"cedun\"\n", "[beamforming]\nmethod = \"hbdun\"\n"] {
            let sc = scenario(text);
            let err = run_sweep(&sc, 0, &Models::default(), &mut Vec::new()).unwrap_err();
            assert!(matches!(err, Error::Config { .. }), "{err:?}");
        }
    }

    #[test]
    fn tracking_and_per_channel_designs_run() {
        for scheme in ["single", "online"] {
            let sc = scenario(&format!(
                "scheme = \"{scheme}\"\n[sweep]\nchannels = 3\n[beamforming]\nssca_iters = 3\nsca_iters = 5\n"
            ));
            let p = sweep_point(&sc, 2, 0, 10.0, &Models::default()).unwrap();
            assert!(p.sum_rate.is_finite() && p.nmse.unwrap().is_finite());
        }
    }
}
