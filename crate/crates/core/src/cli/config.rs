//! Scenario files: TOML with every section optional and unknown keys rejected.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelParams, SystemDims};
use crate::error::{Error, Result};
use crate::training::{OnlineConfig, TrainConfig};
use crate::unfolding::HbdunMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub beamforming: BeamformingSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub overhead: OverheadSection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// Defaults for the `--checkpoint` and `--out` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Timescale of the analog design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Analog beamformers redesigned from full CSI in every slot.
    Single,
    /// Analog beamformers designed from channel statistics before transmission.
    #[default]
    Offline,
    /// Analog beamformers updated at the end of every frame.
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub profile: Profile,
    pub n_t: Option<usize>,
    pub n_r: Option<usize>,
    pub n_t_rf: Option<usize>,
    pub n_r_rf: Option<usize>,
    pub users: Option<usize>,
    pub streams: Option<usize>,
    pub snr_db: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            profile: Profile::Desk,
            n_t: None,
            n_r: None,
            n_t_rf: None,
            n_r_rf: None,
            users: None,
            streams: None,
            snr_db: 10.0,
        }
    }
}

impl SystemSection {
    pub fn dims(&self, snr_db: f64) -> Result<SystemDims> {
        let base = match self.profile {
            Profile::Desk => SystemDims::desk(snr_db),
            Profile::Paper => SystemDims::paper_scale(snr_db),
        };
        let dims = SystemDims::with_snr(
            self.n_t.unwrap_or(base.n_t),
            self.n_r.unwrap_or(base.n_r),
            self.n_t_rf.unwrap_or(base.n_t_rf),
            self.n_r_rf.unwrap_or(base.n_r_rf),
            self.users.unwrap_or(base.users),
            self.streams.unwrap_or(base.streams),
            snr_db,
        );
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub clusters: usize,
    pub rays: usize,
    pub gain_var: f64,
    /// Radians.
    pub aoa_range: [f64; 2],
    /// Radians.
    pub aod_range: [f64; 2],
    pub d_over_lambda: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            clusters: 4,
            rays: 2,
            gain_var: 0.1,
            aoa_range: [-PI / 3.0, PI / 3.0],
            aod_range: [-PI / 3.0, PI / 3.0],
            d_over_lambda: 0.5,
        }
    }
}

impl ChannelSection {
    pub fn params(&self) -> Result<ChannelParams> {
        let p = ChannelParams {
            clusters: self.clusters,
            rays: self.rays,
            gain_var: self.gain_var,
            aoa_range: (self.aoa_range[0], self.aoa_range[1]),
            aod_range: (self.aod_range[0], self.aod_range[1]),
            d_over_lambda: self.d_over_lambda,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMethod {
    Rls,
    Ls,
    Cedun,
    /// No estimation: the design uses the true equivalent channels.
    Perfect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub method: EstimationMethod,
    /// Pilot length of the equivalent-channel estimators.
    pub pilot_len: usize,
    pub beta: f64,
    /// `P` initialization of the conventional RLS estimator.
    pub rls_delta: f64,
    /// `P` initialization inside the trainable estimator.
    pub cedun_delta: f64,
    /// Pilot length of the full-CSI estimator in the online scheme.
    pub long_pilot_len: usize,
    pub long_delta: f64,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            method: EstimationMethod::Rls,
            pilot_len: 8,
            beta: 0.99,
            rls_delta: 1e-3,
            cedun_delta: 1.0,
            long_pilot_len: 16,
            long_delta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamformingMethod {
    Sca,
    Zf,
    Hbdun,
    Blackbox,
}

/// Source of the analog phases of the conventional chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalogDesign {
    Random,
    Ssca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformingSection {
    pub method: BeamformingMethod,
    pub analog: AnalogDesign,
    pub sca_iters: usize,
    pub ssca_iters: usize,
    pub ssca_eta: f64,
    pub layers: usize,
    pub mode: HbdunMode,
    pub shared_phases: bool,
    /// Phase-shifter resolution; `None` means infinite resolution.
    pub quant_bits: Option<u32>,
    pub est_hidden: Vec<usize>,
    pub bf_hidden: Vec<usize>,
}

impl Default for BeamformingSection {
    fn default() -> Self {
        BeamformingSection {
            method: BeamformingMethod::Sca,
            analog: AnalogDesign::Ssca,
            sca_iters: 50,
            ssca_iters: 100,
            ssca_eta: 0.05,
            layers: 5,
            mode: HbdunMode::Learned,
            shared_phases: false,
            quant_bits: None,
            est_hidden: vec![64],
            bf_hidden: vec![128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub snr_db: Vec<f64>,
    /// Channels per SNR point.
    pub channels: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            snr_db: vec![10.0],
            channels: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Two stages; the second trains estimator and digital network on the sum rate.
    #[default]
    Joint,
    /// Estimator trained on NMSE, then the digital network on the sum rate.
    Separate,
    /// Everything trained together in one stage.
    OneStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub design: Design,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Size of a fixed pool of training channels; `None` draws fresh channels.
    pub channel_samples: Option<usize>,
    /// Fine-tune this checkpoint on the scenario's channel statistics.
    pub finetune_from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverheadSection {
    /// Bits per signalled value.
    pub bits: u64,
    pub pilot_len: u64,
    pub slots: u64,
    /// Full-CSI samples collected up front by the offline scheme.
    pub samples: u64,
    pub frames: Vec<u64>,
}

impl Default for OverheadSection {
    fn default() -> Self {
        OverheadSection {
            bits: 8,
            pilot_len: 16,
            slots: 16,
            samples: 100,
            frames: vec![1, 2, 4, 8, 16, 32, 64, 128],
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|r| text[r].to_string()).unwrap_or_default();
            Error::config(key, e.message().to_string())
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        self.channel.params()?;
        self.train.validate()?;
        let e = &self.estimation;
        if e.pilot_len == 0 || e.long_pilot_len == 0 {
            return Err(Error::config("estimation.pilot_len", "must be at least 1"));
        }
        if !(e.beta > 0.0 && e.beta <= 1.0) {
            return Err(Error::config("estimation.beta", "must be in (0, 1]"));
        }
        for (key, v) in [
            ("estimation.rls_delta", e.rls_delta),
            ("estimation.cedun_delta", e.cedun_delta),
            ("estimation.long_delta", e.long_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let b = &self.beamforming;
        if b.sca_iters == 0 {
            return Err(Error::config("beamforming.sca_iters", "must be at least 1"));
        }
        if b.quant_bits == Some(0) {
            return Err(Error::config("beamforming.quant_bits", "must be at least 1"));
        }
        if self.sweep.channels == 0 {
            return Err(Error::config("sweep.channels", "must be at least 1"));
        }
        if self.schedule.channel_samples == Some(0) {
            return Err(Error::config("schedule.channel_samples", "must be at least 1"));
        }
        if self.online.slots == 0 {
            return Err(Error::config("online.slots", "must be at least 1"));
        }
        Ok(())
    }

    /// System dimensions at the scenario SNR.
    pub fn dims(&self) -> Result<SystemDims> {
        self.system.dims(self.system.snr_db)
    }
}

/// Hex SHA-256 of the raw config text.
pub fn config_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = Scenario::parse("").unwrap();
        assert_eq!(s, Scenario::default());
        assert_eq!(s.dims().unwrap(), SystemDims::desk(10.0));
        assert_eq!(s.channel.params().unwrap(), ChannelParams::default());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = Scenario::parse("[train]\netaa = 0.1\n").unwrap_err();
        match err {
            Error::Config { key, reason } => {
                assert!(reason.contains("etaa"), "{reason}");
                assert!(!key.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(Scenario::parse("[train]\neta = -1.0\n"), Err(Error::Config { .. })));
        assert!(matches!(
            Scenario::parse("[system]\nn_t_rf = 1\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn overrides_apply() {
        let s = Scenario::parse("seed = 4\nscheme = \"online\"\n[system]\nsnr_db = 0.0\nn_t = 16\n[beamforming]\nmethod = \"zf\"\n").unwrap();
        let d = s.dims().unwrap();
        assert_eq!((d.n_t, d.noise[0]), (16, 1.0));
        assert_eq!(s.scheme, Scheme::Online);
        assert_eq!(s.beamforming.method, BeamformingMethod::Zf);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            config_sha256(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
