//! The `train` command: builds networks, dispatches to a schedule and writes
//! checkpoints, the trace and per-frame rates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{BeamformingMethod, Design, Scenario, Scheme};
use super::streams;
use crate::channel::{sample_batch, sample_channel, ChannelRealization, SystemDims};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::training::{
    online_schedule, train_blackbox, train_one_stage, train_separate, train_stage1, train_stage2, transfer_finetune,
    write_trace_csv, TracePoint, TrainConfig,
};
use crate::unfolding::{
    BlackboxLayout, BlackboxParams, CedunLayout, CedunParams, Checkpoint, CheckpointMeta, HbdunLayout, HbdunParams,
    NetworkSection,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "trace.csv";
pub const FRAMES_FILE: &str = "frames.csv";

/// Files written by a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub frames: Option<PathBuf>,
}

/// Channel source for training: fresh draws, or a fixed pool when
/// `schedule.channel_samples` is set.
struct Source {
    dims: SystemDims,
    params: crate::channel::ChannelParams,
    pool: Option<Vec<ChannelRealization>>,
}

impl Source {
    fn new(sc: &Scenario, seed: u64) -> Result<Self> {
        let dims = sc.dims()?;
        let params = sc.channel.params()?;
        let pool = sc
            .schedule
            .channel_samples
            .map(|n| sample_batch(&dims, &params, &mut Rng::new(seed).derive(streams::POOL), n));
        Ok(Source { dims, params, pool })
    }

    fn draw(&self, rng: &mut Rng) -> ChannelRealization {
        match &self.pool {
            Some(pool) => pool[(rng.next_u64() % pool.len() as u64) as usize].clone(),
            None => sample_channel(&self.dims, &self.params, rng),
        }
    }
}

fn init_hbdun(sc: &Scenario, dims: &SystemDims, rng: &mut Rng) -> Result<HbdunParams> {
    let b = &sc.beamforming;
    HbdunParams::init(HbdunLayout::new(dims, b.layers, b.shared_phases, b.mode), dims, rng)
}

fn init_cedun(sc: &Scenario, dims: &SystemDims, rng: &mut Rng) -> Result<CedunParams> {
    let e = &sc.estimation;
    CedunParams::init(CedunLayout::equivalent(dims, e.pilot_len, e.cedun_delta), e.beta, rng)
}

struct Writer<'a> {
    dir: &'a Path,
    seed: u64,
    config_sha256: String,
}

impl Writer<'_> {
    fn checkpoint(&self, stage: &str, step: usize, networks: Vec<NetworkSection>) -> Result<PathBuf> {
        let path = self.dir.join(CHECKPOINT_FILE);
        Checkpoint {
            meta: CheckpointMeta {
                seed: self.seed,
                step,
                stage: stage.into(),
                config_sha256: Some(self.config_sha256.clone()),
            },
            networks,
        }
        .save(&path)?;
        Ok(path)
    }
}

fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace_csv(&mut w, trace)?;
    w.flush()?;
    Ok(())
}

/// Runs the schedule selected by the scenario into `dir`.
///
/// `resume` continues the offline joint schedule from a checkpoint written
/// by an earlier run of the same scenario.
pub fn run_train(sc: &Scenario, seed: u64, config_sha256: &str, dir: &Path, resume: Option<&Path>) -> Result<TrainOutput> {
    std::fs::create_dir_all(dir)?;
    let source = Source::new(sc, seed)?;
    let sampler = |r: &mut Rng| source.draw(r);
    let dims = source.dims.clone();
    let cfg = TrainConfig {
        seed,
        ..sc.train.clone()
    };
    let mut init = Rng::new(seed).derive(streams::INIT);
    let writer = Writer {
        dir,
        seed,
        config_sha256: config_sha256.to_string(),
    };
    let trace_path = dir.join(TRACE_FILE);
    let joint_offline = sc.scheme == Scheme::Offline
        && sc.schedule.design == Design::Joint
        && sc.schedule.finetune_from.is_none()
        && sc.beamforming.method == BeamformingMethod::Hbdun;
    if resume.is_some() && !joint_offline {
        return Err(Error::config(
            "--resume",
            "resuming is supported for the offline joint schedule of the unfolded networks only",
        ));
    }

    match sc.beamforming.method {
        BeamformingMethod::Blackbox => {
            if sc.scheme != Scheme::Offline {
                return Err(Error::config("scheme", "the black-box baseline trains offline only"));
            }
            let b = &sc.beamforming;
            let layout = BlackboxLayout::new(&dims, b.shared_phases, b.est_hidden.clone(), b.bf_hidden.clone());
            let mut bb = BlackboxParams::init(layout, &dims, &mut init)?;
            let trace = train_blackbox(&cfg, &sampler, &mut bb, &dims, cfg.steps_stage1)?;
            let checkpoint = writer.checkpoint("blackbox", cfg.steps_stage1, vec![NetworkSection::from_blackbox(&bb)])?;
            write_trace(&trace_path, &trace)?;
            return Ok(TrainOutput {
                checkpoint,
                trace: trace_path,
                frames: None,
            });
        }
        BeamformingMethod::Hbdun => {}
        BeamformingMethod::Sca | BeamformingMethod::Zf => {
            return Err(Error::config(
                "beamforming.method",
                "only hbdun and blackbox are trainable; use run-baseline for sca and zf",
            ))
        }
    }

    let mut hb = init_hbdun(sc, &dims, &mut init)?;
    let mut ce = init_cedun(sc, &dims, &mut init)?;
    let sections = |hb: &HbdunParams, ce: &CedunParams| vec![NetworkSection::from_hbdun(hb), NetworkSection::from_cedun(ce)];

    if let Some(from) = &sc.schedule.finetune_from {
        let ck = Checkpoint::load(from).map_err(|e| match e {
            Error::Io(msg) => Error::config("schedule.finetune_from", msg),
            other => other,
        })?;
        hb = ck
            .section("hbdun", None)
            .ok_or_else(|| Error::config("schedule.finetune_from", "checkpoint has no hbdun network"))?
            .to_hbdun()?;
        ce = ck
            .section("cedun", Some("cedun"))
            .ok_or_else(|| Error::config("schedule.finetune_from", "checkpoint has no cedun network"))?
            .to_cedun()?;
    }

    match sc.scheme {
        Scheme::Single => Err(Error::config(
            "scheme",
            "the single-timescale scheme has no training schedule; use run-baseline",
        )),
        Scheme::Online => {
            let e = &sc.estimation;
            let mut ce_long = CedunParams::init(CedunLayout::full(&dims, e.long_pilot_len, e.long_delta), e.beta, &mut init)?;
            let out = online_schedule(&cfg, &sc.online, &sampler, &mut hb, &mut ce, &mut ce_long, &dims)?;
            let mut networks = sections(&hb, &ce);
            networks.push(NetworkSection::from_cedun(&ce_long));
            let checkpoint = writer.checkpoint("online", sc.online.frames, networks)?;
            write_trace(&trace_path, &out.trace)?;
            let frames = dir.join(FRAMES_FILE);
            let mut w = BufWriter::new(File::create(&frames)?);
            writeln!(w, "frame,sum_rate")?;
            for (f, r) in out.frame_rates.iter().enumerate() {
                writeln!(w, "{f},{r}")?;
            }
            w.flush()?;
            Ok(TrainOutput {
                checkpoint,
                trace: trace_path,
                frames: Some(frames),
            })
        }
        Scheme::Offline if sc.schedule.finetune_from.is_some() => {
            let trace = transfer_finetune(&cfg, &sampler, &mut hb, &mut ce, &dims)?;
            let checkpoint = writer.checkpoint("finetune", 2 * cfg.finetune_steps, sections(&hb, &ce))?;
            write_trace(&trace_path, &trace)?;
            Ok(TrainOutput {
                checkpoint,
                trace: trace_path,
                frames: None,
            })
        }
        Scheme::Offline => {
            let trace = match sc.schedule.design {
                Design::Joint => {
                    let (mut stage, mut step) = ("stage1".to_string(), 0);
                    if let Some(path) = resume {
                        let ck = Checkpoint::load(path).map_err(|e| match e {
                            Error::Io(msg) => Error::config("--resume", msg),
                            other => other,
                        })?;
                        hb = ck
                            .section("hbdun", None)
                            .ok_or_else(|| Error::config("--resume", "checkpoint has no hbdun network"))?
                            .to_hbdun()?;
                        ce = ck
                            .section("cedun", Some("cedun"))
                            .ok_or_else(|| Error::config("--resume", "checkpoint has no cedun network"))?
                            .to_cedun()?;
                        stage = ck.meta.stage.clone();
                        step = ck.meta.step;
                        if stage != "stage1" && stage != "stage2" {
                            return Err(Error::config("--resume", format!("cannot resume from stage `{stage}`")));
                        }
                    }
                    let chunk = match sc.schedule.checkpoint_every {
                        0 => usize::MAX,
                        n => n,
                    };
                    let mut trace = Vec::new();
                    if stage == "stage1" {
                        while step < cfg.steps_stage1 {
                            let n = chunk.min(cfg.steps_stage1 - step);
                            let part = TrainConfig {
                                steps_stage1: n,
                                ..cfg.clone()
                            };
                            trace.extend(train_stage1(&part, &sampler, &mut hb, &dims, step)?);
                            step += n;
                            if step < cfg.steps_stage1 {
                                writer.checkpoint("stage1", step, sections(&hb, &ce))?;
                            }
                        }
                        step = 0;
                        writer.checkpoint("stage2", 0, sections(&hb, &ce))?;
                    }
                    while step < cfg.steps_stage2 {
                        let n = chunk.min(cfg.steps_stage2 - step);
                        let part = TrainConfig {
                            steps_stage2: n,
                            ..cfg.clone()
                        };
                        trace.extend(train_stage2(&part, &sampler, &mut hb, &mut ce, &dims, step)?);
                        step += n;
                        writer.checkpoint("stage2", step, sections(&hb, &ce))?;
                    }
                    trace
                }
                Design::Separate => {
                    let mut trace = train_stage1(&cfg, &sampler, &mut hb, &dims, 0)?;
                    trace.extend(train_separate(&cfg, &sampler, &mut hb, &mut ce, &dims)?);
                    trace
                }
                Design::OneStage => {
                    train_one_stage(&cfg, &sampler, &mut hb, &mut ce, &dims, cfg.steps_stage1 + cfg.steps_stage2)?
                }
            };
            let checkpoint = writer.checkpoint("stage2", cfg.steps_stage2, sections(&hb, &ce))?;
            write_trace(&trace_path, &trace)?;
            Ok(TrainOutput {
                checkpoint,
                trace: trace_path,
                frames: None,
            })
        }
    }
}
