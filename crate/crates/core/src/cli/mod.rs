//! Command-line experiment runner.
//!
//! Every command writes a JSON manifest (config hash, seed, versions and
//! file list) next to its outputs. Exit codes: 0 success, 1 configuration
//! or input-schema error, 2 runtime error.

pub mod config;
pub mod figure;
pub mod sweep;
pub mod train;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::channel::{sample_batch, write_channels_csv};
use crate::error::{Error, Result};
use crate::metrics::{pilot_overhead, OverheadInputs, OverheadScheme};
use crate::numerics::Rng;
use crate::unfolding::checkpoint::FORMAT_VERSION;
use crate::unfolding::Checkpoint;
use config::{config_sha256, Scenario};
use figure::{label_of, Figure, FigureId, Table};
use sweep::{run_sweep, Models};

/// Stable identifiers of the RNG streams derived from `--seed`.
pub mod streams {
    pub const SWEEP_CHANNELS: u64 = 101;
    pub const SWEEP_POINT: u64 = 102;
    pub const PILOTS: u64 = 103;
    pub const NOISE: u64 = 104;
    pub const PHASES: u64 = 105;
    pub const SSCA: u64 = 106;
    pub const INIT: u64 = 107;
    pub const POOL: u64 = 108;
    pub const SAMPLES: u64 = 109;
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hbunfold", version, about = "Unfolded channel estimation and hybrid beamforming experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Scenario TOML file; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw channel realizations and dump them as CSV.
    SampleChannels {
        #[command(flatten)]
        common: Common,
        /// Number of realizations; defaults to `sweep.channels`.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the SNR grid with a conventional estimation and beamforming chain.
    RunBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train networks; writes a checkpoint, a trace and a manifest into `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same scenario.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep the SNR grid with trained networks from a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Signalling overhead of the three schemes over the frame-count grid.
    Overhead {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate result CSVs into plot-ready series.
    Figure {
        #[arg(long, value_enum)]
        id: FigureId,
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<String>,
    pub config_sha256: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: FORMAT_VERSION,
            command: command.into(),
            seed: None,
            config: None,
            config_sha256: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Manifest path for a file output: `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Loaded scenario with the effective seed.
struct Loaded {
    scenario: Scenario,
    seed: u64,
    sha: String,
    path: Option<PathBuf>,
}

fn load(common: &Common) -> Result<Loaded> {
    let (scenario, text) = match &common.config {
        Some(p) => Scenario::load(p)?,
        None => (Scenario::default(), String::new()),
    };
    Ok(Loaded {
        seed: common.seed.unwrap_or(scenario.seed),
        sha: config_sha256(&text),
        path: common.config.clone(),
        scenario,
    })
}

fn out_path(flag: &Option<PathBuf>, sc: &Scenario) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| sc.paths.out.clone())
        .ok_or_else(|| Error::config("--out", "no output path given (flag or `paths.out`)"))
}

/// Refuses to write over any input of the run.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(Error::config("--out", format!("{} is also an input", out.display())));
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn base_manifest(command: &str, l: &Loaded) -> Manifest {
    let mut m = Manifest::new(command);
    m.seed = Some(l.seed);
    m.config = l.path.as_ref().map(|p| p.display().to_string());
    m.config_sha256 = Some(l.sha.clone());
    m
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Writes the overhead CSV: one row per frame count.
pub fn write_overhead(sc: &Scenario, out: &mut dyn Write) -> Result<()> {
    let dims = sc.dims()?;
    let o = &sc.overhead;
    writeln!(out, "frames,single,offline,online")?;
    for &frames in &o.frames {
        let inp = OverheadInputs::from_dims(&dims, o.bits, o.pilot_len, frames, o.slots, o.samples);
        writeln!(
            out,
            "{frames},{},{},{}",
            pilot_overhead(OverheadScheme::Single, &inp),
            pilot_overhead(OverheadScheme::Offline, &inp),
            pilot_overhead(OverheadScheme::Online, &inp)
        )?;
    }
    Ok(())
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SampleChannels { common, count, out } => {
            let l = load(&common)?;
            let sc = &l.scenario;
            let out = out_path(&out, sc)?;
            guard_output(&out, &l.path.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
            let dims = sc.dims()?;
            let params = sc.channel.params()?;
            let n = count.unwrap_or(sc.sweep.channels);
            let samples = sample_batch(&dims, &params, &mut Rng::new(l.seed).derive(streams::SAMPLES), n);
            let mut w = create(&out)?;
            write_channels_csv(&mut w, &dims, &params, l.seed, &samples)?;
            w.flush()?;
            let mut m = base_manifest("sample-channels", &l);
            m.outputs.push(display(&out));
            m.write(&manifest_path(&out))
        }
        Command::RunBaseline { common, out } => {
            let l = load(&common)?;
            let out = out_path(&out, &l.scenario)?;
            guard_output(&out, &l.path.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
            sweep::check_models(&l.scenario, &Models::default())?;
            let mut w = create(&out)?;
            run_sweep(&l.scenario, l.seed, &Models::default(), &mut w)?;
            w.flush()?;
            let mut m = base_manifest("run-baseline", &l);
            m.outputs.push(display(&out));
            m.write(&manifest_path(&out))
        }
        Command::Train { common, out, resume } => {
            let l = load(&common)?;
            let dir = out_path(&out, &l.scenario)?;
            if let Some(r) = &resume {
                if !r.exists() {
                    return Err(Error::config("--resume", format!("{} does not exist", r.display())));
                }
            }
            if let Some(f) = &l.scenario.schedule.finetune_from {
                if !f.exists() {
                    return Err(Error::config("schedule.finetune_from", format!("{} does not exist", f.display())));
                }
            }
            // The resume checkpoint is read before the first write, so it may live in `dir`.
            let output = train::run_train(&l.scenario, l.seed, &l.sha, &dir, resume.as_deref())?;
            let mut m = base_manifest("train", &l);
            m.inputs.extend(resume.iter().map(|p| display(p)));
            m.inputs.extend(l.scenario.schedule.finetune_from.iter().map(|p| display(p)));
            m.outputs.push(display(&output.checkpoint));
            m.outputs.push(display(&output.trace));
            m.outputs.extend(output.frames.iter().map(|p| display(p)));
            m.write(&dir.join("manifest.json"))
        }
        Command::Evaluate { common, checkpoint, out } => {
            let l = load(&common)?;
            let sc = &l.scenario;
            let ck_path = checkpoint
                .or_else(|| sc.paths.checkpoint.clone())
                .ok_or_else(|| Error::config("--checkpoint", "evaluate needs a checkpoint (flag or `paths.checkpoint`)"))?;
            if !ck_path.exists() {
                return Err(Error::config("--checkpoint", format!("{} does not exist", ck_path.display())));
            }
            let out = out_path(&out, sc)?;
            let mut inputs: Vec<&Path> = l.path.iter().map(|p| p.as_path()).collect();
            inputs.push(&ck_path);
            guard_output(&out, &inputs)?;
            let models = Models::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
            sweep::check_models(sc, &models)?;
            let mut w = create(&out)?;
            run_sweep(sc, l.seed, &models, &mut w)?;
            w.flush()?;
            let mut m = base_manifest("evaluate", &l);
            m.inputs.push(display(&ck_path));
            m.outputs.push(display(&out));
            m.write(&manifest_path(&out))
        }
        Command::Overhead { common, out } => {
            let l = load(&common)?;
            let out = out_path(&out, &l.scenario)?;
            guard_output(&out, &l.path.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
            let mut w = create(&out)?;
            write_overhead(&l.scenario, &mut w)?;
            w.flush()?;
            let mut m = base_manifest("overhead", &l);
            m.outputs.push(display(&out));
            m.write(&manifest_path(&out))
        }
        Command::Figure { id, inputs, out } => {
            guard_output(&out, &inputs.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
            let mut fig = Figure::default();
            for path in &inputs {
                let file = File::open(path).map_err(|e| Error::config("--input", format!("{}: {e}", path.display())))?;
                let table = Table::read(&mut BufReader::new(file), &display(path))?;
                fig.add_table(id, &table, &label_of(path))?;
            }
            let mut w = create(&out)?;
            fig.write(&mut w)?;
            w.flush()?;
            let mut m = Manifest::new("figure");
            m.inputs = inputs.iter().map(|p| display(p)).collect();
            m.outputs.push(display(&out));
            m.write(&manifest_path(&out))
        }
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Schema(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
