use std::path::Path;
use std::process::Command;

use hbunfold::cli::config::Scenario;
use hbunfold::cli::streams;
use hbunfold::cli::sweep::{run_sweep, Models};
use hbunfold::cli::train::run_train;
use hbunfold::numerics::Rng;
use hbunfold::unfolding::{CedunLayout, CedunParams, Checkpoint, HbdunLayout, HbdunParams};

const SMALL_TRAIN: &str = "seed = 4\n[beamforming]\nmethod = \"hbdun\"\nlayers = 2\n[train]\neta = 0.01\nbatch_size = 2\n";

fn scenario(extra: &str) -> Scenario {
    Scenario::parse(&format!("{SMALL_TRAIN}{extra}")).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hbunfold"))
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = scenario("steps_stage1 = 4\nsteps_stage2 = 4\n[schedule]\ncheckpoint_every = 2\n");
    let partial = scenario("steps_stage1 = 4\nsteps_stage2 = 2\n[schedule]\ncheckpoint_every = 2\n");

    let whole = run_train(&full, 4, "sha", &tmp.path().join("whole"), None).unwrap();
    let cut = run_train(&partial, 4, "sha", &tmp.path().join("cut"), None).unwrap();
    let cut_ck = Checkpoint::load(&cut.checkpoint).unwrap();
    assert_eq!((cut_ck.meta.stage.as_str(), cut_ck.meta.step), ("stage2", 2));

    let resumed = run_train(&full, 4, "sha", &tmp.path().join("resumed"), Some(&cut.checkpoint)).unwrap();
    assert_eq!(
        std::fs::read(&whole.checkpoint).unwrap(),
        std::fs::read(&resumed.checkpoint).unwrap()
    );
    let trace = std::fs::read_to_string(&resumed.trace).unwrap();
    let first = trace.lines().nth(1).unwrap();
    assert!(first.starts_with("2,"), "trace starts at {first}");
    assert_eq!(trace.lines().count(), 1 + 2);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario("steps_stage1 = 0\nsteps_stage2 = 0\n");
    let out = run_train(&sc, 9, "sha", tmp.path(), None).unwrap();
    let ck = Checkpoint::load(&out.checkpoint).unwrap();

    let dims = sc.dims().unwrap();
    let mut init = Rng::new(9).derive(streams::INIT);
    let hb = HbdunParams::init(HbdunLayout::new(&dims, 2, false, sc.beamforming.mode), &dims, &mut init).unwrap();
    let e = &sc.estimation;
    let ce = CedunParams::init(CedunLayout::equivalent(&dims, e.pilot_len, e.cedun_delta), e.beta, &mut init).unwrap();
    assert_eq!(ck.section("hbdun", None).unwrap().store, hb.store);
    assert_eq!(ck.section("cedun", Some("cedun")).unwrap().store, ce.store);
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario("steps_stage1 = 3\nsteps_stage2 = 3\n");
    let a = run_train(&sc, 1, "sha", &tmp.path().join("a"), None).unwrap();
    let b = run_train(&sc, 1, "sha", &tmp.path().join("b"), None).unwrap();
    assert_eq!(std::fs::read(a.checkpoint).unwrap(), std::fs::read(b.checkpoint).unwrap());
    assert_eq!(std::fs::read(a.trace).unwrap(), std::fs::read(b.trace).unwrap());
}

#[test]
fn sca_beats_zero_forcing_on_paired_channels() {
    let sweep = "[sweep]\nsnr_db = [0.0, 10.0, 20.0]\nchannels = 30\n";
    let sca = Scenario::parse(&format!("{sweep}[beamforming]\nmethod = \"sca\"\n")).unwrap();
    let zf = Scenario::parse(&format!("{sweep}[beamforming]\nmethod = \"zf\"\n")).unwrap();
    let a = run_sweep(&sca, 2, &Models::default(), &mut Vec::new()).unwrap();
    let b = run_sweep(&zf, 2, &Models::default(), &mut Vec::new()).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!(p.sum_rate >= q.sum_rate, "snr {}: sca {} < zf {}", p.snr_db, p.sum_rate, q.sum_rate);
        assert_eq!(p.nmse, q.nmse);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", "[online]\netaa = 1.0\n");
    let out = tmp.path().join("o.csv").display().to_string();
    let (code, err) = run(&["overhead", "--config", &bad, "--out", &out]);
    assert_eq!(code, 1);
    assert!(err.contains("etaa"), "{err}");
    assert_eq!(run(&["no-such-command"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
    let missing = tmp.path().join("none.ckpt").display().to_string();
    assert_eq!(run(&["evaluate", "--checkpoint", &missing, "--out", &out]).0, 1);
}

#[test]
fn output_may_not_overwrite_an_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "seed = 1\n");
    let (code, _) = run(&["overhead", "--config", &cfg, "--out", &cfg]);
    assert_eq!(code, 1);
    assert_eq!(std::fs::read_to_string(&cfg).unwrap(), "seed = 1\n");
}

#[test]
fn baseline_is_reproducible_and_has_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[sweep]\nsnr_db = [5.0]\nchannels = 4\n");
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for p in [&a, &b] {
        let (code, err) = run(&["run-baseline", "--config", &cfg, "--seed", "3", "--out", &p.display().to_string()]);
        assert_eq!(code, 0, "{err}");
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(text.starts_with("seed,snr_db,sum_rate,nmse\n3,5,"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "run-baseline");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}
