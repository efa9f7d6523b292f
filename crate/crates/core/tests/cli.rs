use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ejecta_ev::evio::load_evt1;
use ejecta_ev::frames::read_manifest;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ejecta-ev"));
    c.env_remove("EJECTA_EV_SEED");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(s.lines().count(), 1, "stderr: {s}");
    s.trim_end().to_string()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn single_particle_cfg(dir: &Path) -> String {
    let p = dir.join("single.cfg");
    fs::write(&p, ejecta_ev::pipeline::SINGLE_PARTICLE_SCENARIO).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn invalid_frame_count_names_the_key() {
    let d = TempDir::new().unwrap();
    let cfg = single_particle_cfg(d.path());
    let out = run(&["simulate", "--config", &cfg, "--frames.count", "1"], d.path());
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error:") && line.contains("frames.count"), "{line}");
    assert!(!d.path().join("run").exists());
}

#[test]
fn missing_manifest_names_the_file() {
    let d = TempDir::new().unwrap();
    fs::create_dir(d.path().join("frames")).unwrap();
    let out = run(&["emulate", "frames"], d.path());
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error:") && line.contains("frames.txt"), "{line}");
}

#[test]
fn unknown_config_key_fails() {
    let d = TempDir::new().unwrap();
    let cfg = single_particle_cfg(d.path());
    let out = run(&["simulate", "--config", &cfg, "--dvs.theta-up", "0.3"], d.path());
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("theta_up"));
}

#[test]
fn static_fixture_is_silent() {
    let d = TempDir::new().unwrap();
    ok(&["fixture", "static", "--out", "st"], d.path());
    let s = ok(&["emulate", "st/frames", "--no-noise", "--out", "st.evt1"], d.path());
    assert!(s.starts_with("events: 0 "), "{s}");
    assert!(load_evt1(&d.path().join("st.evt1")).unwrap().is_empty());
}

#[test]
fn spinning_dot_polarities_balance() {
    let d = TempDir::new().unwrap();
    ok(&["fixture", "spinning_dot", "--out", "sd"], d.path());
    assert_eq!(read_manifest(&d.path().join("sd/frames")).unwrap().len(), 31);
    ok(&["emulate", "sd/frames", "--no-noise", "--out", "sd.evt1"], d.path());
    let s = load_evt1(&d.path().join("sd.evt1")).unwrap();
    let on = s.on_count() as f64;
    let off = (s.len() - s.on_count()) as f64;
    assert!(on > 0.0 && (on - off).abs() / on.max(off) <= 0.1, "on {on} off {off}");
}

#[test]
fn accumulate_writes_one_frame_per_window() {
    let d = TempDir::new().unwrap();
    ok(&["fixture", "spinning_dot", "--out", "sd"], d.path());
    ok(&["emulate", "sd/frames", "--out", "sd.evt1"], d.path());
    let s = load_evt1(&d.path().join("sd.evt1")).unwrap();
    let span = s.events().last().unwrap().t - s.events()[0].t + 1;
    let msg = ok(&["accumulate", "sd.evt1", "--window-us", "20000", "--out", "acc"], d.path());
    let n = fs::read_dir(d.path().join("acc")).unwrap().count() as u64;
    assert_eq!(n, span.div_ceil(20_000), "{msg}");
}

#[test]
fn seeded_runs_are_reproducible() {
    let d = TempDir::new().unwrap();
    let cfg = single_particle_cfg(d.path());
    for run_dir in ["a", "b"] {
        let root = d.path().join(run_dir);
        fs::create_dir(&root).unwrap();
        ok(&["--seed", "7", "simulate", "--config", &cfg, "--out", "run"], &root);
        ok(&["--seed", "7", "emulate", "run/frames", "--config", &cfg, "--out", "ev.evt1", "--csv", "ev.csv"], &root);
        ok(&["track", "ev.evt1", "--config", &cfg, "--mask", "run/mask.pgm", "--out", "tr"], &root);
    }
    let (a, b) = (tree(&d.path().join("a")), tree(&d.path().join("b")));
    assert!(a.len() > 40);
    assert_eq!(a, b);

    let root = d.path().join("c");
    fs::create_dir(&root).unwrap();
    ok(&["--seed", "8", "emulate", "../a/run/frames", "--config", &cfg, "--out", "ev.evt1"], &root);
    assert_ne!(fs::read(root.join("ev.evt1")).unwrap(), a["ev.evt1"]);
}

#[test]
fn seed_env_var_is_used() {
    let d = TempDir::new().unwrap();
    ok(&["fixture", "static", "--out", "st"], d.path());
    let run_env = |seed: &str, flag: Option<&str>, out: &str| {
        let mut c = bin();
        c.current_dir(d.path()).env("EJECTA_EV_SEED", seed);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        c.args(["emulate", "st/frames", "--dvs.shot-rate-hz", "50", "--out", out]);
        assert!(c.output().unwrap().status.success());
        fs::read(d.path().join(out)).unwrap()
    };
    let env3 = run_env("3", None, "e3.evt1");
    let flag3 = run_env("9", Some("3"), "f3.evt1");
    let env9 = run_env("9", None, "e9.evt1");
    assert_eq!(env3, flag3);
    assert_ne!(env3, env9);
}

#[test]
fn threshold_override_changes_output() {
    let d = TempDir::new().unwrap();
    ok(&["fixture", "spinning_dot", "--out", "sd"], d.path());
    ok(&["emulate", "sd/frames", "--no-noise", "--out", "base.evt1"], d.path());
    ok(&["emulate", "sd/frames", "--no-noise", "--dvs.theta-on", "0.6", "--out", "hi.evt1"], d.path());
    ok(&["emulate", "sd/frames", "--no-noise", "--dvs.theta-on=0.6", "--out", "hi2.evt1"], d.path());
    let base = load_evt1(&d.path().join("base.evt1")).unwrap();
    let hi = load_evt1(&d.path().join("hi.evt1")).unwrap();
    assert!(hi.on_count() < base.on_count());
    assert_eq!(hi, load_evt1(&d.path().join("hi2.evt1")).unwrap());

    let out = run(&["emulate", "sd/frames", "--track.eps-px", "4"], d.path());
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("track.eps-px"));
}

#[test]
fn track_and_eval_single_particle() {
    let d = TempDir::new().unwrap();
    ok(&["fixture", "single_particle", "--out", "sp"], d.path());
    ok(&["emulate", "sp/frames", "--out", "sp.evt1"], d.path());
    let s = ok(&["track", "sp.evt1", "--mask", "sp/mask.pgm", "--out", "tr"], d.path());
    assert_eq!(s.trim(), "confirmed tracks: 1");
    assert!(d.path().join("tr/overlay").is_dir());
    let s = ok(&["eval", "--tracks", "tr/tracks.csv", "--truth", "sp/truth.csv"], d.path());
    assert!(s.contains("recovered: 1/1"), "{s}");
}

#[test]
fn bad_fixture_and_bad_args_fail_cleanly() {
    let d = TempDir::new().unwrap();
    let out = run(&["fixture", "nope"], d.path());
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error:"));
    let out = run(&["accumulate", "missing.evt1"], d.path());
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("missing.evt1"));
    assert!(run(&["--help"], d.path()).status.success());
}
