use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ejecta_ev::config::{self, ScenarioConfig, BUNDLED_SCENARIO};
use ejecta_ev::pipeline::{self, Fixture};
use ejecta_ev::track::{self, PixelMask};

const SEED_ENV: &str = "EJECTA_EV_SEED";

/// Event-camera simulation and particle tracking for asteroid ejecta.
///
/// Any config key can be overridden with a flag of the form
/// `--section.key value`, e.g. `--dvs.theta-on 0.25`.
#[derive(Parser, Debug)]
#[command(name = "ejecta-ev", version)]
struct Cli {
    /// Worker threads for parallel stages; outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Seed override; falls back to EJECTA_EV_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scenario to PGM frames, truth.csv and mask.pgm.
    Simulate {
        /// Scenario file; the bundled bennu_ejecta.cfg when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
    },
    /// Convert a frame directory into an EVT1 event stream.
    Emulate {
        frame_dir: PathBuf,
        /// Config whose `seed` and `[dvs]` settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, short, default_value = "events.evt1")]
        out: PathBuf,
        /// Disable leak, shot and hot-pixel noise.
        #[arg(long)]
        no_noise: bool,
        /// Also write the events as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Bin an EVT1 stream into event-frame PGMs.
    Accumulate {
        events: PathBuf,
        #[arg(long, default_value_t = 33_333)]
        window_us: u64,
        #[arg(long, short, default_value = "event_frames")]
        out: PathBuf,
    },
    /// Detect and track particles in an EVT1 stream.
    Track {
        events: PathBuf,
        /// Config whose `[track]` settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Exclusion mask PGM (nonzero = ignored), e.g. mask.pgm from simulate.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, short, default_value = "tracks")]
        out: PathBuf,
        #[arg(long)]
        no_overlay: bool,
    },
    /// Write a built-in scene: spinning_dot, static or single_particle.
    Fixture {
        name: String,
        #[arg(long, short, default_value = "fixture")]
        out: PathBuf,
    },
    /// Compare a tracks CSV with a truth CSV.
    Eval {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Frame rate of the truth frames.
        #[arg(long, default_value_t = 30.0)]
        frame_rate: f64,
        /// Mean-distance threshold for a track to match a particle.
        #[arg(long, default_value_t = 3.0)]
        match_px: f64,
    },
}

/// Splits `--section.key value` / `--section.key=value` overrides out of the
/// argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn resolve_seed(cli: Option<u64>) -> Result<Option<u64>> {
    if cli.is_some() {
        return Ok(cli);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={s:?} is not a non-negative integer")),
        Err(_) => Ok(None),
    }
}

fn config_table(path: Option<&Path>, bundled: Option<&str>, overrides: &[(String, String)]) -> Result<toml::Table> {
    let mut table = match (path, bundled) {
        (Some(p), _) => config::load_table(p)?,
        (None, Some(text)) => text.parse().context("bundled scenario")?,
        (None, None) => toml::Table::new(),
    };
    for (k, v) in overrides {
        config::apply_override(&mut table, k, v)?;
    }
    Ok(table)
}

fn check_sections(overrides: &[(String, String)], allowed: &[&str], command: &str) -> Result<()> {
    for (k, _) in overrides {
        let section = k.split('.').next().unwrap_or_default();
        if !allowed.contains(&section) {
            bail!("--{k} has no effect on `{command}` (accepted sections: {})", allowed.join(", "));
        }
    }
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let seed = resolve_seed(cli.seed)?;
    let workers = cli.workers;
    match cli.command {
        Command::Simulate { config, out } => {
            let table = config_table(config.as_deref(), Some(BUNDLED_SCENARIO), &overrides)?;
            let mut cfg = ScenarioConfig::from_table(table)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let summary = pipeline::with_workers(workers, || pipeline::simulate(&cfg, &out))??;
            println!(
                "wrote {} frames ({} particles) to {}",
                summary.frames,
                summary.particles,
                summary.frame_dir.display()
            );
        }
        Command::Emulate {
            frame_dir,
            config,
            out,
            no_noise,
            csv,
        } => {
            check_sections(&overrides, &["dvs"], "emulate")?;
            let table = config_table(config.as_deref(), None, &overrides)?;
            let mut dvs = config::dvs_from_table(&table)?;
            if let Some(s) = seed {
                dvs.seed = s;
            }
            if no_noise {
                dvs = dvs.noiseless();
            }
            let (stream, summary) = pipeline::with_workers(workers, || pipeline::emulate_dir(&frame_dir, &dvs))??;
            pipeline::save_stream(&stream, &out)?;
            if let Some(p) = csv {
                pipeline::save_stream_csv(&stream, &p)?;
            }
            println!(
                "events: {} (on {}, off {}) from {} frames in {:.3} s, {:.0} events/s",
                summary.events,
                summary.on,
                summary.off,
                summary.frames,
                summary.wall_s,
                summary.events_per_s()
            );
        }
        Command::Accumulate { events, window_us, out } => {
            let stream = pipeline::load_stream(&events)?;
            let n = pipeline::accumulate_to_dir(&stream, window_us, &out)?;
            println!("wrote {n} event frames to {}", out.display());
        }
        Command::Track {
            events,
            config,
            mask,
            out,
            no_overlay,
        } => {
            check_sections(&overrides, &["track"], "track")?;
            let table = config_table(config.as_deref(), None, &overrides)?;
            let params = config::track_from_table(&table)?;
            let stream = pipeline::load_stream(&events)?;
            let mask: Option<PixelMask> = mask.map(|p| pipeline::load_mask(&p, &stream)).transpose()?;
            let tracks = pipeline::with_workers(workers, || track::track_stream(&stream, &params, mask.as_ref()))?;
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            pipeline::save_tracks(&tracks, &out.join(pipeline::TRACKS_CSV))?;
            if !no_overlay {
                pipeline::write_overlays(&stream, &tracks, &params, &out.join("overlay"))?;
            }
            println!("confirmed tracks: {}", tracks.len());
        }
        Command::Fixture { name, out } => {
            let fixture = Fixture::parse(&name)?;
            let n = pipeline::with_workers(workers, || pipeline::write_fixture(fixture, &out))??;
            println!("wrote fixture {name} ({n} frames) to {}", out.display());
        }
        Command::Eval {
            tracks,
            truth,
            frame_rate,
            match_px,
        } => {
            if !(frame_rate > 0.0) {
                bail!("--frame-rate must be positive");
            }
            let rows = pipeline::load_tracks(&tracks)?;
            let table = pipeline::TruthTable::new(&pipeline::load_truth(&truth)?, frame_rate);
            let report = pipeline::evaluate(&rows, &table, match_px);
            for m in &report.matches {
                println!(
                    "particle {} <- track {}: {:.3} px over {} detections",
                    m.particle_id, m.track_id, m.mean_error_px, m.points
                );
            }
            println!(
                "recovered: {}/{} particles from {} tracks, mean error {:.3} px",
                report.recovered(),
                report.particles,
                report.tracks,
                report.mean_error_px()
            );
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let parsed = split_overrides(args).and_then(|(rest, overrides)| {
        Cli::try_parse_from(rest).map(|cli| (cli, overrides)).or_else(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
            _ => {
                let msg = e.render().to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments");
                bail!("{}", first.trim_start_matches("error: "))
            }
        })
    });
    let result = parsed.and_then(|(cli, overrides)| run(cli, overrides));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
