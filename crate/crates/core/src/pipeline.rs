//! End-to-end stages as used by the command-line tool: simulate, emulate,
//! accumulate, track, built-in fixtures and evaluation against truth.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use crate::config::ScenarioConfig;
use crate::dvs::{DvsConfig, Emulator};
use crate::evio::{self, render_event_frame, Accumulator, EventStream, GrayImage};
use crate::frames::{self, FrameDirReader, FrameDirWriter};
use crate::render::{self, silhouette_mask, LuminanceFrame, SequenceRenderer, TruthRecord};
use crate::track::{self, PixelMask, Track, TrackParams, TrackRow};

pub const SINGLE_PARTICLE_SCENARIO: &str = include_str!("../configs/single_particle.cfg");

pub const FRAMES_DIR: &str = "frames";
pub const TRUTH_CSV: &str = "truth.csv";
pub const MASK_PGM: &str = "mask.pgm";
pub const TRACKS_CSV: &str = "tracks.csv";

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers` is `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("cannot start worker pool")?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub frames: usize,
    pub particles: usize,
    pub frame_dir: PathBuf,
}

/// Renders the scenario into `<out>/frames`, with `truth.csv` and the
/// asteroid silhouette `mask.pgm` alongside.
pub fn simulate(cfg: &ScenarioConfig, out: &Path) -> Result<SimulateSummary> {
    let frame_dir = out.join(FRAMES_DIR);
    let mut renderer = SequenceRenderer::new(cfg)?;
    let mut writer = FrameDirWriter::create(&frame_dir)?;
    let truth_path = out.join(TRUTH_CSV);
    let mut truth = csv::Writer::from_path(&truth_path).with_context(|| format!("cannot write {}", truth_path.display()))?;
    while let Some((frame, records)) = renderer.next_frame()? {
        writer.push(&frame)?;
        for r in records {
            truth.serialize(r)?;
        }
    }
    if cfg.particles.is_empty() {
        truth.write_record(["frame", "particle_id", "u", "v", "visible"])?;
    }
    truth.flush()?;
    let frames = writer.finish()?;
    let cam = renderer.camera();
    let mask = silhouette_mask(cam, renderer.pose(), renderer.body());
    frames::write_mask_pgm(cam.width(), cam.height(), &mask, &out.join(MASK_PGM))?;
    Ok(SimulateSummary {
        frames,
        particles: cfg.particles.len(),
        frame_dir,
    })
}

#[derive(Debug, Clone)]
pub struct EmulateSummary {
    pub events: usize,
    pub on: usize,
    pub off: usize,
    pub frames: usize,
    pub wall_s: f64,
}

impl EmulateSummary {
    pub fn events_per_s(&self) -> f64 {
        if self.wall_s > 0.0 {
            self.events as f64 / self.wall_s
        } else {
            0.0
        }
    }
}

/// Emulates a frame directory. The wall time covers emulation only, not
/// frame decoding.
pub fn emulate_dir(frame_dir: &Path, cfg: &DvsConfig) -> Result<(EventStream, EmulateSummary)> {
    let mut reader = FrameDirReader::open(frame_dir)?;
    let n = reader.len();
    if n < 2 {
        bail!("{}: need at least 2 frames, {} lists {n}", frame_dir.display(), frames::MANIFEST_NAME);
    }
    let first = reader.next().expect("two or more entries")?;
    let mut wall = 0.0;
    let start = Instant::now();
    let mut emu = Emulator::new(&first, cfg)?;
    wall += start.elapsed().as_secs_f64();
    let mut events = Vec::new();
    for frame in reader {
        let frame = frame?;
        let start = Instant::now();
        events.extend(emu.push(&frame)?);
        wall += start.elapsed().as_secs_f64();
    }
    let stream = EventStream::new(emu.width() as u16, emu.height() as u16, events)?;
    let on = stream.on_count();
    let summary = EmulateSummary {
        events: stream.len(),
        on,
        off: stream.len() - on,
        frames: n,
        wall_s: wall,
    };
    Ok((stream, summary))
}

pub fn load_stream(path: &Path) -> Result<EventStream> {
    evio::load_evt1(path).with_context(|| format!("cannot load {}", path.display()))
}

pub fn save_stream(stream: &EventStream, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    evio::save_evt1(stream, path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn save_stream_csv(stream: &EventStream, path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    evio::write_csv(stream, BufWriter::new(f)).with_context(|| format!("cannot write {}", path.display()))
}

pub fn event_frame_filename(index: usize) -> String {
    format!("events_{index:05}.pgm")
}

/// Bins the stream into windows starting at its first event and writes one
/// PGM per window. Returns the number of frames.
pub fn accumulate_to_dir(stream: &EventStream, window_us: u64, out: &Path) -> Result<usize> {
    if window_us == 0 {
        bail!("window must be positive");
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let t0 = stream.events().first().map_or(0, |e| e.t);
    let mut n = 0;
    for (k, frame) in Accumulator::covering(stream, window_us, t0).enumerate() {
        let path = out.join(event_frame_filename(k));
        render_event_frame(&frame)
            .save_pgm(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        n += 1;
    }
    Ok(n)
}

pub fn load_mask(path: &Path, stream: &EventStream) -> Result<PixelMask> {
    let (w, h, excluded) = frames::read_mask_pgm(path)?;
    if (w, h) != (stream.width() as u32, stream.height() as u32) {
        bail!(
            "{}: mask is {w}x{h} but the stream is {}x{}",
            path.display(),
            stream.width(),
            stream.height()
        );
    }
    Ok(PixelMask::new(w, h, excluded))
}

pub fn save_tracks(tracks: &[Track], path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    track::write_tracks_csv(tracks, BufWriter::new(f)).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_tracks(path: &Path) -> Result<Vec<TrackRow>> {
    let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    track::read_tracks_csv(BufReader::new(f)).with_context(|| format!("cannot parse {}", path.display()))
}

fn draw_marker(img: &mut GrayImage, u: f64, v: f64) {
    let (cx, cy) = (u.round() as i64, v.round() as i64);
    for d in -6i64..=6 {
        for (r, value) in [(6i64, 255u8), (7, 0)] {
            let d = d * r / 6;
            img.put(cx + d, cy - r, value);
            img.put(cx + d, cy + r, value);
            img.put(cx - r, cy + d, value);
            img.put(cx + r, cy + d, value);
        }
    }
}

pub fn overlay_filename(index: usize) -> String {
    format!("overlay_{index:05}.pgm")
}

/// Writes the tracking windows as event frames with a square marker around
/// every confirmed-track detection.
pub fn write_overlays(stream: &EventStream, tracks: &[Track], params: &TrackParams, out: &Path) -> Result<usize> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut marks: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for t in tracks {
        for d in &t.detections {
            marks.entry(d.t).or_default().push((d.u, d.v));
        }
    }
    let mut n = 0;
    for (k, frame) in Accumulator::covering(stream, params.window_us, 0).enumerate() {
        let mut img = render_event_frame(&frame);
        let centre = frame.t_start + params.window_us / 2;
        for &(u, v) in marks.get(&centre).map(Vec::as_slice).unwrap_or(&[]) {
            draw_marker(&mut img, u, v);
        }
        let path = out.join(overlay_filename(k));
        img.save_pgm(&path).with_context(|| format!("cannot write {}", path.display()))?;
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    SpinningDot,
    Static,
    SingleParticle,
}

impl Fixture {
    pub const NAMES: [&'static str; 3] = ["spinning_dot", "static", "single_particle"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "spinning_dot" => Ok(Fixture::SpinningDot),
            "static" => Ok(Fixture::Static),
            "single_particle" => Ok(Fixture::SingleParticle),
            _ => bail!("unknown fixture `{name}` (expected one of {})", Self::NAMES.join(", ")),
        }
    }
}

pub const SPIN_RADIUS_PX: f64 = 100.0;
pub const SPIN_PERIOD_S: f64 = 1.0;
pub const SPIN_FRAME_RATE: f64 = 30.0;

/// One full rotation, first and last frame at the same angle.
pub fn spinning_dot_frames() -> Vec<LuminanceFrame> {
    let n = (SPIN_PERIOD_S * SPIN_FRAME_RATE).round() as usize + 1;
    render::spinning_dot_sequence(SPIN_RADIUS_PX, SPIN_PERIOD_S, SPIN_FRAME_RATE, n)
}

pub fn static_frames() -> Vec<LuminanceFrame> {
    let (w, h) = (64u32, 48u32);
    let pixels: Vec<f32> = (0..h)
        .flat_map(|y| (0..w).map(move |x| 0.1 + 0.8 * ((x * 7 + y * 13) % 64) as f32 / 63.0))
        .collect();
    (0..10)
        .map(|k| {
            LuminanceFrame::new(render::frame_timestamp_us(k, 30.0), w, h, pixels.clone()).expect("values in range")
        })
        .collect()
}

pub fn single_particle_config() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(SINGLE_PARTICLE_SCENARIO).expect("bundled fixture is valid")
}

/// Writes a built-in scene into `<out>/frames`. The single-particle scene
/// also gets `truth.csv` and `mask.pgm`.
pub fn write_fixture(fixture: Fixture, out: &Path) -> Result<usize> {
    match fixture {
        Fixture::SpinningDot => write_frames(&spinning_dot_frames(), out),
        Fixture::Static => write_frames(&static_frames(), out),
        Fixture::SingleParticle => Ok(simulate(&single_particle_config(), out)?.frames),
    }
}

fn write_frames(frames: &[LuminanceFrame], out: &Path) -> Result<usize> {
    frames::write_frame_dir(&out.join(FRAMES_DIR), frames)?;
    Ok(frames.len())
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<TruthRecord>, _>>()
        .with_context(|| format!("cannot parse {}", path.display()))
}

/// Ground-truth positions keyed by particle, interpolated linearly in time
/// between frames where the particle is visible at both ends.
pub struct TruthTable {
    frame_rate: f64,
    by_particle: BTreeMap<usize, BTreeMap<usize, (f64, f64)>>,
}

impl TruthTable {
    pub fn new(records: &[TruthRecord], frame_rate: f64) -> Self {
        let mut by_particle: BTreeMap<usize, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
        for r in records {
            if r.visible != 0 && r.u.is_finite() && r.v.is_finite() {
                by_particle.entry(r.particle_id).or_default().insert(r.frame, (r.u, r.v));
            }
        }
        Self {
            frame_rate,
            by_particle,
        }
    }

    pub fn particles(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_particle.keys().copied()
    }

    pub fn position(&self, particle: usize, t_us: u64) -> Option<(f64, f64)> {
        let frames = self.by_particle.get(&particle)?;
        let f = t_us as f64 * 1e-6 * self.frame_rate;
        let k = f.floor() as usize;
        let a = *frames.get(&k)?;
        let frac = f - k as f64;
        if frac == 0.0 {
            return Some(a);
        }
        let b = *frames.get(&(k + 1))?;
        Some((a.0 + (b.0 - a.0) * frac, a.1 + (b.1 - a.1) * frac))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackMatch {
    pub track_id: u64,
    pub particle_id: usize,
    pub mean_error_px: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tracks: usize,
    pub particles: usize,
    pub matches: Vec<TrackMatch>,
}

impl EvalReport {
    pub fn recovered(&self) -> usize {
        self.matches.len()
    }

    pub fn mean_error_px(&self) -> f64 {
        if self.matches.is_empty() {
            f64::NAN
        } else {
            self.matches.iter().map(|m| m.mean_error_px).sum::<f64>() / self.matches.len() as f64
        }
    }
}

/// Matches tracks to particles one-to-one. A pair qualifies when the track's
/// mean distance to the interpolated truth is below `match_px`; pairs are
/// taken in ascending error order.
pub fn evaluate(rows: &[TrackRow], truth: &TruthTable, match_px: f64) -> EvalReport {
    let mut by_track: BTreeMap<u64, Vec<&TrackRow>> = BTreeMap::new();
    for r in rows {
        by_track.entry(r.track_id).or_default().push(r);
    }
    let mut candidates = Vec::new();
    for (&id, dets) in &by_track {
        for p in truth.particles() {
            let errs: Vec<f64> = dets
                .iter()
                .filter_map(|d| truth.position(p, d.t_us).map(|(u, v)| (d.u - u).hypot(d.v - v)))
                .collect();
            // Most of the track must overlap the particle's visible span.
            if errs.len() * 2 <= dets.len() {
                continue;
            }
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            if mean < match_px {
                candidates.push(TrackMatch {
                    track_id: id,
                    particle_id: p,
                    mean_error_px: mean,
                    points: errs.len(),
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.mean_error_px
            .total_cmp(&b.mean_error_px)
            .then(a.track_id.cmp(&b.track_id))
            .then(a.particle_id.cmp(&b.particle_id))
    });
    let mut used_t = std::collections::HashSet::new();
    let mut used_p = std::collections::HashSet::new();
    let mut matches: Vec<TrackMatch> = candidates
        .into_iter()
        .filter(|m| {
            if used_t.contains(&m.track_id) || used_p.contains(&m.particle_id) {
                return false;
            }
            used_t.insert(m.track_id);
            used_p.insert(m.particle_id);
            true
        })
        .collect();
    matches.sort_by_key(|m| m.particle_id);
    EvalReport {
        tracks: by_track.len(),
        particles: truth.particles().count(),
        matches,
    }
}

/// Converts in-memory tracks to their CSV rows.
pub fn track_rows(tracks: &[Track]) -> Vec<TrackRow> {
    tracks
        .iter()
        .flat_map(|t| {
            t.detections.iter().map(|d| TrackRow {
                track_id: t.id,
                t_us: d.t,
                u: d.u,
                v: d.v,
                event_count: d.event_count,
                status: t.status.as_str().to_string(),
            })
        })
        .collect()
}
