//! Dynamic vision sensor emulation.
//!
//! Each pixel tracks the log intensity it last reported (`l_mem`). Between
//! two frames the signal is taken to be linear in log space; every time it
//! crosses `l_mem + theta_on` (or `l_mem - theta_off`) the pixel emits an ON
//! (OFF) event and moves its baseline to the crossed level. Noise events
//! (leak, shot, hot pixels) are drawn from a seeded generator and merged
//! into the same sorted stream.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evio::EventStream;
use crate::render::LuminanceFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Off => Polarity::On,
            Polarity::On => Polarity::Off,
        }
    }
}

/// A single sensor event.
///
/// Field order matters: the derived `Ord` is the stream order
/// (t, y, x, p ascending).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub t: u64,
    pub y: u16,
    pub x: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, y, x, p }
    }

    /// Packed key whose integer order equals the stream order.
    pub fn sort_key(&self) -> u128 {
        (self.t as u128) << 33 | (self.y as u128) << 17 | (self.x as u128) << 1 | self.p.bit() as u128
    }
}

/// Per-pixel memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelState {
    pub l_mem: f64,
    /// Crossings strictly before this time are suppressed.
    pub refractory_until: u64,
}

impl PixelState {
    pub fn new(l_mem: f64) -> Self {
        Self {
            l_mem,
            refractory_until: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvsConfig {
    pub theta_on: f64,
    pub theta_off: f64,
    pub refractory_us: u64,
    pub i_floor: f64,
    pub leak_rate_hz: f64,
    pub shot_rate_hz: f64,
    pub hot_pixel_fraction: f64,
    pub hot_pixel_rate_hz: f64,
    pub seed: u64,
}

impl Default for DvsConfig {
    fn default() -> Self {
        Self {
            theta_on: 0.2,
            theta_off: 0.2,
            refractory_us: 100,
            i_floor: 1e-4,
            leak_rate_hz: 0.1,
            shot_rate_hz: 1.0,
            hot_pixel_fraction: 1e-5,
            hot_pixel_rate_hz: 300.0,
            seed: 0,
        }
    }
}

impl DvsConfig {
    /// Default thresholds with every noise source and the refractory
    /// period switched off.
    pub fn ideal() -> Self {
        Self {
            refractory_us: 0,
            ..Self::default().noiseless()
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.leak_rate_hz = 0.0;
        self.shot_rate_hz = 0.0;
        self.hot_pixel_fraction = 0.0;
        self.hot_pixel_rate_hz = 0.0;
        self
    }

    pub fn has_noise(&self) -> bool {
        self.leak_rate_hz > 0.0
            || self.shot_rate_hz > 0.0
            || (self.hot_pixel_fraction > 0.0 && self.hot_pixel_rate_hz > 0.0)
    }

    /// Checks every field, returning the offending key name on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let theta_ok = |v: f64| v > 0.0 && v <= 2.0;
        if !theta_ok(self.theta_on) {
            return Err(("dvs.theta_on", format!("must be in (0, 2], got {}", self.theta_on)));
        }
        if !theta_ok(self.theta_off) {
            return Err(("dvs.theta_off", format!("must be in (0, 2], got {}", self.theta_off)));
        }
        if !(self.i_floor > 0.0 && self.i_floor.is_finite()) {
            return Err(("dvs.i_floor", format!("must be positive, got {}", self.i_floor)));
        }
        for (key, v) in [
            ("dvs.leak_rate_hz", self.leak_rate_hz),
            ("dvs.shot_rate_hz", self.shot_rate_hz),
            ("dvs.hot_pixel_rate_hz", self.hot_pixel_rate_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((key, format!("must be a finite rate >= 0, got {v}")));
            }
        }
        if !(self.hot_pixel_fraction >= 0.0 && self.hot_pixel_fraction < 1.0) {
            return Err((
                "dvs.hot_pixel_fraction",
                format!("must be in [0, 1), got {}", self.hot_pixel_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DvsError {
    #[error("non-finite input to pixel model (l_prev={l_prev}, l_new={l_new}, l_mem={l_mem})")]
    NonFinite { l_prev: f64, l_new: f64, l_mem: f64 },
    #[error("interval end {t1} must be after start {t0}")]
    EmptyInterval { t0: u64, t1: u64 },
    #[error("emulation needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("frame {index} timestamp {t} is not after previous timestamp {prev}")]
    NonMonotoneTimestamp { index: usize, prev: u64, t: u64 },
    #[error("sensor of {0}x{1} pixels exceeds 65535 in a dimension")]
    SensorTooLarge(u32, u32),
    #[error("invalid {0}: {1}")]
    InvalidConfig(&'static str, String),
}

#[inline]
pub fn log_intensity(luminance: f64, i_floor: f64) -> f64 {
    luminance.max(i_floor).ln()
}

/// Threshold crossings of one pixel over the interval (t0, t1].
///
/// Calls `emit(t, polarity)` for every event that survives the refractory
/// period, in time order. A baseline already a full threshold away from
/// `l_prev` is resolved at `t0 + 1` before the ramp is followed.
#[inline]
pub fn pixel_events_with<F: FnMut(u64, Polarity)>(
    l_prev: f64,
    l_new: f64,
    t0: u64,
    t1: u64,
    state: &mut PixelState,
    cfg: &DvsConfig,
    mut emit: F,
) -> Result<(), DvsError> {
    if !(l_prev.is_finite() && l_new.is_finite() && state.l_mem.is_finite()) {
        return Err(DvsError::NonFinite {
            l_prev,
            l_new,
            l_mem: state.l_mem,
        });
    }
    if t1 <= t0 {
        return Err(DvsError::EmptyInterval { t0, t1 });
    }
    let (on, off) = (cfg.theta_on, cfg.theta_off);
    let refractory = cfg.refractory_us;
    let mut fire = |t: u64, p: Polarity, state: &mut PixelState| {
        if t >= state.refractory_until {
            emit(t, p);
            state.refractory_until = t + refractory;
        }
    };

    while l_prev >= state.l_mem + on {
        state.l_mem += on;
        fire(t0 + 1, Polarity::On, state);
    }
    while l_prev <= state.l_mem - off {
        state.l_mem -= off;
        fire(t0 + 1, Polarity::Off, state);
    }

    let span = l_new - l_prev;
    let dt = (t1 - t0) as f64;
    let crossing_time = |level: f64| -> u64 {
        let offset = (dt * (level - l_prev) / span).round();
        let offset = if offset < 1.0 { 1 } else { offset as u64 };
        (t0 + offset).min(t1)
    };
    if span > 0.0 {
        while state.l_mem + on <= l_new {
            let level = state.l_mem + on;
            state.l_mem = level;
            fire(crossing_time(level), Polarity::On, state);
        }
    } else if span < 0.0 {
        while state.l_mem - off >= l_new {
            let level = state.l_mem - off;
            state.l_mem = level;
            fire(crossing_time(level), Polarity::Off, state);
        }
    }
    Ok(())
}

/// Collecting form of [`pixel_events_with`].
pub fn pixel_events(
    l_prev: f64,
    l_new: f64,
    t0: u64,
    t1: u64,
    state: PixelState,
    cfg: &DvsConfig,
) -> Result<(Vec<(u64, Polarity)>, PixelState), DvsError> {
    let mut state = state;
    let mut out = Vec::new();
    pixel_events_with(l_prev, l_new, t0, t1, &mut state, cfg, |t, p| out.push((t, p)))?;
    Ok((out, state))
}

/// A frame already converted to log intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct LogFrame {
    pub timestamp_us: u64,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl LogFrame {
    pub fn from_luminance(frame: &LuminanceFrame, i_floor: f64) -> Self {
        let values = frame
            .pixels()
            .par_iter()
            .map(|&v| log_intensity(v as f64, i_floor))
            .collect();
        Self {
            timestamp_us: frame.timestamp_us(),
            width: frame.width(),
            height: frame.height(),
            values,
        }
    }
}

/// Leak, shot and hot-pixel noise for a fixed sensor.
///
/// The hot-pixel set is drawn once from the seed. Noise for each interval
/// comes from its own ChaCha stream so it does not depend on how many
/// intervals were generated before it.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    width: u32,
    height: u32,
    leak_rate_hz: f64,
    shot_rate_hz: f64,
    hot_pixel_rate_hz: f64,
    seed: u64,
    hot_pixels: Vec<u32>,
}

impl NoiseModel {
    pub fn new(width: u32, height: u32, cfg: &DvsConfig) -> Self {
        let n = width as usize * height as usize;
        let hot_count = ((cfg.hot_pixel_fraction * n as f64).round() as usize).min(n);
        let mut hot_pixels: Vec<u32> = if hot_count > 0 {
            let mut rng = Self::rng(cfg.seed, 0);
            index::sample(&mut rng, n, hot_count)
                .into_iter()
                .map(|i| i as u32)
                .collect()
        } else {
            Vec::new()
        };
        hot_pixels.sort_unstable();
        Self {
            width,
            height,
            leak_rate_hz: cfg.leak_rate_hz,
            shot_rate_hz: cfg.shot_rate_hz,
            hot_pixel_rate_hz: cfg.hot_pixel_rate_hz,
            seed: cfg.seed,
            hot_pixels,
        }
    }

    fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    /// Linear pixel indices (y * width + x) of the hot pixels, ascending.
    pub fn hot_pixels(&self) -> &[u32] {
        &self.hot_pixels
    }

    /// Unsorted noise events in (t0, t1]; `interval` selects the random
    /// stream and must differ between intervals of one run.
    pub fn events(&self, t0: u64, t1: u64, interval: u64) -> Vec<Event> {
        if t1 <= t0 {
            return Vec::new();
        }
        let mut rng = Self::rng(self.seed, interval + 1);
        let duration_s = (t1 - t0) as f64 * 1e-6;
        let n_pixels = self.width as u64 * self.height as u64;
        let mut out = Vec::new();

        let leak = poisson(&mut rng, self.leak_rate_hz * n_pixels as f64 * duration_s);
        out.reserve(leak as usize);
        for _ in 0..leak {
            let idx = rng.random_range(0..n_pixels);
            out.push(self.event_at(&mut rng, idx, t0, t1, Polarity::On));
        }

        let shot = poisson(&mut rng, self.shot_rate_hz * n_pixels as f64 * duration_s);
        out.reserve(shot as usize);
        for _ in 0..shot {
            let idx = rng.random_range(0..n_pixels);
            let p = if rng.random::<bool>() {
                Polarity::On
            } else {
                Polarity::Off
            };
            out.push(self.event_at(&mut rng, idx, t0, t1, p));
        }

        for &idx in &self.hot_pixels {
            let k = poisson(&mut rng, self.hot_pixel_rate_hz * duration_s);
            for _ in 0..k {
                out.push(self.event_at(&mut rng, idx as u64, t0, t1, Polarity::On));
            }
        }
        out
    }

    #[inline]
    fn event_at(&self, rng: &mut ChaCha8Rng, idx: u64, t0: u64, t1: u64, p: Polarity) -> Event {
        let t = rng.random_range(t0 + 1..=t1);
        let w = self.width as u64;
        Event::new(t, (idx % w) as u16, (idx / w) as u16, p)
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Sorted noise events for a single interval (t0, t1].
pub fn inject_noise(t0: u64, t1: u64, width: u32, height: u32, cfg: &DvsConfig) -> Vec<Event> {
    let mut events = NoiseModel::new(width, height, cfg).events(t0, t1, 0);
    events.par_sort_unstable_by_key(Event::sort_key);
    events
}

/// Streaming emulator: feed frames in time order, get back the sorted
/// events of each inter-frame interval.
#[derive(Debug)]
pub struct Emulator {
    cfg: DvsConfig,
    width: u32,
    height: u32,
    states: Vec<PixelState>,
    prev_log: Vec<f64>,
    /// Last luminance per pixel, kept when fed luminance frames so that
    /// unchanged pixels skip the log transform.
    prev_lum: Option<Vec<f32>>,
    prev_t: u64,
    frames_seen: usize,
    noise: Option<NoiseModel>,
}

impl Emulator {
    /// Initializes every baseline from the first frame; no events result.
    pub fn new(first: &LuminanceFrame, cfg: &DvsConfig) -> Result<Self, DvsError> {
        let mut emu = Self::from_log(LogFrame::from_luminance(first, cfg.i_floor), cfg)?;
        emu.prev_lum = Some(first.pixels().to_vec());
        Ok(emu)
    }

    pub fn from_log(first: LogFrame, cfg: &DvsConfig) -> Result<Self, DvsError> {
        cfg.validate()
            .map_err(|(k, msg)| DvsError::InvalidConfig(k, msg))?;
        if first.width > u16::MAX as u32 || first.height > u16::MAX as u32 {
            return Err(DvsError::SensorTooLarge(first.width, first.height));
        }
        let states = first.values.iter().map(|&l| PixelState::new(l)).collect();
        let noise = cfg
            .has_noise()
            .then(|| NoiseModel::new(first.width, first.height, cfg));
        Ok(Self {
            cfg: cfg.clone(),
            width: first.width,
            height: first.height,
            states,
            prev_log: first.values,
            prev_lum: None,
            prev_t: first.timestamp_us,
            frames_seen: 1,
            noise,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn states(&self) -> &[PixelState] {
        &self.states
    }

    pub fn push(&mut self, frame: &LuminanceFrame) -> Result<Vec<Event>, DvsError> {
        if self.prev_lum.is_none() {
            return self.push_log(LogFrame::from_luminance(frame, self.cfg.i_floor));
        }
        let index = self.check_next(frame.width(), frame.height(), frame.timestamp_us())?;
        let (t0, t1) = (self.prev_t, frame.timestamp_us());
        let w = self.width as usize;
        let cfg = &self.cfg;
        let prev_lum = self.prev_lum.as_mut().expect("checked above");

        let rows: Vec<Vec<Event>> = self
            .states
            .par_chunks_mut(w)
            .zip(self.prev_log.par_chunks_mut(w))
            .zip(prev_lum.par_chunks_mut(w))
            .zip(frame.pixels().par_chunks(w))
            .enumerate()
            .map(|(y, (((states, logs), lums), next))| {
                let mut out = Vec::new();
                for (x, (((state, lp), lum), &ln_lum)) in
                    states.iter_mut().zip(logs.iter_mut()).zip(lums.iter_mut()).zip(next).enumerate()
                {
                    // Every processed pixel ends inside its threshold band,
                    // so an unchanged sample cannot fire.
                    if *lum == ln_lum {
                        continue;
                    }
                    let l_prev = *lp;
                    let l_new = log_intensity(ln_lum as f64, cfg.i_floor);
                    pixel_events_with(l_prev, l_new, t0, t1, state, cfg, |t, p| {
                        out.push(Event::new(t, x as u16, y as u16, p))
                    })?;
                    *lp = l_new;
                    *lum = ln_lum;
                }
                Ok(out)
            })
            .collect::<Result<_, DvsError>>()?;
        Ok(self.finish_interval(index, t1, rows))
    }

    fn check_next(&self, width: u32, height: u32, t: u64) -> Result<usize, DvsError> {
        let index = self.frames_seen;
        if width != self.width || height != self.height {
            return Err(DvsError::DimensionMismatch {
                index,
                want_w: self.width,
                want_h: self.height,
                got_w: width,
                got_h: height,
            });
        }
        if t <= self.prev_t {
            return Err(DvsError::NonMonotoneTimestamp {
                index,
                prev: self.prev_t,
                t,
            });
        }
        Ok(index)
    }

    fn finish_interval(&mut self, index: usize, t1: u64, rows: Vec<Vec<Event>>) -> Vec<Event> {
        let mut events: Vec<Event> = rows.into_iter().flatten().collect();
        if let Some(noise) = &self.noise {
            events.extend(noise.events(self.prev_t, t1, index as u64));
        }
        events.par_sort_unstable_by_key(Event::sort_key);
        self.prev_t = t1;
        self.frames_seen += 1;
        events
    }

    pub fn push_log(&mut self, frame: LogFrame) -> Result<Vec<Event>, DvsError> {
        let index = self.check_next(frame.width, frame.height, frame.timestamp_us)?;
        let (t0, t1) = (self.prev_t, frame.timestamp_us);
        let w = self.width as usize;
        let cfg = &self.cfg;

        let rows: Vec<Vec<Event>> = self
            .states
            .par_chunks_mut(w)
            .zip(self.prev_log.par_chunks(w))
            .zip(frame.values.par_chunks(w))
            .enumerate()
            .map(|(y, ((states, prev), next))| {
                let mut out = Vec::new();
                for (x, ((state, &lp), &ln)) in states.iter_mut().zip(prev).zip(next).enumerate() {
                    if lp == ln && lp < state.l_mem + cfg.theta_on && lp > state.l_mem - cfg.theta_off {
                        continue;
                    }
                    pixel_events_with(lp, ln, t0, t1, state, cfg, |t, p| {
                        out.push(Event::new(t, x as u16, y as u16, p))
                    })?;
                }
                Ok(out)
            })
            .collect::<Result<_, DvsError>>()?;

        self.prev_log = frame.values;
        self.prev_lum = None;
        Ok(self.finish_interval(index, t1, rows))
    }
}

/// Emulates a whole in-memory sequence.
pub fn emulate(frames: &[LuminanceFrame], cfg: &DvsConfig) -> Result<EventStream, DvsError> {
    if frames.len() < 2 {
        return Err(DvsError::TooFewFrames(frames.len()));
    }
    let mut emu = Emulator::new(&frames[0], cfg)?;
    let mut events = Vec::new();
    for frame in &frames[1..] {
        events.extend(emu.push(frame)?);
    }
    Ok(EventStream::from_sorted_unchecked(emu.width, emu.height, events))
}

/// Same as [`emulate`] for sequences given directly in log intensity.
pub fn emulate_log(frames: Vec<LogFrame>, cfg: &DvsConfig) -> Result<EventStream, DvsError> {
    if frames.len() < 2 {
        return Err(DvsError::TooFewFrames(frames.len()));
    }
    let mut it = frames.into_iter();
    let mut emu = Emulator::from_log(it.next().unwrap(), cfg)?;
    let mut events = Vec::new();
    for frame in it {
        events.extend(emu.push_log(frame)?);
    }
    Ok(EventStream::from_sorted_unchecked(emu.width, emu.height, events))
}
