//! Event-native particle detection and tracking.
//!
//! The stream is cut into fixed windows. Each window is denoised with a
//! causal neighbourhood filter, clustered into detections and associated
//! with existing tracks by gated greedy nearest-neighbour matching against
//! constant-velocity predictions.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dvs::Event;
use crate::evio::EventStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackParams {
    pub window_us: u64,
    pub eps_px: f64,
    pub min_cluster_size: usize,
    pub gate_px: f64,
    pub confirm_hits: usize,
    pub max_misses: u32,
    pub denoise_min_neighbors: u32,
    pub support_radius_px: u32,
    pub support_window_us: u64,
    /// Number of trailing detections used for the velocity fit.
    pub fit_window: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            window_us: 33_333,
            eps_px: 3.0,
            min_cluster_size: 5,
            gate_px: 10.0,
            confirm_hits: 3,
            max_misses: 3,
            denoise_min_neighbors: 2,
            support_radius_px: 2,
            support_window_us: 10_000,
            fit_window: 5,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.window_us == 0 {
            return Err(("track.window_us", "must be positive".into()));
        }
        if !(self.eps_px >= 1.0 && self.eps_px.is_finite()) {
            return Err(("track.eps_px", format!("must be >= 1, got {}", self.eps_px)));
        }
        if self.min_cluster_size == 0 {
            return Err(("track.min_cluster_size", "must be positive".into()));
        }
        if !(self.gate_px > 0.0 && self.gate_px.is_finite()) {
            return Err(("track.gate_px", format!("must be positive, got {}", self.gate_px)));
        }
        if self.confirm_hits == 0 {
            return Err(("track.confirm_hits", "must be positive".into()));
        }
        if self.support_radius_px == 0 {
            return Err(("track.support_radius_px", "must be positive".into()));
        }
        if self.support_window_us == 0 {
            return Err(("track.support_window_us", "must be positive".into()));
        }
        if self.fit_window < 2 {
            return Err(("track.fit_window", format!("must be >= 2, got {}", self.fit_window)));
        }
        Ok(())
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl BBox {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 as f64 && u <= self.x1 as f64 && v >= self.y0 as f64 && v <= self.y1 as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub t: u64,
    pub u: f64,
    pub v: f64,
    pub event_count: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Terminated,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::Tentative => "tentative",
            TrackStatus::Confirmed => "confirmed",
            TrackStatus::Terminated => "terminated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tentative" => Some(TrackStatus::Tentative),
            "confirmed" => Some(TrackStatus::Confirmed),
            "terminated" => Some(TrackStatus::Terminated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub detections: Vec<Detection>,
    /// `(u, v, du/dt, dv/dt)` at `state_t`, velocities in px/µs.
    pub state: [f64; 4],
    pub state_t: u64,
    pub misses: u32,
    pub status: TrackStatus,
}

impl Track {
    fn spawn(id: u64, det: Detection) -> Self {
        Self {
            id,
            state: [det.u, det.v, 0.0, 0.0],
            state_t: det.t,
            detections: vec![det],
            misses: 0,
            status: TrackStatus::Tentative,
        }
    }

    pub fn predict(&self, t: u64) -> (f64, f64) {
        let dt = t as f64 - self.state_t as f64;
        (self.state[0] + self.state[2] * dt, self.state[1] + self.state[3] * dt)
    }

    pub fn is_active(&self) -> bool {
        self.status != TrackStatus::Terminated
    }

    /// Constant-velocity least-squares fit over the last `k` detections,
    /// evaluated at the newest one.
    fn refit(&mut self, k: usize) {
        let n = self.detections.len().min(k);
        let recent = &self.detections[self.detections.len() - n..];
        let last = recent[n - 1].t;
        if n == 1 {
            self.state = [recent[0].u, recent[0].v, 0.0, 0.0];
        } else {
            let ts: Vec<f64> = recent.iter().map(|d| d.t as f64 - last as f64).collect();
            let tm = ts.iter().sum::<f64>() / n as f64;
            let um = recent.iter().map(|d| d.u).sum::<f64>() / n as f64;
            let vm = recent.iter().map(|d| d.v).sum::<f64>() / n as f64;
            let stt: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
            let stu: f64 = ts.iter().zip(recent).map(|(t, d)| (t - tm) * (d.u - um)).sum();
            let stv: f64 = ts.iter().zip(recent).map(|(t, d)| (t - tm) * (d.v - vm)).sum();
            let (du, dv) = (stu / stt, stv / stt);
            self.state = [um - du * tm, vm - dv * tm, du, dv];
        }
        self.state_t = last;
    }
}

/// Keeps each event that has support from at least `min_neighbors` other
/// pixels within Chebyshev radius `radius_px`, a pixel supporting when it
/// fired in `[t - window_us, t]`. A pixel counts once however often it
/// fired, so hot pixels cannot prop up clusters around themselves.
pub fn denoise(stream: &EventStream, radius_px: u32, window_us: u64, min_neighbors: u32) -> EventStream {
    let mut filter = Denoiser::new(stream.width(), stream.height(), radius_px, window_us, min_neighbors);
    let mut kept = Vec::new();
    filter.process(stream.events(), &mut kept);
    EventStream::from_sorted_unchecked(stream.width() as u32, stream.height() as u32, kept)
}

/// Streaming form of [`denoise`]; state carries across calls so a stream can
/// be fed window by window.
pub struct Denoiser {
    width: usize,
    height: usize,
    radius: usize,
    window_us: u64,
    min_neighbors: u32,
    counts: Vec<u32>,
    recent: VecDeque<(u64, usize)>,
}

impl Denoiser {
    pub fn new(width: u16, height: u16, radius_px: u32, window_us: u64, min_neighbors: u32) -> Self {
        let (width, height) = (width as usize, height as usize);
        Self {
            width,
            height,
            radius: radius_px as usize,
            window_us,
            min_neighbors,
            counts: if min_neighbors == 0 { Vec::new() } else { vec![0; width * height] },
            recent: VecDeque::new(),
        }
    }

    fn support(&self, idx: usize) -> u32 {
        let (x, y) = (idx % self.width, idx / self.width);
        let (x0, x1) = (x.saturating_sub(self.radius), (x + self.radius).min(self.width - 1));
        let (y0, y1) = (y.saturating_sub(self.radius), (y + self.radius).min(self.height - 1));
        let mut n = 0;
        for yy in y0..=y1 {
            let row = &self.counts[yy * self.width..];
            n += row[x0..=x1].iter().filter(|&&c| c > 0).count() as u32;
        }
        n - (self.counts[idx] > 0) as u32
    }

    /// Appends the surviving events of the time-ordered `events` to `out`.
    /// Events sharing a timestamp support each other symmetrically.
    pub fn process(&mut self, events: &[Event], out: &mut Vec<Event>) {
        if self.min_neighbors == 0 {
            out.extend_from_slice(events);
            return;
        }
        let mut i = 0;
        while i < events.len() {
            let t = events[i].t;
            let j = i + events[i..].partition_point(|e| e.t == t);
            let horizon = t.saturating_sub(self.window_us);
            while let Some(&(te, idx)) = self.recent.front() {
                if te >= horizon {
                    break;
                }
                self.counts[idx] -= 1;
                self.recent.pop_front();
            }
            for e in &events[i..j] {
                let idx = e.y as usize * self.width + e.x as usize;
                self.counts[idx] += 1;
                self.recent.push_back((t, idx));
            }
            for e in &events[i..j] {
                let idx = e.y as usize * self.width + e.x as usize;
                if self.support(idx) >= self.min_neighbors {
                    out.push(*e);
                }
            }
            i = j;
        }
    }
}

/// Static per-pixel exclusion mask; `true` marks pixels to ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub excluded: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32, excluded: Vec<bool>) -> Self {
        assert_eq!(excluded.len(), width as usize * height as usize, "mask size");
        Self {
            width,
            height,
            excluded,
        }
    }

    pub fn is_excluded(&self, x: u16, y: u16) -> bool {
        let (x, y) = (x as u32, y as u32);
        x < self.width && y < self.height && self.excluded[(y * self.width + x) as usize]
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|&&m| m).count()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering of the window's events on pixel coordinates.
/// A cluster must cover at least `min_cluster_size` distinct pixels; its
/// centroid is the mean over member events. Every detection gets timestamp
/// `t`. The result does not depend on the order of `events`.
pub fn cluster_window(
    events: &[Event],
    t: u64,
    eps_px: f64,
    min_cluster_size: usize,
    mask: Option<&PixelMask>,
) -> Vec<Detection> {
    let mut pixels: Vec<(u16, u16)> = events
        .iter()
        .filter(|e| !mask.is_some_and(|m| m.is_excluded(e.x, e.y)))
        .map(|e| (e.y, e.x))
        .collect();
    pixels.sort_unstable();
    // Run-length encode identical pixels.
    let mut unique: Vec<((u16, u16), usize)> = Vec::new();
    for p in pixels {
        match unique.last_mut() {
            Some((q, n)) if *q == p => *n += 1,
            _ => unique.push((p, 1)),
        }
    }
    let index: HashMap<(u16, u16), usize> = unique.iter().enumerate().map(|(i, (p, _))| (*p, i)).collect();
    let r = eps_px.floor() as i32;
    let eps2 = eps_px * eps_px;
    let offsets: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| (dy, dx) > (0, 0) && ((dx * dx + dy * dy) as f64) <= eps2)
        .collect();
    let mut parent: Vec<usize> = (0..unique.len()).collect();
    for (i, ((y, x), _)) in unique.iter().enumerate() {
        for &(dy, dx) in &offsets {
            let (ny, nx) = (*y as i32 + dy, *x as i32 + dx);
            if ny < 0 || nx < 0 || ny > u16::MAX as i32 || nx > u16::MAX as i32 {
                continue;
            }
            if let Some(&j) = index.get(&(ny as u16, nx as u16)) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }

    struct Acc {
        n: usize,
        pixels: usize,
        sx: u64,
        sy: u64,
        bbox: BBox,
    }
    // Roots are the smallest (y, x) member, so first-seen order is a stable key.
    let mut order: Vec<usize> = Vec::new();
    let mut acc: HashMap<usize, Acc> = HashMap::new();
    for (i, ((y, x), n)) in unique.iter().enumerate() {
        let root = find(&mut parent, i);
        let a = acc.entry(root).or_insert_with(|| {
            order.push(root);
            Acc {
                n: 0,
                pixels: 0,
                sx: 0,
                sy: 0,
                bbox: BBox {
                    x0: *x,
                    y0: *y,
                    x1: *x,
                    y1: *y,
                },
            }
        });
        a.n += n;
        a.pixels += 1;
        a.sx += *x as u64 * *n as u64;
        a.sy += *y as u64 * *n as u64;
        a.bbox.x0 = a.bbox.x0.min(*x);
        a.bbox.x1 = a.bbox.x1.max(*x);
        a.bbox.y0 = a.bbox.y0.min(*y);
        a.bbox.y1 = a.bbox.y1.max(*y);
    }
    order
        .into_iter()
        .filter_map(|root| {
            let a = &acc[&root];
            (a.pixels >= min_cluster_size).then(|| Detection {
                t,
                u: a.sx as f64 / a.n as f64,
                v: a.sy as f64 / a.n as f64,
                event_count: a.n,
                bbox: a.bbox,
            })
        })
        .collect()
}

/// Greedy globally-nearest matching: pairs are taken in ascending distance
/// order (ties by prediction then detection index) while both sides are
/// free. Returns `(prediction index, detection index)` pairs, never farther
/// apart than `gate_px`.
pub fn match_greedy(predictions: &[(f64, f64)], detections: &[(f64, f64)], gate_px: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let dist = (p.0 - d.0).hypot(p.1 - d.1);
            if dist <= gate_px {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predictions.len()];
    let mut used_d = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_d[j] {
            used_p[i] = true;
            used_d[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Multi-target state carried across windows.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: TrackParams,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(params: TrackParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn into_tracks(self) -> Vec<Track> {
        self.tracks
    }

    /// Associates one window's detections (all stamped `t`) with the active
    /// tracks.
    pub fn associate(&mut self, t: u64, detections: Vec<Detection>) {
        let active: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].is_active()).collect();
        let predictions: Vec<(f64, f64)> = active.iter().map(|&i| self.tracks[i].predict(t)).collect();
        let points: Vec<(f64, f64)> = detections.iter().map(|d| (d.u, d.v)).collect();
        let matches = match_greedy(&predictions, &points, self.params.gate_px);

        let mut matched_track = vec![false; active.len()];
        let mut det_slots: Vec<Option<Detection>> = detections.into_iter().map(Some).collect();
        for &(pi, dj) in &matches {
            matched_track[pi] = true;
            let track = &mut self.tracks[active[pi]];
            track.detections.push(det_slots[dj].take().expect("detection matched once"));
            track.refit(self.params.fit_window);
            track.misses = 0;
            if track.status == TrackStatus::Tentative && track.detections.len() >= self.params.confirm_hits {
                track.status = TrackStatus::Confirmed;
            }
        }
        for (pi, &ti) in active.iter().enumerate() {
            if !matched_track[pi] {
                let track = &mut self.tracks[ti];
                track.misses += 1;
                if track.misses > self.params.max_misses {
                    track.status = TrackStatus::Terminated;
                }
            }
        }
        for det in det_slots.into_iter().flatten() {
            let mut track = Track::spawn(self.next_id, det);
            if self.params.confirm_hits <= 1 {
                track.status = TrackStatus::Confirmed;
            }
            self.tracks.push(track);
            self.next_id += 1;
        }
    }

    /// Tracks that reached confirmation, whatever their current status.
    pub fn confirmed(&self) -> Vec<Track> {
        self.tracks
            .iter()
            .filter(|t| t.detections.len() >= self.params.confirm_hits)
            .cloned()
            .collect()
    }
}

/// Runs denoise, clustering and association over consecutive windows
/// starting at time 0 and returns every track that was confirmed.
pub fn track_stream(stream: &EventStream, params: &TrackParams, mask: Option<&PixelMask>) -> Vec<Track> {
    let mut pipeline = WindowPipeline::new(stream.width(), stream.height(), params.clone(), mask);
    let events = stream.events();
    let mut start = 0u64;
    let mut cursor = 0usize;
    while cursor < events.len() {
        let end = start + params.window_us;
        let next = cursor + events[cursor..].partition_point(|e| e.t < end);
        pipeline.push_window(start, &events[cursor..next]);
        cursor = next;
        start = end;
    }
    pipeline.finish()
}

/// Window-at-a-time driver behind [`track_stream`].
pub struct WindowPipeline<'m> {
    params: TrackParams,
    denoiser: Denoiser,
    tracker: Tracker,
    mask: Option<&'m PixelMask>,
    scratch: Vec<Event>,
}

impl<'m> WindowPipeline<'m> {
    pub fn new(width: u16, height: u16, params: TrackParams, mask: Option<&'m PixelMask>) -> Self {
        let denoiser = Denoiser::new(
            width,
            height,
            params.support_radius_px,
            params.support_window_us,
            params.denoise_min_neighbors,
        );
        Self {
            tracker: Tracker::new(params.clone()),
            params,
            denoiser,
            mask,
            scratch: Vec::new(),
        }
    }

    /// Processes the events of `[start, start + window_us)` and returns the
    /// detections found in it.
    pub fn push_window(&mut self, start: u64, events: &[Event]) -> Vec<Detection> {
        self.scratch.clear();
        self.denoiser.process(events, &mut self.scratch);
        let t = start + self.params.window_us / 2;
        let dets = cluster_window(&self.scratch, t, self.params.eps_px, self.params.min_cluster_size, self.mask);
        self.tracker.associate(t, dets.clone());
        dets
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn finish(self) -> Vec<Track> {
        self.tracker.confirmed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub track_id: u64,
    pub t_us: u64,
    pub u: f64,
    pub v: f64,
    pub event_count: usize,
    pub status: String,
}

pub fn write_tracks_csv<W: Write>(tracks: &[Track], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for track in tracks {
        for d in &track.detections {
            w.serialize(TrackRow {
                track_id: track.id,
                t_us: d.t,
                u: d.u,
                v: d.v,
                event_count: d.event_count,
                status: track.status.as_str().to_string(),
            })?;
        }
    }
    // Header even when there are no rows.
    if tracks.is_empty() {
        w.write_record(["track_id", "t_us", "u", "v", "event_count", "status"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracks_csv<R: Read>(input: R) -> Result<Vec<TrackRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}
