//! Procedural luminance frames: a Lambertian asteroid, Gaussian particle
//! blobs and the spinning-dot validation scene.
//!
//! Luminance is linear (not gamma encoded) and always lies in [0, 1].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::scene::{
    angular_radius_px, project, CameraModel, CameraPose, Dynamics, ParticleState, SceneError, Sphere,
    Vec3, SUBSTEPS_PER_FRAME,
};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("frame buffer has {got} pixels, expected {width}x{height}")]
    BadBuffer { width: u32, height: u32, got: usize },
    #[error("pixel {index} has luminance {value}, outside [0, 1]")]
    BadLuminance { index: usize, value: f32 },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// A timestamped grid of linear luminance, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LuminanceFrame {
    timestamp_us: u64,
    width: u32,
    height: u32,
    pixels: Vec<f32>,
}

impl LuminanceFrame {
    pub fn new(timestamp_us: u64, width: u32, height: u32, pixels: Vec<f32>) -> Result<Self, RenderError> {
        if pixels.len() != width as usize * height as usize {
            return Err(RenderError::BadBuffer {
                width,
                height,
                got: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0 && **v <= 1.0))
        {
            return Err(RenderError::BadLuminance { index, value });
        }
        Ok(Self {
            timestamp_us,
            width,
            height,
            pixels,
        })
    }

    pub fn timestamp_us(&self) -> u64 {
        self.timestamp_us
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// Timestamp of frame `k` at `frame_rate` Hz, rounded to the microsecond.
pub fn frame_timestamp_us(k: usize, frame_rate: f64) -> u64 {
    (k as f64 * 1e6 / frame_rate).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shading {
    pub asteroid_albedo: f64,
    pub particle_albedo: f64,
    pub psf_sigma_px: f64,
    pub background: f64,
}

impl Default for Shading {
    fn default() -> Self {
        Self {
            asteroid_albedo: 0.044,
            particle_albedo: 0.05,
            psf_sigma_px: 0.8,
            background: 1e-4,
        }
    }
}

/// Radius, in units of sigma, beyond which a blob is not drawn.
pub const BLOB_SUPPORT_SIGMAS: f64 = 6.0;

/// Background plus Lambertian shading of the sphere wherever the pixel-centre
/// ray hits it.
pub fn shade_asteroid(
    camera: &CameraModel,
    pose: &CameraPose,
    body: &Sphere,
    sun: &Vec3,
    shading: &Shading,
) -> Vec<f32> {
    let w = camera.width() as usize;
    let mut out = vec![0f32; camera.pixel_count()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            let dir = pose.pixel_ray(camera, x as f64, y as f64);
            let mut lum = shading.background;
            if let Some(t) = body.intersect(&pose.position, &dir) {
                let normal = (pose.position + dir * t - body.center) / body.radius;
                lum += shading.asteroid_albedo * normal.dot(sun).max(0.0);
            }
            *px = lum.clamp(0.0, 1.0) as f32;
        }
    });
    out
}

/// Pixels whose centre ray hits the asteroid.
pub fn silhouette_mask(camera: &CameraModel, pose: &CameraPose, body: &Sphere) -> Vec<bool> {
    let w = camera.width() as usize;
    let mut out = vec![false; camera.pixel_count()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, m) in row.iter_mut().enumerate() {
            let dir = pose.pixel_ray(camera, x as f64, y as f64);
            *m = body.intersect(&pose.position, &dir).is_some();
        }
    });
    out
}

/// Whether the sphere blocks the line of sight from the camera to `point`.
pub fn occluded(point: &Vec3, pose: &CameraPose, body: &Sphere) -> bool {
    let d = point - pose.position;
    let dist = d.norm();
    if dist == 0.0 {
        return false;
    }
    body.intersect(&pose.position, &(d / dist))
        .is_some_and(|t| t < dist)
}

/// Adds the particle's Gaussian blob to `buf` without clipping. Returns
/// false when nothing was drawn (dead, behind the camera or occluded).
pub fn splat_particle(
    buf: &mut [f32],
    camera: &CameraModel,
    pose: &CameraPose,
    body: &Sphere,
    state: &ParticleState,
    sun: &Vec3,
    shading: &Shading,
) -> bool {
    if !state.alive || occluded(&state.position, pose, body) {
        return false;
    }
    let Some(p) = project(&state.position, camera, pose) else {
        return false;
    };
    let range = (state.position - pose.position).norm();
    let radius = angular_radius_px(state.diameter, range, camera).unwrap_or(0.0);
    let sigma = shading.psf_sigma_px.max(radius);
    let to_camera = (pose.position - state.position) / range;
    let amplitude = shading.particle_albedo * to_camera.dot(sun).max(0.0);
    add_gaussian(buf, camera.width(), camera.height(), p.u, p.v, sigma, amplitude)
}

/// Point-sampled isotropic Gaussian of peak `amplitude` at (u, v).
pub fn add_gaussian(buf: &mut [f32], width: u32, height: u32, u: f64, v: f64, sigma: f64, amplitude: f64) -> bool {
    if amplitude <= 0.0 {
        return false;
    }
    let reach = BLOB_SUPPORT_SIGMAS * sigma;
    let x0 = (u - reach).ceil().max(0.0);
    let x1 = (u + reach).floor().min(width as f64 - 1.0);
    let y0 = (v - reach).ceil().max(0.0);
    let y1 = (v + reach).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return false;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0 as u32..=y1 as u32 {
        let dy = y as f64 - v;
        let row = &mut buf[(y * width) as usize..((y + 1) * width) as usize];
        for x in x0 as u32..=x1 as u32 {
            let dx = x as f64 - u;
            let r2 = dx * dx + dy * dy;
            if r2 <= reach * reach {
                row[x as usize] += (amplitude * (-r2 * inv).exp()) as f32;
            }
        }
    }
    true
}

/// Projected particle position for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub frame: usize,
    pub particle_id: usize,
    pub u: f64,
    pub v: f64,
    pub visible: u8,
}

/// Renders a scenario frame by frame. The asteroid image is computed once
/// since camera and sun are fixed in the asteroid frame.
pub struct SequenceRenderer {
    camera: CameraModel,
    pose: CameraPose,
    body: Sphere,
    sun: Vec3,
    shading: Shading,
    dynamics: Dynamics,
    frame_rate: f64,
    sim_dt_s: f64,
    frame_count: usize,
    base: Vec<f32>,
    particles: Vec<ParticleState>,
    next_frame: usize,
}

impl SequenceRenderer {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, RenderError> {
        let camera = cfg.camera_model();
        let pose = cfg.camera_pose()?;
        let body = cfg.asteroid();
        let base = shade_asteroid(&camera, &pose, &body, &cfg.sun_direction, &cfg.shading);
        Ok(Self {
            camera,
            pose,
            body,
            sun: cfg.sun_direction,
            shading: cfg.shading.clone(),
            dynamics: cfg.dynamics(),
            frame_rate: cfg.frame_rate,
            sim_dt_s: cfg.sim_dt_s,
            frame_count: cfg.frame_count,
            base,
            particles: cfg.particles.iter().map(|p| p.state()).collect(),
            next_frame: 0,
        })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn body(&self) -> &Sphere {
        &self.body
    }

    pub fn particles(&self) -> &[ParticleState] {
        &self.particles
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    fn truth(&self, frame: usize) -> Vec<TruthRecord> {
        let (w, h) = (self.camera.width() as f64, self.camera.height() as f64);
        self.particles
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let proj = s.alive.then(|| project(&s.position, &self.camera, &self.pose)).flatten();
                let (u, v) = proj.map_or((f64::NAN, f64::NAN), |p| (p.u, p.v));
                let on_sensor = proj.is_some() && u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0;
                let visible = on_sensor && !occluded(&s.position, &self.pose, &self.body);
                TruthRecord {
                    frame,
                    particle_id: id,
                    u,
                    v,
                    visible: visible as u8,
                }
            })
            .collect()
    }

    /// Renders the next frame and its ground truth, then advances the
    /// particles by one frame interval.
    pub fn next_frame(&mut self) -> Result<Option<(LuminanceFrame, Vec<TruthRecord>)>, RenderError> {
        if self.next_frame >= self.frame_count {
            return Ok(None);
        }
        let k = self.next_frame;
        let mut buf = self.base.clone();
        for s in &self.particles {
            splat_particle(&mut buf, &self.camera, &self.pose, &self.body, s, &self.sun, &self.shading);
        }
        for v in &mut buf {
            *v = v.clamp(0.0, 1.0);
        }
        let truth = self.truth(k);
        let frame = LuminanceFrame::new(
            frame_timestamp_us(k, self.frame_rate),
            self.camera.width(),
            self.camera.height(),
            buf,
        )?;

        let (dynamics, dt) = (self.dynamics, self.sim_dt_s);
        self.particles = self
            .particles
            .par_iter()
            .map(|s| dynamics.advance(s, dt, SUBSTEPS_PER_FRAME))
            .collect::<Result<_, _>>()?;
        self.next_frame += 1;
        Ok(Some((frame, truth)))
    }
}

/// Renders the full sequence in memory. Use [`SequenceRenderer`] for large
/// sensors.
pub fn render_sequence(cfg: &ScenarioConfig) -> Result<Vec<LuminanceFrame>, RenderError> {
    let mut r = SequenceRenderer::new(cfg)?;
    let mut frames = Vec::with_capacity(cfg.frame_count);
    while let Some((f, _)) = r.next_frame()? {
        frames.push(f);
    }
    Ok(frames)
}

/// Geometry of the spinning-dot scene: a white disk on a dark background
/// with a black dot orbiting its centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinningDot {
    pub size: u32,
    pub disk_radius: f64,
    pub orbit_radius: f64,
    pub dot_radius: f64,
    pub period_s: f64,
}

impl SpinningDot {
    pub fn new(disk_radius: f64, period_s: f64) -> Self {
        let size = (2.5 * disk_radius).ceil() as u32;
        Self {
            size,
            disk_radius,
            orbit_radius: 0.55 * disk_radius,
            dot_radius: 0.2 * disk_radius,
            period_s,
        }
    }

    pub fn center(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    pub fn dot_angle(&self, t_s: f64) -> f64 {
        std::f64::consts::TAU * t_s / self.period_s
    }

    pub fn dot_center(&self, t_s: f64) -> (f64, f64) {
        let a = self.dot_angle(t_s);
        let c = self.center();
        (c + self.orbit_radius * a.cos(), c + self.orbit_radius * a.sin())
    }

    /// 4x4 supersampled coverage render at time `t_s`.
    pub fn render(&self, t_s: f64) -> Vec<f32> {
        const SS: usize = 4;
        let n = self.size as usize;
        let c = self.center();
        let (dx, dy) = self.dot_center(t_s);
        let (r_disk2, r_dot2) = (self.disk_radius * self.disk_radius, self.dot_radius * self.dot_radius);
        let mut out = vec![0f32; n * n];
        out.par_chunks_mut(n).enumerate().for_each(|(y, row)| {
            for (x, px) in row.iter_mut().enumerate() {
                let mut lit = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px_ = x as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64;
                        let py_ = y as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64;
                        let in_disk = (px_ - c).powi(2) + (py_ - c).powi(2) <= r_disk2;
                        let in_dot = (px_ - dx).powi(2) + (py_ - dy).powi(2) <= r_dot2;
                        if in_disk && !in_dot {
                            lit += 1;
                        }
                    }
                }
                *px = lit as f32 / (SS * SS) as f32;
            }
        });
        out
    }
}

/// Frames of the spinning-dot scene at `frame_rate` Hz. Frame k shows the
/// dot at angle 2π·k/(period_s·frame_rate).
pub fn spinning_dot_sequence(
    radius_px: f64,
    period_s: f64,
    frame_rate: f64,
    frame_count: usize,
) -> Vec<LuminanceFrame> {
    let scene = SpinningDot::new(radius_px, period_s);
    (0..frame_count)
        .map(|k| {
            let t = k as f64 / frame_rate;
            LuminanceFrame::new(frame_timestamp_us(k, frame_rate), scene.size, scene.size, scene.render(t))
                .expect("coverage values are in [0, 1]")
        })
        .collect()
}
