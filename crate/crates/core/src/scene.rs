//! Scene geometry: particle dynamics around the asteroid and the pinhole
//! camera that views them.
//!
//! All positions are expressed in the asteroid-centred, asteroid-fixed frame
//! in metres. The asteroid is a sphere centred on the origin.

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Default gravitational parameter (m³/s²), Bennu-like.
pub const DEFAULT_MU: f64 = 4.892;

/// Integration substeps per rendered frame.
pub const SUBSTEPS_PER_FRAME: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("gravity singularity: particle position is at the origin")]
    Singularity,
    #[error("range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("diameter must be positive, got {0}")]
    NonPositiveDiameter(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("{0} must be a nonzero finite vector")]
    DegenerateVector(&'static str),
}

/// Position, velocity and size of one ejected particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub diameter: f64,
    /// False once the particle has hit the surface or left the simulation volume.
    pub alive: bool,
}

impl ParticleState {
    pub fn new(position: Vec3, velocity: Vec3, diameter: f64) -> Self {
        Self {
            position,
            velocity,
            diameter,
            alive: true,
        }
    }
}

/// Point-mass gravity field of the asteroid plus the bounds that decide
/// whether a particle is still simulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub mu: f64,
    pub body_radius: f64,
    pub max_range: f64,
}

impl Dynamics {
    pub fn new(mu: f64, body_radius: f64) -> Self {
        Self {
            mu,
            body_radius,
            max_range: f64::INFINITY,
        }
    }

    #[inline]
    pub fn acceleration(&self, r: &Vec3) -> Vec3 {
        let r2 = r.norm_squared();
        let rn = r2.sqrt();
        r * (-self.mu / (rn * r2))
    }

    /// One fixed-step RK4 step of `r'' = -mu r / |r|^3`.
    pub fn propagate(&self, state: &ParticleState, dt: f64) -> Result<ParticleState, SceneError> {
        if !(dt > 0.0) {
            return Err(SceneError::NonPositiveStep(dt));
        }
        if state.position.norm_squared() == 0.0 {
            return Err(SceneError::Singularity);
        }
        if !state.alive {
            return Ok(*state);
        }
        let (r0, v0) = (state.position, state.velocity);
        let half = 0.5 * dt;

        let k1r = v0;
        let k1v = self.acceleration(&r0);
        let k2r = v0 + k1v * half;
        let k2v = self.acceleration(&(r0 + k1r * half));
        let k3r = v0 + k2v * half;
        let k3v = self.acceleration(&(r0 + k2r * half));
        let k4r = v0 + k3v * dt;
        let k4v = self.acceleration(&(r0 + k3r * dt));

        let sixth = dt / 6.0;
        let position = r0 + (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * sixth;
        let velocity = v0 + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * sixth;

        let range = position.norm();
        let alive = range >= self.body_radius && range <= self.max_range;
        Ok(ParticleState {
            position,
            velocity,
            diameter: state.diameter,
            alive,
        })
    }

    /// Advance by `dt` in `substeps` equal RK4 steps, stopping early if the
    /// particle dies.
    pub fn advance(
        &self,
        state: &ParticleState,
        dt: f64,
        substeps: usize,
    ) -> Result<ParticleState, SceneError> {
        let h = dt / substeps.max(1) as f64;
        let mut s = *state;
        for _ in 0..substeps.max(1) {
            if !s.alive {
                break;
            }
            s = self.propagate(&s, h)?;
        }
        Ok(s)
    }

    pub fn specific_energy(&self, state: &ParticleState) -> f64 {
        0.5 * state.velocity.norm_squared() - self.mu / state.position.norm()
    }
}

/// Pinhole intrinsics. The focal length is always derived from the width
/// and horizontal field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    width: u32,
    height: u32,
    hfov: f64,
    focal_px: f64,
    principal_point: (f64, f64),
}

impl CameraModel {
    pub fn new(width: u32, height: u32, hfov: f64) -> Self {
        let focal_px = (width as f64 / 2.0) / (hfov / 2.0).tan();
        Self {
            width,
            height,
            hfov,
            focal_px,
            principal_point: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
        }
    }

    pub fn from_degrees(width: u32, height: u32, hfov_deg: f64) -> Self {
        Self::new(width, height, hfov_deg.to_radians())
    }

    pub fn with_principal_point(mut self, cx: f64, cy: f64) -> Self {
        self.principal_point = (cx, cy);
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn hfov(&self) -> f64 {
        self.hfov
    }

    pub fn focal_px(&self) -> f64 {
        self.focal_px
    }

    pub fn principal_point(&self) -> (f64, f64) {
        self.principal_point
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Camera extrinsics as an orthonormal basis: `right` maps to +u, `down`
/// to +v and `forward` is the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub down: Vec3,
}

impl CameraPose {
    /// Looks along `pointing` with the asteroid +z axis as the up hint
    /// (+y when pointing is nearly parallel to z).
    pub fn look(position: Vec3, pointing: Vec3) -> Result<Self, SceneError> {
        let n = pointing.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(SceneError::DegenerateVector("camera pointing"));
        }
        let forward = pointing / n;
        let up = if forward.z.abs() > 0.999 {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Ok(Self {
            position,
            forward,
            right,
            down,
        })
    }

    /// World point to camera frame (x right, y down, z forward).
    #[inline]
    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        let d = point - self.position;
        Vec3::new(d.dot(&self.right), d.dot(&self.down), d.dot(&self.forward))
    }

    /// Unit world-frame ray through the pixel centre `(u, v)`.
    #[inline]
    pub fn pixel_ray(&self, camera: &CameraModel, u: f64, v: f64) -> Vec3 {
        let (cx, cy) = camera.principal_point();
        let f = camera.focal_px();
        (self.right * ((u - cx) / f) + self.down * ((v - cy) / f) + self.forward).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole projection. `None` means the point is behind the camera
/// (depth ≤ 0).
pub fn project(point: &Vec3, camera: &CameraModel, pose: &CameraPose) -> Option<ImagePoint> {
    project_camera_frame(&pose.to_camera(point), camera)
}

pub fn project_camera_frame(pc: &Vec3, camera: &CameraModel) -> Option<ImagePoint> {
    if pc.z <= 0.0 {
        return None;
    }
    let (cx, cy) = camera.principal_point();
    let f = camera.focal_px();
    Some(ImagePoint {
        u: cx + f * pc.x / pc.z,
        v: cy + f * pc.y / pc.z,
        depth: pc.z,
    })
}

/// Apparent radius in pixels of a sphere of `diameter` seen at `range`.
pub fn angular_radius_px(diameter: f64, range: f64, camera: &CameraModel) -> Result<f64, SceneError> {
    if !(range > 0.0) {
        return Err(SceneError::NonPositiveRange(range));
    }
    if !(diameter > 0.0) {
        return Err(SceneError::NonPositiveDiameter(diameter));
    }
    Ok(camera.focal_px() * (diameter / 2.0) / range)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    /// Distance along the unit ray `dir` from `origin` to the first
    /// intersection in front of the origin.
    #[inline]
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t_near = -b - sq;
        if t_near > 0.0 {
            return Some(t_near);
        }
        let t_far = -b + sq;
        (t_far > 0.0).then_some(t_far)
    }
}
