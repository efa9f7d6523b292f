//! Scenario configuration files.
//!
//! The file is TOML. Keys are addressed with dotted paths (`camera.width`,
//! `dvs.theta_on`, ...) both in diagnostics and in command-line overrides.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::dvs::DvsConfig;
use crate::render::Shading;
use crate::scene::{CameraModel, CameraPose, Dynamics, ParticleState, SceneError, Sphere, Vec3, DEFAULT_MU};
use crate::track::TrackParams;

/// The bundled desk-scale ejection scenario.
pub const BUNDLED_SCENARIO: &str = include_str!("../configs/bennu_ejecta.cfg");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleInit {
    pub position: Vec3,
    pub velocity: Vec3,
    pub diameter: f64,
}

impl ParticleInit {
    pub fn state(&self) -> ParticleState {
        ParticleState::new(self.position, self.velocity, self.diameter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub position: Vec3,
    pub pointing: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub camera: CameraConfig,
    pub mu: f64,
    pub max_range_m: f64,
    pub asteroid_radius: f64,
    pub sun_direction: Vec3,
    pub frame_count: usize,
    pub frame_rate: f64,
    /// Simulated seconds elapsed between consecutive frames.
    pub sim_dt_s: f64,
    pub particles: Vec<ParticleInit>,
    pub shading: Shading,
    pub dvs: DvsConfig,
    pub track: TrackParams,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    camera: RawCamera,
    #[serde(default)]
    dynamics: RawDynamics,
    asteroid: RawAsteroid,
    sun: RawSun,
    frames: RawFrames,
    #[serde(default)]
    render: Shading,
    #[serde(default)]
    dvs: Option<toml::Table>,
    #[serde(default)]
    track: TrackParams,
    #[serde(default)]
    particles: Vec<RawParticle>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    width: u32,
    height: u32,
    hfov_deg: f64,
    position: [f64; 3],
    pointing: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawDynamics {
    mu: f64,
    max_range_m: f64,
}

impl Default for RawDynamics {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            max_range_m: 1e5,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAsteroid {
    radius_m: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSun {
    direction: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrames {
    count: i64,
    rate_hz: f64,
    sim_dt_s: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParticle {
    position: [f64; 3],
    velocity: [f64; 3],
    diameter: f64,
}

fn unit(v: [f64; 3], key: &str) -> Result<Vec3, ConfigError> {
    let v = Vec3::from(v);
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(ConfigError::invalid(key, "must be a nonzero finite vector"));
    }
    Ok(v / n)
}

fn finite3(v: [f64; 3], key: &str) -> Result<Vec3, ConfigError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(Vec3::from(v))
    } else {
        Err(ConfigError::invalid(key, "components must be finite"))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_table(load_table(path)?)
    }

    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let raw: RawConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let seed = raw.seed.unwrap_or(0);

        let c = &raw.camera;
        if c.width == 0 || c.width > u16::MAX as u32 {
            return Err(ConfigError::invalid("camera.width", format!("must be in 1..=65535, got {}", c.width)));
        }
        if c.height == 0 || c.height > u16::MAX as u32 {
            return Err(ConfigError::invalid("camera.height", format!("must be in 1..=65535, got {}", c.height)));
        }
        if !(c.hfov_deg > 0.0 && c.hfov_deg < 180.0) {
            return Err(ConfigError::invalid("camera.hfov_deg", format!("must be in (0, 180), got {}", c.hfov_deg)));
        }
        let camera = CameraConfig {
            width: c.width,
            height: c.height,
            hfov_deg: c.hfov_deg,
            position: finite3(c.position, "camera.position")?,
            pointing: unit(c.pointing, "camera.pointing")?,
        };

        if !(raw.dynamics.mu >= 0.0 && raw.dynamics.mu.is_finite()) {
            return Err(ConfigError::invalid("dynamics.mu", format!("must be finite and >= 0, got {}", raw.dynamics.mu)));
        }
        let radius = raw.asteroid.radius_m;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(ConfigError::invalid("asteroid.radius_m", format!("must be positive, got {radius}")));
        }
        if !(raw.dynamics.max_range_m > radius) {
            return Err(ConfigError::invalid("dynamics.max_range_m", "must exceed asteroid.radius_m"));
        }
        let sun_direction = unit(raw.sun.direction, "sun.direction")?;

        if raw.frames.count < 2 {
            return Err(ConfigError::invalid(
                "frames.count",
                format!("must be >= 2 (emulation needs a frame pair), got {}", raw.frames.count),
            ));
        }
        let rate = raw.frames.rate_hz;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(ConfigError::invalid("frames.rate_hz", format!("must be positive, got {rate}")));
        }
        let sim_dt_s = raw.frames.sim_dt_s.unwrap_or(1.0 / rate);
        if !(sim_dt_s > 0.0 && sim_dt_s.is_finite()) {
            return Err(ConfigError::invalid("frames.sim_dt_s", format!("must be positive, got {sim_dt_s}")));
        }

        let mut particles = Vec::with_capacity(raw.particles.len());
        for (i, p) in raw.particles.iter().enumerate() {
            if !(p.diameter > 0.0 && p.diameter < radius) {
                return Err(ConfigError::invalid(
                    format!("particles[{i}].diameter"),
                    format!("must be in (0, asteroid.radius_m), got {}", p.diameter),
                ));
            }
            let position = finite3(p.position, &format!("particles[{i}].position"))?;
            if position.norm() < radius {
                return Err(ConfigError::invalid(
                    format!("particles[{i}].position"),
                    "starts inside the asteroid",
                ));
            }
            particles.push(ParticleInit {
                position,
                velocity: finite3(p.velocity, &format!("particles[{i}].velocity"))?,
                diameter: p.diameter,
            });
        }

        let s = &raw.render;
        for (key, v) in [
            ("render.asteroid_albedo", s.asteroid_albedo),
            ("render.particle_albedo", s.particle_albedo),
            ("render.background", s.background),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::invalid(key, format!("must be in [0, 1], got {v}")));
            }
        }
        if !(s.psf_sigma_px > 0.0 && s.psf_sigma_px.is_finite()) {
            return Err(ConfigError::invalid("render.psf_sigma_px", format!("must be positive, got {}", s.psf_sigma_px)));
        }

        let dvs = dvs_from_section(raw.dvs, seed)?;
        raw.track
            .validate()
            .map_err(|(k, m)| ConfigError::invalid(k, m))?;

        Ok(Self {
            camera,
            mu: raw.dynamics.mu,
            max_range_m: raw.dynamics.max_range_m,
            asteroid_radius: radius,
            sun_direction,
            frame_count: raw.frames.count as usize,
            frame_rate: rate,
            sim_dt_s,
            particles,
            shading: raw.render,
            dvs,
            track: raw.track,
            seed,
        })
    }

    /// Replaces the scenario seed, including the one used for sensor noise.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dvs.seed = seed;
        self
    }

    pub fn camera_model(&self) -> CameraModel {
        CameraModel::from_degrees(self.camera.width, self.camera.height, self.camera.hfov_deg)
    }

    pub fn camera_pose(&self) -> Result<CameraPose, SceneError> {
        CameraPose::look(self.camera.position, self.camera.pointing)
    }

    pub fn asteroid(&self) -> Sphere {
        Sphere {
            center: Vec3::zeros(),
            radius: self.asteroid_radius,
        }
    }

    pub fn dynamics(&self) -> Dynamics {
        Dynamics {
            mu: self.mu,
            body_radius: self.asteroid_radius,
            max_range: self.max_range_m,
        }
    }

    /// Window matching the source frame cadence, in microseconds.
    pub fn frame_window_us(&self) -> u64 {
        (1e6 / self.frame_rate).round() as u64
    }
}

fn dvs_from_section(section: Option<toml::Table>, seed: u64) -> Result<DvsConfig, ConfigError> {
    let section = section.unwrap_or_default();
    let explicit_seed = section.contains_key("seed");
    let mut dvs: DvsConfig = section
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(format!("in [dvs]: {e}")))?;
    if !explicit_seed {
        dvs.seed = seed;
    }
    dvs.validate().map_err(|(k, m)| ConfigError::invalid(k, m))?;
    Ok(dvs)
}

/// Sensor settings from a (possibly partial) config table: only `seed` and
/// `[dvs]` are read.
pub fn dvs_from_table(table: &toml::Table) -> Result<DvsConfig, ConfigError> {
    let seed = match table.get("seed") {
        Some(v) => v
            .as_integer()
            .filter(|s| *s >= 0)
            .ok_or_else(|| ConfigError::invalid("seed", "must be a non-negative integer"))? as u64,
        None => 0,
    };
    let section = match table.get("dvs") {
        Some(toml::Value::Table(t)) => Some(t.clone()),
        Some(_) => return Err(ConfigError::invalid("dvs", "must be a table")),
        None => None,
    };
    dvs_from_section(section, seed)
}

/// Tracker settings from a (possibly partial) config table.
pub fn track_from_table(table: &toml::Table) -> Result<TrackParams, ConfigError> {
    let params: TrackParams = match table.get("track") {
        Some(toml::Value::Table(t)) => t
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(format!("in [track]: {e}")))?,
        Some(_) => return Err(ConfigError::invalid("track", "must be a table")),
        None => TrackParams::default(),
    };
    params.validate().map_err(|(k, m)| ConfigError::invalid(k, m))?;
    Ok(params)
}

pub fn load_table(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(format!("{}: {e}", path.display())))
}

/// Sets a dotted `section.key` path in `table`. Dashes in the key are read
/// as underscores, so `dvs.theta-on` addresses `dvs.theta_on`. The value is
/// parsed as a TOML literal, falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let key = key.replace('-', "_");
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::invalid(key.as_str(), "malformed key"));
    }
    let (last, sections) = parts.split_last().unwrap();
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::invalid(key.as_str(), format!("`{s}` is not a table")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}
