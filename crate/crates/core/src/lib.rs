//! Event-camera simulation of asteroid ejecta.
//!
//! A scenario (camera, asteroid, sun, particles) is rendered to luminance
//! frames, converted to a DVS event stream with a per-pixel contrast model
//! and noise, stored in EVT1 or CSV, and finally tracked with an event-native
//! detector and a gated nearest-neighbour tracker.

pub mod config;
pub mod dvs;
pub mod evio;
pub mod frames;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod track;

pub use config::ScenarioConfig;
pub use dvs::{emulate, DvsConfig, Emulator, Event, Polarity};
pub use evio::EventStream;
pub use render::LuminanceFrame;
pub use track::{track_stream, Track, TrackParams};
