use std::collections::BTreeMap;

use ejecta_ev::dvs::{emulate, emulate_log, DvsConfig, Emulator, LogFrame, Polarity};
use ejecta_ev::pipeline;
use ejecta_ev::render::{render_sequence, LuminanceFrame, SpinningDot};
use ejecta_ev::{EventStream, ScenarioConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random log video whose first frame is all zeros.
fn log_video(rng: &mut ChaCha8Rng, w: u32, h: u32, frames: usize, dt: u64) -> Vec<LogFrame> {
    let n = (w * h) as usize;
    let mut out = vec![LogFrame {
        timestamp_us: 0,
        width: w,
        height: h,
        values: vec![0.0; n],
    }];
    for k in 1..frames {
        let values = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        out.push(LogFrame {
            timestamp_us: k as u64 * dt,
            width: w,
            height: h,
            values,
        });
    }
    out
}

fn per_pixel(stream: &EventStream) -> BTreeMap<(u16, u16), Vec<(u64, Polarity)>> {
    let mut m: BTreeMap<(u16, u16), Vec<(u64, Polarity)>> = BTreeMap::new();
    for e in stream.events() {
        m.entry((e.x, e.y)).or_default().push((e.t, e.p));
    }
    m
}

fn symmetric(theta: f64) -> DvsConfig {
    DvsConfig {
        theta_on: theta,
        theta_off: theta,
        ..DvsConfig::ideal()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn polarity_inversion(seed in any::<u64>(), theta in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = log_video(&mut rng, 6, 5, 5, 10_000);
        let inverted: Vec<LogFrame> = video
            .iter()
            .map(|f| LogFrame { values: f.values.iter().map(|v| -v).collect(), ..f.clone() })
            .collect();
        let cfg = symmetric(theta);
        let a = emulate_log(video, &cfg).unwrap();
        let b = emulate_log(inverted, &cfg).unwrap();
        let mut flipped: Vec<_> = a.events().iter().map(|e| (e.t, e.x, e.y, e.p.flipped())).collect();
        let mut other: Vec<_> = b.events().iter().map(|e| (e.t, e.x, e.y, e.p)).collect();
        flipped.sort();
        other.sort();
        prop_assert_eq!(flipped, other);
    }

    #[test]
    fn time_scaling(seed in any::<u64>(), k in 2u64..12, theta in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = log_video(&mut rng, 5, 4, 5, 33_333);
        let scaled: Vec<LogFrame> = video
            .iter()
            .map(|f| LogFrame { timestamp_us: f.timestamp_us * k, ..f.clone() })
            .collect();
        let cfg = symmetric(theta);
        let a = per_pixel(&emulate_log(video, &cfg).unwrap());
        let b = per_pixel(&emulate_log(scaled, &cfg).unwrap());
        prop_assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (px, ev) in &a {
            let ev2 = &b[px];
            prop_assert_eq!(ev.len(), ev2.len());
            for ((t, p), (t2, p2)) in ev.iter().zip(ev2) {
                prop_assert_eq!(p, p2);
                prop_assert!((*t2 as i64 - (k * t) as i64).unsigned_abs() <= k, "{} vs {}·{}", t2, k, t);
            }
        }
    }

    #[test]
    fn doubling_threshold_never_adds_events(seed in any::<u64>(), theta in 0.05f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = log_video(&mut rng, 6, 6, 6, 20_000);
        let a = per_pixel(&emulate_log(video.clone(), &symmetric(theta)).unwrap());
        let b = per_pixel(&emulate_log(video, &symmetric(2.0 * theta)).unwrap());
        for (px, ev) in &b {
            prop_assert!(ev.len() <= a.get(px).map_or(0, Vec::len));
        }
    }

    #[test]
    fn output_sorted_with_noise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = log_video(&mut rng, 16, 12, 4, 50_000);
        let cfg = DvsConfig {
            seed,
            leak_rate_hz: 20.0,
            shot_rate_hz: 20.0,
            hot_pixel_fraction: 0.05,
            ..DvsConfig::default()
        };
        let s = emulate_log(video, &cfg).unwrap();
        prop_assert!(s.events().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(EventStream::new(16, 12, s.events().to_vec()).is_ok());
    }

    #[test]
    fn baseline_tracks_signal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = log_video(&mut rng, 7, 3, 6, 1_000);
        let cfg = DvsConfig { theta_on: 0.15, theta_off: 0.25, ..DvsConfig::default().noiseless() };
        let mut it = video.into_iter();
        let mut emu = Emulator::from_log(it.next().unwrap(), &cfg).unwrap();
        for f in it {
            let values = f.values.clone();
            emu.push_log(f).unwrap();
            for (s, l) in emu.states().iter().zip(&values) {
                prop_assert!((l - s.l_mem).abs() < 0.25);
            }
        }
    }
}

#[test]
fn particle_free_scenario_is_silent() {
    let mut cfg = ScenarioConfig::bundled();
    cfg.particles.clear();
    cfg.camera.width = 400;
    cfg.camera.height = 300;
    cfg.frame_count = 6;
    let frames = render_sequence(&cfg).unwrap();
    assert!(frames.windows(2).all(|w| w[0].pixels() == w[1].pixels()));
    assert!(emulate(&frames, &cfg.dvs.clone().noiseless()).unwrap().is_empty());
}

#[test]
fn emulation_is_deterministic() {
    let frames = pipeline::spinning_dot_frames();
    let cfg = DvsConfig {
        seed: 9,
        ..DvsConfig::default()
    };
    let a = emulate(&frames, &cfg).unwrap();
    let b = emulate(&frames, &cfg).unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    assert_eq!(pool.install(|| emulate(&frames, &cfg).unwrap()), a);
}

#[test]
fn spinning_dot_events_stay_on_the_dot_path() {
    let frames = pipeline::spinning_dot_frames();
    let s = emulate(&frames, &DvsConfig::ideal()).unwrap();
    assert!(!s.is_empty());
    let scene = SpinningDot::new(pipeline::SPIN_RADIUS_PX, pipeline::SPIN_PERIOD_S);
    let c = scene.center();
    // A pixel can only change if its area meets the dot at some time.
    let (lo, hi) = (
        scene.orbit_radius - scene.dot_radius - 1.0,
        scene.orbit_radius + scene.dot_radius + 1.0,
    );
    for e in s.events() {
        let r = (e.x as f64 - c).hypot(e.y as f64 - c);
        assert!(r >= lo && r <= hi, "event at radius {r}");
    }
    let on = s.on_count() as f64;
    let off = (s.len() - s.on_count()) as f64;
    assert!((on - off).abs() / on.max(off) < 0.1, "on {on} off {off}");
}

#[test]
fn constant_video_is_silent_for_any_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (31, 17);
    let px: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
    let frames: Vec<_> = (0..5)
        .map(|k| LuminanceFrame::new(k * 40_000, w, h, px.clone()).unwrap())
        .collect();
    assert!(emulate(&frames, &DvsConfig::default().noiseless()).unwrap().is_empty());
}
