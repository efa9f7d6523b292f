use ejecta_ev::dvs::{emulate, inject_noise, DvsConfig};
use ejecta_ev::pipeline;
use ejecta_ev::render::SequenceRenderer;
use ejecta_ev::track::{track_stream, TrackParams, TrackStatus};
use ejecta_ev::EventStream;
use proptest::prelude::*;

#[test]
fn single_particle_gives_one_accurate_track() {
    let cfg = pipeline::single_particle_config();
    let mut r = SequenceRenderer::new(&cfg).unwrap();
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    while let Some((f, t)) = r.next_frame().unwrap() {
        frames.push(f);
        truth.push(t[0]);
    }
    let stream = emulate(&frames, &cfg.dvs).unwrap();
    let tracks = track_stream(&stream, &cfg.track, None);
    assert_eq!(tracks.len(), 1, "{tracks:?}");

    let period = 1e6 / cfg.frame_rate;
    let mut checked = 0;
    for d in &tracks[0].detections {
        let s = d.t as f64 / period;
        let k = s.floor() as usize;
        if k + 1 >= truth.len() || truth[k].visible == 0 || truth[k + 1].visible == 0 {
            continue;
        }
        let f = s - k as f64;
        let u = truth[k].u + f * (truth[k + 1].u - truth[k].u);
        let v = truth[k].v + f * (truth[k + 1].v - truth[k].v);
        let err = (d.u - u).hypot(d.v - v);
        assert!(err < 2.0, "detection at {} off by {err:.2} px", d.t);
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} detections compared");
}

#[test]
fn background_noise_yields_no_tracks() {
    let (w, h) = (640u32, 480u32);
    let t_end = 1_333_333;
    for seed in 0..20 {
        let cfg = DvsConfig {
            seed,
            hot_pixel_fraction: 0.0,
            ..DvsConfig::default()
        };
        let events = inject_noise(0, t_end, w, h, &cfg);
        assert!(!events.is_empty());
        let stream = EventStream::new(w as u16, h as u16, events).unwrap();
        let tracks = track_stream(&stream, &TrackParams::default(), None);
        assert!(tracks.is_empty(), "seed {seed}: {} tracks", tracks.len());
    }
}

#[test]
fn bundled_noise_with_hot_pixels_yields_no_tracks() {
    let cfg = pipeline::single_particle_config().dvs;
    let events = inject_noise(0, 1_333_333, 640, 480, &DvsConfig { hot_pixel_fraction: 1e-4, ..cfg });
    let stream = EventStream::new(640, 480, events).unwrap();
    assert!(track_stream(&stream, &TrackParams::default(), None).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn track_invariants_on_noisy_streams(seed in any::<u64>(), rate in 5.0f64..60.0) {
        let cfg = DvsConfig { seed, leak_rate_hz: rate, ..DvsConfig::default() };
        let events = inject_noise(0, 400_000, 64, 48, &cfg);
        let stream = EventStream::new(64, 48, events).unwrap();
        let params = TrackParams { min_cluster_size: 3, confirm_hits: 2, ..TrackParams::default() };
        let tracks = track_stream(&stream, &params, None);
        let mut seen = std::collections::HashSet::new();
        for t in &tracks {
            prop_assert!(t.detections.len() >= params.confirm_hits);
            prop_assert!(t.status != TrackStatus::Tentative);
            prop_assert!(t.detections.windows(2).all(|w| w[0].t < w[1].t));
            for d in &t.detections {
                prop_assert!(d.event_count >= params.min_cluster_size);
                prop_assert!(d.bbox.contains(d.u, d.v));
                prop_assert!(seen.insert((d.t, d.u.to_bits(), d.v.to_bits())), "detection reused");
            }
        }
    }
}
