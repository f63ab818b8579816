use std::path::Path;

use proptest::prelude::*;
use sceneflux_core::egomotion::{EgoTrace, MotionEstimate, Vec3};
use sceneflux_core::netpbm::{encode_pgm, sidecar_path};
use sceneflux_core::particlegrid::{init_layers, Direction};
use sceneflux_core::scenestate::*;
use sceneflux_core::{FlowField, Frame, Grid};

fn write_depth(path: &Path, w: usize, h: usize, samples: &[u16], maxval: u16, sidecar: &str) {
    std::fs::write(path, encode_pgm(w, h, maxval, samples)).unwrap();
    std::fs::write(sidecar_path(path), sidecar).unwrap();
}

fn trace_of(lateral: &[f64]) -> EgoTrace {
    let mut t = EgoTrace::new();
    for (i, &x) in lateral.iter().enumerate() {
        t.push(i + 1, MotionEstimate { translation: Vec3::new(x, 0.3, 0.0), rotation: Vec3::zeros(), scale_known: true }).unwrap();
    }
    t
}

fn flat(w: usize, h: usize) -> Frame {
    Frame::from_fn(w, h, |_, _| 0.5).unwrap()
}

#[test]
fn load_depth_examples() {
    let dir = tempfile::tempdir().unwrap();
    let uniform = dir.path().join("uniform.pgm");
    write_depth(&uniform, 6, 4, &[30000; 24], 65535, "min=2 max=2\n");
    let d = load_depth(&uniform).unwrap();
    assert_eq!((d.width(), d.height()), (6, 4));
    assert!(d.grid().data().iter().all(|&v| v == 2.0));

    let ramp = dir.path().join("ramp.pgm");
    let samples: Vec<u16> = (0..8).flat_map(|_| (0..8u16).map(|x| x * 30)).collect();
    write_depth(&ramp, 8, 8, &samples, 210, "min=1 max=8\n");
    let d = load_depth(&ramp).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            assert!((d.get(x, y) - (1.0 + x as f64)).abs() < 1e-12);
        }
    }

    let zero_ok = dir.path().join("zero_ok.pgm");
    write_depth(&zero_ok, 2, 2, &[0, 0, 255, 255], 255, "min=0.5 max=4\n");
    let d = load_depth(&zero_ok).unwrap();
    assert_eq!(d.get(0, 0), 0.5);
    assert_eq!(d.get(1, 1), 4.0);

    let zero_bad = dir.path().join("zero_bad.pgm");
    write_depth(&zero_bad, 2, 2, &[0, 0, 255, 255], 255, "min=0 max=4\n");
    assert!(matches!(load_depth(&zero_bad), Err(SceneError::NonPositiveDepth { index: 0, .. })));

    let broken = dir.path().join("broken.pgm");
    write_depth(&broken, 2, 2, &[1, 2, 3, 4], 255, "min=1\n");
    assert!(matches!(load_depth(&broken), Err(SceneError::Parse(_))));
}

#[test]
fn depth_save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pgm");
    let d = DepthMap::new(Grid::from_fn(9, 7, |x, y| 1.0 + 0.25 * x as f64 + 0.5 * y as f64)).unwrap();
    d.save(&path).unwrap();
    let back = load_depth(&path).unwrap();
    let (lo, hi) = d.min_max();
    let quantum = (hi - lo) / 65535.0;
    assert!(d.grid().data().iter().zip(back.grid().data()).all(|(a, b)| (a - b).abs() <= quantum));
}

#[test]
fn freeze_with_constant_depth() {
    let mut stack = init_layers(&flat(32, 32), 4.0).unwrap();
    let shift = FlowField::constant(32, 32, 0.5, 0.25);
    stack.propagate(&shift, &shift, Direction::Forward).unwrap();
    stack.link(6).unwrap();
    stack.layer4_update().unwrap();
    let depth = DepthMap::constant(32, 32, 3.5).unwrap();
    let vol = freeze(&stack, &depth, 7).unwrap();
    assert_eq!(vol.frame(), 7);
    assert_eq!(vol.len(), stack.alive_count());
    for (fp, p) in vol.particles().iter().zip(stack.alive()) {
        assert_eq!((fp.x, fp.y), p.smoothed);
        assert_eq!(fp.depth, 3.5);
        assert_eq!(fp.id, p.id);
    }
    assert_eq!(freeze(&stack, &depth, 7).unwrap(), vol);
}

#[test]
fn freeze_two_planes() {
    let stack = init_layers(&flat(64, 32), 4.0).unwrap();
    let depth = DepthMap::new(Grid::from_fn(64, 32, |x, _| if x < 32 { 2.0 } else { 6.0 })).unwrap();
    let vol = freeze(&stack, &depth, 0).unwrap();
    for p in vol.particles() {
        let expect = if p.x < 31.0 { 2.0 } else if p.x >= 32.0 { 6.0 } else { 2.0 + 4.0 * (p.x - 31.0) };
        assert!((p.depth - expect).abs() < 1e-12, "x {} depth {}", p.x, p.depth);
    }
    let near: usize = vol.particles().iter().filter(|p| p.depth == 2.0).count();
    let far: usize = vol.particles().iter().filter(|p| p.depth == 6.0).count();
    assert_eq!(near + far, vol.len());
    assert_eq!(near, far);
}

#[test]
fn freeze_errors() {
    let mut stack = init_layers(&flat(16, 16), 4.0).unwrap();
    assert!(matches!(freeze(&stack, &DepthMap::constant(8, 8, 1.0).unwrap(), 0), Err(SceneError::DimensionMismatch { .. })));
    let out = FlowField::constant(16, 16, 40.0, 0.0);
    stack.propagate(&out, &out, Direction::Forward).unwrap();
    assert!(matches!(freeze(&stack, &DepthMap::constant(16, 16, 1.0).unwrap(), 1), Err(SceneError::EmptyStack)));
}

#[test]
fn frozen_volume_bytes_survive_later_steps() {
    let frame = flat(24, 24);
    let mut stack = init_layers(&frame, 4.0).unwrap();
    let depth = DepthMap::constant(24, 24, 2.0).unwrap();
    let vol = freeze(&stack, &depth, 0).unwrap();
    let mut before = Vec::new();
    vol.write_csv(&mut before).unwrap();
    let shift = FlowField::constant(24, 24, 1.0, 1.0);
    stack.propagate(&shift, &shift, Direction::Forward).unwrap();
    stack.link(6).unwrap();
    stack.layer4_update().unwrap();
    let mut after = Vec::new();
    vol.write_csv(&mut after).unwrap();
    assert_eq!(before, after);
    let text = String::from_utf8(before).unwrap();
    assert!(text.starts_with("# frame=0 plane_offset=0 normal=0,0,1\nid,x,y,depth,weight,label\n"));
}

#[test]
fn background_change_examples() {
    assert!(detect_background_change(&trace_of(&[0.0; 30]), DEFAULT_WINDOW, DEFAULT_THRESHOLD).is_none());

    let delta = 0.2;
    let jitter: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { delta } else { -delta }).collect();
    assert!(detect_background_change(&trace_of(&jitter), DEFAULT_WINDOW, DEFAULT_THRESHOLD).is_none());

    // sustained 0.06 per frame: the trailing sum first exceeds 0.5 after 9 entries
    let steady = trace_of(&[0.06; 20]);
    let ev = detect_background_change(&steady, DEFAULT_WINDOW, DEFAULT_THRESHOLD).unwrap();
    let first = (1..=20).find(|&k| k as f64 * 0.06 > 0.5).unwrap();
    assert_eq!(ev.frame, steady.entries()[first - 1].0);
    assert_eq!(ev.new_scene_frame, ev.frame);
    assert!((ev.direction - first as f64 * 0.06).abs() < 1e-12);

    // below threshold over a full window never fires
    assert!(detect_background_change(&trace_of(&[0.04; 50]), DEFAULT_WINDOW, DEFAULT_THRESHOLD).is_none());

    // accumulation restarts after an event
    let events = background_events(&trace_of(&[0.3; 8]), DEFAULT_WINDOW, DEFAULT_THRESHOLD);
    assert_eq!(events.iter().map(|e| e.frame).collect::<Vec<_>>(), vec![2, 4, 6, 8]);
}

#[test]
fn relocate_examples() {
    let depth = DepthMap::constant(8, 8, 2.0).unwrap();
    let mut world = SceneRegistry::new(&depth);
    assert_eq!(world.len(), 1);
    let right = BackgroundEvent { frame: 12, direction: 0.8, new_scene_frame: 12 };
    assert_eq!(relocate_scene(&right, &depth, &mut world).unwrap(), 1);
    assert_eq!(world.len(), 2);
    assert!(matches!(relocate_scene(&right, &depth, &mut world), Err(SceneError::DuplicateScene(12))));
    let still = BackgroundEvent { frame: 15, direction: 0.0, new_scene_frame: 15 };
    assert!(matches!(relocate_scene(&still, &depth, &mut world), Err(SceneError::InvalidEvent(_))));
    let left = BackgroundEvent { frame: 30, direction: -0.8, new_scene_frame: 30 };
    relocate_scene(&left, &depth, &mut world).unwrap();
    let offsets: Vec<f64> = world.scenes().iter().map(|s| s.offset).collect();
    assert_eq!(offsets, vec![0.0, 0.8, -0.8]);

    let mut manifest = Vec::new();
    world.write_manifest(&mut manifest).unwrap();
    let text = String::from_utf8(manifest).unwrap();
    assert_eq!(text.lines().nth(1), Some("scene 1 offset=0.8 frame=12 depth=8x8 range=2,2"));
}

proptest! {
    #[test]
    fn depth_samples_stay_in_range(values in prop::collection::vec(0.1f64..20.0, 36), pts in prop::collection::vec((-2.0f64..8.0, -2.0f64..8.0), 1..20)) {
        let d = DepthMap::new(Grid::new(6, 6, values).unwrap()).unwrap();
        let (lo, hi) = d.min_max();
        for (x, y) in pts {
            let s = d.sample(x, y);
            prop_assert!(s > 0.0 && s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }

    #[test]
    fn detection_flips_with_lateral_sign(lat in prop::collection::vec(-0.3f64..0.3, 1..40), thr in 0.1f64..1.0) {
        let neg: Vec<f64> = lat.iter().map(|x| -x).collect();
        let a = background_events(&trace_of(&lat), DEFAULT_WINDOW, thr);
        let b = background_events(&trace_of(&neg), DEFAULT_WINDOW, thr);
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.frame, q.frame);
            prop_assert!((p.direction + q.direction).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_volume_csv_roundtrip() {
    let mut stack = init_layers(&flat(24, 24), 4.0).unwrap();
    let shift = FlowField::constant(24, 24, 0.3, -0.2);
    stack.propagate(&shift, &shift, Direction::Forward).unwrap();
    stack.link(6).unwrap();
    stack.layer4_update().unwrap();
    let vol = freeze(&stack, &DepthMap::constant(24, 24, 2.25).unwrap(), 5).unwrap().relocated(1.5);
    let mut buf = Vec::new();
    vol.write_csv(&mut buf).unwrap();
    let back = FrozenVolume::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back, vol);

    assert!(FrozenVolume::parse_csv("id,x,y,depth,weight,label\n").is_err());
    assert!(FrozenVolume::parse_csv("# frame=1 plane_offset=0\nid,x,y,depth,weight,label\n0,1,2\n").is_err());
    assert!(FrozenVolume::parse_csv("# frame=1 plane_offset=0\nid,x,y,depth,weight,label\n").is_err());
    let kept = vol.filtered(|p| p.x < 12.0).unwrap();
    assert!(kept.len() < vol.len() && kept.particles().iter().all(|p| p.x < 12.0));
    assert!(vol.filtered(|_| false).is_none());
}
