use proptest::prelude::*;
use sceneflux_core::flowfield::{compose, estimate_flow, warp, FlowParams};
use sceneflux_core::stats::median;
use sceneflux_core::synth::{noise_texture, rotate, shift_wrap, to_frame};
use sceneflux_core::{FlowField, Frame};

fn interior(w: usize, h: usize, margin: usize) -> impl Iterator<Item = (usize, usize)> {
    (margin..h - margin).flat_map(move |y| (margin..w - margin).map(move |x| (x, y)))
}

fn rms_diff(a: &Frame, b: &Frame, margin: usize) -> f64 {
    let pts: Vec<f64> = interior(a.width(), a.height(), margin).map(|(x, y)| (a.get(x, y) - b.get(x, y)).powi(2)).collect();
    (pts.iter().sum::<f64>() / pts.len() as f64).sqrt()
}

#[test]
fn identical_frames_give_zero_flow() {
    for (seed, smooth) in [(1, 0.0), (2, 1.0), (3, 2.5)] {
        let f = to_frame(&noise_texture(64, 48, smooth, seed));
        let est = estimate_flow(&f, &f, &FlowParams::default()).unwrap();
        assert!(est.flow.max_abs() < 1e-3);
        assert!(!est.degenerate);
    }
}

#[test]
fn integer_shift_is_recovered() {
    let tex = noise_texture(128, 128, 1.0, 5);
    let (prev, next) = (to_frame(&tex), to_frame(&shift_wrap(&tex, 3, -2)));
    let params = FlowParams::default();
    let flow = estimate_flow(&prev, &next, &params).unwrap().flow;
    let m = params.window / 2;
    let us: Vec<f64> = interior(128, 128, m).map(|(x, y)| flow.get(x, y).0).collect();
    let vs: Vec<f64> = interior(128, 128, m).map(|(x, y)| flow.get(x, y).1).collect();
    assert!((median(&us) - 3.0).abs() < 0.25, "u {}", median(&us));
    assert!((median(&vs) + 2.0).abs() < 0.25, "v {}", median(&vs));
}

#[test]
fn rotation_gives_angular_field() {
    let size = 128;
    let tex = noise_texture(size, size, 2.0, 9);
    let angle = 2.0_f64.to_radians();
    let (prev, next) = (to_frame(&tex), to_frame(&rotate(&tex, angle)));
    let flow = estimate_flow(&prev, &next, &FlowParams::default()).unwrap().flow;
    let c = (size as f64 - 1.0) / 2.0;
    let centre = flow.sample(c, c);
    assert!(centre.0.hypot(centre.1) < 0.1, "centre flow {centre:?}");
    // exact rigid-rotation displacement magnitude is 2 sin(θ/2) r
    let gain = 2.0 * (angle / 2.0).sin();
    for ring in [10.0, 20.0, 30.0, 40.0] {
        let mags: Vec<f64> = interior(size, size, 0)
            .filter(|&(x, y)| ((x as f64 - c).hypot(y as f64 - c) - ring).abs() < 1.0)
            .map(|(x, y)| {
                let (u, v) = flow.get(x, y);
                u.hypot(v)
            })
            .collect();
        let m = median(&mags);
        assert!((m - gain * ring).abs() <= 0.1 * gain * ring, "ring {ring}: {m} vs {}", gain * ring);
    }
}

#[test]
fn warp_undoes_shift() {
    let tex = noise_texture(96, 96, 1.0, 21);
    let (prev, next) = (to_frame(&tex), to_frame(&shift_wrap(&tex, 3, 0)));
    let params = FlowParams::default();
    let flow = estimate_flow(&prev, &next, &params).unwrap().flow;
    let warped = warp(&next, &flow).unwrap();
    let m = params.window / 2;
    assert!(rms_diff(&warped, &prev, m) <= 0.2 * rms_diff(&next, &prev, m));
}

#[test]
fn compose_examples() {
    let f = FlowField::from_fn(16, 16, |x, y| (x as f64 * 0.1, -(y as f64) * 0.05));
    assert_eq!(compose(&FlowField::zeros(16, 16), &f).unwrap(), f);
    let c = compose(&FlowField::constant(16, 16, 1.0, 0.0), &FlowField::constant(16, 16, 0.0, 2.0)).unwrap();
    assert_eq!(c, FlowField::constant(16, 16, 1.0, 2.0));
    let step = FlowField::constant(16, 16, 0.25, 0.0);
    let total = (1..8).fold(step.clone(), |acc, _| compose(&acc, &step).unwrap());
    assert!(total.u().iter().all(|u| (u - 2.0).abs() < 1e-12));
    assert!(compose(&f, &FlowField::zeros(8, 16)).is_err());
}

proptest! {
    #[test]
    fn compose_associative_on_constants(a in prop::array::uniform6(-3.0f64..3.0)) {
        let f = FlowField::constant(12, 12, a[0], a[1]);
        let g = FlowField::constant(12, 12, a[2], a[3]);
        let h = FlowField::constant(12, 12, a[4], a[5]);
        let l = compose(&compose(&f, &g).unwrap(), &h).unwrap();
        let r = compose(&f, &compose(&g, &h).unwrap()).unwrap();
        prop_assert!(l.u().iter().zip(r.u()).chain(l.v().iter().zip(r.v())).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn warp_exact_on_affine_images(a in -0.007f64..0.007, b in -0.007f64..0.007, du in -2.0f64..2.0, dv in -2.0f64..2.0) {
        let img = Frame::from_fn(32, 32, |x, y| 0.5 + a * x as f64 + b * y as f64).unwrap();
        let out = warp(&img, &FlowField::constant(32, 32, du, dv)).unwrap();
        for (x, y) in interior(32, 32, 3) {
            let expect = 0.5 + a * (x as f64 + du) + b * (y as f64 + dv);
            prop_assert!((out.get(x, y) - expect).abs() <= 1e-6);
        }
    }
}
