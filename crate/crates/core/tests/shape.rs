use std::collections::BTreeSet;
use std::f64::consts::TAU;

use proptest::prelude::*;
use sceneflux_core::shape::*;
use sceneflux_core::synth::moving_block_flow;
use sceneflux_core::{FlowField, Frame};

/// Direct-sum DFT with 1/N scaling.
fn direct_dft(z: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = z.len();
    (0..n)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, &(x, y)) in z.iter().enumerate() {
                let (s, c) = (-TAU * (f * k) as f64 / n as f64).sin_cos();
                re += x * c - y * s;
                im += x * s + y * c;
            }
            (re / n as f64, im / n as f64)
        })
        .collect()
}

fn circle(n: usize, r: f64, c: (f64, f64)) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let (s, co) = (TAU * k as f64 / n as f64).sin_cos();
            (c.0 + r * co, c.1 + r * s)
        })
        .collect()
}

/// Foreground pixels with a 4-neighbour outside the foreground.
fn perimeter(mask: &BinaryMask) -> BTreeSet<(usize, usize)> {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let mut out = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if on(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !on(x + dx, y + dy)) {
                out.insert((x as usize, y as usize));
            }
        }
    }
    out
}

fn shoelace(points: &[(f64, f64)]) -> f64 {
    (0..points.len())
        .map(|i| {
            let (a, b) = (points[i], points[(i + 1) % points.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
    let (dx, dy) = (a.0.abs_diff(b.0), a.1.abs_diff(b.1));
    dx <= 1 && dy <= 1 && (dx, dy) != (0, 0)
}

#[test]
fn motion_mask_examples() {
    assert_eq!(motion_mask(&FlowField::zeros(32, 32), 1.0).unwrap().count(), 0);
    assert_eq!(motion_mask(&FlowField::constant(32, 32, 2.5, -4.0), 1.0).unwrap().count(), 0);
    let flow = moving_block_flow(64, 64, 20, 30, 8, (3.0, 0.0));
    let mask = motion_mask(&flow, 1.0).unwrap();
    let truth = BinaryMask::from_fn(64, 64, |x, y| (20..28).contains(&x) && (30..38).contains(&y));
    assert!(mask.iou(&truth) >= 0.8, "IoU {}", mask.iou(&truth));
    assert!(motion_mask(&flow, 0.0).is_err());
}

#[test]
fn trace_filled_square() {
    let mask = BinaryMask::from_fn(10, 10, |x, y| (3..7).contains(&x) && (2..6).contains(&y));
    let b = trace_boundary(&mask).unwrap();
    assert_eq!(b.len(), 12);
    assert_eq!(b.points[0], (3, 2));
    assert_eq!(b.points.iter().copied().collect::<BTreeSet<_>>(), perimeter(&mask));
    // clockwise on screen is a positive shoelace sum with y pointing down
    assert!(shoelace(&b.to_f64()) > 0.0);
    assert_eq!(b.points[1], (4, 2));
}

#[test]
fn trace_errors_and_selection() {
    let empty = BinaryMask::from_fn(8, 8, |_, _| false);
    assert!(matches!(trace_boundary(&empty), Err(ShapeError::EmptyMask)));
    let dot = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (4, 4));
    assert!(matches!(trace_boundary(&dot), Err(ShapeError::TooSmallComponent(1))));

    let two = BinaryMask::from_fn(20, 20, |x, y| (1..4).contains(&x) && (1..4).contains(&y) || (8..16).contains(&x) && (9..14).contains(&y));
    let b = trace_boundary(&two).unwrap();
    assert!(b.points.iter().all(|&(x, y)| (8..16).contains(&x) && (9..14).contains(&y)));
    assert_eq!(b.points[0], (8, 9));
}

#[test]
fn trace_line_with_spur() {
    // one-pixel-wide segments are walked out and back
    let mask = BinaryMask::from_fn(12, 12, |x, y| y == 5 && (2..9).contains(&x) || x == 5 && (5..9).contains(&y));
    let b = trace_boundary(&mask).unwrap();
    let n = b.len();
    for i in 0..n {
        assert!(adjacent(b.points[i], b.points[(i + 1) % n]));
    }
    assert_eq!(b.points.iter().copied().collect::<BTreeSet<_>>().len(), mask.count());
}

#[test]
fn descriptors_of_constant_points() {
    let pts = vec![(2.5, -1.0); 9];
    let d = fourier_descriptors(&pts).unwrap();
    assert!((d.coefficients[0].re - 2.5).abs() < 1e-12 && (d.coefficients[0].im + 1.0).abs() < 1e-12);
    assert!(d.coefficients[1..].iter().all(|c| c.norm() < 1e-12));
    assert!(fourier_descriptors(&pts[..2]).is_err());
}

#[test]
fn circle_descriptors_match_direct_dft() {
    for n in [16, 37, 100] {
        let (r, c) = (6.0, (10.0, -3.0));
        let pts = circle(n, r, c);
        let d = fourier_descriptors(&pts).unwrap();
        let oracle = direct_dft(&pts);
        for (a, o) in d.coefficients.iter().zip(&oracle) {
            assert!((a.re - o.0).abs() < 1e-9 && (a.im - o.1).abs() < 1e-9);
        }
        assert!((d.coefficients[0].re - c.0).abs() < 1e-9 && (d.coefficients[0].im - c.1).abs() < 1e-9);
        assert!((d.coefficients[1].norm() - r).abs() < 1e-9);
        assert!(d.coefficients[2..].iter().all(|c| c.norm() < 1e-9));
    }
}

#[test]
fn translation_changes_only_mean() {
    let pts: Vec<(f64, f64)> = (0..23).map(|k| ((k as f64 * 0.7).sin() * 4.0, k as f64 * 0.3)).collect();
    let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + 1.5, y - 2.0)).collect();
    let (a, b) = (fourier_descriptors(&pts).unwrap(), fourier_descriptors(&moved).unwrap());
    assert!((b.coefficients[0].re - a.coefficients[0].re - 1.5).abs() < 1e-12);
    assert!((b.coefficients[0].im - a.coefficients[0].im + 2.0).abs() < 1e-12);
    assert!(a.coefficients[1..].iter().zip(&b.coefficients[1..]).all(|(p, q)| (p - q).norm() < 1e-9));
}

#[test]
fn reconstruction_examples() {
    let (n, r) = (64, 9.0);
    let pts = circle(n, r, (20.0, 20.0));
    let d = fourier_descriptors(&pts).unwrap();
    let two = reconstruct_boundary(&d, 2).unwrap();
    let rms = (two.iter().map(|&(x, y)| ((x - 20.0).hypot(y - 20.0) - r).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(rms < 0.01 * r);
    assert!(reconstruct_boundary(&d, 0).is_err());
    assert!(reconstruct_boundary(&d, n + 1).is_err());

    let side = 20;
    let mask = BinaryMask::from_fn(32, 32, |x, y| (5..5 + side).contains(&x) && (6..6 + side).contains(&y));
    let b = trace_boundary(&mask).unwrap().to_f64();
    let d = fourier_descriptors(&b).unwrap();
    let full = reconstruct_boundary(&d, b.len()).unwrap();
    let quarter = reconstruct_boundary(&d, b.len() / 4).unwrap();
    let rms = (full.iter().zip(&quarter).map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sum::<f64>() / b.len() as f64).sqrt();
    assert!(rms < 0.05 * side as f64, "rms {rms}");
}

#[test]
fn descriptor_csv_roundtrip() {
    let d = fourier_descriptors(&circle(12, 3.0, (1.0, 2.0))).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("n,re,im\n0,"));
    assert_eq!(ShapeDescriptor::parse_csv(&text).unwrap(), d);
    assert!(ShapeDescriptor::parse_csv("n,re,im\n1,0,0\n").is_err());
}

#[test]
fn gist_examples() {
    let flat = Frame::from_fn(32, 32, |_, _| 0.4).unwrap();
    let g = gist(&flat).unwrap();
    assert!(g.degenerate);
    assert!(g.values.iter().all(|&v| v == 0.0));

    let stripes = Frame::from_fn(32, 32, |x, _| if (x / 2) % 2 == 0 { 0.2 } else { 0.8 }).unwrap();
    let g = gist(&stripes).unwrap();
    assert_eq!(g.values.len(), GIST_LEN);
    assert!((g.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for cy in 0..GIST_CELLS {
        for cx in 0..GIST_CELLS {
            let cell: Vec<f64> = (0..GIST_ORIENTATIONS).map(|o| g.values[GistVector::index(cx, cy, o)]).collect();
            assert!(cell[0] > 0.0 && cell[1..].iter().all(|&v| v == 0.0), "cell ({cx}, {cy}) {cell:?}");
        }
    }

    let tex = Frame::from_fn(40, 36, |x, y| 0.3 + 0.2 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos())).unwrap();
    let brighter = Frame::from_fn(40, 36, |x, y| 0.45 + 0.2 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos())).unwrap();
    let (a, b) = (gist(&tex).unwrap(), gist(&brighter).unwrap());
    assert!(a.distance(&b).unwrap() < 1e-12);

    assert!(matches!(gist(&Frame::from_fn(12, 40, |_, _| 0.0).unwrap()), Err(ShapeError::FrameTooSmall(12, 40))));
}

#[test]
fn hit_examples() {
    let a = GistVector { values: vec![1.0 / 64.0; GIST_LEN], degenerate: false };
    assert!(!new_object_hit(&a, &a, 0.1).unwrap());
    let mut b = a.clone();
    b.values[3] += 1e-9;
    assert!(new_object_hit(&b, &a, 0.0).unwrap());
    let short = GistVector { values: vec![0.0; 8], degenerate: true };
    assert!(matches!(new_object_hit(&short, &a, 0.0), Err(ShapeError::DimensionMismatch { .. })));
}

#[test]
fn mask_pbm_output() {
    let m = BinaryMask::from_fn(10, 2, |x, _| x == 0);
    let bytes = m.to_pbm();
    assert!(bytes.starts_with(b"P4\n10 2\n"));
    assert_eq!(&bytes[bytes.len() - 4..], &[0x80, 0x00, 0x80, 0x00]);
}

fn blob() -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec((1usize..15, 1usize..15, 1usize..6, 1usize..6), 1..5).prop_map(|rects| {
        BinaryMask::from_fn(20, 20, |x, y| rects.iter().any(|&(rx, ry, w, h)| x >= rx && x < rx + w && y >= ry && y < ry + h))
    })
}

proptest! {
    #[test]
    fn traced_boundaries_are_closed_and_connected(mask in blob()) {
        let (labels, sizes) = mask.components();
        let best = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
        match trace_boundary(&mask) {
            Ok(b) => {
                let n = b.len();
                prop_assert!(n >= 3 || sizes[best] < 4);
                let border = perimeter(&mask);
                for i in 0..n {
                    prop_assert!(adjacent(b.points[i], b.points[(i + 1) % n]), "gap at {i}: {:?}", b.points);
                    let (x, y) = b.points[i];
                    prop_assert_eq!(labels[y * mask.width() + x], Some(best));
                    prop_assert!(border.contains(&b.points[i]));
                }
            }
            Err(ShapeError::TooSmallComponent(a)) => prop_assert!(a < 4),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn roundtrip_is_exact(pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..80)) {
        let d = fourier_descriptors(&pts).unwrap();
        let back = reconstruct_boundary(&d, pts.len()).unwrap();
        for (p, q) in pts.iter().zip(&back) {
            prop_assert!((p.0 - q.0).abs() <= 1e-9 && (p.1 - q.1).abs() <= 1e-9);
        }
    }

    #[test]
    fn rotation_scales_by_phase(pts in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 3..60), phi in -3.0f64..3.0) {
        let n = pts.len() as f64;
        let c = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let (s, co) = phi.sin_cos();
        let rotated: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| {
            let (dx, dy) = (x - c.0, y - c.1);
            (c.0 + co * dx - s * dy, c.1 + s * dx + co * dy)
        }).collect();
        let (a, b) = (fourier_descriptors(&pts).unwrap(), fourier_descriptors(&rotated).unwrap());
        let phase = sceneflux_core::shape::Complex64::from_polar(1.0, phi);
        for (p, q) in a.coefficients[1..].iter().zip(&b.coefficients[1..]) {
            prop_assert!((p * phase - q).norm() <= 1e-6);
        }
    }

    #[test]
    fn constant_flow_gives_empty_mask(u in -10.0f64..10.0, v in -10.0f64..10.0, t in 0.1f64..3.0) {
        prop_assert_eq!(motion_mask(&FlowField::constant(24, 20, u, v), t).unwrap().count(), 0);
    }
}
