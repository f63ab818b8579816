use std::f64::consts::PI;

use proptest::prelude::*;
use sceneflux_core::lcs::*;
use sceneflux_core::FlowField;

/// Per-frame displacement field of a linear saddle about the image centre.
fn saddle_flows(size: usize, kappa: f64, frames: usize) -> Vec<FlowField> {
    let c = (size as f64 - 1.0) / 2.0;
    vec![FlowField::from_fn(size, size, |x, y| (kappa * (x as f64 - c), -kappa * (y as f64 - c))); frames]
}

/// 2x2 cellular flow with a hyperbolic point at the centre; stream function
/// `ψ = a sin(πx/L) sin(πy/L)` on `[0, 2L]²`.
fn cellular_flows(size: usize, speed: f64, frames: usize) -> Vec<FlowField> {
    let l = (size as f64 - 1.0) / 2.0;
    let k = PI / l;
    vec![
        FlowField::from_fn(size, size, |x, y| {
            let (x, y) = (x as f64, y as f64);
            (-speed * (k * x).sin() * (k * y).cos(), speed * (k * x).cos() * (k * y).sin())
        });
        frames
    ]
}

#[test]
fn zero_flow_map_is_identity() {
    let flows = vec![FlowField::zeros(20, 12); 4];
    let m = build_flow_map(&flows, 0, 4, 3).unwrap();
    for j in 0..m.height() {
        for i in 0..m.width() {
            assert_eq!(m.position(i, j), m.initial(i, j));
        }
    }
}

#[test]
fn constant_flow_integrates_exactly() {
    let flows = vec![FlowField::constant(32, 32, 1.0, 0.0); 5];
    let m = build_flow_map(&flows, 0, 5, 4).unwrap();
    for j in 0..m.height() {
        for i in 0..m.width() {
            let (x0, y0) = m.initial(i, j);
            assert_eq!(m.position(i, j), (x0 + 5.0, y0));
        }
    }
}

#[test]
fn saddle_map_matches_exponential_solution() {
    // per-frame Euler: (1 + κ)^τ vs e^{κτ}; κτ = 1 with small κ stays within 2%
    let (size, kappa, tau) = (201, 0.02, 50);
    let flows = saddle_flows(size, kappa, tau);
    let m = build_flow_map(&flows, 0, tau, 2).unwrap();
    let c = (size as f64 - 1.0) / 2.0;
    let grow = (kappa * tau as f64).exp();
    for j in 0..m.height() {
        for i in 0..m.width() {
            let (x0, y0) = m.initial(i, j);
            let (dx, dy) = (x0 - c, y0 - c);
            if dx.abs() * grow > c - 1.0 {
                continue;
            }
            let (x, y) = m.position(i, j);
            let (ex, ey) = (dx * grow, dy / grow);
            assert!((x - c - ex).abs() <= 0.02 * ex.abs() + 1e-9, "x at ({x0}, {y0})");
            assert!((y - c - ey).abs() <= 0.02 * dy.abs() + 1e-9, "y at ({x0}, {y0})");
        }
    }
}

#[test]
fn uniform_translation_has_zero_ftle() {
    let m = FlowMap::from_fn(20, 20, 2.0, 0, 10, |x, y| (x + 3.7, y - 1.2)).unwrap();
    let f = ftle(&m).unwrap();
    assert!(f.values().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn saddle_ftle_is_its_rate() {
    let (size, kappa, tau) = (201, 0.02, 50);
    let m = build_flow_map(&saddle_flows(size, kappa, tau), 0, tau, 2).unwrap();
    let f = ftle(&m).unwrap();
    let c = m.width() / 2;
    for j in c - 10..=c + 10 {
        for i in c - 10..=c + 10 {
            assert!((f.value(i, j) - kappa).abs() <= 0.02 * kappa, "σ {} at ({i}, {j})", f.value(i, j));
        }
    }
}

#[test]
fn analytic_saddle_map_ftle() {
    let kappa = 0.1;
    let m = FlowMap::from_fn(30, 30, 2.0, 0, 10, |x, y| (x * (kappa * 10.0f64).exp(), y * (-kappa * 10.0f64).exp())).unwrap();
    let f = ftle(&m).unwrap();
    assert!(f.values().iter().all(|v| (v - kappa).abs() < 1e-12));
}

#[test]
fn rigid_rotation_has_zero_ftle() {
    let (c, angle) = (20.0, 0.7_f64);
    let (s, co) = angle.sin_cos();
    let m = FlowMap::from_fn(21, 21, 2.0, 0, 10, |x, y| {
        let (dx, dy) = (x - c, y - c);
        (c + co * dx - s * dy, c + s * dx + co * dy)
    })
    .unwrap();
    assert!(ftle(&m).unwrap().values().iter().all(|v| v.abs() < 1e-3));
}

#[test]
fn rotation_flows_have_zero_ftle() {
    // exact per-frame rotation displacement; bilinear sampling reproduces a linear field
    let (size, step) = (41, 0.05_f64);
    let c = (size as f64 - 1.0) / 2.0;
    let (s, co) = step.sin_cos();
    let rot = FlowField::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        (co * dx - s * dy - dx, s * dx + co * dy - dy)
    });
    let m = build_flow_map(&vec![rot; 10], 0, 10, 2).unwrap();
    let f = ftle(&m).unwrap();
    let mid = m.width() / 2;
    for j in mid - 4..=mid + 4 {
        for i in mid - 4..=mid + 4 {
            assert!(f.value(i, j).abs() < 1e-3);
        }
    }
}

#[test]
fn constant_field_is_one_region() {
    let f = FtleField::from_values(10, 8, 1.0, vec![0.3; 80]).unwrap();
    let s = segment(&f, 0.9).unwrap();
    assert_eq!(s.region_count(), 1);
    assert!(s.labels().iter().all(|&l| l == 0));
}

#[test]
fn cellular_flow_splits_into_quadrants() {
    // separatrices through the central hyperbolic point bound four cells
    let m = build_flow_map(&cellular_flows(65, 1.0, 100), 0, 100, 2).unwrap();
    let s = segment(&ftle(&m).unwrap(), 0.8).unwrap();
    assert_eq!(s.region_count(), 4);
    let half = s.width() / 2;
    let mut seen = Vec::new();
    for (qx, qy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let mut counts = [0usize; 4];
        for j in 0..half {
            for i in 0..half {
                counts[s.label(qx * (half + 1) + i, qy * (half + 1) + j)] += 1;
            }
        }
        let (best, n) = counts.iter().enumerate().max_by_key(|(_, n)| **n).map(|(l, n)| (l, *n)).unwrap();
        assert_eq!(n, half * half, "quadrant ({qx}, {qy}) counts {counts:?}");
        seen.push(best);
    }
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 4);
}

#[test]
fn shear_blocks_give_two_regions() {
    let (w, h) = (64, 64);
    let flow = FlowField::from_fn(w, h, |_, y| if y < 32 { (1.0, 0.0) } else { (-1.0, 0.0) });
    let m = build_flow_map(&vec![flow; 10], 0, 10, 2).unwrap();
    let s = segment(&ftle(&m).unwrap(), 0.9).unwrap();
    assert_eq!(s.region_count(), 2);
    let top = s.label_at(10.0, 5.0);
    let bottom = s.label_at(10.0, 60.0);
    assert_ne!(top, bottom);
    let cells = (s.width() * s.height()) as f64;
    let mut wrong = 0usize;
    for j in 0..s.height() {
        for i in 0..s.width() {
            let truth = if (j as f64) * s.spacing() < 32.0 { top } else { bottom };
            if s.label(i, j) != truth {
                wrong += 1;
            }
        }
    }
    assert!((wrong as f64) < 0.1 * cells, "{wrong} mislabelled cells");
}

#[test]
fn pgm_export_with_sidecar() {
    let f = FtleField::from_values(4, 3, 1.0, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ftle.pgm");
    f.save_pgm16(&path).unwrap();
    let raster = sceneflux_core::netpbm::read(&path).unwrap();
    assert_eq!((raster.width, raster.height, raster.maxval), (4, 3, 65535));
    assert_eq!(raster.samples[0], 0);
    assert_eq!(raster.samples[11], 65535);
    let side = std::fs::read_to_string(sidecar_path(&path)).unwrap();
    assert!(side.starts_with("min=0 max=1.1"));
}

fn smooth_map() -> impl Strategy<Value = FlowMap> {
    (prop::array::uniform4(-0.05f64..0.05), prop::array::uniform2(-0.002f64..0.002)).prop_map(|(a, q)| {
        FlowMap::from_fn(12, 10, 2.0, 0, 5, move |x, y| {
            (x + a[0] * x + a[1] * y + q[0] * x * y, y + a[2] * x + a[3] * y + q[1] * y * y)
        })
        .unwrap()
    })
}

proptest! {
    #[test]
    fn ftle_is_galilean_invariant(m in smooth_map(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let a = ftle(&m).unwrap();
        let b = ftle(&m.shifted(dx, dy)).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn area_preserving_maps_have_nonnegative_ftle(theta in -3.0f64..3.0, k in 0.0f64..0.5, shear in -1.0f64..1.0) {
        // rotation ∘ shear ∘ hyperbolic scaling has unit determinant
        let (s, c) = theta.sin_cos();
        let m = FlowMap::from_fn(8, 8, 1.0, 0, 4, |x, y| {
            let (x1, y1) = (x * k.exp(), y * (-k).exp());
            let x2 = x1 + shear * y1;
            (c * x2 - s * y1, s * x2 + c * y1)
        }).unwrap();
        prop_assert!(ftle(&m).unwrap().values().iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn labels_partition_grid(values in prop::collection::vec(0.0f64..1.0, 48), q in 0.05f64..0.95) {
        let f = FtleField::from_values(8, 6, 1.0, values).unwrap();
        let s = segment(&f, q).unwrap();
        prop_assert_eq!(s.labels().len(), 48);
        prop_assert!(s.labels().iter().all(|&l| l < s.region_count()));
        prop_assert!(s.region_sizes().iter().all(|&n| n > 0));
    }
}
