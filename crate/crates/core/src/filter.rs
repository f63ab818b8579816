//! Separable Gaussian filtering and pyramid helpers on [`Grid`].

use rayon::prelude::*;

use crate::image::Grid;

/// Normalized 1-D Gaussian taps for `radius` on each side.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolves a row-major buffer with `kernel` along x then y, clamping at edges.
pub fn separable(data: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let w = width as isize;
    let h = height as isize;
    let mut tmp = vec![0.0; data.len()];
    tmp.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        let src = &data[y * width..(y + 1) * width];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let xi = (x as isize + k as isize - r).clamp(0, w - 1) as usize;
                acc += wk * src[xi];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let yi = (y as isize + k as isize - r).clamp(0, h - 1) as usize;
                acc += wk * tmp[yi * width + x];
            }
            *o = acc;
        }
    });
    out
}

pub fn blur(grid: &Grid, sigma: f64) -> Grid {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let k = gaussian_kernel(sigma, radius);
    let data = separable(grid.data(), grid.width(), grid.height(), &k);
    Grid::new(grid.width(), grid.height(), data).expect("same dims")
}

/// Gaussian pre-filter followed by decimation by two (pixel `(x, y)` maps to `(2x, 2y)`).
pub fn pyr_down(grid: &Grid) -> Grid {
    let b = blur(grid, 1.0);
    let w = grid.width().div_ceil(2);
    let h = grid.height().div_ceil(2);
    Grid::from_fn(w, h, |x, y| b.get(2 * x, 2 * y))
}

/// Central-difference gradients (one-sided at the border).
pub fn gradients(grid: &Grid) -> (Grid, Grid) {
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let gx = Grid::from_fn(grid.width(), grid.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let l = (x - 1).max(0);
        let r = (x + 1).min(w - 1);
        (grid.get_clamped(r, y) - grid.get_clamped(l, y)) / (r - l).max(1) as f64
    });
    let gy = Grid::from_fn(grid.width(), grid.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let t = (y - 1).max(0);
        let b = (y + 1).min(h - 1);
        (grid.get_clamped(x, b) - grid.get_clamped(x, t)) / (b - t).max(1) as f64
    });
    (gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants_and_ramps() {
        let c = Grid::filled(12, 9, 0.3);
        assert!(blur(&c, 1.5).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let ramp = Grid::from_fn(32, 8, |x, _| x as f64);
        let b = blur(&ramp, 1.0);
        // interior of a linear ramp is unchanged by a symmetric kernel
        for x in 5..27 {
            assert!((b.get(x, 4) - x as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn pyr_down_halves_dims() {
        let g = Grid::filled(17, 10, 1.0);
        let d = pyr_down(&g);
        assert_eq!((d.width(), d.height()), (9, 5));
    }
}
