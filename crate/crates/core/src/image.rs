//! Scalar grids, grayscale frames and dense displacement fields.
//!
//! All sampling is bilinear with edge clamping. Coordinates are pixel
//! centres: pixel `(x, y)` sits at integer position `(x, y)`.

use thiserror::Error;

/// Smallest frame side accepted by [`Frame::new`].
pub const MIN_FRAME_SIDE: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("frame must be at least {min}x{min}, got {width}x{height}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("buffer holds {got} samples, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("intensity at index {index} is {value}, expected a finite value in [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("dimension mismatch: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
}

/// Row-major scalar field without range restrictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BufferSize { expected: width * height, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Value at integer coordinates, clamped to the nearest edge pixel.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Bilinear sample of a row-major buffer with edge clamping.
#[inline]
pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let xmax = (width - 1) as f64;
    let ymax = (height - 1) as f64;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, xmax) };
    let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, ymax) };
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let a = data[y0 * width + x0];
    let b = data[y0 * width + x1];
    let c = data[y1 * width + x0];
    let d = data[y1 * width + x1];
    (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
}

/// Grayscale frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    grid: Grid,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(ImageError::TooSmall { width, height, min: MIN_FRAME_SIDE });
        }
        let grid = Grid::new(width, height, data)?;
        if let Some((index, &value)) = grid
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(ImageError::IntensityOutOfRange { index, value });
        }
        Ok(Self { grid })
    }

    /// Builds a frame from a generator, clamping values into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        let grid = Grid::from_fn(width, height, |x, y| {
            let v = f(x, y);
            if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            }
        });
        Self::new(width, height, grid.data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.grid.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.grid.height
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.grid.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.grid.get(x, y)
    }

    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        self.grid.sample(x, y)
    }

    pub fn variance(&self) -> f64 {
        let n = self.grid.data.len() as f64;
        let mean = self.grid.data.iter().sum::<f64>() / n;
        self.grid.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }

    /// Quantizes to 8-bit samples for PGM output.
    pub fn to_u8(&self) -> Vec<u16> {
        self.grid.data.iter().map(|v| (v * 255.0).round() as u16).collect()
    }

    pub(crate) fn from_grid_unchecked(grid: Grid) -> Self {
        Self { grid }
    }
}

/// Dense per-pixel displacement, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self, ImageError> {
        let n = width * height;
        if u.len() != n {
            return Err(ImageError::BufferSize { expected: n, got: u.len() });
        }
        if v.len() != n {
            return Err(ImageError::BufferSize { expected: n, got: v.len() });
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        let n = width * height;
        Self { width, height, u: vec![u; n], v: vec![v; n] }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let n = width * height;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self { width, height, u, v }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: (f64, f64)) {
        let i = y * self.width + x;
        self.u[i] = value.0;
        self.v[i] = value.1;
    }

    /// Bilinear sample of both components with edge clamping.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        (
            bilinear(&self.u, self.width, self.height, x, y),
            bilinear(&self.v, self.width, self.height, x, y),
        )
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<(), ImageError> {
        if self.width != width || self.height != height {
            return Err(ImageError::DimensionMismatch {
                a_w: self.width,
                a_h: self.height,
                b_w: width,
                b_h: height,
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(self.v.iter()).fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|v| v.is_finite())
    }

    /// Component-wise mean vector.
    pub fn mean(&self) -> (f64, f64) {
        let n = self.u.len() as f64;
        (self.u.iter().sum::<f64>() / n, self.v.iter().sum::<f64>() / n)
    }

    /// Component-wise median vector.
    pub fn median(&self) -> (f64, f64) {
        (crate::stats::median(&self.u), crate::stats::median(&self.v))
    }
}
