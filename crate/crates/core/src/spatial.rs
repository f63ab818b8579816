//! Uniform bucket grid over 2-D points for radius and nearest-neighbour queries.

#[derive(Debug, Clone)]
pub struct PointGrid {
    cell: f64,
    origin: (f64, f64),
    cols: usize,
    rows: usize,
    /// Point indices per bucket, row-major.
    buckets: Vec<Vec<usize>>,
    points: Vec<(f64, f64)>,
}

impl PointGrid {
    /// Indexes `points` (with their positions in the slice as ids) using square buckets of side `cell`.
    pub fn new(points: &[(f64, f64)], cell: f64) -> Self {
        assert!(cell > 0.0, "bucket size must be positive");
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for &(x, y) in points {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        if points.is_empty() {
            lo = (0.0, 0.0);
            hi = (0.0, 0.0);
        }
        let cols = ((hi.0 - lo.0) / cell).floor() as usize + 1;
        let rows = ((hi.1 - lo.1) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut grid = Self { cell, origin: lo, cols, rows, buckets: Vec::new(), points: points.to_vec() };
        for (i, &p) in points.iter().enumerate() {
            let (c, r) = grid.bucket_of(p);
            buckets[r * cols + c].push(i);
        }
        grid.buckets = buckets;
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn bucket_of(&self, (x, y): (f64, f64)) -> (usize, usize) {
        let c = ((x - self.origin.0) / self.cell).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = ((y - self.origin.1) / self.cell).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (c, r)
    }

    /// Signed bucket coordinates, unclamped.
    fn raw_bucket(&self, (x, y): (f64, f64)) -> (isize, isize) {
        (((x - self.origin.0) / self.cell).floor() as isize, ((y - self.origin.1) / self.cell).floor() as isize)
    }

    /// Calls `f(index, squared distance)` for every point within `radius` of `p`.
    pub fn for_each_within(&self, p: (f64, f64), radius: f64, mut f: impl FnMut(usize, f64)) {
        if self.points.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let (c0, r0) = self.raw_bucket((p.0 - radius, p.1 - radius));
        let (c1, r1) = self.raw_bucket((p.0 + radius, p.1 + radius));
        let (c0, r0) = (c0.max(0) as usize, r0.max(0) as usize);
        if c1 < 0 || r1 < 0 {
            return;
        }
        let c1 = (c1 as usize).min(self.cols - 1);
        let r1 = (r1 as usize).min(self.rows - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                for &i in &self.buckets[r * self.cols + c] {
                    let (x, y) = self.points[i];
                    let d2 = (x - p.0).powi(2) + (y - p.1).powi(2);
                    if d2 <= r2 {
                        f(i, d2);
                    }
                }
            }
        }
    }

    /// Nearest point to `p` as `(index, distance)`; ties go to the lower index.
    pub fn nearest(&self, p: (f64, f64)) -> Option<(usize, f64)> {
        self.nearest_filtered(p, |_| true)
    }

    /// Nearest point accepted by `keep`.
    pub fn nearest_filtered(&self, p: (f64, f64), keep: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let (pc, pr) = self.raw_bucket(p);
        let mut best: Option<(usize, f64)> = None;
        // Chebyshev bucket distance from the query to the occupied rectangle
        let gap_c = (-pc).max(pc - (self.cols as isize - 1)).max(0);
        let gap_r = (-pr).max(pr - (self.rows as isize - 1)).max(0);
        let first_ring = gap_c.max(gap_r);
        let max_ring = first_ring + self.cols.max(self.rows) as isize + 1;
        for ring in first_ring..=max_ring {
            // every point in ring k is at least (k - 1) * cell away
            if let Some((_, d2)) = best {
                let bound = (ring - 1).max(0) as f64 * self.cell;
                if bound * bound > d2 {
                    break;
                }
            }
            for r in (pr - ring).max(0)..=(pr + ring).min(self.rows as isize - 1) {
                let edge_row = (r - pr).abs() == ring;
                let cols: Box<dyn Iterator<Item = isize>> = if edge_row {
                    Box::new((pc - ring).max(0)..=(pc + ring).min(self.cols as isize - 1))
                } else {
                    Box::new([pc - ring, pc + ring].into_iter().filter(|&c| c >= 0 && c < self.cols as isize))
                };
                for c in cols {
                    for &i in &self.buckets[r as usize * self.cols + c as usize] {
                        if !keep(i) {
                            continue;
                        }
                        let (x, y) = self.points[i];
                        let d2 = (x - p.0).powi(2) + (y - p.1).powi(2);
                        if best.is_none_or(|(bi, bd)| d2 < bd || (d2 == bd && i < bi)) {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}
