//! Uniform 2D grids over the xy-plane: one over LiDAR points for box
//! queries, one over detection centers for radius queries.

use std::collections::HashMap;

use crate::geometry::{BoundingBox3D, BoxFrame, Point};

/// Counting-sorted grid of point indices, built once per sweep.
#[derive(Debug, Clone)]
pub struct PointGrid {
    cell: f64,
    inv_cell: f64,
    min_x: f64,
    min_y: f64,
    nx: usize,
    ny: usize,
    /// `starts[c]..starts[c + 1]` indexes `order` for cell `c`.
    starts: Vec<u32>,
    order: Vec<u32>,
}

const MAX_CELLS: usize = 1 << 20;

impl PointGrid {
    pub fn build(points: &[Point], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        if points.is_empty() {
            return Self {
                cell,
                inv_cell: 1.0 / cell,
                min_x: 0.0,
                min_y: 0.0,
                nx: 1,
                ny: 1,
                starts: vec![0, 0],
                order: Vec::new(),
            };
        }
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x as f64);
            min_y = min_y.min(p.y as f64);
            max_x = max_x.max(p.x as f64);
            max_y = max_y.max(p.y as f64);
        }
        let mut cell = cell;
        let (mut nx, mut ny);
        loop {
            nx = ((max_x - min_x) / cell).floor() as usize + 1;
            ny = ((max_y - min_y) / cell).floor() as usize + 1;
            if nx.saturating_mul(ny) <= MAX_CELLS {
                break;
            }
            cell *= 2.0;
        }
        let mut grid = Self {
            cell,
            inv_cell: 1.0 / cell,
            min_x,
            min_y,
            nx,
            ny,
            starts: vec![0; nx * ny + 1],
            order: vec![0; points.len()],
        };
        let cells: Vec<u32> = points
            .iter()
            .map(|p| grid.cell_of(p.x as f64, p.y as f64) as u32)
            .collect();
        for &c in &cells {
            grid.starts[c as usize + 1] += 1;
        }
        for c in 0..nx * ny {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in cells.iter().enumerate() {
            let slot = &mut fill[c as usize];
            grid.order[*slot as usize] = i as u32;
            *slot += 1;
        }
        grid
    }

    #[inline]
    fn clamp_ix(&self, x: f64) -> usize {
        (((x - self.min_x) * self.inv_cell).max(0.0) as usize).min(self.nx - 1)
    }

    #[inline]
    fn clamp_iy(&self, y: f64) -> usize {
        (((y - self.min_y) * self.inv_cell).max(0.0) as usize).min(self.ny - 1)
    }

    #[inline]
    fn cell_of(&self, x: f64, y: f64) -> usize {
        self.clamp_iy(y) * self.nx + self.clamp_ix(x)
    }

    /// Indices of the points inside `b`, ascending.
    pub fn points_in_box(&self, points: &[Point], b: &BoundingBox3D) -> Vec<u32> {
        let mut out = Vec::new();
        if self.order.is_empty() {
            return out;
        }
        let (x0, y0, x1, y1) = b.bev_aabb();
        let pad = crate::geometry::BOUNDARY_EPS;
        if x1 + pad < self.min_x
            || y1 + pad < self.min_y
            || x0 - pad > self.min_x + self.cell * self.nx as f64
            || y0 - pad > self.min_y + self.cell * self.ny as f64
        {
            return out;
        }
        let frame = BoxFrame::new(b);
        let (ix0, ix1) = (self.clamp_ix(x0 - pad), self.clamp_ix(x1 + pad));
        let (iy0, iy1) = (self.clamp_iy(y0 - pad), self.clamp_iy(y1 + pad));
        for iy in iy0..=iy1 {
            let row = iy * self.nx;
            let lo = self.starts[row + ix0] as usize;
            let hi = self.starts[row + ix1 + 1] as usize;
            for &i in &self.order[lo..hi] {
                if frame.contains(&points[i as usize]) {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Hash grid over detection centers with cell size equal to the query radius.
#[derive(Debug, Clone)]
pub struct CenterGrid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl CenterGrid {
    pub fn build(centers: &[[f64; 3]], radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in centers.iter().enumerate() {
            cells.entry(Self::key(c, radius)).or_default().push(i);
        }
        Self {
            cell: radius,
            cells,
        }
    }

    fn key(c: &[f64; 3], cell: f64) -> (i64, i64) {
        ((c[0] / cell).floor() as i64, (c[1] / cell).floor() as i64)
    }

    /// Indices `j != subject` whose 3D distance to `centers[subject]` is at
    /// most `radius`, ascending. `radius` must not exceed the build radius.
    pub fn within(&self, centers: &[[f64; 3]], subject: usize, radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell);
        let c = centers[subject];
        let (kx, ky) = Self::key(&c, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy)) {
                    for &j in bucket {
                        if j == subject {
                            continue;
                        }
                        let o = centers[j];
                        let d2 =
                            (c[0] - o[0]).powi(2) + (c[1] - o[1]).powi(2) + (c[2] - o[2]).powi(2);
                        if d2 <= r2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;

    #[test]
    fn grid_matches_linear_scan() {
        let mut pts = Vec::new();
        for i in 0..60 {
            for j in 0..60 {
                let x = -15.0 + i as f32 * 0.5;
                let y = -15.0 + j as f32 * 0.5;
                pts.push(Point::new(x, y, (i % 3) as f32 * 0.4 - 0.4, 0.1, 0.0));
            }
        }
        let grid = PointGrid::build(&pts, 2.0);
        for (k, yaw) in [0.0, 0.4, 1.3, -2.0].iter().enumerate() {
            let b = BoundingBox3D::new([k as f64 * 2.5 - 3.0, 1.0, 0.0], [4.5, 2.0, 1.5], *yaw)
                .unwrap();
            let fast: Vec<Point> = grid
                .points_in_box(&pts, &b)
                .into_iter()
                .map(|i| pts[i as usize])
                .collect();
            assert_eq!(fast, points_in_box(&pts, &b));
        }
        let outside = BoundingBox3D::new([100.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert!(grid.points_in_box(&pts, &outside).is_empty());
        assert!(PointGrid::build(&[], 1.0)
            .points_in_box(&[], &outside)
            .is_empty());
    }

    #[test]
    fn radius_is_closed() {
        let centers = [
            [0.0, 0.0, 0.0],
            [30.0, 0.0, 0.0],
            [50.0, 0.0, 0.0],
            [40.0, 0.0, 0.0],
        ];
        let g = CenterGrid::build(&centers, 40.0);
        assert_eq!(g.within(&centers, 0, 40.0), vec![1, 3]);
    }
}
