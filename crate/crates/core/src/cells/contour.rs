//! Threshold contouring by marching squares.
//!
//! The lattice nodes are the grid cell centers, padded with one ring of
//! below-threshold nodes so every contour closes. Crossings are placed by
//! linear interpolation along lattice edges; saddle squares are resolved by
//! comparing the mean of the four corners with the threshold.

use crate::geo::{self, Point};
use crate::grid_io::ReflectivityGrid;

/// Interpolation parameters are kept off the lattice nodes so that no cell
/// center ever lies exactly on a contour.
const T_MARGIN: f64 = 1e-6;

/// Value used for padding and for no-data cells.
pub(crate) fn floor_value(threshold: f64) -> f64 {
    if threshold > 0.0 {
        0.0
    } else {
        threshold - 1.0
    }
}

struct Lattice<'a> {
    grid: &'a ReflectivityGrid,
    rows: usize,
    cols: usize,
    threshold: f64,
    floor: f64,
}

impl Lattice<'_> {
    fn value(&self, i: usize, j: usize) -> f64 {
        if i == 0 || j == 0 || i == self.rows - 1 || j == self.cols - 1 {
            self.floor
        } else {
            self.grid.value_or(i - 1, j - 1, self.floor)
        }
    }

    fn above(&self, i: usize, j: usize) -> bool {
        self.value(i, j) >= self.threshold
    }

    fn position(&self, i: usize, j: usize) -> Point {
        let cell = self.grid.cell_size_km();
        (
            (j as f64 - 0.5) * cell,
            (self.grid.rows() as f64 - i as f64 + 0.5) * cell,
        )
    }

    fn h_edges(&self) -> usize {
        self.rows * (self.cols - 1)
    }

    fn h_edge(&self, i: usize, j: usize) -> usize {
        i * (self.cols - 1) + j
    }

    fn v_edge(&self, i: usize, j: usize) -> usize {
        self.h_edges() + i * self.cols + j
    }

    fn edge_count(&self) -> usize {
        self.h_edges() + (self.rows - 1) * self.cols
    }

    fn edge_nodes(&self, edge: usize) -> ((usize, usize), (usize, usize)) {
        let nh = self.h_edges();
        if edge < nh {
            let (i, j) = (edge / (self.cols - 1), edge % (self.cols - 1));
            ((i, j), (i, j + 1))
        } else {
            let e = edge - nh;
            let (i, j) = (e / self.cols, e % self.cols);
            ((i, j), (i + 1, j))
        }
    }

    fn crossing(&self, edge: usize) -> Point {
        let ((i0, j0), (i1, j1)) = self.edge_nodes(edge);
        let (v0, v1) = (self.value(i0, j0), self.value(i1, j1));
        let t = ((self.threshold - v0) / (v1 - v0)).clamp(T_MARGIN, 1.0 - T_MARGIN);
        let (p0, p1) = (self.position(i0, j0), self.position(i1, j1));
        (p0.0 + t * (p1.0 - p0.0), p0.1 + t * (p1.1 - p0.1))
    }
}

/// All closed threshold contours of a grid as closed rings (first vertex
/// repeated last). Orientation is arbitrary.
pub(crate) fn threshold_rings(grid: &ReflectivityGrid, threshold: f64) -> Vec<Vec<Point>> {
    let lat = Lattice {
        grid,
        rows: grid.rows() + 2,
        cols: grid.cols() + 2,
        threshold,
        floor: floor_value(threshold),
    };

    let mut segments: Vec<[usize; 2]> = Vec::new();
    for i in 0..lat.rows - 1 {
        for j in 0..lat.cols - 1 {
            let a = lat.above(i, j);
            let b = lat.above(i, j + 1);
            let c = lat.above(i + 1, j + 1);
            let d = lat.above(i + 1, j);
            let top = lat.h_edge(i, j);
            let bottom = lat.h_edge(i + 1, j);
            let left = lat.v_edge(i, j);
            let right = lat.v_edge(i, j + 1);
            if a == c && b == d && a != b {
                let mean = (lat.value(i, j)
                    + lat.value(i, j + 1)
                    + lat.value(i + 1, j + 1)
                    + lat.value(i + 1, j))
                    / 4.0;
                if (mean >= threshold) == a {
                    // a and c joined through the center; b and d cut off.
                    segments.push([top, right]);
                    segments.push([bottom, left]);
                } else {
                    segments.push([top, left]);
                    segments.push([right, bottom]);
                }
                continue;
            }
            let mut crossed = [0usize; 2];
            let mut n = 0;
            for (cut, edge) in [(a != b, top), (b != c, right), (c != d, bottom), (d != a, left)] {
                if cut {
                    crossed[n] = edge;
                    n += 1;
                }
            }
            if n == 2 {
                segments.push(crossed);
            }
        }
    }

    const NONE: u32 = u32::MAX;
    let mut by_edge = vec![[NONE; 2]; lat.edge_count()];
    for (s, seg) in segments.iter().enumerate() {
        for &e in seg {
            let slot = &mut by_edge[e];
            if slot[0] == NONE {
                slot[0] = s as u32;
            } else {
                slot[1] = s as u32;
            }
        }
    }

    let mut used = vec![false; segments.len()];
    let mut rings = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let first_edge = segments[start][0];
        let mut ring = vec![lat.crossing(first_edge)];
        let mut edge = segments[start][1];
        let mut seg = start;
        while edge != first_edge {
            ring.push(lat.crossing(edge));
            let [s0, s1] = by_edge[edge];
            let next = if s0 as usize == seg { s1 } else { s0 };
            debug_assert!(next != NONE, "open contour at edge {edge}");
            seg = next as usize;
            used[seg] = true;
            let [e0, e1] = segments[seg];
            edge = if e0 == edge { e1 } else { e0 };
        }
        ring.push(ring[0]);
        rings.push(ring);
    }
    rings
}

/// Splits rings into outer boundaries (even nesting depth) and holes.
/// Returns the outer rings, oriented counter-clockwise.
pub(crate) fn outer_rings(rings: Vec<Vec<Point>>) -> Vec<Vec<Point>> {
    let boxes: Vec<_> = rings.iter().map(|r| geo::bounds(r)).collect();
    let mut out = Vec::new();
    for (k, ring) in rings.iter().enumerate() {
        let p = ring[0];
        let depth = rings
            .iter()
            .enumerate()
            .filter(|&(m, other)| {
                let (x0, y0, x1, y1) = boxes[m];
                m != k
                    && p.0 >= x0
                    && p.0 <= x1
                    && p.1 >= y0
                    && p.1 <= y1
                    && geo::point_in_ring(p, other)
            })
            .count();
        if depth % 2 == 0 {
            let mut r = ring.clone();
            if geo::signed_area(&r) < 0.0 {
                r.reverse();
            }
            out.push(r);
        }
    }
    out
}
