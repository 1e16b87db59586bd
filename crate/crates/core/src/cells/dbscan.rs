//! Area-weighted DBSCAN over storm object centroids.
//!
//! An object is a core point when its own area plus the areas of all objects
//! whose centroids lie within the radius reaches the area limit. Core points
//! within the radius of each other are connected; non-core objects within the
//! radius of a core point are outliers of the cluster of their nearest core.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::PointRole;
use crate::geo::Point;

/// Per-object clustering result. `cluster[k]` is the canonical cluster index
/// for core points and outliers, `None` for noise.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Assignment {
    pub roles: Vec<PointRole>,
    pub cluster: Vec<Option<usize>>,
    pub n_clusters: usize,
}

pub(crate) fn lex_cmp(a: Point, b: Point) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

struct Buckets {
    size: f64,
    map: HashMap<(i64, i64), Vec<usize>>,
}

impl Buckets {
    fn new(points: &[Point], radius: f64) -> Self {
        let size = if radius > 0.0 { radius } else { 1.0 };
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(size, *p)).or_default().push(i);
        }
        Self { size, map }
    }

    fn key(size: f64, p: Point) -> (i64, i64) {
        ((p.0 / size).floor() as i64, (p.1 / size).floor() as i64)
    }

    /// Indices of all other points within `radius` of point `i`, ascending.
    fn neighbors(&self, points: &[Point], i: usize, radius: f64) -> Vec<usize> {
        let (kx, ky) = Self::key(self.size, points[i]);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.map.get(&(kx + dx, ky + dy)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&j| j != i && dist2(points[i], points[j]) <= r2),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[inline]
pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub(crate) fn cluster(
    centroids: &[Point],
    areas: &[f64],
    area_limit: f64,
    radius: f64,
) -> Assignment {
    let n = centroids.len();
    let buckets = Buckets::new(centroids, radius);
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| buckets.neighbors(centroids, i, radius))
        .collect();

    // Summing in sorted order keeps the result independent of input order.
    let core: Vec<bool> = (0..n)
        .map(|i| {
            let mut parts: Vec<f64> = neighbors[i].iter().map(|&j| areas[j]).collect();
            parts.push(areas[i]);
            parts.sort_by(f64::total_cmp);
            parts.iter().sum::<f64>() >= area_limit
        })
        .collect();

    let mut parent: Vec<usize> = (0..n).collect();
    for i in (0..n).filter(|&i| core[i]) {
        for &j in neighbors[i].iter().filter(|&&j| core[j] && j > i) {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }

    let mut cluster = vec![None; n];
    let mut roles = vec![PointRole::Noise; n];
    let mut root_index: HashMap<usize, usize> = HashMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let root = find(&mut parent, i);
        let next = root_index.len();
        let c = *root_index.entry(root).or_insert(next);
        cluster[i] = Some(c);
        roles[i] = PointRole::Core;
    }

    for i in (0..n).filter(|&i| !core[i]) {
        let nearest = neighbors[i]
            .iter()
            .copied()
            .filter(|&j| core[j])
            .min_by(|&a, &b| {
                dist2(centroids[i], centroids[a])
                    .total_cmp(&dist2(centroids[i], centroids[b]))
                    .then(lex_cmp(centroids[a], centroids[b]))
            });
        if let Some(j) = nearest {
            cluster[i] = cluster[j];
            roles[i] = PointRole::Outlier;
        }
    }

    // Canonical order: by lexicographically smallest member centroid.
    let n_clusters = root_index.len();
    let mut min_point: Vec<Option<(Point, usize)>> = vec![None; n_clusters];
    for i in 0..n {
        if let Some(c) = cluster[i] {
            let cand = (centroids[i], i);
            let better = match min_point[c] {
                None => true,
                Some((p, _)) => lex_cmp(centroids[i], p) == Ordering::Less,
            };
            if better {
                min_point[c] = Some(cand);
            }
        }
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (min_point[a].unwrap().0, min_point[b].unwrap().0);
        lex_cmp(pa, pb)
    });
    let mut rank = vec![0; n_clusters];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    for c in cluster.iter_mut().flatten() {
        *c = rank[*c];
    }

    Assignment {
        roles,
        cluster,
        n_clusters,
    }
}
