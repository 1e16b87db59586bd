//! Storm objects (35 dBZ contours) and storm cells (clusters of objects).

mod contour;
mod dbscan;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::geo::{self, Point, Projection};
use crate::grid_io::{is_no_data, ReflectivityGrid};

pub const DEFAULT_THRESHOLD_DBZ: f64 = 35.0;
pub const DEFAULT_AREA_LIMIT_KM2: f64 = 20.0;
pub const DEFAULT_RADIUS_KM: f64 = 2.0;

/// Summary statistics of reflectivity over a set of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DbzStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl DbzStats {
    /// Population statistics; `None` for an empty sample.
    pub fn from_values(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            (values[n / 2 - 1] + values[n / 2]) / 2.0
        };
        Some(Self {
            max: values[n - 1],
            min: values[0],
            mean,
            median,
            std: var.sqrt(),
        })
    }

    /// Statistics over the non-sentinel cells whose centers fall inside any
    /// of the rings.
    pub fn over_rings(grid: &ReflectivityGrid, rings: &[Vec<Point>]) -> Option<Self> {
        let mut inside = vec![false; grid.rows() * grid.cols()];
        for ring in rings {
            for idx in cells_in_ring(grid, ring) {
                inside[idx] = true;
            }
        }
        let mut values: Vec<f64> = inside
            .iter()
            .enumerate()
            .filter(|&(_, &hit)| hit)
            .map(|(i, _)| grid.values()[i])
            .filter(|&v| !is_no_data(v))
            .map(f64::from)
            .collect();
        Self::from_values(&mut values)
    }
}

/// Flat indices of the cells whose centers lie strictly inside `ring`.
pub fn cells_in_ring(grid: &ReflectivityGrid, ring: &[Point]) -> Vec<usize> {
    let cell = grid.cell_size_km();
    let (x0, y0, x1, y1) = geo::bounds(ring);
    let col_lo = ((x0 / cell - 0.5).ceil().max(0.0)) as usize;
    let col_hi = ((x1 / cell - 0.5).floor()).min(grid.cols() as f64 - 1.0);
    let south_lo = ((y0 / cell - 0.5).ceil().max(0.0)) as usize;
    let south_hi = ((y1 / cell - 0.5).floor()).min(grid.rows() as f64 - 1.0);
    if col_hi < 0.0 || south_hi < 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for s in south_lo..=south_hi as usize {
        let row = grid.rows() - 1 - s;
        for col in col_lo..=col_hi as usize {
            if geo::point_in_ring(grid.cell_center(row, col), ring) {
                out.push(row * grid.cols() + col);
            }
        }
    }
    out
}

/// One closed threshold contour in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StormObject {
    pub id: u32,
    /// Closed counter-clockwise ring in grid km coordinates.
    pub polygon: Vec<Point>,
    pub area_km2: f64,
    pub centroid: Point,
    pub dbz_stats: DbzStats,
}

/// Extracts one storm object per outer threshold contour. Holes are dropped.
pub fn extract_storm_objects(grid: &ReflectivityGrid, threshold_dbz: f64) -> Vec<StormObject> {
    let rings = contour::outer_rings(contour::threshold_rings(grid, threshold_dbz));
    rings
        .into_iter()
        .enumerate()
        .map(|(k, polygon)| {
            let area_km2 = geo::signed_area(&polygon);
            let centroid = geo::centroid(&polygon);
            let dbz_stats =
                DbzStats::over_rings(grid, std::slice::from_ref(&polygon)).unwrap_or_default();
            StormObject {
                id: k as u32,
                polygon,
                area_km2,
                centroid,
                dbz_stats,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointRole {
    Core,
    Outlier,
    Noise,
}

impl PointRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PointRole::Core => "core",
            PointRole::Outlier => "outlier",
            PointRole::Noise => "noise",
        }
    }
}

impl FromStr for PointRole {
    type Err = CellsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "core" => Ok(PointRole::Core),
            "outlier" => Ok(PointRole::Outlier),
            "noise" => Ok(PointRole::Noise),
            other => Err(CellsError::Parse(format!("unknown role '{other}'"))),
        }
    }
}

/// A cluster of storm objects in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StormCell {
    pub cell_id: u32,
    pub timestamp: i64,
    /// Member object ids, ascending.
    pub members: Vec<u32>,
    pub point_roles: BTreeMap<u32, PointRole>,
    pub total_area_km2: f64,
    /// Area-weighted mean of member centroids.
    pub centroid: Point,
    /// Member polygons, in member order.
    pub polygons: Vec<Vec<Point>>,
    pub projection: Projection,
}

impl StormCell {
    pub fn contains(&self, p: Point) -> bool {
        self.polygons.iter().any(|ring| geo::point_in_ring(p, ring))
    }

    pub fn centroid_latlon(&self) -> (f64, f64) {
        self.projection.to_latlon(self.centroid.0, self.centroid.1)
    }
}

/// Cells plus the role of every input object (noise included).
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub cells: Vec<StormCell>,
    pub roles: BTreeMap<u32, PointRole>,
}

impl Clustering {
    /// The cell id of an object, `None` for noise.
    pub fn cell_of(&self, object_id: u32) -> Option<u32> {
        self.cells
            .iter()
            .find(|c| c.point_roles.contains_key(&object_id))
            .map(|c| c.cell_id)
    }
}

/// Clusters one frame's objects. Cell ids are canonical: ascending by the
/// smallest member centroid (x, then y).
pub fn cluster_storm_objects(
    objects: &[StormObject],
    area_limit_km2: f64,
    radius_km: f64,
    timestamp: i64,
    projection: Projection,
) -> Clustering {
    let centroids: Vec<Point> = objects.iter().map(|o| o.centroid).collect();
    let areas: Vec<f64> = objects.iter().map(|o| o.area_km2).collect();
    let assignment = dbscan::cluster(&centroids, &areas, area_limit_km2, radius_km);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); assignment.n_clusters];
    for (i, c) in assignment.cluster.iter().enumerate() {
        if let Some(c) = c {
            groups[*c].push(i);
        }
    }
    let cells = groups
        .into_iter()
        .enumerate()
        .map(|(cell_id, mut idx)| {
            idx.sort_by_key(|&i| objects[i].id);
            build_cell(
                cell_id as u32,
                timestamp,
                projection,
                idx.iter().map(|&i| (&objects[i], assignment.roles[i])),
            )
        })
        .collect();
    let roles = objects
        .iter()
        .zip(&assignment.roles)
        .map(|(o, r)| (o.id, *r))
        .collect();
    Clustering { cells, roles }
}

fn build_cell<'a>(
    cell_id: u32,
    timestamp: i64,
    projection: Projection,
    members: impl Iterator<Item = (&'a StormObject, PointRole)>,
) -> StormCell {
    let mut cell = StormCell {
        cell_id,
        timestamp,
        members: Vec::new(),
        point_roles: BTreeMap::new(),
        total_area_km2: 0.0,
        centroid: (0.0, 0.0),
        polygons: Vec::new(),
        projection,
    };
    let (mut wx, mut wy) = (0.0, 0.0);
    for (o, role) in members {
        cell.members.push(o.id);
        cell.point_roles.insert(o.id, role);
        cell.total_area_km2 += o.area_km2;
        wx += o.area_km2 * o.centroid.0;
        wy += o.area_km2 * o.centroid.1;
        cell.polygons.push(o.polygon.clone());
    }
    if cell.total_area_km2 > 0.0 {
        cell.centroid = (wx / cell.total_area_km2, wy / cell.total_area_km2);
    }
    cell
}

#[derive(Debug, Error)]
pub enum CellsError {
    #[error("object record parse error: {0}")]
    Parse(String),
}

/// Writes one line per object:
/// `cell_id object_id role area_km2 centroid_x centroid_y POLYGON((x y, ...))`.
/// Noise objects carry cell id `-1`.
pub fn format_object_records(objects: &[StormObject], clustering: &Clustering) -> String {
    let mut out = String::new();
    for o in objects {
        let role = clustering.roles.get(&o.id).copied().unwrap_or(PointRole::Noise);
        let cell = clustering.cell_of(o.id).map_or(-1, i64::from);
        let _ = write!(
            out,
            "{cell} {} {} {:.6} {:.6} {:.6} POLYGON((",
            o.id,
            role.as_str(),
            o.area_km2,
            o.centroid.0,
            o.centroid.1
        );
        for (k, (x, y)) in o.polygon.iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{x:.6} {y:.6}");
        }
        out.push_str("))\n");
    }
    out
}

/// One parsed object line.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub cell_id: Option<u32>,
    pub object: StormObject,
    pub role: PointRole,
}

pub fn parse_object_records(text: &str) -> Result<Vec<ObjectRecord>, CellsError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: &str| CellsError::Parse(format!("line {}: {m}", lineno + 1));
        let (head, poly) = line
            .split_once("POLYGON((")
            .ok_or_else(|| err("missing POLYGON"))?;
        let f: Vec<&str> = head.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err("expected 6 fields before POLYGON"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number '{s}'")));
        let cell: i64 = f[0].parse().map_err(|_| err("bad cell id"))?;
        let id: u32 = f[1].parse().map_err(|_| err("bad object id"))?;
        let role: PointRole = f[2].parse()?;
        let area_km2 = num(f[3])?;
        let centroid = (num(f[4])?, num(f[5])?);
        let body = poly.strip_suffix("))").ok_or_else(|| err("unterminated POLYGON"))?;
        let mut polygon = Vec::new();
        for pair in body.split(',') {
            let mut it = pair.split_whitespace();
            let (Some(x), Some(y), None) = (it.next(), it.next(), it.next()) else {
                return Err(err("bad vertex"));
            };
            polygon.push((num(x)?, num(y)?));
        }
        out.push(ObjectRecord {
            cell_id: u32::try_from(cell).ok(),
            object: StormObject {
                id,
                polygon,
                area_km2,
                centroid,
                dbz_stats: DbzStats::default(),
            },
            role,
        });
    }
    Ok(out)
}

/// Rebuilds cells from parsed records.
pub fn cells_from_records(
    records: &[ObjectRecord],
    timestamp: i64,
    projection: Projection,
) -> Vec<StormCell> {
    let mut groups: BTreeMap<u32, Vec<&ObjectRecord>> = BTreeMap::new();
    for r in records {
        if let Some(c) = r.cell_id {
            groups.entry(c).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .map(|(cell_id, mut members)| {
            members.sort_by_key(|r| r.object.id);
            build_cell(
                cell_id,
                timestamp,
                projection,
                members.into_iter().map(|r| (&r.object, r.role)),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests;
