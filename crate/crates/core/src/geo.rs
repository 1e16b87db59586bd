//! Planar polygon helpers and the flat km grid georeference.

const EARTH_RADIUS_KM: f64 = 6371.0088;
const KM_PER_DEG_LAT: f64 = 111.32;

/// Flat local projection anchored at the grid's lower-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Projection {
    pub fn new(origin_lat: f64, origin_lon: f64) -> Self {
        Self {
            origin_lat,
            origin_lon,
        }
    }

    fn km_per_deg_lon(&self) -> f64 {
        KM_PER_DEG_LAT * self.origin_lat.to_radians().cos().max(1e-6)
    }

    /// Grid km coordinates to (lat, lon) degrees.
    pub fn to_latlon(&self, x_km: f64, y_km: f64) -> (f64, f64) {
        (
            self.origin_lat + y_km / KM_PER_DEG_LAT,
            self.origin_lon + x_km / self.km_per_deg_lon(),
        )
    }

    /// (lat, lon) degrees to grid km coordinates.
    pub fn to_km(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lon - self.origin_lon) * self.km_per_deg_lon(),
            (lat - self.origin_lat) * KM_PER_DEG_LAT,
        )
    }
}

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

pub type Point = (f64, f64);

/// Signed shoelace area of a closed ring (first vertex repeated last).
/// Counter-clockwise rings are positive.
pub fn signed_area(ring: &[Point]) -> f64 {
    ring.windows(2)
        .map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1)
        .sum::<f64>()
        / 2.0
}

/// Area centroid of a closed ring with nonzero area.
pub fn centroid(ring: &[Point]) -> Point {
    let a = signed_area(ring);
    let (mut cx, mut cy) = (0.0, 0.0);
    for w in ring.windows(2) {
        let cross = w[0].0 * w[1].1 - w[1].0 * w[0].1;
        cx += (w[0].0 + w[1].0) * cross;
        cy += (w[0].1 + w[1].1) * cross;
    }
    (cx / (6.0 * a), cy / (6.0 * a))
}

/// Even-odd ray casting test.
pub fn point_in_ring(p: Point, ring: &[Point]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let ((xi, yi), (xj, yj)) = (w[0], w[1]);
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
pub fn bounds(ring: &[Point]) -> (f64, f64, f64, f64) {
    ring.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}
