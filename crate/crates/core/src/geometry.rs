//! Point clouds, poses, and bird's-eye-view density rasterization.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance_sq(&self, other: &Point) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }
}

/// Points in the sensor frame: +x forward, +y left, meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_intensity(points, None)
    }

    pub fn with_intensity(points: Vec<Point>, intensity: Option<Vec<f64>>) -> Result<Self> {
        if let Some(i) = &intensity {
            if i.len() != points.len() {
                return Err(Error::Shape(format!(
                    "{} intensities for {} points",
                    i.len(),
                    points.len()
                )));
            }
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self { points, intensity })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points whose `keep` flag is set, preserving order.
    fn filtered(&self, keep: &[bool]) -> Self {
        let points = self
            .points
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
        let intensity = self.intensity.as_ref().map(|iv| {
            iv.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .collect()
        });
        Self { points, intensity }
    }
}

/// Raster geometry: rows span x, columns span y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub height: usize,
    pub width: usize,
    pub density_cap: u32,
}

impl GridSpec {
    /// 80 m forward by 80 m lateral at 200×200 (0.4 m cells).
    pub const PAPER: GridSpec = GridSpec {
        x_min: 0.0,
        x_max: 80.0,
        y_min: -40.0,
        y_max: 40.0,
        height: 200,
        width: 200,
        density_cap: 10,
    };

    /// 51.2 m by 51.2 m at 64×64 (0.8 m cells).
    pub const DESK: GridSpec = GridSpec {
        x_min: 0.0,
        x_max: 51.2,
        y_min: -25.6,
        y_max: 25.6,
        height: 64,
        width: 64,
        density_cap: 10,
    };

    pub fn preset(name: &str) -> Option<GridSpec> {
        match name {
            "paper" => Some(Self::PAPER),
            "desk" => Some(Self::DESK),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("grid", "bounds must be finite"));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::config("grid", "max bound must exceed min bound"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("grid", "height and width must be positive"));
        }
        if self.density_cap == 0 {
            return Err(Error::config("grid.density_cap", "must be positive"));
        }
        Ok(())
    }

    pub fn cell_x(&self) -> f64 {
        (self.x_max - self.x_min) / self.height as f64
    }

    pub fn cell_y(&self) -> f64 {
        (self.y_max - self.y_min) / self.width as f64
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max
    }

    /// Floor-indexed half-open cell of an in-range point.
    pub fn cell_of(&self, p: &Point) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let fi = ((p.x - self.x_min) * self.height as f64 / (self.x_max - self.x_min)).floor();
        let fj = ((p.y - self.y_min) * self.width as f64 / (self.y_max - self.y_min)).floor();
        // Rounding can land a point just below the upper bound on index H (or W).
        let i = (fi as usize).min(self.height - 1);
        let j = (fj as usize).min(self.width - 1);
        Some((i, j))
    }

    /// Metric center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.cell_x(),
            self.y_min + (j as f64 + 0.5) * self.cell_y(),
        )
    }
}

/// Planar pose in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in [-π, π).
    pub heading: f64,
    pub timestamp: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64, timestamp: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            timestamp,
        }
    }

    pub fn planar_distance(&self, other: &Pose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Maps a global-frame point into this pose's sensor frame.
    pub fn to_sensor(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (gx - self.x, gy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wraps an angle into [-π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Single-channel density raster with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct BevImage {
    values: Array2<f64>,
}

impl BevImage {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("BEV image".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Keeps points with x in [x_min, x_max) and y in [y_min, y_max), in order. z is not filtered.
pub fn crop_to_range(cloud: &PointCloud, grid: &GridSpec) -> PointCloud {
    let keep: Vec<bool> = cloud.points.iter().map(|p| grid.contains(p)).collect();
    cloud.filtered(&keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RorParams {
    pub radius: f64,
    pub min_neighbors: usize,
}

impl Default for RorParams {
    fn default() -> Self {
        Self {
            radius: 0.4,
            min_neighbors: 2,
        }
    }
}

impl RorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("ror.radius", "must be positive"));
        }
        if self.min_neighbors == 0 {
            return Err(Error::config("ror.min_neighbors", "must be at least 1"));
        }
        Ok(())
    }
}

/// Radius outlier removal: keeps points with at least `min_neighbors` other points
/// within 3D distance `radius` (inclusive). Order is preserved.
pub fn radius_outlier_removal(cloud: &PointCloud, params: RorParams) -> Result<PointCloud> {
    params.validate()?;
    let r = params.radius;
    let r2 = r * r;
    let key = |p: &Point| {
        (
            (p.x / r).floor() as i64,
            (p.y / r).floor() as i64,
            (p.z / r).floor() as i64,
        )
    };
    let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (idx, p) in cloud.points.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(idx);
    }
    let keep: Vec<bool> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(idx, p)| {
            let (cx, cy, cz) = key(p);
            let mut count = 0usize;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = buckets.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &other in bucket {
                            if other != idx && cloud.points[other].distance_sq(p) <= r2 {
                                count += 1;
                                if count >= params.min_neighbors {
                                    return true;
                                }
                            }
                        }
                    }
                }
            }
            false
        })
        .collect();
    Ok(cloud.filtered(&keep))
}

/// Per-cell point count clipped at `density_cap`, divided by `density_cap`.
/// Out-of-range points are ignored; z and intensity do not contribute.
pub fn rasterize_bev(cloud: &PointCloud, grid: &GridSpec) -> BevImage {
    let mut counts = Array2::<u32>::zeros((grid.height, grid.width));
    for p in &cloud.points {
        if let Some((i, j)) = grid.cell_of(p) {
            counts[[i, j]] += 1;
        }
    }
    let cap = grid.density_cap as f64;
    BevImage {
        values: counts.mapv(|c| (c as f64).min(cap) / cap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::new(pts.iter().map(|&(x, y, z)| Point::new(x, y, z)).collect()).unwrap()
    }

    #[test]
    fn crop_drops_points_beyond_forward_range() {
        let c = cloud(&[(1.0, 0.0, 0.0), (90.0, 0.0, 0.0)]);
        let out = crop_to_range(&c, &GridSpec::PAPER);
        assert_eq!(out.points(), &[Point::new(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn crop_of_empty_and_fully_inside() {
        assert!(crop_to_range(&PointCloud::empty(), &GridSpec::PAPER).is_empty());
        let c = cloud(&[(0.0, -40.0, 3.0), (79.9, 39.9, -2.0), (40.0, 0.0, 100.0)]);
        assert_eq!(crop_to_range(&c, &GridSpec::PAPER), c);
    }

    #[test]
    fn crop_is_half_open() {
        let c = cloud(&[(80.0, 0.0, 0.0), (0.0, 40.0, 0.0), (0.0, -40.0, 0.0)]);
        assert_eq!(crop_to_range(&c, &GridSpec::PAPER).len(), 1);
    }

    #[test]
    fn crop_keeps_intensity_aligned() {
        let c = PointCloud::with_intensity(
            vec![Point::new(1.0, 0.0, 0.0), Point::new(-1.0, 0.0, 0.0), Point::new(2.0, 0.0, 0.0)],
            Some(vec![0.1, 0.2, 0.3]),
        )
        .unwrap();
        let out = crop_to_range(&c, &GridSpec::PAPER);
        assert_eq!(out.intensity(), Some(&[0.1, 0.3][..]));
    }

    #[test]
    fn rejects_non_finite_points_and_bad_intensity() {
        assert!(PointCloud::new(vec![Point::new(f64::NAN, 0.0, 0.0)]).is_err());
        assert!(PointCloud::with_intensity(vec![Point::new(0.0, 0.0, 0.0)], Some(vec![])).is_err());
    }

    #[test]
    fn ror_isolated_point_removed() {
        let c = cloud(&[(3.0, 3.0, 3.0)]);
        let p = RorParams { radius: 1.0, min_neighbors: 1 };
        assert!(radius_outlier_removal(&c, p).unwrap().is_empty());
    }

    #[test]
    fn ror_keeps_coincident_cluster() {
        let mut pts = vec![(0.0, 0.0, 0.0); 5];
        pts.push((100.0, 0.0, 0.0));
        let c = cloud(&pts);
        let out = radius_outlier_removal(&c, RorParams { radius: 1.0, min_neighbors: 2 }).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.points().iter().all(|p| *p == Point::new(0.0, 0.0, 0.0)));
    }

    #[test]
    fn ror_radius_is_inclusive() {
        let c = cloud(&[(0.0, 0.0, 0.0), (0.5, 0.0, 0.0)]);
        let out = radius_outlier_removal(&c, RorParams { radius: 0.5, min_neighbors: 1 }).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn ror_empty_and_invalid_params() {
        assert!(radius_outlier_removal(&PointCloud::empty(), RorParams::default())
            .unwrap()
            .is_empty());
        assert!(radius_outlier_removal(&PointCloud::empty(), RorParams { radius: 0.0, min_neighbors: 1 }).is_err());
        assert!(radius_outlier_removal(&PointCloud::empty(), RorParams { radius: 1.0, min_neighbors: 0 }).is_err());
    }

    #[test]
    fn rasterize_empty_is_zero() {
        let img = rasterize_bev(&PointCloud::empty(), &GridSpec::PAPER);
        assert_eq!(img.dim(), (200, 200));
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_single_point_at_cell_center() {
        let g = GridSpec::PAPER;
        assert!((g.cell_x() - 0.4).abs() < 1e-12 && (g.cell_y() - 0.4).abs() < 1e-12);
        let (x, y) = g.cell_center(17, 123);
        let img = rasterize_bev(&cloud(&[(x, y, 5.0)]), &g);
        assert_eq!(img.values()[[17, 123]], 0.1);
        assert_eq!(img.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn rasterize_saturates_at_cap() {
        let g = GridSpec::PAPER;
        let (x, y) = g.cell_center(5, 5);
        let pts = vec![(x, y, 0.0); g.density_cap as usize + 3];
        let img = rasterize_bev(&cloud(&pts), &g);
        assert_eq!(img.values()[[5, 5]], 1.0);
    }

    #[test]
    fn boundary_points_use_floor_indexing() {
        let g = GridSpec::PAPER;
        let img = rasterize_bev(&cloud(&[(0.4, -40.0, 0.0), (0.0, -40.0, 0.0), (79.999999, 39.999999, 0.0)]), &g);
        assert_eq!(img.values()[[1, 0]], 0.1);
        assert_eq!(img.values()[[0, 0]], 0.1);
        assert_eq!(img.values()[[199, 199]], 0.1);
    }

    #[test]
    fn pose_heading_wraps() {
        assert!((Pose::new(0.0, 0.0, 3.0 * PI / 2.0, 0.0).heading + PI / 2.0).abs() < 1e-12);
        assert_eq!(Pose::new(0.0, 0.0, PI, 0.0).heading, -PI);
        let p = Pose::new(1.0, 1.0, PI / 2.0, 0.0);
        let (sx, sy) = p.to_sensor(1.0, 3.0);
        assert!((sx - 2.0).abs() < 1e-12 && sy.abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::PAPER.validate().is_ok());
        let mut g = GridSpec::DESK;
        g.x_max = g.x_min;
        assert!(g.validate().is_err());
        let mut g = GridSpec::DESK;
        g.width = 0;
        assert!(g.validate().is_err());
    }
}
