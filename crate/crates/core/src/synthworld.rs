//! Seeded 2D worlds and ray-cast scans standing in for paired LiDAR / radar logs.
//!
//! Landmarks are wall segments and round clutter (poles, trees). Both sensors
//! cast rays in the horizontal plane; the radar model has a narrower field of
//! view, fewer rays, more dropout, more position noise, and random clutter.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, Pose};
use crate::retrieval::Modality;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub bounds: Bounds,
    pub wall_count: (usize, usize),
    pub disk_count: (usize, usize),
    pub wall_length: (f64, f64),
    pub disk_radius: (f64, f64),
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.x_max > b.x_min && b.y_max > b.y_min) {
            return Err(Error::config("synth.world", "empty bounds"));
        }
        if self.wall_count.0 > self.wall_count.1 || self.disk_count.0 > self.disk_count.1 {
            return Err(Error::config("synth.world", "count range min exceeds max"));
        }
        if !(self.wall_length.0 > 0.0 && self.wall_length.0 <= self.wall_length.1) {
            return Err(Error::config("synth.world", "invalid wall length range"));
        }
        if !(self.disk_radius.0 > 0.0 && self.disk_radius.0 <= self.disk_radius.1) {
            return Err(Error::config("synth.world", "invalid disk radius range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub bounds: Bounds,
    pub walls: Vec<Segment>,
    pub disks: Vec<Disk>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn generate_world(seed: u64, spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = spec.bounds;
    let n_walls = rng.random_range(spec.wall_count.0..=spec.wall_count.1);
    let n_disks = rng.random_range(spec.disk_count.0..=spec.disk_count.1);
    let mut walls = Vec::with_capacity(n_walls);
    while walls.len() < n_walls {
        let a = (uniform(&mut rng, (b.x_min, b.x_max)), uniform(&mut rng, (b.y_min, b.y_max)));
        let len = uniform(&mut rng, spec.wall_length);
        let theta = rng.random_range(-PI..PI);
        let end = (a.0 + len * theta.cos(), a.1 + len * theta.sin());
        // Walls that would leave the world are redrawn.
        if b.contains(end.0, end.1) {
            walls.push(Segment { a, b: end });
        }
    }
    let disks = (0..n_disks)
        .map(|_| {
            let r = uniform(&mut rng, spec.disk_radius);
            Disk {
                center: (
                    uniform(&mut rng, (b.x_min + r, (b.x_max - r).max(b.x_min + r))),
                    uniform(&mut rng, (b.y_min + r, (b.y_max - r).max(b.y_min + r))),
                ),
                radius: r,
            }
        })
        .collect();
    Ok(World {
        seed,
        bounds: b,
        walls,
        disks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub modality: Modality,
    pub max_range: f64,
    pub fov_deg: f64,
    pub rays: usize,
    pub dropout: f64,
    pub noise_sigma: f64,
    /// Mean number of clutter points per scan.
    pub clutter_rate: f64,
}

impl ScanSpec {
    pub fn lidar() -> Self {
        Self {
            modality: Modality::Lidar,
            max_range: 50.0,
            fov_deg: 180.0,
            rays: 360,
            dropout: 0.02,
            noise_sigma: 0.02,
            clutter_rate: 0.0,
        }
    }

    pub fn radar() -> Self {
        Self {
            modality: Modality::Radar,
            max_range: 50.0,
            fov_deg: 120.0,
            rays: 60,
            dropout: 0.4,
            noise_sigma: 0.35,
            clutter_rate: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0 && self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::config("synth.scan", "range and field of view must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::config("synth.scan.dropout", "must be a probability"));
        }
        if !(self.noise_sigma >= 0.0 && self.clutter_rate >= 0.0) {
            return Err(Error::config("synth.scan", "noise and clutter must be non-negative"));
        }
        Ok(())
    }

    /// Sensor-frame bearing of ray `k`: evenly spaced bin centers across the field of view.
    pub fn ray_angle(&self, k: usize) -> f64 {
        let fov = self.fov_deg.to_radians();
        -fov / 2.0 + (k as f64 + 0.5) * fov / self.rays as f64
    }
}

/// Distance along a unit ray to a segment, if hit.
pub fn ray_segment(origin: (f64, f64), dir: (f64, f64), seg: &Segment) -> Option<f64> {
    let e = (seg.b.0 - seg.a.0, seg.b.1 - seg.a.1);
    let denom = dir.0 * e.1 - dir.1 * e.0;
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = (seg.a.0 - origin.0, seg.a.1 - origin.1);
    let t = (w.0 * e.1 - w.1 * e.0) / denom;
    let u = (w.0 * dir.1 - w.1 * dir.0) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Distance along a unit ray to the first crossing of a circle, if any.
pub fn ray_disk(origin: (f64, f64), dir: (f64, f64), disk: &Disk) -> Option<f64> {
    let f = (origin.0 - disk.center.0, origin.1 - disk.center.1);
    let b = f.0 * dir.0 + f.1 * dir.1;
    let c = f.0 * f.0 + f.1 * f.1 - disk.radius * disk.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t >= 0.0)
}

/// Ray-casts `world` from `pose`, then applies dropout, position noise, and clutter.
pub fn simulate_scan(world: &World, pose: &Pose, spec: &ScanSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = (pose.x, pose.y);
    let reach = spec.max_range;
    let near_walls: Vec<&Segment> = world
        .walls
        .iter()
        .filter(|s| point_segment_distance(origin, s) <= reach)
        .collect();
    let near_disks: Vec<&Disk> = world
        .disks
        .iter()
        .filter(|d| ((d.center.0 - origin.0).powi(2) + (d.center.1 - origin.1).powi(2)).sqrt() - d.radius <= reach)
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    for k in 0..spec.rays {
        let bearing = spec.ray_angle(k);
        let global = pose.heading + bearing;
        let dir = (global.cos(), global.sin());
        let hit = near_walls
            .iter()
            .filter_map(|s| ray_segment(origin, dir, s))
            .chain(near_disks.iter().filter_map(|d| ray_disk(origin, dir, d)))
            .filter(|&t| t <= reach)
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))));
        // Draw every random number unconditionally so realizations stay aligned across seeds.
        let drop = rng.random::<f64>() < spec.dropout;
        let (nx, ny) = (noise.sample(&mut rng), noise.sample(&mut rng));
        if let (Some(t), false) = (hit, drop) {
            points.push(Point::new(t * bearing.cos() + nx, t * bearing.sin() + ny, 0.0));
        }
    }
    if spec.clutter_rate > 0.0 {
        let count = Poisson::new(spec.clutter_rate).expect("positive rate").sample(&mut rng) as usize;
        let half = spec.fov_deg.to_radians() / 2.0;
        for _ in 0..count {
            let a = rng.random_range(-half..=half);
            let r = spec.max_range * rng.random::<f64>().sqrt();
            points.push(Point::new(r * a.cos(), r * a.sin(), 0.0));
        }
    }
    PointCloud::new(points)
}

fn point_segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let e = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = e.0 * e.0 + e.1 * e.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * e.0 + (p.1 - s.a.1) * e.1) / len2).clamp(0.0, 1.0)
    };
    let q = (s.a.0 + t * e.0, s.a.1 + t * e.1);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Which split a synthetic frame belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Database,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub places: usize,
    pub place_spacing: f64,
    pub train_per_place: usize,
    pub database_per_place: usize,
    pub query_per_place: usize,
    /// Frames sit uniformly in a disk of this radius around their place.
    pub position_jitter: f64,
    pub heading_jitter_deg: f64,
    /// Landmarks per square meter.
    pub wall_density: f64,
    pub disk_density: f64,
    pub wall_length: (f64, f64),
    pub disk_radius: (f64, f64),
    pub lidar: ScanSpec,
    pub radar: ScanSpec,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            places: 50,
            place_spacing: 70.0,
            train_per_place: 4,
            database_per_place: 6,
            query_per_place: 2,
            position_jitter: 4.0,
            heading_jitter_deg: 10.0,
            wall_density: 1.0 / 600.0,
            disk_density: 1.0 / 300.0,
            wall_length: (4.0, 20.0),
            disk_radius: (0.3, 1.5),
            lidar: ScanSpec::lidar(),
            radar: ScanSpec::radar(),
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.places == 0 {
            return Err(Error::config("synth.places", "must be positive"));
        }
        if !(self.place_spacing > 2.0 * self.position_jitter) {
            return Err(Error::config("synth.place_spacing", "must exceed twice the position jitter"));
        }
        if self.wall_density < 0.0 || self.disk_density < 0.0 {
            return Err(Error::config("synth", "landmark densities must be non-negative"));
        }
        self.lidar.validate()?;
        self.radar.validate()?;
        let (l, r) = (&self.lidar, &self.radar);
        if !(r.fov_deg < l.fov_deg && r.rays < l.rays && r.dropout > l.dropout && r.noise_sigma > l.noise_sigma) {
            return Err(Error::config(
                "synth.radar",
                "radar must have narrower FOV, fewer rays, higher dropout and noise than LiDAR",
            ));
        }
        Ok(())
    }

    fn grid_dims(&self) -> (usize, usize) {
        let cols = (self.places as f64).sqrt().ceil() as usize;
        (cols, self.places.div_ceil(cols))
    }

    /// World extent: the place grid plus one spacing of margin on every side.
    pub fn world_spec(&self) -> WorldSpec {
        let (cols, rows) = self.grid_dims();
        let bounds = Bounds {
            x_min: -self.place_spacing,
            x_max: cols as f64 * self.place_spacing,
            y_min: -self.place_spacing,
            y_max: rows as f64 * self.place_spacing,
        };
        let walls = (self.wall_density * bounds.area()).round() as usize;
        let disks = (self.disk_density * bounds.area()).round() as usize;
        WorldSpec {
            bounds,
            wall_count: (walls, walls),
            disk_count: (disks, disks),
            wall_length: self.wall_length,
            disk_radius: self.disk_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub id: u64,
    pub place: usize,
    pub split: Split,
    pub pose: Pose,
    pub radar: PointCloud,
    pub lidar: PointCloud,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub world: World,
    pub frames: Vec<SynthFrame>,
}

impl SynthDataset {
    pub fn ids(&self, split: Split) -> Vec<u64> {
        self.frames.iter().filter(|f| f.split == split).map(|f| f.id).collect()
    }
}

/// Places on a jittered grid, several frames per place per split, paired scans per frame.
pub fn generate_dataset(seed: u64, spec: &SynthDatasetSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let world = generate_world(derive_seed(seed, "world"), &spec.world_spec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "trajectory"));
    let (cols, _) = spec.grid_dims();
    let slack = (spec.place_spacing / 2.0 - spec.position_jitter).max(0.0) * 0.5;
    let places: Vec<(f64, f64, f64)> = (0..spec.places)
        .map(|p| {
            let cx = (p % cols) as f64 * spec.place_spacing + uniform(&mut rng, (-slack, slack));
            let cy = (p / cols) as f64 * spec.place_spacing + uniform(&mut rng, (-slack, slack));
            (cx, cy, rng.random_range(-PI..PI))
        })
        .collect();
    let per_place = [
        (Split::Train, spec.train_per_place),
        (Split::Database, spec.database_per_place),
        (Split::Query, spec.query_per_place),
    ];
    let jitter = spec.heading_jitter_deg.to_radians();
    let mut frames = Vec::new();
    let mut id = 0u64;
    for &(split, count) in &per_place {
        for (place, &(cx, cy, heading)) in places.iter().enumerate() {
            for _ in 0..count {
                let r = spec.position_jitter * rng.random::<f64>().sqrt();
                let a = rng.random_range(-PI..PI);
                let h = heading + uniform(&mut rng, (-jitter, jitter));
                let pose = Pose::new(cx + r * a.cos(), cy + r * a.sin(), h, id as f64 * 0.1);
                let lidar = simulate_scan(&world, &pose, &spec.lidar, derive_seed(seed, &format!("lidar/{id}")))?;
                let radar = simulate_scan(&world, &pose, &spec.radar, derive_seed(seed, &format!("radar/{id}")))?;
                frames.push(SynthFrame {
                    id,
                    place,
                    split,
                    pose,
                    radar,
                    lidar,
                });
                id += 1;
            }
        }
    }
    Ok(SynthDataset { world, frames })
}
