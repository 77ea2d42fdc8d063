use radkd::enhance::{overlap_mask, perception_mask, PoolSpec};
use radkd::geometry::{rasterize_bev, GridSpec, Pose};
use radkd::synthworld::{generate_dataset, generate_world, simulate_scan, Bounds, ScanSpec, Segment, SynthDatasetSpec, World, WorldSpec};

fn noiseless_lidar(rays: usize) -> ScanSpec {
    ScanSpec {
        rays,
        dropout: 0.0,
        noise_sigma: 0.0,
        clutter_rate: 0.0,
        ..ScanSpec::lidar()
    }
}

fn wall_world(wall: Segment) -> World {
    World {
        seed: 0,
        bounds: Bounds {
            x_min: -100.0,
            x_max: 100.0,
            y_min: -100.0,
            y_max: 100.0,
        },
        walls: vec![wall],
        disks: vec![],
    }
}

#[test]
fn perpendicular_wall_is_hit_at_its_distance() {
    let d = 17.5;
    let world = wall_world(Segment { a: (d, -60.0), b: (d, 60.0) });
    let spec = noiseless_lidar(181);
    let scan = simulate_scan(&world, &Pose::new(0.0, 0.0, 0.0, 0.0), &spec, 3).unwrap();
    // The centre ray is the perpendicular one.
    assert!(spec.ray_angle(90).abs() < 1e-12);
    let centre = scan
        .points()
        .iter()
        .min_by(|a, b| a.y.abs().total_cmp(&b.y.abs()))
        .unwrap();
    assert!((centre.x - d).abs() < 1e-9 && centre.y.abs() < 1e-9, "{centre:?}");
    // Every other hit lies on the wall line, at range d / cos(bearing).
    for p in scan.points() {
        assert!((p.x - d).abs() < 1e-9);
    }
    let expected = (0..spec.rays)
        .filter(|&k| {
            let b = spec.ray_angle(k);
            b.cos() > 0.0 && (d * b.tan()).abs() <= 60.0 && d / b.cos() <= spec.max_range
        })
        .count();
    assert_eq!(scan.len(), expected);
}

#[test]
fn perpendicular_wall_from_a_rotated_pose() {
    let (h, d) = (std::f64::consts::FRAC_PI_3, 12.0);
    let (c, s) = (h.cos(), h.sin());
    let (ox, oy) = (5.0, -3.0);
    let centre = (ox + d * c, oy + d * s);
    let world = wall_world(Segment {
        a: (centre.0 - 30.0 * s, centre.1 + 30.0 * c),
        b: (centre.0 + 30.0 * s, centre.1 - 30.0 * c),
    });
    let scan = simulate_scan(&world, &Pose::new(ox, oy, h, 0.0), &noiseless_lidar(181), 0).unwrap();
    let hit = scan.points().iter().min_by(|a, b| a.y.abs().total_cmp(&b.y.abs())).unwrap();
    assert!((hit.x - d).abs() < 1e-9 && hit.y.abs() < 1e-9, "{hit:?}");
}

#[test]
fn radar_returns_fewer_points_than_lidar() {
    let spec = WorldSpec {
        bounds: Bounds {
            x_min: -60.0,
            x_max: 60.0,
            y_min: -60.0,
            y_max: 60.0,
        },
        wall_count: (20, 30),
        disk_count: (30, 50),
        wall_length: (4.0, 20.0),
        disk_radius: (0.3, 1.5),
    };
    let world = generate_world(4, &spec).unwrap();
    let pose = Pose::new(0.0, 0.0, 0.4, 0.0);
    let (mut radar, mut lidar) = (0usize, 0usize);
    for seed in 0..100 {
        radar += simulate_scan(&world, &pose, &ScanSpec::radar(), seed).unwrap().len();
        lidar += simulate_scan(&world, &pose, &ScanSpec::lidar(), seed).unwrap().len();
    }
    assert!(radar < lidar, "radar {radar} vs lidar {lidar}");
}

#[test]
fn scans_are_seed_deterministic() {
    let ds = generate_dataset(3, &SynthDatasetSpec { places: 3, ..SynthDatasetSpec::default() }).unwrap();
    let again = generate_dataset(3, &SynthDatasetSpec { places: 3, ..SynthDatasetSpec::default() }).unwrap();
    assert_eq!(ds.frames.len(), again.frames.len());
    for (a, b) in ds.frames.iter().zip(&again.frames) {
        assert_eq!((a.radar.clone(), a.lidar.clone()), (b.radar.clone(), b.lidar.clone()));
    }
    let f = &ds.frames[0];
    assert_ne!(simulate_scan(&ds.world, &f.pose, &ScanSpec::radar(), 1).unwrap(), simulate_scan(&ds.world, &f.pose, &ScanSpec::radar(), 2).unwrap());
}

#[test]
fn paired_scans_have_a_nonempty_overlap_mask() {
    let ds = generate_dataset(8, &SynthDatasetSpec { places: 5, ..SynthDatasetSpec::default() }).unwrap();
    for f in &ds.frames {
        let r = perception_mask(&rasterize_bev(&f.radar, &GridSpec::DESK), PoolSpec::default()).unwrap();
        let l = perception_mask(&rasterize_bev(&f.lidar, &GridSpec::DESK), PoolSpec::default()).unwrap();
        assert!(overlap_mask(&r, &l).unwrap().count() > 0, "frame {}", f.id);
    }
}
