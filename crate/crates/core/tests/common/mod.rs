#![allow(dead_code)]

use radkd::dataset::{PrepConfig, PreparedDataset};
use radkd::enhance::EnhancerConfig;
use radkd::geometry::{GridSpec, RorParams};
use radkd::model::PlaceModel;
use radkd::registry::Strategies;
use radkd::synthworld::{generate_dataset, SynthDatasetSpec};
use radkd::training::{TrainConfig, Trainer};

/// 32×32 cells over the desk range.
pub const GRID: GridSpec = GridSpec {
    x_min: 0.0,
    x_max: 51.2,
    y_min: -25.6,
    y_max: 25.6,
    height: 32,
    width: 32,
    density_cap: 10,
};

/// A few places with enough frames for mining.
pub fn small_data(seed: u64) -> PreparedDataset {
    let spec = SynthDatasetSpec {
        places: 6,
        train_per_place: 3,
        database_per_place: 2,
        query_per_place: 1,
        position_jitter: 2.0,
        heading_jitter_deg: 5.0,
        ..SynthDatasetSpec::default()
    };
    let prep = PrepConfig {
        grid: GRID,
        radar_ror: Some(RorParams {
            radius: 2.0,
            min_neighbors: 1,
        }),
        lidar_ror: None,
    };
    PreparedDataset::from_synth(&generate_dataset(seed, &spec).unwrap(), &prep).unwrap()
}

pub fn student_config(mode: &str, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: mode.into(),
        epochs: 1,
        use_fdd: mode == "student_r2r",
        enhancer: EnhancerConfig {
            base_channels: 2,
            ..EnhancerConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

pub fn trained_teacher(data: &PreparedDataset, epochs: usize) -> PlaceModel {
    let cfg = TrainConfig {
        epochs,
        seed: 99,
        ..TrainConfig::teacher()
    };
    let mut t = Trainer::new(cfg, &Strategies::builtin(), data, None).unwrap();
    t.train(None).unwrap();
    t.into_student()
}
