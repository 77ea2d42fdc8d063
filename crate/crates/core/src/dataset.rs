//! Paired radar / LiDAR BEV frames with pose tags and split manifests.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_to_range, radius_outlier_removal, rasterize_bev, BevImage, GridSpec, PointCloud, Pose, RorParams};
use crate::io;
use crate::synthworld::{Split, SynthDataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub grid: GridSpec,
    /// Outlier removal for radar; `None` disables it.
    pub radar_ror: Option<RorParams>,
    pub lidar_ror: Option<RorParams>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::DESK,
            radar_ror: Some(RorParams::default()),
            lidar_ror: None,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for p in self.radar_ror.iter().chain(self.lidar_ror.iter()) {
            p.validate()?;
        }
        Ok(())
    }
}

/// Crop, optional radius outlier removal, then density rasterization.
pub fn prepare_cloud(cloud: &PointCloud, grid: &GridSpec, ror: Option<RorParams>) -> Result<BevImage> {
    let cropped = crop_to_range(cloud, grid);
    let filtered = match ror {
        Some(p) => radius_outlier_removal(&cropped, p)?,
        None => cropped,
    };
    Ok(rasterize_bev(&filtered, grid))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub id: u64,
    pub pose: Pose,
    pub radar: BevImage,
    pub lidar: BevImage,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub database: Vec<u64>,
    pub query: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    grid: GridSpec,
    frames: Vec<PreparedFrame>,
    by_id: HashMap<u64, usize>,
    pub splits: Splits,
}

impl PreparedDataset {
    pub fn new(grid: GridSpec, frames: Vec<PreparedFrame>, splits: Splits) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.radar.dim() != (grid.height, grid.width) || f.lidar.dim() != (grid.height, grid.width) {
                return Err(Error::Shape(format!("frame {} raster does not match the grid", f.id)));
            }
            if by_id.insert(f.id, i).is_some() {
                return Err(Error::DuplicateFrame(f.id));
            }
        }
        for id in splits
            .train
            .iter()
            .chain(&splits.validation)
            .chain(&splits.database)
            .chain(&splits.query)
        {
            if !by_id.contains_key(id) {
                return Err(Error::UnknownFrame(*id));
            }
        }
        Ok(Self {
            grid,
            frames,
            by_id,
            splits,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn frames(&self) -> &[PreparedFrame] {
        &self.frames
    }

    pub fn frame(&self, id: u64) -> Result<&PreparedFrame> {
        self.by_id.get(&id).map(|&i| &self.frames[i]).ok_or(Error::UnknownFrame(id))
    }

    pub fn poses(&self, ids: &[u64]) -> Result<Vec<(u64, Pose)>> {
        ids.iter().map(|&id| Ok((id, self.frame(id)?.pose))).collect()
    }

    /// Query and database splits must not share frames.
    pub fn check_disjoint(&self) -> Result<()> {
        let db: HashSet<u64> = self.splits.database.iter().copied().collect();
        match self.splits.query.iter().find(|id| db.contains(id)) {
            Some(id) => Err(Error::Dataset(format!("frame {id} is in both the query and database splits"))),
            None => Ok(()),
        }
    }

    pub fn from_synth(ds: &SynthDataset, prep: &PrepConfig) -> Result<Self> {
        prep.validate()?;
        let frames = ds
            .frames
            .par_iter()
            .map(|f| {
                Ok(PreparedFrame {
                    id: f.id,
                    pose: f.pose,
                    radar: prepare_cloud(&f.radar, &prep.grid, prep.radar_ror)?,
                    lidar: prepare_cloud(&f.lidar, &prep.grid, prep.lidar_ror)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = Splits {
            train: ds.ids(Split::Train),
            validation: Vec::new(),
            database: ds.ids(Split::Database),
            query: ds.ids(Split::Query),
        };
        Self::new(prep.grid, frames, splits)
    }

    /// Reads `frames.csv` and `splits/*.txt` under `root`. A missing split file is an empty split.
    pub fn load(root: &Path, prep: &PrepConfig) -> Result<Self> {
        prep.validate()?;
        let records = io::read_frame_log(&root.join("frames.csv"))?;
        let frames = records
            .par_iter()
            .map(|r| {
                let radar = io::read_point_cloud(&root.join(&r.radar))?;
                let lidar = io::read_point_cloud(&root.join(&r.lidar))?;
                Ok(PreparedFrame {
                    id: r.frame_id,
                    pose: r.pose,
                    radar: prepare_cloud(&radar, &prep.grid, prep.radar_ror)?,
                    lidar: prepare_cloud(&lidar, &prep.grid, prep.lidar_ror)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let split = |name: &str| -> Result<Vec<u64>> {
            let path = root.join("splits").join(format!("{name}.txt"));
            if path.exists() {
                io::read_split(&path)
            } else {
                Ok(Vec::new())
            }
        };
        let splits = Splits {
            train: split("train")?,
            validation: split("validation")?,
            database: split("database")?,
            query: split("query")?,
        };
        Self::new(prep.grid, frames, splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_dataset, SynthDatasetSpec};

    #[test]
    fn synth_round_trip_through_disk() {
        let spec = SynthDatasetSpec {
            places: 2,
            ..SynthDatasetSpec::default()
        };
        let ds = generate_dataset(4, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        io::write_synth_dataset(dir.path(), &ds).unwrap();
        let prep = PrepConfig::default();
        let mem = PreparedDataset::from_synth(&ds, &prep).unwrap();
        let disk = PreparedDataset::load(dir.path(), &prep).unwrap();
        assert_eq!(mem.splits, disk.splits);
        assert_eq!(mem.frames().len(), disk.frames().len());
        mem.check_disjoint().unwrap();
        let lidar_mass: f64 = mem.frames().iter().map(|f| f.lidar.values().sum()).sum();
        assert!(lidar_mass > 0.0);
    }

    #[test]
    fn overlapping_splits_are_detected() {
        let f = PreparedFrame {
            id: 1,
            pose: Pose::new(0.0, 0.0, 0.0, 0.0),
            radar: BevImage::zeros(64, 64),
            lidar: BevImage::zeros(64, 64),
        };
        let splits = Splits {
            database: vec![1],
            query: vec![1],
            ..Splits::default()
        };
        let ds = PreparedDataset::new(GridSpec::DESK, vec![f], splits).unwrap();
        assert!(ds.check_disjoint().is_err());
    }
}
