//! Pose-indexed frame lookup and anchor/positive/negative tuple sampling.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Uniform-grid spatial hash over frame positions.
#[derive(Clone, Debug)]
pub struct PoseIndex {
    cell: f64,
    ids: Vec<u64>,
    positions: Vec<(f64, f64)>,
    by_id: HashMap<u64, usize>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

/// Default bucket edge, matched to the positive radius.
pub const DEFAULT_INDEX_CELL: f64 = 10.0;

pub fn build_pose_index(frames: &[(u64, Pose)]) -> Result<PoseIndex> {
    PoseIndex::with_cell(frames, DEFAULT_INDEX_CELL)
}

impl PoseIndex {
    pub fn with_cell(frames: &[(u64, Pose)], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::InvalidArgument("index cell size must be positive".into()));
        }
        let mut by_id = HashMap::with_capacity(frames.len());
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (idx, (id, pose)) in frames.iter().enumerate() {
            if by_id.insert(*id, idx).is_some() {
                return Err(Error::DuplicateFrame(*id));
            }
            cells.entry(Self::key(cell, pose.x, pose.y)).or_default().push(idx);
        }
        Ok(Self {
            cell,
            ids: frames.iter().map(|(id, _)| *id).collect(),
            positions: frames.iter().map(|(_, p)| (p.x, p.y)).collect(),
            by_id,
            cells,
        })
    }

    fn key(cell: f64, x: f64, y: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: u64) -> Option<(f64, f64)> {
        self.by_id.get(&id).map(|&i| self.positions[i])
    }

    fn dist(&self, idx: usize, x: f64, y: f64) -> f64 {
        let (px, py) = self.positions[idx];
        ((px - x).powi(2) + (py - y).powi(2)).sqrt()
    }

    /// Frame ids within distance `radius` (inclusive) of `(x, y)`, in insertion order.
    pub fn within(&self, x: f64, y: f64, radius: f64) -> Vec<u64> {
        if radius < 0.0 {
            return Vec::new();
        }
        let (lo_x, lo_y) = Self::key(self.cell, x - radius, y - radius);
        let (hi_x, hi_y) = Self::key(self.cell, x + radius, y + radius);
        let mut hits = Vec::new();
        for cx in lo_x..=hi_x {
            for cy in lo_y..=hi_y {
                if let Some(bucket) = self.cells.get(&(cx, cy)) {
                    hits.extend(bucket.iter().copied().filter(|&i| self.dist(i, x, y) <= radius));
                }
            }
        }
        hits.sort_unstable();
        hits.into_iter().map(|i| self.ids[i]).collect()
    }

    /// Frame ids strictly farther than `radius` from `(x, y)`, in insertion order.
    pub fn beyond(&self, x: f64, y: f64, radius: f64) -> Vec<u64> {
        (0..self.ids.len())
            .filter(|&i| self.dist(i, x, y) > radius)
            .map(|i| self.ids[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningParams {
    pub pos_radius: f64,
    pub neg_radius: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            pos_radius: 10.0,
            neg_radius: 50.0,
            n_pos: 1,
            n_neg: 4,
        }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_radius > 0.0 && self.neg_radius > 0.0) {
            return Err(Error::config("mining", "radii must be positive"));
        }
        if self.neg_radius <= self.pos_radius {
            return Err(Error::config("mining.neg_radius", "must exceed pos_radius"));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::config("mining", "need at least one positive and one negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub anchor: u64,
    pub positives: Vec<u64>,
    pub negatives: Vec<u64>,
}

impl TrainingTuple {
    /// Anchor, then positives, then negatives.
    pub fn frames(&self) -> Vec<u64> {
        std::iter::once(self.anchor)
            .chain(self.positives.iter().copied())
            .chain(self.negatives.iter().copied())
            .collect()
    }
}

/// Draws positives uniformly within `pos_radius` and negatives uniformly beyond
/// `neg_radius`. Returns `Ok(None)` when the anchor has too few candidates.
pub fn sample_tuple<R: Rng + ?Sized>(
    index: &PoseIndex,
    anchor: u64,
    params: &MiningParams,
    rng: &mut R,
) -> Result<Option<TrainingTuple>> {
    params.validate()?;
    let (x, y) = index.position(anchor).ok_or(Error::UnknownFrame(anchor))?;
    let pos_pool: Vec<u64> = index
        .within(x, y, params.pos_radius)
        .into_iter()
        .filter(|&id| id != anchor)
        .collect();
    if pos_pool.len() < params.n_pos {
        return Ok(None);
    }
    let neg_pool = index.beyond(x, y, params.neg_radius);
    if neg_pool.len() < params.n_neg {
        return Ok(None);
    }
    let positives = sample(rng, pos_pool.len(), params.n_pos)
        .into_iter()
        .map(|i| pos_pool[i])
        .collect();
    let negatives = sample(rng, neg_pool.len(), params.n_neg)
        .into_iter()
        .map(|i| neg_pool[i])
        .collect();
    Ok(Some(TrainingTuple {
        anchor,
        positives,
        negatives,
    }))
}

/// [`sample_tuple`] with a dedicated seeded generator.
pub fn sample_tuple_seeded(index: &PoseIndex, anchor: u64, params: &MiningParams, seed: u64) -> Result<Option<TrainingTuple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_tuple(index, anchor, params, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(x: f64, y: f64) -> Pose {
        Pose::new(x, y, 0.0, 0.0)
    }

    #[test]
    fn single_frame_query() {
        let idx = build_pose_index(&[(7, pose(3.0, -2.0))]).unwrap();
        assert_eq!(idx.within(3.0, -2.0, 0.0), vec![7]);
        assert!(idx.within(10.0, 10.0, 0.0).is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            build_pose_index(&[(1, pose(0.0, 0.0)), (1, pose(5.0, 0.0))]),
            Err(Error::DuplicateFrame(1))
        ));
    }

    #[test]
    fn valid_tuple_and_determinism() {
        let frames = vec![
            (0, pose(0.0, 0.0)),
            (1, pose(5.0, 0.0)),
            (2, pose(0.0, 60.0)),
            (3, pose(60.0, 0.0)),
            (4, pose(-60.0, 0.0)),
            (5, pose(0.0, -60.0)),
            (6, pose(30.0, 0.0)),
        ];
        let idx = build_pose_index(&frames).unwrap();
        let t = sample_tuple_seeded(&idx, 0, &MiningParams::default(), 9).unwrap().unwrap();
        assert_eq!(t.positives, vec![1]);
        let mut negs = t.negatives.clone();
        negs.sort();
        assert_eq!(negs, vec![2, 3, 4, 5]);
        assert_eq!(t, sample_tuple_seeded(&idx, 0, &MiningParams::default(), 9).unwrap().unwrap());
        assert_eq!(t.frames().len(), 6);
    }

    #[test]
    fn skip_without_positive() {
        let frames = vec![(0, pose(0.0, 0.0)), (1, pose(30.0, 0.0)), (2, pose(100.0, 0.0))];
        let idx = build_pose_index(&frames).unwrap();
        assert!(sample_tuple_seeded(&idx, 0, &MiningParams::default(), 1).unwrap().is_none());
    }

    #[test]
    fn skip_with_too_few_negatives() {
        let frames = vec![(0, pose(0.0, 0.0)), (1, pose(1.0, 0.0)), (2, pose(100.0, 0.0))];
        let idx = build_pose_index(&frames).unwrap();
        assert!(sample_tuple_seeded(&idx, 0, &MiningParams::default(), 1).unwrap().is_none());
    }

    #[test]
    fn boundary_conventions() {
        let frames = vec![(0, pose(0.0, 0.0)), (1, pose(10.0, 0.0)), (2, pose(50.0, 0.0)), (3, pose(50.5, 0.0))];
        let idx = build_pose_index(&frames).unwrap();
        assert_eq!(idx.within(0.0, 0.0, 10.0), vec![0, 1]);
        assert_eq!(idx.beyond(0.0, 0.0, 50.0), vec![3]);
    }

    #[test]
    fn errors() {
        let idx = build_pose_index(&[(0, pose(0.0, 0.0))]).unwrap();
        assert!(matches!(
            sample_tuple_seeded(&idx, 5, &MiningParams::default(), 0),
            Err(Error::UnknownFrame(5))
        ));
        let bad = MiningParams { neg_radius: 5.0, ..MiningParams::default() };
        assert!(sample_tuple_seeded(&idx, 0, &bad, 0).is_err());
    }
}
