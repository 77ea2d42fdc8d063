//! Recall evaluation of a trained model on the database / query splits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};
use crate::features::Descriptor;
use crate::geometry::Pose;
use crate::model::PlaceModel;
use crate::retrieval::{recall_at_n, DescriptorDb, Modality, RecallReport, DEFAULT_CUTOFFS, DEFAULT_THRESHOLD_M};
use crate::training::RetrievalPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    pub threshold_m: f64,
    /// Permits query frames that also appear in the database.
    pub allow_overlap: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            threshold_m: DEFAULT_THRESHOLD_M,
            allow_overlap: false,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::config("eval.cutoffs", "need at least one positive cutoff"));
        }
        if !(self.threshold_m > 0.0 && self.threshold_m.is_finite()) {
            return Err(Error::config("eval.threshold_m", "must be positive"));
        }
        Ok(())
    }
}

pub fn describe_frames(model: &PlaceModel, data: &PreparedDataset, ids: &[u64], modality: Modality) -> Result<Vec<(u64, Descriptor, Pose)>> {
    ids.par_iter()
        .map(|&id| {
            let f = data.frame(id)?;
            let img = match modality {
                Modality::Radar => &f.radar,
                Modality::Lidar => &f.lidar,
            };
            Ok((id, model.describe(img, modality)?, f.pose))
        })
        .collect()
}

pub fn build_database(model: &PlaceModel, data: &PreparedDataset, ids: &[u64], modality: Modality) -> Result<DescriptorDb> {
    let mut db = DescriptorDb::new(modality);
    for (id, d, pose) in describe_frames(model, data, ids, modality)? {
        db.add(id, d, pose)?;
    }
    Ok(db)
}

/// Fails on shared frame ids unless overlap is allowed.
pub fn check_overlap(database: &DescriptorDb, queries: &DescriptorDb, allow_overlap: bool) -> Result<()> {
    if allow_overlap {
        return Ok(());
    }
    match queries.entries().iter().find(|q| database.pose_of(q.frame_id).is_some()) {
        Some(q) => Err(Error::Dataset(format!(
            "query frame {} is also in the database (pass allow_overlap to permit)",
            q.frame_id
        ))),
        None => Ok(()),
    }
}

/// Recall of `queries` against `database`, each entry's stored pose serving as ground truth.
pub fn evaluate_dbs(database: &DescriptorDb, queries: &DescriptorDb, opts: &EvalOptions) -> Result<RecallReport> {
    opts.validate()?;
    check_overlap(database, queries, opts.allow_overlap)?;
    let q: Vec<(Descriptor, Pose)> = queries
        .entries()
        .iter()
        .map(|e| (e.descriptor.clone(), e.pose))
        .collect();
    recall_at_n(database, &q, &opts.cutoffs, opts.threshold_m)
}

/// Database and query descriptor sets for `pair` on the dataset's splits.
pub fn build_eval_sets(model: &PlaceModel, data: &PreparedDataset, pair: RetrievalPair) -> Result<(DescriptorDb, DescriptorDb)> {
    if data.splits.database.is_empty() || data.splits.query.is_empty() {
        return Err(Error::Dataset("evaluation needs non-empty database and query splits".into()));
    }
    let db = build_database(model, data, &data.splits.database, pair.database)?;
    let q = build_database(model, data, &data.splits.query, pair.query)?;
    Ok((db, q))
}

pub fn evaluate(model: &PlaceModel, data: &PreparedDataset, pair: RetrievalPair, opts: &EvalOptions) -> Result<RecallReport> {
    let (db, q) = build_eval_sets(model, data, pair)?;
    evaluate_dbs(&db, &q, opts)
}
