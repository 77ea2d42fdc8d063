//! Exact descriptor search and Recall@N evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Descriptor;
use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Radar,
    Lidar,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Radar => 0,
            Modality::Lidar => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Radar),
            1 => Some(Modality::Lidar),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Radar => "radar",
            Modality::Lidar => "lidar",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub frame_id: u64,
    pub descriptor: Descriptor,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct DescriptorDb {
    modality: Modality,
    entries: Vec<DbEntry>,
    ids: HashSet<u64>,
}

/// Query match: database frame and descriptor distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub frame_id: u64,
    pub distance: f64,
}

#[derive(PartialEq)]
struct Ranked(Hit);

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .distance
            .total_cmp(&other.0.distance)
            .then(self.0.frame_id.cmp(&other.0.frame_id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl DescriptorDb {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.descriptor.dim())
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn add(&mut self, frame_id: u64, descriptor: Descriptor, pose: Pose) -> Result<()> {
        if let Some(dim) = self.dim() {
            if dim != descriptor.dim() {
                return Err(Error::Shape(format!(
                    "descriptor dimension {} does not match database dimension {dim}",
                    descriptor.dim()
                )));
            }
        }
        if !self.ids.insert(frame_id) {
            return Err(Error::DuplicateFrame(frame_id));
        }
        self.entries.push(DbEntry {
            frame_id,
            descriptor,
            pose,
        });
        Ok(())
    }

    pub fn pose_of(&self, frame_id: u64) -> Option<Pose> {
        self.entries.iter().find(|e| e.frame_id == frame_id).map(|e| e.pose)
    }

    /// The `n` nearest entries by Euclidean descriptor distance, ascending,
    /// ties broken by ascending frame id. `n` is clamped to the database size.
    pub fn query(&self, desc: &Descriptor, n: usize) -> Result<Vec<Hit>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if Some(desc.dim()) != self.dim() {
            return Err(Error::Shape("query dimension differs from database".into()));
        }
        let n = n.min(self.entries.len());
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(n + 1);
        for e in &self.entries {
            let cand = Ranked(Hit {
                frame_id: e.frame_id,
                distance: e.descriptor.distance(desc),
            });
            if heap.len() < n {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        Ok(heap.into_sorted_vec().into_iter().map(|r| r.0).collect())
    }

    const MAGIC: &'static [u8; 8] = b"RKDDB001";

    /// Header: magic, u8 modality, u32 dimension, u64 count. Then per entry:
    /// u64 frame id, f64 x, y, heading, timestamp, and `dim` f64 values. All little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&[self.modality.code()])?;
        w.write_all(&(self.dim().unwrap_or(0) as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.frame_id.to_le_bytes())?;
            for v in [e.pose.x, e.pose.y, e.pose.heading, e.pose.timestamp] {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in e.descriptor.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != Self::MAGIC {
            return Err(bad("not a descriptor database"));
        }
        let mut b1 = [0u8; 1];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b1).map_err(|_| bad("truncated header"))?;
        let modality = Modality::from_code(b1[0]).ok_or_else(|| bad("unknown modality code"))?;
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(b8);
        let mut db = DescriptorDb::new(modality);
        let mut read_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut b8).map_err(|_| bad("truncated record"))?;
            Ok(f64::from_le_bytes(b8))
        };
        for _ in 0..count {
            let mut idb = [0u8; 8];
            r.read_exact(&mut idb).map_err(|_| bad("truncated record"))?;
            let id = u64::from_le_bytes(idb);
            let x = read_f64(&mut r)?;
            let y = read_f64(&mut r)?;
            let heading = read_f64(&mut r)?;
            let timestamp = read_f64(&mut r)?;
            let values = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Array1<f64>>>()?;
            let desc = Descriptor::from_unit(values).map_err(|e| bad(&e.to_string()))?;
            db.add(id, desc, Pose { x, y, heading, timestamp })?;
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

/// Ranked frame ids of the `n` nearest database entries.
pub fn query_top_n(db: &DescriptorDb, desc: &Descriptor, n: usize) -> Result<Vec<u64>> {
    Ok(db.query(desc, n)?.into_iter().map(|h| h.frame_id).collect())
}

/// Recall at several cutoffs over one query set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub queries: usize,
    pub threshold_m: f64,
}

impl RecallReport {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.recall_at.get(&n).copied()
    }

    pub fn is_monotone(&self) -> bool {
        self.recall_at.values().zip(self.recall_at.values().skip(1)).all(|(a, b)| a <= b)
    }
}

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;

/// A query is correct at N if any of its top-N matches lies within
/// `threshold_m` of the query's true position.
pub fn recall_at_n(
    db: &DescriptorDb,
    queries: &[(Descriptor, Pose)],
    cutoffs: &[usize],
    threshold_m: f64,
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be positive".into()));
    }
    let max_n = *cutoffs.iter().max().unwrap();
    let mut correct: BTreeMap<usize, usize> = cutoffs.iter().map(|&n| (n, 0)).collect();
    for (desc, pose) in queries {
        let hits = db.query(desc, max_n)?;
        // Rank of the first geographically correct match, if any.
        let first = hits.iter().position(|h| {
            let p = db.pose_of(h.frame_id).expect("hit comes from the database");
            p.planar_distance(pose) <= threshold_m
        });
        if let Some(rank) = first {
            for (&n, c) in correct.iter_mut() {
                if rank < n {
                    *c += 1;
                }
            }
        }
    }
    let total = queries.len() as f64;
    Ok(RecallReport {
        recall_at: correct.into_iter().map(|(n, c)| (n, c as f64 / total)).collect(),
        queries: queries.len(),
        threshold_m,
    })
}

/// Plain-text table: one row per labelled report, columns R@N in percent.
pub fn render_recall_table(rows: &[(String, RecallReport)]) -> String {
    let cutoffs: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.recall_at.keys().copied().collect())
        .unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec());
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<label_w$}", "mode");
    for n in &cutoffs {
        out.push_str(&format!(" | {:>6}", format!("R@{n}")));
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + cutoffs.len() * 9));
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for n in &cutoffs {
            out.push_str(&format!(" | {:>6.1}", r.at(*n).unwrap_or(f64::NAN) * 100.0));
        }
        out.push('\n');
    }
    out
}

/// Comma-separated form of [`render_recall_table`] with fractional recalls.
pub fn recall_csv(rows: &[(String, RecallReport)]) -> String {
    let cutoffs: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.recall_at.keys().copied().collect())
        .unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec());
    let mut out = String::from("mode,queries,threshold_m");
    for n in &cutoffs {
        out.push_str(&format!(",recall_at_{n}"));
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&format!("{label},{},{}", r.queries, r.threshold_m));
        for n in &cutoffs {
            out.push_str(&format!(",{:.6}", r.at(*n).unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}
