//! Teacher pretraining and student distillation.
//!
//! A [`TrainingMode`] decides which model a run trains, which checks its
//! configuration must pass, and how one tuple becomes a loss graph. The
//! [`Trainer`] owns the optimizer loop shared by all modes.

use std::collections::HashMap;
use std::io::Write;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radkd_autograd::{Adam, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedDataset;
use crate::enhance::{enhancement_loss_graph, EnhancementStrategy, EnhancerConfig, MaskImage, PoolSpec};
use crate::error::{Error, Result};
use crate::features::{BackboneConfig, Descriptor, FeatureDistillLoss, FeatureMap};
use crate::geometry::BevImage;
use crate::losses::{graph, Margins};
use crate::mining::{build_pose_index, sample_tuple, MiningParams, PoseIndex, TrainingTuple};
use crate::model::{ModelConfig, PlaceModel};
use crate::registry::Strategies;
use crate::retrieval::Modality;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: String,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Anchors drawn per epoch; `None` visits every training frame.
    pub anchors_per_epoch: Option<usize>,
    pub margins: Margins,
    pub mining: MiningParams,
    pub use_le: bool,
    pub use_fdd: bool,
    pub use_rd: bool,
    pub enhancement: String,
    pub branch: String,
    pub fdd_loss: String,
    /// Permits feature distillation in R2L mode. Only the b2 ablation row sets it.
    pub allow_r2l_fdd: bool,
    pub backbone: BackboneConfig,
    pub enhancer: EnhancerConfig,
    pub pool: PoolSpec,
    /// Set from the run's root seed, never from a config section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: "student_r2r".into(),
            epochs: 40,
            learning_rate: 1e-3,
            anchors_per_epoch: None,
            margins: Margins::default(),
            mining: MiningParams::default(),
            use_le: true,
            use_fdd: true,
            use_rd: true,
            enhancement: "local".into(),
            branch: "dual".into(),
            fdd_loss: "kl".into(),
            allow_r2l_fdd: false,
            backbone: BackboneConfig::desk(),
            enhancer: EnhancerConfig::default(),
            pool: PoolSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Teacher settings: triplet loss only.
    pub fn teacher() -> Self {
        Self {
            mode: "teacher_l2l".into(),
            use_le: false,
            use_fdd: false,
            use_rd: false,
            enhancement: "raw".into(),
            ..Self::default()
        }
    }

    /// Checks shared by every mode, then the mode's own rules.
    pub fn validate(&self, strategies: &Strategies) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.anchors_per_epoch == Some(0) {
            return Err(Error::config("train.anchors_per_epoch", "must be positive"));
        }
        self.margins.validate()?;
        self.mining.validate()?;
        self.backbone.validate()?;
        if self.enhancer.base_channels == 0 || !(self.enhancer.input_eps > 0.0 && self.enhancer.input_eps < 0.5) {
            return Err(Error::config("train.enhancer", "needs channels > 0 and 0 < input_eps < 0.5"));
        }
        let enhancement = strategies.enhancement.create(&self.enhancement)?;
        strategies.branch.create(&self.branch)?;
        strategies.feature_loss.create(&self.fdd_loss)?;
        if self.use_le && !enhancement.uses_enhancer() {
            return Err(Error::config(
                "train.enhancement",
                "use_le = true needs an enhancing mode (global or local), not `raw`",
            ));
        }
        strategies.training.create(&self.mode)?.validate(self)
    }

    fn le_active(&self) -> bool {
        self.use_le
    }
}

/// Which descriptor each side of a retrieval uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub query: Modality,
    pub database: Modality,
}

impl RetrievalPair {
    pub const L2L: Self = Self {
        query: Modality::Lidar,
        database: Modality::Lidar,
    };
    pub const R2R: Self = Self {
        query: Modality::Radar,
        database: Modality::Radar,
    };
    pub const R2L: Self = Self {
        query: Modality::Radar,
        database: Modality::Lidar,
    };

    pub fn label(&self) -> &'static str {
        match (self.query, self.database) {
            (Modality::Lidar, Modality::Lidar) => "L2L",
            (Modality::Radar, Modality::Radar) => "R2R",
            (Modality::Radar, Modality::Lidar) => "R2L",
            (Modality::Lidar, Modality::Radar) => "L2R",
        }
    }
}

/// Frozen teacher outputs for one frame.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub features: FeatureMap,
    pub descriptor: Descriptor,
}

/// Everything a mode may read while building one step's loss.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub data: &'a PreparedDataset,
    pub student: &'a PlaceModel,
    pub teacher: Option<&'a HashMap<u64, TeacherOutput>>,
    pub enhancement: &'a dyn EnhancementStrategy,
    pub fdd_loss: &'a dyn FeatureDistillLoss,
}

impl StepContext<'_> {
    fn teacher_output(&self, id: u64) -> Result<&TeacherOutput> {
        self.teacher
            .ok_or_else(|| Error::InvalidArgument("this mode needs a teacher".into()))?
            .get(&id)
            .ok_or(Error::UnknownFrame(id))
    }

    /// Per-frame masked enhancement loss, or `None` when the strategy gives no mask.
    fn enhancement_term(&self, tape: &mut Tape, id: u64, enhanced: Var) -> Result<Option<Var>> {
        let frame = self.data.frame(id)?;
        let Some(mask) = self
            .enhancement
            .supervision_mask(&frame.radar, &frame.lidar, self.config.pool)?
        else {
            return Ok(None);
        };
        let target = image_leaf(tape, &frame.lidar);
        let mask = mask_leaf(tape, &mask);
        Ok(Some(enhancement_loss_graph(tape, target, enhanced, mask)))
    }
}

fn image_leaf(tape: &mut Tape, img: &BevImage) -> Var {
    let (h, w) = img.dim();
    let v = img.values().iter().copied().collect::<Vec<f64>>();
    tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, h, w]), v).expect("length matches"))
}

fn mask_leaf(tape: &mut Tape, mask: &MaskImage) -> Var {
    let m: Array2<f64> = mask.to_f64();
    let (h, w) = m.dim();
    tape.leaf(m.into_shape_with_order((1, h, w)).expect("same size").into_dyn())
}

fn descriptor_leaf(tape: &mut Tape, d: &Descriptor) -> Var {
    tape.leaf(d.values().clone().into_dyn())
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let s = tape.add_n(terms);
    Some(tape.scale(s, 1.0 / terms.len() as f64))
}

/// Tape nodes of one frame of a tuple.
#[derive(Clone, Copy, Debug)]
pub struct FrameNodes {
    pub id: u64,
    pub input: Var,
    pub enhanced: Option<Var>,
    pub features: Var,
    pub transformed: Option<Var>,
    pub descriptor: Var,
    /// Student LiDAR-branch descriptor (R2L only).
    pub lidar_descriptor: Option<Var>,
}

/// The loss graph of one tuple. Disabled terms are absent from the tape.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub frames: Vec<FrameNodes>,
    pub triplet: Var,
    pub enhancement: Option<Var>,
    pub fdd: Option<Var>,
    pub rd: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub enhancement: Option<f64>,
    pub fdd: Option<f64>,
    pub rd: Option<f64>,
    pub total: f64,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            triplet: tape.scalar(self.triplet),
            enhancement: self.enhancement.map(|v| tape.scalar(v)),
            fdd: self.fdd.map(|v| tape.scalar(v)),
            rd: self.rd.map(|v| tape.scalar(v)),
            total: tape.scalar(self.total),
        }
    }

    fn assemble(
        tape: &mut Tape,
        frames: Vec<FrameNodes>,
        triplet: Var,
        enhancement: Option<Var>,
        fdd: Option<Var>,
        rd: Option<Var>,
    ) -> Self {
        let mut terms = vec![triplet];
        terms.extend(enhancement.iter().chain(fdd.iter()).chain(rd.iter()).copied());
        let total = if terms.len() == 1 { triplet } else { tape.add_n(&terms) };
        Self {
            frames,
            triplet,
            enhancement,
            fdd,
            rd,
            total,
        }
    }
}

pub trait TrainingMode: Send + Sync {
    fn name(&self) -> &'static str;

    /// Mode-specific configuration rules.
    fn validate(&self, config: &TrainConfig) -> Result<()>;

    fn needs_teacher(&self) -> bool;

    /// Architecture of the model this mode trains.
    fn model_config(&self, config: &TrainConfig, height: usize, width: usize) -> ModelConfig;

    /// The retrieval this mode is evaluated on.
    fn retrieval(&self) -> RetrievalPair;

    fn build_loss(&self, ctx: &StepContext<'_>, tape: &mut Tape, tuple: &TrainingTuple) -> Result<LossGraph>;
}

/// LiDAR-to-LiDAR teacher trained with the triplet loss alone.
pub struct TeacherL2l;

/// Radar student distilled for radar-to-radar retrieval.
pub struct StudentR2r;

/// Radar student distilled for radar-to-LiDAR retrieval.
pub struct StudentR2l;

impl TrainingMode for TeacherL2l {
    fn name(&self) -> &'static str {
        "teacher_l2l"
    }

    fn validate(&self, config: &TrainConfig) -> Result<()> {
        if config.use_le || config.use_fdd || config.use_rd {
            return Err(Error::config(
                "train.mode",
                "teacher_l2l trains with the triplet loss only; disable use_le, use_fdd and use_rd",
            ));
        }
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        false
    }

    fn model_config(&self, config: &TrainConfig, height: usize, width: usize) -> ModelConfig {
        ModelConfig::plain(height, width, config.backbone.clone())
    }

    fn retrieval(&self) -> RetrievalPair {
        RetrievalPair::L2L
    }

    fn build_loss(&self, ctx: &StepContext<'_>, tape: &mut Tape, tuple: &TrainingTuple) -> Result<LossGraph> {
        let mut frames = Vec::new();
        for id in tuple.frames() {
            let n = ctx.student.lidar_graph(tape, &ctx.data.frame(id)?.lidar)?;
            frames.push(FrameNodes {
                id,
                input: n.input,
                enhanced: None,
                features: n.features,
                transformed: None,
                descriptor: n.descriptor,
                lidar_descriptor: None,
            });
        }
        let triplet = triplet_over(tape, &frames, tuple, ctx.config.margins.m_triplet_r2r, None);
        Ok(LossGraph::assemble(tape, frames, triplet, None, None, None))
    }
}

/// Anchor is frame 0, positives follow, negatives close the list.
fn triplet_over(tape: &mut Tape, frames: &[FrameNodes], tuple: &TrainingTuple, margin: f64, positive: Option<Var>) -> Var {
    let np = tuple.positives.len();
    let anchor = frames[0].descriptor;
    let negatives: Vec<Var> = frames[1 + np..].iter().map(|f| f.descriptor).collect();
    let positive = positive.unwrap_or(frames[1].descriptor);
    graph::triplet(tape, anchor, positive, &negatives, margin)
}

fn radar_frames(ctx: &StepContext<'_>, tape: &mut Tape, tuple: &TrainingTuple, with_lidar: bool) -> Result<Vec<FrameNodes>> {
    tuple
        .frames()
        .into_iter()
        .map(|id| {
            let frame = ctx.data.frame(id)?;
            let r = ctx.student.radar_graph(tape, &frame.radar)?;
            let lidar_descriptor = if with_lidar {
                Some(ctx.student.lidar_graph(tape, &frame.lidar)?.descriptor)
            } else {
                None
            };
            Ok(FrameNodes {
                id,
                input: r.input,
                enhanced: r.enhanced,
                features: r.features,
                transformed: r.transformed,
                descriptor: r.descriptor,
                lidar_descriptor,
            })
        })
        .collect()
}

fn enhancement_over(ctx: &StepContext<'_>, tape: &mut Tape, frames: &[FrameNodes]) -> Result<Option<Var>> {
    if !ctx.config.le_active() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for f in frames {
        let enhanced = f
            .enhanced
            .ok_or_else(|| Error::InvalidArgument("enhancement loss needs an enhancer".into()))?;
        terms.extend(ctx.enhancement_term(tape, f.id, enhanced)?);
    }
    Ok(mean_of(tape, &terms))
}

fn fdd_over(ctx: &StepContext<'_>, tape: &mut Tape, frames: &[FrameNodes]) -> Result<Option<Var>> {
    if !ctx.config.use_fdd {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for f in frames {
        let transformed = f
            .transformed
            .ok_or_else(|| Error::InvalidArgument("feature distillation needs a TransEnc branch".into()))?;
        let t = ctx.teacher_output(f.id)?;
        let ft = tape.leaf(t.features.values().clone().into_dyn());
        terms.push(ctx.fdd_loss.build(tape, ft, transformed));
    }
    Ok(mean_of(tape, &terms))
}

impl TrainingMode for StudentR2r {
    fn name(&self) -> &'static str {
        "student_r2r"
    }

    fn validate(&self, _config: &TrainConfig) -> Result<()> {
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        true
    }

    fn model_config(&self, config: &TrainConfig, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            enhancer: config.le_active().then_some(config.enhancer),
            fdd_branch: config.use_fdd.then(|| config.branch.clone()),
            ..ModelConfig::plain(height, width, config.backbone.clone())
        }
    }

    fn retrieval(&self) -> RetrievalPair {
        RetrievalPair::R2R
    }

    fn build_loss(&self, ctx: &StepContext<'_>, tape: &mut Tape, tuple: &TrainingTuple) -> Result<LossGraph> {
        let frames = radar_frames(ctx, tape, tuple, false)?;
        let triplet = triplet_over(tape, &frames, tuple, ctx.config.margins.m_triplet_r2r, None);
        let enhancement = enhancement_over(ctx, tape, &frames)?;
        let fdd = fdd_over(ctx, tape, &frames)?;
        let rd = if ctx.config.use_rd {
            let teacher: Vec<Var> = frames
                .iter()
                .map(|f| Ok(descriptor_leaf(tape, &ctx.teacher_output(f.id)?.descriptor)))
                .collect::<Result<_>>()?;
            let student: Vec<Var> = frames.iter().map(|f| f.descriptor).collect();
            Some(graph::rd_r2r(tape, &teacher, &student, ctx.config.margins.m_rd_r2r))
        } else {
            None
        };
        Ok(LossGraph::assemble(tape, frames, triplet, enhancement, fdd, rd))
    }
}

impl TrainingMode for StudentR2l {
    fn name(&self) -> &'static str {
        "student_r2l"
    }

    fn validate(&self, config: &TrainConfig) -> Result<()> {
        if config.use_fdd && !config.allow_r2l_fdd {
            return Err(Error::config(
                "train.use_fdd",
                "feature distribution distillation is not available in student_r2l mode",
            ));
        }
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        true
    }

    fn model_config(&self, config: &TrainConfig, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            enhancer: config.le_active().then_some(config.enhancer),
            fdd_branch: (config.use_fdd && config.allow_r2l_fdd).then(|| config.branch.clone()),
            ..ModelConfig::plain(height, width, config.backbone.clone())
        }
    }

    fn retrieval(&self) -> RetrievalPair {
        RetrievalPair::R2L
    }

    fn build_loss(&self, ctx: &StepContext<'_>, tape: &mut Tape, tuple: &TrainingTuple) -> Result<LossGraph> {
        let frames = radar_frames(ctx, tape, tuple, true)?;
        // The positive is the teacher's LiDAR descriptor.
        let positive = descriptor_leaf(tape, &ctx.teacher_output(tuple.positives[0])?.descriptor);
        let triplet = triplet_over(tape, &frames, tuple, ctx.config.margins.m_triplet_r2l, Some(positive));
        let enhancement = enhancement_over(ctx, tape, &frames)?;
        let fdd = fdd_over(ctx, tape, &frames)?;
        let rd = if ctx.config.use_rd {
            let mut terms = Vec::new();
            for f in &frames {
                let g_t = descriptor_leaf(tape, &ctx.teacher_output(f.id)?.descriptor);
                let g_l = f.lidar_descriptor.expect("R2L frames carry a LiDAR descriptor");
                terms.push(graph::rd_r2l(tape, f.descriptor, g_l, g_t, ctx.config.margins.m_rd_r2l));
            }
            mean_of(tape, &terms)
        } else {
            None
        };
        Ok(LossGraph::assemble(tape, frames, triplet, enhancement, fdd, rd))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub loss: f64,
    pub triplet: f64,
    pub enhancement: Option<f64>,
    pub fdd: Option<f64>,
    pub rd: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,steps,skipped,loss,triplet,enhancement,fdd,rd";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        format!(
            "{},{},{},{:.8},{:.8},{},{},{}",
            self.epoch,
            self.steps,
            self.skipped,
            self.loss,
            self.triplet,
            opt(self.enhancement),
            opt(self.fdd),
            opt(self.rd)
        )
    }
}

/// Frozen-teacher features and descriptors for the given frames' LiDAR images.
pub fn teacher_outputs(teacher: &PlaceModel, data: &PreparedDataset, ids: &[u64]) -> Result<HashMap<u64, TeacherOutput>> {
    use rayon::prelude::*;
    ids.par_iter()
        .map(|&id| {
            let (features, descriptor) = teacher.lidar_outputs(&data.frame(id)?.lidar)?;
            Ok((id, TeacherOutput { features, descriptor }))
        })
        .collect()
}

pub struct Trainer<'a> {
    config: TrainConfig,
    mode: Box<dyn TrainingMode>,
    enhancement: Box<dyn EnhancementStrategy>,
    fdd_loss: Box<dyn FeatureDistillLoss>,
    data: &'a PreparedDataset,
    teacher: Option<HashMap<u64, TeacherOutput>>,
    student: PlaceModel,
    optimizer: Adam,
    index: PoseIndex,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        strategies: &Strategies,
        data: &'a PreparedDataset,
        teacher: Option<&PlaceModel>,
    ) -> Result<Self> {
        config.validate(strategies)?;
        let mode = strategies.training.create(&config.mode)?;
        let grid = data.grid();
        let model_config = mode.model_config(&config, grid.height, grid.width);
        let student = PlaceModel::new(model_config, derive_seed(config.seed, "init"))?;
        let teacher = match (mode.needs_teacher(), teacher) {
            (false, _) => None,
            (true, None) => return Err(Error::InvalidArgument(format!("{} needs a teacher checkpoint", mode.name()))),
            (true, Some(t)) => {
                if t.config().feature_shape() != student.config().feature_shape() {
                    return Err(Error::Shape(format!(
                        "teacher features {:?} do not match student features {:?}",
                        t.config().feature_shape(),
                        student.config().feature_shape()
                    )));
                }
                Some(teacher_outputs(t, data, &data.splits.train)?)
            }
        };
        if data.splits.train.is_empty() {
            return Err(Error::Dataset("the training split is empty".into()));
        }
        let index = build_pose_index(&data.poses(&data.splits.train)?)?;
        Ok(Self {
            enhancement: strategies.enhancement.create(&config.enhancement)?,
            fdd_loss: strategies.feature_loss.create(&config.fdd_loss)?,
            optimizer: Adam::new(config.learning_rate),
            config,
            mode,
            data,
            teacher,
            student,
            index,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn mode(&self) -> &dyn TrainingMode {
        self.mode.as_ref()
    }

    pub fn student(&self) -> &PlaceModel {
        &self.student
    }

    pub fn into_student(self) -> PlaceModel {
        self.student
    }

    /// Builds the loss graph of `tuple` without touching any parameter.
    pub fn loss_graph(&self, tape: &mut Tape, tuple: &TrainingTuple) -> Result<LossGraph> {
        let ctx = StepContext {
            config: &self.config,
            data: self.data,
            student: &self.student,
            teacher: self.teacher.as_ref(),
            enhancement: self.enhancement.as_ref(),
            fdd_loss: self.fdd_loss.as_ref(),
        };
        self.mode.build_loss(&ctx, tape, tuple)
    }

    pub fn evaluate_loss(&self, tuple: &TrainingTuple) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, tuple)?;
        Ok(g.breakdown(&tape))
    }

    /// One optimizer step on one tuple; returns the pre-step losses.
    pub fn step(&mut self, tuple: &TrainingTuple) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, tuple)?;
        let losses = g.breakdown(&tape);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = tape.backward(g.total);
        let store = self.student.store_mut();
        store.zero_grads();
        tape.accumulate_param_grads(&grads, store);
        self.optimizer.step(store);
        if !store.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(losses)
    }

    /// Samples this epoch's tuples. Anchor order and tuples depend only on (seed, epoch).
    pub fn epoch_tuples(&self, epoch: usize) -> Result<(Vec<TrainingTuple>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("epoch/{epoch}")));
        let mut anchors = self.data.splits.train.clone();
        anchors.shuffle(&mut rng);
        if let Some(n) = self.config.anchors_per_epoch {
            anchors.truncate(n);
        }
        let mut tuples = Vec::with_capacity(anchors.len());
        let mut skipped = 0;
        for a in anchors {
            match sample_tuple(&self.index, a, &self.config.mining, &mut rng)? {
                Some(t) => tuples.push(t),
                None => skipped += 1,
            }
        }
        Ok((tuples, skipped))
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let (tuples, skipped) = self.epoch_tuples(epoch)?;
        let mut m = EpochMetrics {
            epoch,
            skipped,
            ..EpochMetrics::default()
        };
        let add = |acc: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *acc = Some(acc.unwrap_or(0.0) + v);
            }
        };
        for t in &tuples {
            let l = self.step(t)?;
            m.steps += 1;
            m.loss += l.total;
            m.triplet += l.triplet;
            add(&mut m.enhancement, l.enhancement);
            add(&mut m.fdd, l.fdd);
            add(&mut m.rd, l.rd);
        }
        if m.steps > 0 {
            let n = m.steps as f64;
            m.loss /= n;
            m.triplet /= n;
            for v in [&mut m.enhancement, &mut m.fdd, &mut m.rd] {
                *v = v.map(|x| x / n);
            }
        }
        Ok(m)
    }

    /// Runs every epoch, writing one CSV row per epoch to `log` when given.
    pub fn train(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<EpochMetrics>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{METRICS_HEADER}")?;
        }
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let m = self.run_epoch(epoch)?;
            log::info!("{} epoch {epoch}: loss {:.5} ({} steps)", self.mode.name(), m.loss, m.steps);
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", m.csv_row())?;
                w.flush()?;
            }
            history.push(m);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2l_rejects_feature_distillation_unless_overridden() {
        let s = Strategies::builtin();
        let mut c = TrainConfig {
            mode: "student_r2l".into(),
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(&s), Err(Error::Config { .. })));
        c.allow_r2l_fdd = true;
        c.validate(&s).unwrap();
        c.use_fdd = false;
        c.allow_r2l_fdd = false;
        c.validate(&s).unwrap();
    }

    #[test]
    fn config_consistency_rules() {
        let s = Strategies::builtin();
        TrainConfig::default().validate(&s).unwrap();
        TrainConfig::teacher().validate(&s).unwrap();
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { enhancement: "raw".into(), ..TrainConfig::default() },
            TrainConfig { branch: "triple".into(), ..TrainConfig::default() },
            TrainConfig { use_rd: true, ..TrainConfig::teacher() },
            TrainConfig { mode: "student_l2r".into(), ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate(&s).is_err(), "{c:?}");
        }
    }
}
