//! Name-keyed registries of interchangeable strategies.
//!
//! Each algorithm family (enhancement mode, feature-distillation loss, branch
//! layout, training mode) is a trait; variants register a constructor under a
//! name and are selected from configuration at runtime.

use crate::enhance::{EnhancementStrategy, GlobalEnhancement, LocalEnhancement, RawEnhancement};
use crate::error::{Error, Result};
use crate::features::{DualBranch, FeatureBranch, FeatureDistillLoss, KlDistill, MseDistill, SingleBranch};
use crate::training::{StudentR2l, StudentR2r, TeacherL2l, TrainingMode};

pub struct Registry<T: ?Sized + 'static> {
    kind: &'static str,
    entries: Vec<(&'static str, fn() -> Box<T>)>,
}

impl<T: ?Sized + 'static> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds or replaces the constructor registered under `name`.
    pub fn register(&mut self, name: &'static str, ctor: fn() -> Box<T>) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = ctor,
            None => self.entries.push((name, ctor)),
        }
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }
}

/// All strategy families with the built-in variants registered.
pub struct Strategies {
    pub enhancement: Registry<dyn EnhancementStrategy>,
    pub feature_loss: Registry<dyn FeatureDistillLoss>,
    pub branch: Registry<dyn FeatureBranch>,
    pub training: Registry<dyn TrainingMode>,
}

impl Strategies {
    pub fn builtin() -> Self {
        let mut enhancement: Registry<dyn EnhancementStrategy> = Registry::new("enhancement mode");
        enhancement
            .register("raw", || Box::new(RawEnhancement))
            .register("global", || Box::new(GlobalEnhancement))
            .register("local", || Box::new(LocalEnhancement));

        let mut feature_loss: Registry<dyn FeatureDistillLoss> = Registry::new("feature distillation loss");
        feature_loss
            .register("kl", || Box::new(KlDistill))
            .register("mse", || Box::new(MseDistill));

        let mut branch: Registry<dyn FeatureBranch> = Registry::new("feature branch");
        branch
            .register("single", || Box::new(SingleBranch))
            .register("dual", || Box::new(DualBranch));

        let mut training: Registry<dyn TrainingMode> = Registry::new("training mode");
        training
            .register("teacher_l2l", || Box::new(TeacherL2l))
            .register("student_r2r", || Box::new(StudentR2r))
            .register("student_r2l", || Box::new(StudentR2l));

        Self {
            enhancement,
            feature_loss,
            branch,
            training,
        }
    }
}
