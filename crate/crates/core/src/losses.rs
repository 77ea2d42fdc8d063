//! Metric-learning and distillation losses on global descriptors.
//!
//! Each loss has a plain form over [`Descriptor`]s and a tape form in [`graph`]
//! used during training. The plain forms evaluate the tape forms, so the two
//! cannot drift apart.

use serde::{Deserialize, Serialize};
use radkd_autograd::Tape;

use crate::error::{Error, Result};
use crate::features::Descriptor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Margins {
    pub m_rd_r2r: f64,
    pub m_rd_r2l: f64,
    pub m_triplet_r2r: f64,
    pub m_triplet_r2l: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            m_rd_r2r: 0.01,
            m_rd_r2l: 0.01,
            m_triplet_r2r: 0.3,
            m_triplet_r2l: 0.3,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("margins.m_rd_r2r", self.m_rd_r2r),
            ("margins.m_rd_r2l", self.m_rd_r2l),
            ("margins.m_triplet_r2r", self.m_triplet_r2r),
            ("margins.m_triplet_r2l", self.m_triplet_r2l),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "margin must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

pub mod graph {
    use radkd_autograd::{Tape, Var};

    /// Mean over negatives of `max(d(a,p) - d(a,n) + margin, 0)`.
    pub fn triplet(tape: &mut Tape, anchor: Var, positive: Var, negatives: &[Var], margin: f64) -> Var {
        assert!(!negatives.is_empty(), "triplet loss needs negatives");
        let d_ap = tape.distance(anchor, positive);
        let terms: Vec<Var> = negatives
            .iter()
            .map(|&n| {
                let d_an = tape.distance(anchor, n);
                let gap = tape.sub(d_ap, d_an);
                tape.hinge(gap, -margin)
            })
            .collect();
        let total = tape.add_n(&terms);
        tape.scale(total, 1.0 / negatives.len() as f64)
    }

    /// MSE between teacher and student pairwise distances over all unordered pairs.
    pub fn relational(tape: &mut Tape, teacher: &[Var], student: &[Var]) -> Var {
        assert_eq!(teacher.len(), student.len());
        assert!(teacher.len() >= 2);
        let mut terms = Vec::new();
        for i in 0..teacher.len() {
            for j in i + 1..teacher.len() {
                let rt = tape.distance(teacher[i], teacher[j]);
                let rs = tape.distance(student[i], student[j]);
                let diff = tape.sub(rt, rs);
                terms.push(tape.square(diff));
            }
        }
        let n = terms.len() as f64;
        let total = tape.add_n(&terms);
        tape.scale(total, 1.0 / n)
    }

    pub fn rd_r2r(tape: &mut Tape, teacher: &[Var], student: &[Var], margin: f64) -> Var {
        let rel = relational(tape, teacher, student);
        tape.hinge(rel, margin)
    }

    pub fn rd_r2l(tape: &mut Tape, g_s_radar: Var, g_s_lidar: Var, g_t: Var, margin: f64) -> Var {
        let a = tape.distance(g_s_radar, g_t);
        let b = tape.distance(g_s_lidar, g_t);
        let c = tape.distance(g_s_lidar, g_s_radar);
        let ha = tape.hinge(a, margin);
        let hb = tape.hinge(b, margin);
        let hc = tape.hinge(c, margin);
        tape.add_n(&[ha, hb, hc])
    }
}

fn check_dims(descs: &[&Descriptor]) -> Result<()> {
    let dim = descs[0].dim();
    if descs.iter().any(|d| d.dim() != dim) {
        return Err(Error::Shape("descriptors differ in dimension".into()));
    }
    Ok(())
}

fn leaf(tape: &mut Tape, d: &Descriptor) -> radkd_autograd::Var {
    tape.leaf(d.values().clone().into_dyn())
}

pub fn triplet_loss(anchor: &Descriptor, positive: &Descriptor, negatives: &[Descriptor], margin: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("triplet loss needs at least one negative".into()));
    }
    let mut all = vec![anchor, positive];
    all.extend(negatives.iter());
    check_dims(&all)?;
    let mut tape = Tape::new();
    let a = leaf(&mut tape, anchor);
    let p = leaf(&mut tape, positive);
    let ns: Vec<_> = negatives.iter().map(|n| leaf(&mut tape, n)).collect();
    let l = graph::triplet(&mut tape, a, p, &ns, margin);
    Ok(tape.scalar(l))
}

/// Triplet loss whose positive comes from the teacher.
pub fn triplet_loss_r2l(
    anchor_s: &Descriptor,
    positive_t: &Descriptor,
    negatives_s: &[Descriptor],
    margin: f64,
) -> Result<f64> {
    triplet_loss(anchor_s, positive_t, negatives_s, margin)
}

fn check_pairs(teacher: &[Descriptor], student: &[Descriptor]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "{} teacher descriptors vs {} student descriptors",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.len() < 2 {
        return Err(Error::InvalidArgument("relational loss needs at least two samples".into()));
    }
    check_dims(&teacher.iter().chain(student.iter()).collect::<Vec<_>>())
}

pub fn relational_distill_loss(teacher: &[Descriptor], student: &[Descriptor]) -> Result<f64> {
    check_pairs(teacher, student)?;
    let mut tape = Tape::new();
    let t: Vec<_> = teacher.iter().map(|d| leaf(&mut tape, d)).collect();
    let s: Vec<_> = student.iter().map(|d| leaf(&mut tape, d)).collect();
    let l = graph::relational(&mut tape, &t, &s);
    Ok(tape.scalar(l))
}

pub fn rd_loss_r2r(teacher: &[Descriptor], student: &[Descriptor], margins: &Margins) -> Result<f64> {
    check_pairs(teacher, student)?;
    let mut tape = Tape::new();
    let t: Vec<_> = teacher.iter().map(|d| leaf(&mut tape, d)).collect();
    let s: Vec<_> = student.iter().map(|d| leaf(&mut tape, d)).collect();
    let l = graph::rd_r2r(&mut tape, &t, &s, margins.m_rd_r2r);
    Ok(tape.scalar(l))
}

pub fn rd_loss_r2l(g_s_radar: &Descriptor, g_s_lidar: &Descriptor, g_t: &Descriptor, margins: &Margins) -> Result<f64> {
    check_dims(&[g_s_radar, g_s_lidar, g_t])?;
    let mut tape = Tape::new();
    let r = leaf(&mut tape, g_s_radar);
    let l = leaf(&mut tape, g_s_lidar);
    let t = leaf(&mut tape, g_t);
    let v = graph::rd_r2l(&mut tape, r, l, t, margins.m_rd_r2l);
    Ok(tape.scalar(v))
}

/// Radar-to-radar loss components; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct R2rLossParts {
    pub triplet: f64,
    pub enhancement: Option<f64>,
    pub fdd: Option<f64>,
    pub rd: Option<f64>,
}

/// Radar-to-LiDAR loss components. There is no feature-distillation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct R2lLossParts {
    pub triplet: f64,
    pub enhancement: Option<f64>,
    pub rd: Option<f64>,
}

/// Unit-weight sum of the enabled components.
pub fn total_loss_r2r(parts: &R2rLossParts) -> f64 {
    parts.triplet + parts.enhancement.unwrap_or(0.0) + parts.fdd.unwrap_or(0.0) + parts.rd.unwrap_or(0.0)
}

pub fn total_loss_r2l(parts: &R2lLossParts) -> f64 {
    parts.triplet + parts.enhancement.unwrap_or(0.0) + parts.rd.unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Unit vector in the plane at angle `theta`.
    fn unit(theta: f64) -> Descriptor {
        Descriptor::from_unit(array![theta.cos(), theta.sin()]).unwrap()
    }

    /// Angle whose chord from angle 0 has length `d`.
    fn at_chord(d: f64) -> f64 {
        2.0 * (d / 2.0).asin()
    }

    #[test]
    fn triplet_inactive_and_active() {
        let a = unit(0.0);
        let l = triplet_loss(&a, &unit(at_chord(0.2)), &[unit(-at_chord(0.6))], 0.3).unwrap();
        assert_eq!(l, 0.0);
        let l = triplet_loss(&a, &unit(at_chord(0.5)), &[unit(-at_chord(0.4))], 0.3).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
    }

    #[test]
    fn triplet_mean_over_negatives() {
        let a = unit(0.0);
        let p = unit(at_chord(0.5));
        let negs = [unit(-at_chord(0.4)), unit(-at_chord(1.5))];
        let l = triplet_loss(&a, &p, &negs, 0.3).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        assert!(triplet_loss(&a, &p, &[], 0.3).is_err());
    }

    #[test]
    fn triplet_r2l_matches_triplet() {
        let a = unit(0.0);
        let l = triplet_loss_r2l(&a, &unit(at_chord(0.9)), &[unit(-at_chord(0.1))], 0.3).unwrap();
        assert!((l - 1.1).abs() < 1e-12);
        let negs = [unit(2.0), unit(-1.0)];
        assert_eq!(
            triplet_loss_r2l(&a, &unit(0.4), &negs, 0.3).unwrap(),
            triplet_loss(&a, &unit(0.4), &negs, 0.3).unwrap()
        );
    }

    #[test]
    fn relational_single_pair() {
        let t = [unit(0.0), unit(at_chord(1.0))];
        let s = [unit(0.0), unit(at_chord(0.8))];
        let l = relational_distill_loss(&t, &s).unwrap();
        assert!((l - 0.04).abs() < 1e-12);
        assert!(relational_distill_loss(&t[..1], &s[..1]).is_err());
        assert!(relational_distill_loss(&t, &s[..1]).is_err());
    }

    #[test]
    fn rd_r2r_hinge() {
        let t = [unit(0.0), unit(at_chord(1.0))];
        let m = Margins::default();
        assert_eq!(rd_loss_r2r(&t, &t, &m).unwrap(), 0.0);
        // relational loss 0.05: |r_t - r_s| = sqrt(0.05)
        let s = [unit(0.0), unit(at_chord(1.0 - 0.05f64.sqrt()))];
        assert!((rd_loss_r2r(&t, &s, &m).unwrap() - 0.04).abs() < 1e-12);
        let s = [unit(0.0), unit(at_chord(1.0 - 0.005f64.sqrt()))];
        assert_eq!(rd_loss_r2r(&t, &s, &m).unwrap(), 0.0);
    }

    #[test]
    fn rd_r2l_cases() {
        let m = Margins::default();
        let g = unit(0.3);
        assert_eq!(rd_loss_r2l(&g, &g, &g, &m).unwrap(), 0.0);
        let anti = unit(0.3 + std::f64::consts::PI);
        let l = rd_loss_r2l(&anti, &g, &g, &m).unwrap();
        assert!((l - 3.98).abs() < 1e-12);
        let short = Descriptor::from_unit(array![1.0]).unwrap();
        assert!(rd_loss_r2l(&g, &g, &short, &m).is_err());
    }

    #[test]
    fn totals() {
        let p = R2rLossParts {
            triplet: 0.4,
            enhancement: Some(0.0625),
            fdd: Some(0.51),
            rd: Some(0.04),
        };
        assert!((total_loss_r2r(&p) - 1.0125).abs() < 1e-12);
        assert_eq!(total_loss_r2r(&R2rLossParts::default()), 0.0);
        let p = R2lLossParts {
            triplet: 0.4,
            enhancement: Some(0.0625),
            rd: Some(3.98),
        };
        assert!((total_loss_r2l(&p) - 4.4425).abs() < 1e-12);
        assert_eq!(total_loss_r2l(&R2lLossParts::default()), 0.0);
    }

    #[test]
    fn margin_validation() {
        assert!(Margins::default().validate().is_ok());
        let m = Margins { m_rd_r2l: -0.1, ..Margins::default() };
        assert!(m.validate().is_err());
    }
}
