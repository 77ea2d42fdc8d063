//! Backbone features, the TransEnc transform, dual-branch feature
//! distribution distillation, and global descriptors.

use ndarray::{Array1, Array3, Ix1, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use radkd_autograd::{ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::BevImage;
use crate::nn::{Conv2d, Init};

/// C×h×w activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    fn from_tape(tape: &Tape, v: Var) -> Result<Self> {
        Self::new(tape.value(v).clone().into_dimensionality::<Ix3>().unwrap())
    }
}

/// Unit-L2-norm global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Array1<f64>,
}

impl Descriptor {
    /// Normalizes `values`; fails on an all-zero or non-finite vector.
    pub fn from_unnormalized(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descriptor".into()));
        }
        let norm = values.dot(&values).sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("cannot normalize an all-zero feature vector".into()));
        }
        Ok(Self { values: values / norm })
    }

    /// Wraps a vector already known to be unit norm (checked to 1e-6).
    pub fn from_unit(values: Array1<f64>) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("descriptor norm {norm} is not 1")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn from_tape(tape: &Tape, v: Var) -> Result<Self> {
        Self::from_unit(tape.value(v).clone().into_dimensionality::<Ix1>().unwrap())
    }
}

/// Flatten then L2-normalize.
pub fn global_descriptor(f: &FeatureMap) -> Result<Descriptor> {
    let flat = f.values.iter().copied().collect::<Array1<f64>>();
    Descriptor::from_unnormalized(flat)
}

/// Tape form of [`global_descriptor`]. Errors if the map is all zero.
pub fn global_descriptor_graph(tape: &mut Tape, f: Var) -> Result<Var> {
    if tape.value(f).iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("cannot normalize an all-zero feature vector".into()));
    }
    let flat = tape.flatten(f);
    Ok(tape.l2_normalize(flat))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels per stride-2 stage; the last entry is the feature channel count C.
    pub stage_channels: Vec<usize>,
    /// Extra stride-1 convolutions after each downsampling convolution.
    pub extra_convs_per_stage: usize,
}

impl BackboneConfig {
    /// 64×64 input → 32×8×8 features.
    pub fn desk() -> Self {
        Self {
            stage_channels: vec![8, 16, 32],
            extra_convs_per_stage: 0,
        }
    }

    /// 200×200 input → 256×13×13 features.
    pub fn paper() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            extra_convs_per_stage: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    /// Spatial size of the feature map for an `h`×`w` input.
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        self.stage_channels.iter().fold((h, w), |(h, w), _| {
            (
                radkd_autograd::conv::output_len(h, 3, 2, 1).unwrap_or(0),
                radkd_autograd::conv::output_len(w, 3, 2, 1).unwrap_or(0),
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config("model.backbone", "stage channels must be non-empty and positive"));
        }
        if self.out_channels() < 2 || self.out_channels() % 2 != 0 {
            return Err(Error::config("model.backbone", "feature channel count must be even"));
        }
        Ok(())
    }
}

/// Plain strided CNN standing in for a ResNet-style feature extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (s, &out) in config.stage_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}.stage{s}.down"), in_ch, out, 3, 2, 1, Init::He, rng));
            for e in 0..config.extra_convs_per_stage {
                convs.push(Conv2d::new(store, &format!("{prefix}.stage{s}.conv{e}"), out, out, 3, 1, 1, Init::He, rng));
            }
            in_ch = out;
        }
        Self { config, convs }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `x` is 1×H×W; returns C×h×w. The last convolution is linear.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let last = self.convs.len() - 1;
        self.convs.iter().enumerate().fold(x, |h, (i, conv)| {
            let y = conv.forward(tape, store, h);
            if i == last {
                y
            } else {
                tape.relu(y)
            }
        })
    }

    pub fn extract_features(&self, store: &ParamStore, img: &BevImage) -> Result<FeatureMap> {
        let (h, w) = img.dim();
        let (oh, ow) = self.config.out_spatial(h, w);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("{h}×{w} input too small for the backbone")));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(img.values().clone().into_shape_with_order((1, h, w)).unwrap().into_dyn());
        let f = self.forward(&mut tape, store, x);
        FeatureMap::from_tape(&tape, f)
    }
}

/// conv(C → C/2) → ReLU → conv(C/2 → C), 3×3, stride 1, padding 1.
#[derive(Clone, Debug)]
pub struct TransEnc {
    channels: usize,
    first: Conv2d,
    second: Conv2d,
}

impl TransEnc {
    pub fn new<R: Rng + ?Sized>(channels: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        assert!(channels >= 2 && channels % 2 == 0, "TransEnc needs an even channel count");
        let half = channels / 2;
        let first = Conv2d::new(store, &format!("{prefix}.conv1"), channels, half, 3, 1, 1, Init::He, rng);
        let second = Conv2d::new(store, &format!("{prefix}.conv2"), half, channels, 3, 1, 1, Init::He, rng);
        Self { channels, first, second }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Var {
        let h = self.first.forward(tape, store, f);
        let h = tape.relu(h);
        self.second.forward(tape, store, h)
    }

    pub fn apply(&self, store: &ParamStore, f: &FeatureMap) -> Result<FeatureMap> {
        if f.channels() != self.channels {
            return Err(Error::Shape(format!(
                "TransEnc expects {} channels, got {}",
                self.channels,
                f.channels()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(f.values.clone().into_dyn());
        let y = self.forward(&mut tape, store, x);
        FeatureMap::from_tape(&tape, y)
    }
}

fn same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Dual-branch combination: raw student features plus transformed features.
pub fn fdd_enhance(f_s: &FeatureMap, f_s_t: &FeatureMap) -> Result<FeatureMap> {
    same_shape(f_s, f_s_t, "fdd_enhance")?;
    FeatureMap::new(&f_s.values + &f_s_t.values)
}

/// Distance between teacher features and transformed student features.
pub trait FeatureDistillLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, tape: &mut Tape, f_t: Var, f_s_t: Var) -> Var;
}

/// `D_KL(softmax(flatten F_t) ‖ softmax(flatten F^t_s))`, temperature 1.
pub struct KlDistill;

/// Mean squared error on raw feature values.
pub struct MseDistill;

impl FeatureDistillLoss for KlDistill {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn build(&self, tape: &mut Tape, f_t: Var, f_s_t: Var) -> Var {
        let t = tape.flatten(f_t);
        let s = tape.flatten(f_s_t);
        let log_p = tape.log_softmax(t);
        let log_q = tape.log_softmax(s);
        let p = tape.exp(log_p);
        let log_ratio = tape.sub(log_p, log_q);
        let terms = tape.mul(p, log_ratio);
        tape.sum(terms)
    }
}

impl FeatureDistillLoss for MseDistill {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn build(&self, tape: &mut Tape, f_t: Var, f_s_t: Var) -> Var {
        let d = tape.sub(f_t, f_s_t);
        let sq = tape.square(d);
        tape.mean(sq)
    }
}

/// Evaluates a feature distillation loss on concrete maps.
pub fn fdd_loss(loss: &dyn FeatureDistillLoss, f_t: &FeatureMap, f_s_t: &FeatureMap) -> Result<f64> {
    same_shape(f_t, f_s_t, "fdd_loss")?;
    let mut tape = Tape::new();
    let t = tape.leaf(f_t.values.clone().into_dyn());
    let s = tape.leaf(f_s_t.values.clone().into_dyn());
    let l = loss.build(&mut tape, t, s);
    let v = tape.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite("feature distillation loss".into()));
    }
    // Rounding can leave KL of identical inputs a hair below zero.
    Ok(v.max(0.0))
}

/// Which map feeds the descriptor when TransEnc is active.
pub trait FeatureBranch: Send + Sync {
    fn name(&self) -> &'static str;
    fn combine(&self, tape: &mut Tape, f_s: Var, f_s_t: Var) -> Var;
}

/// Descriptor from the transformed features alone.
pub struct SingleBranch;

/// Descriptor from `F_s + F^t_s`.
pub struct DualBranch;

impl FeatureBranch for SingleBranch {
    fn name(&self) -> &'static str {
        "single"
    }

    fn combine(&self, _tape: &mut Tape, _f_s: Var, f_s_t: Var) -> Var {
        f_s_t
    }
}

impl FeatureBranch for DualBranch {
    fn name(&self) -> &'static str {
        "dual"
    }

    fn combine(&self, tape: &mut Tape, f_s: Var, f_s_t: Var) -> Var {
        tape.add(f_s, f_s_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(v: Array3<f64>) -> FeatureMap {
        FeatureMap::new(v).unwrap()
    }

    #[test]
    fn desk_backbone_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(BackboneConfig::desk(), &mut store, "bb", &mut rng);
        let img = BevImage::new(Array::from_shape_fn((64, 64), |(i, j)| ((i + j) % 3) as f64 / 2.0)).unwrap();
        let f = bb.extract_features(&store, &img).unwrap();
        assert_eq!(f.dim(), (32, 8, 8));
        assert_eq!(BackboneConfig::desk().out_spatial(64, 64), (8, 8));
        assert_eq!(BackboneConfig::paper().out_spatial(200, 200), (13, 13));
    }

    #[test]
    fn trans_enc_preserves_shape_and_maps_zero_to_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let te = TransEnc::new(8, &mut store, "te", &mut rng);
        let zero = fmap(Array3::zeros((8, 5, 3)));
        let out = te.apply(&store, &zero).unwrap();
        assert_eq!(out.dim(), (8, 5, 3));
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert!(te.apply(&store, &fmap(Array3::zeros((4, 5, 3)))).is_err());
    }

    #[test]
    fn fdd_enhance_identities() {
        let a = fmap(Array::from_shape_fn((2, 3, 3), |(c, i, j)| (c + i * j) as f64 - 1.5));
        let z = fmap(Array3::zeros((2, 3, 3)));
        assert_eq!(fdd_enhance(&a, &z).unwrap(), a);
        let neg = fmap(-a.values().clone());
        assert!(fdd_enhance(&a, &neg).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(fdd_enhance(&a, &fmap(Array3::zeros((2, 3, 4)))).is_err());
    }

    #[test]
    fn kl_of_two_point_distributions() {
        // Logits ln p give softmax p exactly.
        let t = fmap(array![[[0.5f64.ln(), 0.5f64.ln()]]]);
        let s = fmap(array![[[0.9f64.ln(), 0.1f64.ln()]]]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = fdd_loss(&KlDistill, &t, &s).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn fdd_loss_zero_on_identical_and_errors() {
        let a = fmap(Array::from_shape_fn((2, 2, 2), |(c, i, j)| (c * 4 + i * 2 + j) as f64));
        assert_eq!(fdd_loss(&KlDistill, &a, &a).unwrap(), 0.0);
        assert_eq!(fdd_loss(&MseDistill, &a, &a).unwrap(), 0.0);
        assert!(fdd_loss(&KlDistill, &a, &fmap(Array3::zeros((2, 2, 1)))).is_err());
        assert!(FeatureMap::new(array![[[f64::NAN]]]).is_err());
    }

    #[test]
    fn global_descriptor_cases() {
        let mut onehot = Array3::zeros((2, 2, 2));
        onehot[[1, 0, 1]] = 3.0;
        let d = global_descriptor(&fmap(onehot)).unwrap();
        let mut expect = Array1::zeros(8);
        expect[5] = 1.0;
        assert_eq!(d.values(), &expect);
        assert!(matches!(global_descriptor(&fmap(Array3::zeros((1, 2, 2)))), Err(Error::Degenerate(_))));
    }

    #[test]
    fn branch_strategies() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![1.0, 2.0].into_dyn());
        let b = tape.leaf(array![0.5, -1.0].into_dyn());
        let single = SingleBranch.combine(&mut tape, a, b);
        let dual = DualBranch.combine(&mut tape, a, b);
        assert_eq!(tape.value(single), &array![0.5, -1.0].into_dyn());
        assert_eq!(tape.value(dual), &array![1.5, 1.0].into_dyn());
    }
}
