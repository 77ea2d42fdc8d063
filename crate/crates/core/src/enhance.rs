//! Local image enhancement: sensor perception masks, their overlap, the
//! encoder–decoder enhancer, and the masked reconstruction loss.

use ndarray::{Array2, Array3, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use radkd_autograd::{ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::geometry::BevImage;
use crate::nn::{Conv2d, Init};

/// Binary image; `true` marks pixels both sensors perceive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    values: Array2<bool>,
}

impl MaskImage {
    pub fn new(values: Array2<bool>) -> Self {
        Self { values }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), true))
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

/// Max pooling with zero padding. The configuration must preserve H×W.
pub fn perception_mask(img: &BevImage, pool: PoolSpec) -> Result<BevImage> {
    let (h, w) = img.dim();
    let out_h = radkd_autograd::conv::output_len(h, pool.kernel, pool.stride, pool.padding);
    let out_w = radkd_autograd::conv::output_len(w, pool.kernel, pool.stride, pool.padding);
    if pool.kernel == 0 || out_h != Some(h) || out_w != Some(w) {
        return Err(Error::Shape(format!(
            "pooling kernel {} stride {} padding {} does not preserve {h}×{w}",
            pool.kernel, pool.stride, pool.padding
        )));
    }
    let src = img.values();
    let pad = pool.padding as isize;
    let out = Array2::from_shape_fn((h, w), |(i, j)| {
        // Zero padding: a window touching the border also sees 0.
        let mut m = f64::NEG_INFINITY;
        for di in 0..pool.kernel as isize {
            for dj in 0..pool.kernel as isize {
                let y = (i * pool.stride) as isize + di - pad;
                let x = (j * pool.stride) as isize + dj - pad;
                let v = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    0.0
                } else {
                    src[[y as usize, x as usize]]
                };
                m = m.max(v);
            }
        }
        m
    });
    BevImage::new(out)
}

/// Pixels nonzero in both pooled images.
pub fn overlap_mask(pooled_s: &BevImage, pooled_t: &BevImage) -> Result<MaskImage> {
    if pooled_s.dim() != pooled_t.dim() {
        return Err(Error::Shape(format!(
            "overlap of {:?} and {:?}",
            pooled_s.dim(),
            pooled_t.dim()
        )));
    }
    let mut values = Array2::from_elem(pooled_s.dim(), false);
    ndarray::Zip::from(&mut values)
        .and(pooled_s.values())
        .and(pooled_t.values())
        .for_each(|m, &s, &t| *m = s != 0.0 && t != 0.0);
    Ok(MaskImage::new(values))
}

fn check_loss_dims(img_t: &BevImage, img_e: &BevImage, mask: &MaskImage) -> Result<()> {
    if img_t.dim() != img_e.dim() || img_t.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "enhancement loss over {:?}, {:?}, mask {:?}",
            img_t.dim(),
            img_e.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Masked squared error normalized by the full pixel count H·W.
pub fn enhancement_loss(img_t: &BevImage, img_e: &BevImage, mask: &MaskImage) -> Result<f64> {
    check_loss_dims(img_t, img_e, mask)?;
    let mut tape = Tape::new();
    let t = tape.leaf(img_t.values().clone().into_dyn());
    let e = tape.leaf(img_e.values().clone().into_dyn());
    let m = tape.leaf(mask.to_f64().into_dyn());
    let loss = enhancement_loss_graph(&mut tape, t, e, m);
    Ok(tape.scalar(loss))
}

/// Tape form of [`enhancement_loss`]; `mask` holds 0/1 values of the same shape.
pub fn enhancement_loss_graph(tape: &mut Tape, img_t: Var, img_e: Var, mask: Var) -> Var {
    let n = tape.value(img_t).len() as f64;
    let diff = tape.sub(img_t, img_e);
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask);
    let total = tape.sum(masked);
    tape.scale(total, 1.0 / n)
}

/// Which enhancement target, if any, a training run uses.
pub trait EnhancementStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether radar images pass through the enhancer at all.
    fn uses_enhancer(&self) -> bool;

    /// Pixels where the enhanced radar image is pulled toward the LiDAR image.
    fn supervision_mask(&self, radar: &BevImage, lidar: &BevImage, pool: PoolSpec) -> Result<Option<MaskImage>>;
}

/// No enhancer; radar BEV feeds the backbone unchanged.
pub struct RawEnhancement;

/// Enhancer supervised by the whole LiDAR image.
pub struct GlobalEnhancement;

/// Enhancer supervised only where both sensors perceive.
pub struct LocalEnhancement;

impl EnhancementStrategy for RawEnhancement {
    fn name(&self) -> &'static str {
        "raw"
    }

    fn uses_enhancer(&self) -> bool {
        false
    }

    fn supervision_mask(&self, _: &BevImage, _: &BevImage, _: PoolSpec) -> Result<Option<MaskImage>> {
        Ok(None)
    }
}

impl EnhancementStrategy for GlobalEnhancement {
    fn name(&self) -> &'static str {
        "global"
    }

    fn uses_enhancer(&self) -> bool {
        true
    }

    fn supervision_mask(&self, radar: &BevImage, lidar: &BevImage, _: PoolSpec) -> Result<Option<MaskImage>> {
        if radar.dim() != lidar.dim() {
            return Err(Error::Shape("radar and LiDAR images differ in size".into()));
        }
        Ok(Some(MaskImage::ones(radar.height(), radar.width())))
    }
}

impl EnhancementStrategy for LocalEnhancement {
    fn name(&self) -> &'static str {
        "local"
    }

    fn uses_enhancer(&self) -> bool {
        true
    }

    fn supervision_mask(&self, radar: &BevImage, lidar: &BevImage, pool: PoolSpec) -> Result<Option<MaskImage>> {
        let pooled_s = perception_mask(radar, pool)?;
        let pooled_t = perception_mask(lidar, pool)?;
        overlap_mask(&pooled_s, &pooled_t).map(Some)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    /// Channels at full resolution; the half-resolution stage uses twice as many.
    pub base_channels: usize,
    /// Inputs are squeezed into [eps, 1 - eps] before the logit.
    pub input_eps: f64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            base_channels: 12,
            input_eps: 0.01,
        }
    }
}

/// Two-level encoder–decoder with one skip connection.
///
/// The network predicts a residual in logit space:
/// `out = sigmoid(logit(eps + (1 - 2 eps) x) + r(x))`. The last layer starts
/// at zero, so a fresh enhancer is the identity up to the eps squeeze.
#[derive(Clone, Debug)]
pub struct Enhancer {
    config: EnhancerConfig,
    enc1: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    dec: Conv2d,
    head: Conv2d,
}

impl Enhancer {
    pub fn new<R: Rng + ?Sized>(config: EnhancerConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let c = config.base_channels;
        let enc1 = Conv2d::new(store, &format!("{prefix}.enc1"), 1, c, 3, 1, 1, Init::He, rng);
        let down = Conv2d::new(store, &format!("{prefix}.down"), c, 2 * c, 3, 2, 1, Init::He, rng);
        let mid = Conv2d::new(store, &format!("{prefix}.mid"), 2 * c, 2 * c, 3, 1, 1, Init::He, rng);
        let dec = Conv2d::new(store, &format!("{prefix}.dec"), 3 * c, c, 3, 1, 1, Init::He, rng);
        let head = Conv2d::new(store, &format!("{prefix}.head"), c, 1, 3, 1, 1, Init::Zero, rng);
        Self {
            config,
            enc1,
            down,
            mid,
            dec,
            head,
        }
    }

    pub fn config(&self) -> &EnhancerConfig {
        &self.config
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("enhancer needs even, nonzero H and W, got {h}×{w}")));
        }
        Ok(())
    }

    /// `x` is 1×H×W with H, W even.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let eps = self.config.input_eps;
        let squeezed = tape.scale(x, 1.0 - 2.0 * eps);
        let squeezed = tape.add_scalar(squeezed, eps);
        let base = tape.logit(squeezed);

        let e1 = self.enc1.forward(tape, store, x);
        let e1 = tape.relu(e1);
        let e2 = self.down.forward(tape, store, e1);
        let e2 = tape.relu(e2);
        let m = self.mid.forward(tape, store, e2);
        let m = tape.relu(m);
        let up = tape.upsample2x(m);
        let cat = tape.concat_channels(up, e1);
        let d = self.dec.forward(tape, store, cat);
        let d = tape.relu(d);
        let residual = self.head.forward(tape, store, d);
        let logits = tape.add(base, residual);
        tape.sigmoid(logits)
    }

    /// Inference on a single image.
    pub fn enhance(&self, store: &ParamStore, img: &BevImage) -> Result<BevImage> {
        let (h, w) = img.dim();
        self.check_input(h, w)?;
        let mut tape = Tape::new();
        let x = tape.leaf(img.values().clone().into_shape_with_order((1, h, w)).unwrap().into_dyn());
        let y = self.forward(&mut tape, store, x);
        let out: Array3<f64> = tape.value(y).clone().into_dimensionality::<Ix3>().unwrap();
        BevImage::new(out.into_shape_with_order((h, w)).unwrap())
    }
}
