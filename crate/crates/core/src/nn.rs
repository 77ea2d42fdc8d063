use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use radkd_autograd::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with variance 2 / fan_in.
    He,
    Zero,
}

/// k×k convolution with bias, bound to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = IxDyn(&[out_channels, in_channels, kernel, kernel]);
        let w = match init {
            Init::Zero => ArrayD::zeros(shape),
            Init::He => {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                ArrayD::from_shape_simple_fn(shape, || dist.sample(rng))
            }
        };
        let weight = store.insert(format!("{name}.weight"), w);
        let bias = store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}
