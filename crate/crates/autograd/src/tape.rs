//! Reverse-mode recording tape.
//!
//! Every op appends a node holding its forward value and enough state to
//! propagate gradients. Nodes only reference earlier nodes, so a single
//! reverse sweep over the node list visits each node after all its consumers.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn, Zip};

use crate::conv::{col2im, im2col, output_len};
use crate::params::{ParamId, ParamStore};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Logit(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        cols: Array2<f64>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    L2Normalize { x: Var, norm: f64 },
    LogSoftmax(Var),
    Distance(Var, Var),
    AddN(Vec<Var>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of one scalar with respect to every node of the tape it was computed on.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn scalar(x: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node is not a scalar");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input or constant; receives gradients but never propagates them.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(scalar(x))
    }

    /// Binds a stored parameter. Repeated calls for the same id return the same node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `max(a - margin, 0)`, subgradient 0 at the kink.
    pub fn hinge(&mut self, a: Var, margin: f64) -> Var {
        let shifted = self.add_scalar(a, -margin);
        self.relu(shifted)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// `ln(x / (1 - x))`, defined on (0, 1).
    pub fn logit(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| (x / (1.0 - x)).ln());
        self.push(v, Op::Logit(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of empty tensor");
        let v = scalar(self.value(a).sum() / n as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut v = self.value(vars[0]).clone();
        for &u in &vars[1..] {
            self.same_shape(vars[0], u, "add_n");
            v += self.value(u);
        }
        self.push(v, Op::AddN(vars.to_vec()))
    }

    /// Single-sample convolution: `x` is C×H×W, `w` is O×C×k×k, `b` has length O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be C×H×W");
        assert_eq!(ws.len(), 4, "conv2d: weight must be O×C×k×k");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d: bias length");
        let k = ws[2];
        let ho = output_len(xs[1], k, stride, padding).expect("conv2d: kernel exceeds input");
        let wo = output_len(xs[2], k, stride, padding).expect("conv2d: kernel exceeds input");
        let x3 = self.value(x).view().into_dimensionality().unwrap();
        let cols = im2col(x3, k, stride, padding);
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((ws[0], ws[1] * k * k))
            .unwrap();
        let mut out = w2.dot(&cols);
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += bv;
        }
        let out = out.into_shape_with_order(IxDyn(&[ws[0], ho, wo])).unwrap();
        self.push(out, Op::Conv2d { x, w, b, stride, padding, cols })
    }

    /// Nearest-neighbour 2× upsampling of a C×H×W tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let src = self.value(a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (c, h, w) = src.dim();
        let out = Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| src[[ci, i / 2, j / 2]]);
        self.push(out.into_dyn(), Op::Upsample2x(a))
    }

    /// Concatenates two C×H×W tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 3, "concat_channels: rank-3 inputs only");
        assert_eq!(&sa[1..], &sb[1..], "concat_channels: spatial mismatch");
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()]).unwrap();
        self.push(v, Op::ConcatChannels(a, b))
    }

    /// Divides a tensor by its L2 norm. The caller guarantees a nonzero norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let norm = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "l2_normalize: zero vector");
        let v = self.value(a) / norm;
        self.push(v, Op::L2Normalize { x: a, norm })
    }

    /// Log-softmax over all elements of a rank-1 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ndim(), 1, "log_softmax: rank-1 input only");
        let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = x.mapv(|v| v - lse);
        self.push(v, Op::LogSoftmax(a))
    }

    /// Euclidean distance `‖a - b‖₂` as a scalar. Gradient at zero distance is taken as 0.
    pub fn distance(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "distance");
        let d = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
            .sqrt();
        self.push(scalar(d), Op::Distance(a, b))
    }

    /// Gradients of scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[a.0], &g * self.value(*b));
                    accumulate(&mut grads[b.0], &g * self.value(*a));
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| if x <= 0.0 { *gv = 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Logit(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv /= x * (1.0 - x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], &g * &node.value),
                Op::Square(a) => accumulate(&mut grads[a.0], &g * &(self.value(*a) * 2.0)),
                Op::Sum(a) => {
                    let gv = g.iter().next().copied().unwrap();
                    accumulate(&mut grads[a.0], ArrayD::from_elem(self.value(*a).raw_dim(), gv));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g.iter().next().copied().unwrap() / n;
                    accumulate(&mut grads[a.0], ArrayD::from_elem(self.value(*a).raw_dim(), gv));
                }
                Op::Reshape(a) => {
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(self.value(*a).raw_dim())
                        .unwrap();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Conv2d { x, w, b, stride, padding, cols } => {
                    let ws = self.shape(*w).to_vec();
                    let (o, k) = (ws[0], ws[2]);
                    let g2 = g
                        .view()
                        .into_shape_with_order((o, cols.ncols()))
                        .expect("conv2d grad shape");
                    let gb: Array1<f64> = g2.sum_axis(Axis(1));
                    let gw = g2.dot(&cols.t());
                    let w2 = self
                        .value(*w)
                        .view()
                        .into_shape_with_order((o, ws[1] * k * k))
                        .unwrap();
                    let gcols = w2.t().dot(&g2);
                    let xs = self.shape(*x);
                    let gx = col2im(gcols.view(), (xs[0], xs[1], xs[2]), k, *stride, *padding);
                    accumulate(&mut grads[x.0], gx.into_dyn());
                    accumulate(&mut grads[w.0], gw.into_shape_with_order(IxDyn(&ws)).unwrap());
                    accumulate(&mut grads[b.0], gb.into_dyn());
                }
                Op::Upsample2x(a) => {
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let (c, h2, w2) = g3.dim();
                    let mut ga = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
                    for ((ci, i, j), &v) in g3.indexed_iter() {
                        ga[[ci, i / 2, j / 2]] += v;
                    }
                    accumulate(&mut grads[a.0], ga.into_dyn());
                }
                Op::ConcatChannels(a, b) => {
                    let ca = self.shape(*a)[0];
                    let ga = g.slice_axis(Axis(0), (0..ca).into()).to_owned();
                    let gb = g.slice_axis(Axis(0), (ca..).into()).to_owned();
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::L2Normalize { x, norm } => {
                    let y = &node.value;
                    let dot = Zip::from(y).and(&g).fold(0.0, |acc, &yv, &gv| acc + yv * gv);
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(y).for_each(|gv, &yv| *gv = (*gv - yv * dot) / norm);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LogSoftmax(a) => {
                    let gsum = g.sum();
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &lp| *gv -= lp.exp() * gsum);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Distance(a, b) => {
                    let d = *node.value.iter().next().unwrap();
                    if d > 0.0 {
                        let gv = g.iter().next().copied().unwrap();
                        let diff = (self.value(*a) - self.value(*b)) * (gv / d);
                        accumulate(&mut grads[b.0], -&diff);
                        accumulate(&mut grads[a.0], diff);
                    }
                }
                Op::AddN(vars) => {
                    for v in vars {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds the gradients of every bound parameter into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (id, var) in self.bound_params() {
            if let Some(g) = grads.get(var) {
                *store.grad_mut(id) += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn repeated_param_binding_shares_one_node() {
        let mut store = ParamStore::new();
        let id = store.insert("w", array![1.0, 2.0].into_dyn());
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.mul(a, b);
        let loss = tape.sum(s);
        let grads = tape.backward(loss);
        tape.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.grad(id), &array![2.0, 4.0].into_dyn());
    }

    #[test]
    fn log_softmax_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![0.0, 0.0].into_dyn());
        let y = tape.log_softmax(x);
        for v in tape.value(y).iter() {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn distance_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![1.0, 2.0].into_dyn());
        let b = tape.leaf(array![1.0, 2.0].into_dyn());
        let d = tape.distance(a, b);
        assert_eq!(tape.scalar(d), 0.0);
        let grads = tape.backward(d);
        assert!(grads.get(a).is_none() || grads.get(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hinge_subgradient_at_kink_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant_scalar(0.25);
        let h = tape.hinge(x, 0.25);
        assert_eq!(tape.scalar(h), 0.0);
        let grads = tape.backward(h);
        assert_eq!(grads.get(x).unwrap().iter().next().copied(), Some(0.0));
    }
}
