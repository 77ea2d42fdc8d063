//! Every tape op against central differences on random inputs.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use radkd_autograd::{central_differences, ParamId, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Tape, Var, Var) -> Var;

/// Inputs stay at least 0.1 from zero so ReLU kinks are never crossed by the step.
fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `v` to a scalar through fixed random weights.
fn project(tape: &mut Tape, v: Var) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = tape.shape(v).to_vec();
    let w = tape.leaf(input(&shape, &mut rng));
    let p = tape.mul(v, w);
    tape.sum(p)
}

fn check(name: &str, a: ArrayD<f64>, b: ArrayD<f64>, build: Build) -> Result<(), TestCaseError> {
    let mut store = ParamStore::new();
    let ia = store.insert("a", a);
    let ib = store.insert("b", b);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let (va, vb) = (tape.param(s, ia), tape.param(s, ib));
        let out = build(tape, va, vb);
        project(tape, out)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, &store);
    let grads = tape.backward(out);
    store.zero_grads();
    tape.accumulate_param_grads(&grads, &mut store);
    let coords: Vec<(ParamId, usize)> = [ia, ib]
        .iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |k| (id, k)))
        .collect();
    let samples = central_differences(&mut store, &coords, 1e-5, |s| {
        let mut t = Tape::new();
        let o = f(&mut t, s);
        t.scalar(o)
    });
    for s in samples {
        prop_assert!(s.relative_error(1e-6) < 1e-5, "{name}: {}[{}] {} vs {}", store.name(s.param), s.index, s.analytic, s.numeric);
    }
    Ok(())
}

const SAME_SHAPE: [(&str, Build); 13] = [
    ("add", |t, a, b| t.add(a, b)),
    ("sub", |t, a, b| t.sub(a, b)),
    ("mul", |t, a, b| t.mul(a, b)),
    ("scale", |t, a, _| t.scale(a, -1.7)),
    ("add_scalar", |t, a, _| t.add_scalar(a, 0.3)),
    ("relu", |t, a, _| t.relu(a)),
    ("hinge", |t, a, _| t.hinge(a, 0.05)),
    ("sigmoid", |t, a, _| t.sigmoid(a)),
    ("exp", |t, a, _| t.exp(a)),
    ("square", |t, a, b| {
        let s = t.square(a);
        t.mul(s, b)
    }),
    ("mean", |t, a, b| {
        let p = t.mul(a, b);
        t.mean(p)
    }),
    ("add_n", |t, a, b| {
        let ab = t.mul(a, b);
        t.add_n(&[a, b, ab])
    }),
    ("concat_channels", |t, a, b| t.concat_channels(a, b)),
];

const VECTOR: [(&str, Build); 4] = [
    ("l2_normalize", |t, a, _| t.l2_normalize(a)),
    ("log_softmax", |t, a, _| t.log_softmax(a)),
    ("distance", |t, a, b| t.distance(a, b)),
    ("reshape", |t, a, b| {
        let r = t.reshape(a, &[2, 3]);
        let s = t.reshape(b, &[2, 3]);
        let p = t.mul(r, s);
        t.flatten(p)
    }),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_and_structural_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, build) in SAME_SHAPE {
            check(name, input(&[2, 3, 3], &mut rng), input(&[2, 3, 3], &mut rng), build)?;
        }
        for (name, build) in VECTOR {
            check(name, input(&[6], &mut rng), input(&[6], &mut rng), build)?;
        }
        let p: ArrayD<f64> = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 3]), || rng.random_range(0.1..0.9));
        check("logit", p, input(&[1], &mut rng), |t, a, _| t.logit(a))?;
        check("upsample2x", input(&[2, 3, 3], &mut rng), input(&[1], &mut rng), |t, a, _| t.upsample2x(a))?;
    }

    #[test]
    fn convolution_weights_and_input(seed in any::<u64>(), stride in 1usize..3, padding in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = input(&[2, 6, 5], &mut rng);
        let w = input(&[3, 2, 3, 3], &mut rng);
        let build: Build = match (stride, padding) {
            (1, 0) => |t, x, w| conv(t, x, w, 1, 0),
            (1, _) => |t, x, w| conv(t, x, w, 1, 1),
            (_, 0) => |t, x, w| conv(t, x, w, 2, 0),
            _ => |t, x, w| conv(t, x, w, 2, 1),
        };
        check("conv2d", x, w, build)?;
    }
}

fn conv(t: &mut Tape, x: Var, w: Var, stride: usize, padding: usize) -> Var {
    let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -0.2, 0.05]).unwrap());
    t.conv2d(x, w, b, stride, padding)
}
