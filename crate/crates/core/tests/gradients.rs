//! Central finite differences against tape gradients at 1e-4 relative tolerance.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use radkd::enhance::{enhancement_loss_graph, Enhancer, EnhancerConfig};
use radkd::features::{global_descriptor_graph, Backbone, BackboneConfig, FeatureDistillLoss, KlDistill, MseDistill, TransEnc};
use radkd::losses::graph;
use radkd_autograd::{central_differences, ParamId, ParamStore, Tape, Var};

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const COORDS: usize = 24;

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || n.sample(rng))
}

/// Distinct random (param, index) pairs, at least one per tensor when possible.
fn sample_coords(store: &ParamStore, ids: &[ParamId], count: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let total: usize = ids.iter().map(|&id| store.value(id).len()).sum();
    assert!(total >= count, "only {total} coordinates to sample from");
    let mut out: Vec<(ParamId, usize)> = Vec::new();
    for &id in ids.iter().cycle() {
        if out.len() >= count {
            break;
        }
        let idx = rng.random_range(0..store.value(id).len());
        if !out.contains(&(id, idx)) {
            out.push((id, idx));
        }
    }
    out
}

/// Binds everything in `store`, builds `f`, and compares gradients at the sampled coordinates.
fn check<F>(name: &str, store: &mut ParamStore, coords: &[(ParamId, usize)], f: F)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    check_with_step(name, store, coords, STEP, f)
}

fn check_with_step<F>(name: &str, store: &mut ParamStore, coords: &[(ParamId, usize)], step: f64, f: F)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    store.zero_grads();
    tape.accumulate_param_grads(&grads, store);
    let samples = central_differences(store, coords, step, |s| {
        let mut t = Tape::new();
        let o = f(&mut t, s);
        t.scalar(o)
    });
    assert!(samples.len() >= 20, "{name}: only {} coordinates", samples.len());
    let nonzero = samples.iter().filter(|s| s.analytic.abs() > 1e-9).count();
    assert!(nonzero * 2 >= samples.len(), "{name}: most sampled gradients vanish");
    for s in &samples {
        let err = s.relative_error(1e-7);
        assert!(
            err <= REL_TOL,
            "{name}: {}[{}] analytic {} numeric {} (err {err:e})",
            store.name(s.param),
            s.index,
            s.analytic,
            s.numeric
        );
    }
}

/// A fixed random linear functional of `v`, so every output coordinate matters.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(tape.shape(v), 1.0, &mut rng);
    let w = tape.leaf(w);
    let p = tape.mul(v, w);
    tape.sum(p)
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

/// Replaces every tensor with N(0, std) draws so no layer starts at zero.
fn randomize(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for id in all_ids(store) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = randn(&shape, std, rng);
    }
}

#[test]
fn enhancer_parameters_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let enh = Enhancer::new(
        EnhancerConfig {
            base_channels: 3,
            ..EnhancerConfig::default()
        },
        &mut store,
        "enh",
        &mut rng,
    );
    randomize(&mut store, 0.4, &mut rng);
    let x = store.insert("x", ArrayD::from_shape_simple_fn(IxDyn(&[1, 8, 8]), || rng.random_range(0.05..0.95)));
    let ids = all_ids(&store);
    let coords = sample_coords(&store, &ids, COORDS + ids.len(), &mut rng);
    check("enhancer", &mut store, &coords, |tape, s| {
        let xv = tape.param(s, x);
        let y = enh.forward(tape, s, xv);
        project(tape, y, 1)
    });
}

#[test]
fn backbone_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let bb = Backbone::new(
        BackboneConfig {
            stage_channels: vec![4, 6],
            extra_convs_per_stage: 1,
        },
        &mut store,
        "bb",
        &mut rng,
    );
    let ids = all_ids(&store);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 12, 12]), || rng.random_range(0.0..1.0));
    let coords = sample_coords(&store, &ids, COORDS, &mut rng);
    // A bias moves every unit of its channel, so the step stays well inside the ReLU kinks.
    check_with_step("backbone", &mut store, &coords, 1e-6, |tape, s| {
        let xv = tape.leaf(x.clone());
        let f = bb.forward(tape, s, xv);
        project(tape, f, 2)
    });
}

#[test]
fn trans_enc_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let te = TransEnc::new(6, &mut store, "te", &mut rng);
    randomize(&mut store, 0.3, &mut rng);
    let f = randn(&[6, 4, 4], 1.0, &mut rng);
    let coords = sample_coords(&store, &all_ids(&store), COORDS, &mut rng);
    check("trans_enc", &mut store, &coords, |tape, s| {
        let fv = tape.leaf(f.clone());
        let y = te.forward(tape, s, fv);
        project(tape, y, 3)
    });
}

#[test]
fn descriptor_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let f = store.insert("f", randn(&[3, 4, 4], 1.0, &mut rng));
    let coords = sample_coords(&store, &[f], COORDS, &mut rng);
    check("descriptor", &mut store, &coords, |tape, s| {
        let fv = tape.param(s, f);
        let d = global_descriptor_graph(tape, fv).unwrap();
        project(tape, d, 4)
    });
}

/// `n` unit descriptors on the tape from raw parameters.
fn unit_params(tape: &mut Tape, s: &ParamStore, ids: &[ParamId]) -> Vec<Var> {
    ids.iter()
        .map(|&id| {
            let v = tape.param(s, id);
            tape.l2_normalize(v)
        })
        .collect()
}

fn unit_values(store: &ParamStore, id: ParamId) -> Vec<f64> {
    let v = store.value(id);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Redraws descriptor parameters until `ok` says every hinge is well away from its kink.
fn descriptors_away_from_kinks(
    n: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
    ok: impl Fn(&ParamStore, &[ParamId]) -> bool,
) -> (ParamStore, Vec<ParamId>) {
    loop {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = (0..n).map(|i| store.insert(format!("g{i}"), randn(&[dim], 1.0, rng))).collect();
        if ok(&store, &ids) {
            return (store, ids);
        }
    }
}

#[test]
fn triplet_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let margin = 0.3;
    let (mut store, ids) = descriptors_away_from_kinks(6, 5, &mut rng, |s, ids| {
        let v: Vec<Vec<f64>> = ids.iter().map(|&i| unit_values(s, i)).collect();
        let d_ap = dist(&v[0], &v[1]);
        let args: Vec<f64> = v[2..].iter().map(|n| d_ap - dist(&v[0], n) + margin).collect();
        args.iter().all(|a| a.abs() > 0.05) && args.iter().filter(|&&a| a > 0.0).count() >= 2
    });
    let coords = sample_coords(&store, &ids, COORDS, &mut rng);
    check("triplet", &mut store, &coords, |tape, s| {
        let g = unit_params(tape, s, &ids);
        graph::triplet(tape, g[0], g[1], &g[2..], margin)
    });
}

#[test]
fn response_distillation_r2r_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let margin = 0.01;
    let (mut store, ids) = descriptors_away_from_kinks(12, 4, &mut rng, |_, _| true);
    let coords = sample_coords(&store, &ids[6..], COORDS, &mut rng);
    check("rd_r2r", &mut store, &coords, |tape, s| {
        let g = unit_params(tape, s, &ids);
        let l = graph::rd_r2r(tape, &g[..6], &g[6..], margin);
        assert!(tape.scalar(l) > 0.05, "relational loss must sit above the margin");
        l
    });
    check("relational", &mut store, &coords, |tape, s| {
        let g = unit_params(tape, s, &ids);
        graph::relational(tape, &g[..6], &g[6..])
    });
}

#[test]
fn response_distillation_r2l_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let margin = 0.01;
    let (mut store, ids) = descriptors_away_from_kinks(3, 10, &mut rng, |s, ids| {
        let v: Vec<Vec<f64>> = ids.iter().map(|&i| unit_values(s, i)).collect();
        [dist(&v[0], &v[2]), dist(&v[1], &v[2]), dist(&v[1], &v[0])]
            .iter()
            .all(|d| (d - margin).abs() > 0.05)
    });
    let coords = sample_coords(&store, &ids, COORDS, &mut rng);
    check("rd_r2l", &mut store, &coords, |tape, s| {
        let g = unit_params(tape, s, &ids);
        graph::rd_r2l(tape, g[0], g[1], g[2], margin)
    });
}

#[test]
fn feature_distillation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut store = ParamStore::new();
    let f_t = randn(&[4, 3, 3], 1.0, &mut rng);
    let s = store.insert("f_s_t", randn(&[4, 3, 3], 1.0, &mut rng));
    let coords = sample_coords(&store, &[s], COORDS, &mut rng);
    for (name, loss) in [("kl", &KlDistill as &dyn FeatureDistillLoss), ("mse", &MseDistill)] {
        check(name, &mut store, &coords, |tape, st| {
            let t = tape.leaf(f_t.clone());
            let sv = tape.param(st, s);
            loss.build(tape, t, sv)
        });
    }
}

#[test]
fn enhancement_loss_gradient_and_mask_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let target = ArrayD::from_shape_simple_fn(IxDyn(&[1, 6, 6]), || rng.random_range(0.0..1.0));
    let mask = ArrayD::from_shape_simple_fn(IxDyn(&[1, 6, 6]), || if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let e = store.insert("e", ArrayD::from_shape_simple_fn(IxDyn(&[1, 6, 6]), || rng.random_range(0.0..1.0)));
    let coords = sample_coords(&store, &[e], COORDS, &mut rng);
    let build = |tape: &mut Tape, s: &ParamStore| {
        let t = tape.leaf(target.clone());
        let m = tape.leaf(mask.clone());
        let ev = tape.param(s, e);
        enhancement_loss_graph(tape, t, ev, m)
    };
    check("enhancement", &mut store, &coords, build);
    // Outside the mask the analytic gradient is exactly zero.
    for (g, m) in store.grad(e).iter().zip(mask.iter()) {
        if *m == 0.0 {
            assert_eq!(*g, 0.0);
        }
    }
}
