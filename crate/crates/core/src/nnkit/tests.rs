use std::collections::BTreeMap;

use rand::Rng;

use super::*;
use crate::error::Error;
use crate::rng;

fn t<S: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<S> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    t(shape, &v)
}

#[test]
fn dense_identity_and_relu() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0])).unwrap();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = g.constant(t(&[3, 3], &eye)).unwrap();
    let b = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let r = g.constant(t(&[2], &[-1.0, 2.0])).unwrap();
    let r = g.relu(r).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn conv_output_shape() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    let w = g.constant(Tensor::zeros(&[4, 1, 3, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4])).unwrap();
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 32, 32]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4, 1])).unwrap();
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 1]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn linear_map_gradient_is_transpose() {
    let mut g = Graph::<f64>::new();
    let x = g.input(random(&[1, 3], 1)).unwrap();
    let wt = random::<f64>(&[3, 2], 2);
    let w = g.constant(wt.clone()).unwrap();
    let y = g.matmul(x, w).unwrap();
    let seed = t(&[1, 2], &[0.7, -1.3]);
    let grads = g.backward_with_seed(y, seed).unwrap();
    let gx = grads.get(x).unwrap().data();
    for i in 0..3 {
        let expect = wt.data()[i * 2] * 0.7 - wt.data()[i * 2 + 1] * 1.3;
        assert!((gx[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn mse_of_equal_inputs_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(random(&[4, 2], 3)).unwrap();
    let l = g.mse(x, x).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_without_forward_fails() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1])).unwrap();
    let empty = Graph::<f64>::new();
    assert!(matches!(empty.backward(x), Err(Error::NoForward)));
}

#[test]
fn softplus_positive_with_logistic_gradient() {
    let xs = [-800.0, -30.0, -1.0, 0.0, 1e-3, 2.0, 30.0, 800.0];
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[xs.len()], &xs)).unwrap();
    let y = g.softplus(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v > 0.0 || v == 0.0 && (-800.0f64).exp() == 0.0));
    assert!((g.value(y).data()[7] - 800.0).abs() < 1e-12);
    let l = g.sum(y).unwrap();
    let gr = g.backward(l).unwrap();
    for (&xv, &gv) in xs.iter().zip(gr.get(x).unwrap().data()) {
        let logistic = 1.0 / (1.0 + (-xv as f64).exp());
        assert!((gv - logistic).abs() < 1e-12);
    }
    assert!(softplus(-30.0f64) > 0.0);
}

/// A composite touching every op, as a function of named parameters.
fn composite<S: Scalar>(store: &ParamStore<S>) -> (Graph<S>, Var) {
    let mut g = Graph::new();
    let img = g.constant(random(&[2, 2, 8, 8], 10)).unwrap();
    let w1 = g.param(store, "conv1.w").unwrap();
    let b1 = g.param(store, "conv1.b").unwrap();
    let c1 = g.conv2d(img, w1, b1, 1, 1).unwrap();
    let c1 = g.relu(c1).unwrap();
    let p1 = g.avg_pool2(c1).unwrap();
    let w2 = g.param(store, "conv2.w").unwrap();
    let b2 = g.param(store, "conv2.b").unwrap();
    let c2 = g.conv2d(p1, w2, b2, 2, 1).unwrap();
    let u1 = g.resize_bilinear(p1, 8, 8).unwrap();
    let u2 = g.resize_bilinear(c2, 8, 8).unwrap();
    let cat = g.concat_channels(&[u1, u2]).unwrap();
    let rows = g.nchw_to_rows(cat).unwrap();
    let mut r = rng::seeded(11);
    let taps: Vec<(usize, S)> = (0..12 * 4)
        .map(|_| (r.random_range(0..128), S::of(r.random_range(0.0..1.0))))
        .collect();
    let lat = g.gather_rows(rows, taps, 4).unwrap();
    let enc = g.constant(random(&[12, 3], 12)).unwrap();
    let h = g.concat_cols(enc, lat).unwrap();
    let wd = g.param(store, "fc.w").unwrap();
    let bd = g.param(store, "fc.b").unwrap();
    let h = g.dense(h, wd, bd).unwrap();
    let h2 = g.scale(h, S::of(0.5)).unwrap();
    let h = g.add(h, h2).unwrap();
    let h = g.softplus(h).unwrap();
    let h = g.mean_groups(h, 2).unwrap();
    let lg = g.param(store, "gain").unwrap();
    let gain = g.exp(lg).unwrap();
    let h = g.mul_cols(h, gain).unwrap();
    let weights: Vec<S> = (0..6).map(|i| S::of(0.3 + 0.1 * i as f64)).collect();
    let seg = g.segment_sum(h, weights, vec![0, 2, 6]).unwrap();
    let target = g.constant(random(&[2, 2], 13)).unwrap();
    let loss = g.mse(seg, target).unwrap();
    (g, loss)
}

fn composite_store<S: Scalar>() -> ParamStore<S> {
    let mut p = ParamStore::new();
    let mut r = rng::seeded(5);
    p.insert("conv1.w", glorot_uniform(&[3, 2, 3, 3], 18, 27, &mut r));
    p.insert("conv1.b", random(&[3], 6));
    p.insert("conv2.w", glorot_uniform(&[2, 3, 3, 3], 27, 18, &mut r));
    p.insert("conv2.b", random(&[2], 7));
    p.insert("fc.w", glorot_uniform(&[8, 2], 8, 2, &mut r));
    p.insert("fc.b", random(&[2], 8));
    p.insert("gain", random(&[2], 9));
    p
}

fn loss_of(store: &ParamStore<f64>) -> f64 {
    let (g, l) = composite(store);
    g.value(l).data()[0]
}

/// Max relative error between analytic and central-difference gradients.
fn gradcheck<S: Scalar>(h: f64) -> f64 {
    let store = composite_store::<S>();
    let (g, l) = composite(&store);
    let analytic = g.backward(l).unwrap().params();
    let scale = analytic
        .values()
        .flat_map(|t| t.to_f64_vec())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    // Differences are always taken in f64 at the same point so that the
    // check measures the S-precision kernels, not f32 roundoff in the loss.
    let reference = store.cast::<f64>();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let mut plus = reference.clone();
            let mut minus = reference.clone();
            let x = reference.get(name).unwrap().data()[i];
            plus.get_mut(name).unwrap().data_mut()[i] = x + h;
            minus.get_mut(name).unwrap().data_mut()[i] = x - h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = grad.data()[i].as_f64();
            let denom = a.abs().max(fd.abs()).max(1e-3 * scale);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}

#[test]
fn composite_gradient_matches_finite_differences_f64() {
    let err = gradcheck::<f64>(1e-5);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn composite_gradient_matches_finite_differences_f32() {
    let err = gradcheck::<f32>(1e-5);
    assert!(err <= 1e-2, "max relative error {err}");
}

#[test]
fn param_grads_cover_unused_parameters() {
    let mut store = composite_store::<f64>();
    store.insert("unused", Tensor::zeros(&[3]));
    let mut g = Graph::new();
    let a = g.param(&store, "fc.b").unwrap();
    let _ = g.param(&store, "unused").unwrap();
    let l = g.sum(a).unwrap();
    let grads = g.backward(l).unwrap().params();
    assert_eq!(grads["unused"].data(), &[0.0; 3]);
    assert_eq!(grads["fc.b"].data(), &[1.0; 2]);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = composite_store::<f64>();
    let before = store.clone();
    let zeros: BTreeMap<_, _> = store
        .iter()
        .map(|(n, p)| (n.to_string(), Tensor::zeros(p.shape())))
        .collect();
    store.accumulate_grads(&zeros).unwrap();
    let mut st = AdamState::new(0.005);
    adam_step(&mut store, &mut st).unwrap();
    for (n, p) in before.iter() {
        assert_eq!(store.get(n).unwrap(), p);
    }
}

#[test]
fn adam_unit_step_under_constant_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("p", t(&[3], &[0.0, 1.0, -2.0]));
    let g: BTreeMap<_, _> = [("p".to_string(), t(&[3], &[0.3, -5.0, 1e-3]))].into();
    let mut st = AdamState::new(0.005);
    let mut last = store.get("p").unwrap().clone();
    for step in 0..1000 {
        store.accumulate_grads(&g).unwrap();
        adam_step(&mut store, &mut st).unwrap();
        let now = store.get("p").unwrap().clone();
        if step == 999 {
            for (a, b) in now.data().iter().zip(last.data()) {
                let d = (a - b).abs();
                assert!((d - 0.005).abs() <= 0.05 * 0.005, "{d}");
            }
        }
        last = now;
    }
    assert!(store.grad("p").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(st.step, 1000);
    assert!(st.moments("p").is_some());
}

#[test]
fn adam_requires_gradients() {
    let mut store = composite_store::<f64>();
    let mut st = AdamState::default();
    assert_eq!(st.lr, 0.005);
    assert!(matches!(adam_step(&mut store, &mut st), Err(Error::MissingGradient(_))));
}

#[test]
fn accumulation_is_order_independent() {
    let parts: Vec<BTreeMap<String, Tensor<f64>>> = (0..16)
        .map(|i| {
            let mut r = rng::seeded(100 + i);
            let v: Vec<f64> = (0..32).map(|_| r.random_range(-1.0..1.0) * 10f64.powi(r.random_range(-8..8))).collect();
            [("w".to_string(), t(&[32], &v))].into()
        })
        .collect();
    let mut fwd = GradAccumulator::new();
    let mut rev = GradAccumulator::new();
    for p in &parts {
        fwd.add(p).unwrap();
    }
    for p in parts.iter().rev() {
        rev.add(p).unwrap();
    }
    let (a, b) = (fwd.finish::<f64>(1.0), rev.finish::<f64>(1.0));
    for (x, y) in a["w"].data().iter().zip(b["w"].data()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
    }
    assert_eq!(fwd.count(), 16);
}

#[test]
fn resize_and_pool_are_consistent() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 1, 4, 4], 20)).unwrap();
    let same = g.resize_bilinear(x, 4, 4).unwrap();
    assert_eq!(g.value(same).data(), g.value(x).data());
    let c = g.constant(Tensor::full(&[1, 2, 4, 4], 3.0)).unwrap();
    let p = g.avg_pool2(c).unwrap();
    let u = g.resize_bilinear(p, 4, 4).unwrap();
    assert!(g.value(u).data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
}
