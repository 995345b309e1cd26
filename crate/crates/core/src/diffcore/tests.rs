use super::*;
use crate::error::Error;
use crate::gradcheck::{check, readout, FdConfig};
use crate::seeded_rng;
use proptest::prelude::*;
use rand::Rng;

fn t(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(dims, data.to_vec()).unwrap()
}

#[test]
fn linear_identity_and_bias() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let x0 = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let w2 = g.constant(t(&[2, 2], &[5.0, -1.0, 2.0, 7.0]));
    let b2 = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.linear(x0, w2, Some(b2)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = seeded_rng(3);
    let xs: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ws: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bs = [0.25, -0.5];
    let mut expect = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = bs[j];
            for k in 0..4 {
                acc += xs[i * 4 + k] * ws[k * 2 + j];
            }
            expect[i * 2 + j] = acc;
        }
    }
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 4], &xs));
    let w = g.constant(t(&[4, 2], &ws));
    let b = g.constant(t(&[2], &bs));
    let y = g.linear(x, w, Some(b)).unwrap();
    for (a, e) in g.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn linear_shape_error_names_dims() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    match g.linear(x, w, None) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
    let y = g.softmax(x).unwrap();
    let v = g.value(y).data();
    for c in 0..3 {
        assert!((v[c] - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-12 && v[5] < 1e-12);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|a| a.exp()).sum();
    for (i, a) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((v[6 + i] - a.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-700.0f64..700.0, 1..12)) {
        let mut g = Graph::new();
        let n = row.len();
        let x = g.constant(Tensor::new(&[1, n], row).unwrap());
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bilinear_is_linear_between_lattice_points(i in 0usize..3, j in 0usize..3, f in 0.0f64..1.0) {
        let map = Tensor::from_fn(&[4, 4, 2], |k| ((k * 37) % 11) as f64 - 5.0);
        let sample = |y: f64, x: f64| {
            let mut g = Graph::new();
            let m = g.constant(map.clone());
            let p = g.constant(t(&[2], &[y, x]));
            let s = g.bilinear_sample(m, p).unwrap();
            g.value(s).data().to_vec()
        };
        let a = sample(i as f64, j as f64);
        let b = sample(i as f64, j as f64 + 1.0);
        let mid = sample(i as f64, j as f64 + f);
        for c in 0..2 {
            prop_assert!((mid[c] - ((1.0 - f) * a[c] + f * b[c])).abs() < 1e-12);
        }
        let b = sample(i as f64 + 1.0, j as f64);
        let mid = sample(i as f64 + f, j as f64);
        for c in 0..2 {
            prop_assert!((mid[c] - ((1.0 - f) * a[c] + f * b[c])).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_examples() {
    let map = Tensor::from_fn(&[3, 4, 2], |k| k as f64 * 0.5 + 1.0);
    let at = |y: f64, x: f64| {
        let mut g = Graph::new();
        let m = g.constant(map.clone());
        let p = g.constant(t(&[2], &[y, x]));
        let s = g.bilinear_sample(m, p).unwrap();
        g.value(s).data().to_vec()
    };
    let px = |i: usize, j: usize| map.data()[(i * 4 + j) * 2..(i * 4 + j) * 2 + 2].to_vec();
    assert_eq!(at(1.0, 2.0), px(1, 2));
    let mid = at(2.0, 1.5);
    let (a, b) = (px(2, 1), px(2, 2));
    assert_eq!(mid, vec![(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
    assert_eq!(at(-3.0, 1.0), vec![0.0, 0.0]);
    assert_eq!(at(1.0, 9.5), vec![0.0, 0.0]);
}

#[test]
fn backward_of_simple_reductions() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn backward_requires_scalar_and_zeroes_unused() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let unused = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get_or_zeros(unused).data(), &[0.0; 3]);
}

/// Builds a composite of the differentiable ops and checks it against
/// central differences.
fn composite(g: &mut Graph, b: &Bound, ids: &[ParamId], readout_w: &Tensor) -> crate::Result<Var> {
    let x = b.var(ids[0]);
    let w = b.var(ids[1]);
    let bias = b.var(ids[2]);
    let map = b.var(ids[3]);
    let coord = b.var(ids[4]);
    let h = g.linear(x, w, Some(bias))?;
    let h = g.relu(h);
    let s = g.sin(h);
    let c = g.cos(h);
    let hc = g.concat(&[s, c], 1)?;
    let p = g.softmax(hc)?;
    let q = g.sigmoid(hc);
    let pq = g.mul(p, q)?;
    let samp = g.bilinear_sample(map, coord)?;
    let samp = g.reshape(samp, &[1, 3])?;
    let tiled = g.gather_rows(samp, vec![0, 0, 0])?;
    let tiled = g.concat(&[tiled, tiled], 1)?;
    let mixed = g.add(pq, tiled)?;
    let r = readout(g, mixed, readout_w)?;
    let m = g.mean(h);
    g.add(r, m)
}

#[test]
fn composite_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        ids.push(store.add("x", crate::gradcheck::random_tensor(&[3, 4], 1.0, &mut rng)).unwrap());
        ids.push(store.add("w", crate::gradcheck::random_tensor(&[4, 3], 1.0, &mut rng)).unwrap());
        ids.push(store.add("b", crate::gradcheck::random_tensor(&[3], 0.5, &mut rng)).unwrap());
        ids.push(store.add("map", crate::gradcheck::random_tensor(&[4, 5, 3], 1.0, &mut rng)).unwrap());
        let c = [rng.gen_range(0.1..2.9), rng.gen_range(0.1..3.9)];
        ids.push(store.add("coord", t(&[2], &c)).unwrap());
        let rw = crate::gradcheck::random_tensor(&[3, 6], 1.0, &mut rng);
        let out = check(&store, |g, b| composite(g, b, &ids, &rw), FdConfig::default(), &mut rng).unwrap();
        assert!(out.max_rel_error < 1e-4, "seed {seed}: {out:?}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = seeded_rng(11);
        let mut g = Graph::new();
        let x = g.constant(crate::gradcheck::random_tensor(&[5, 7, 3], 1.0, &mut rng));
        let w = g.constant(crate::gradcheck::random_tensor(&[3, 3, 3, 4], 1.0, &mut rng));
        let b = g.constant(crate::gradcheck::random_tensor(&[4], 1.0, &mut rng));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let y = g.avg_pool2(y).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.dims(), &[2, 2, 4]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn pool_handles_odd_extents() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 1, 1], &[1.0, 3.0, 10.0]));
    let y = g.avg_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 10.0]);
}

fn store_of(params: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in params {
        s.add(n, t.clone()).unwrap();
    }
    s
}

#[test]
fn adamw_examples() {
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut store = store_of(&[("p", t(&[2], &[1.5, -2.0]))]);
    let mut state = AdamState::new(&store);
    opt.step(&mut store, &[Tensor::zeros(&[2])], &mut state, 0.1, &[1.0]).unwrap();
    assert_eq!(store.get(ParamId(0)).data(), &[1.5, -2.0]);

    let opt = AdamW {
        weight_decay: 0.01,
        ..AdamW::default()
    };
    let mut store = store_of(&[("p", t(&[2], &[1.5, -2.0]))]);
    let mut state = AdamState::new(&store);
    opt.step(&mut store, &[Tensor::zeros(&[2])], &mut state, 0.1, &[1.0]).unwrap();
    assert_eq!(store.get(ParamId(0)).data(), &[1.5 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
}

#[test]
fn adamw_matches_hand_recurrence() {
    // p0 = 0.5, g = 1, lr = 0.01, wd = 0.1, two steps
    let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64, 0.1f64);
    let mut p = 0.5f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for step in 1..=2 {
        p *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * 1.0;
        v = b2 * v + (1.0 - b2) * 1.0;
        let mh = m / (1.0 - b1.powi(step));
        let vh = v / (1.0 - b2.powi(step));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    let opt = AdamW {
        weight_decay: wd,
        ..AdamW::default()
    };
    let mut store = store_of(&[("p", t(&[1], &[0.5]))]);
    let mut state = AdamState::new(&store);
    for _ in 0..2 {
        opt.step(&mut store, &[t(&[1], &[1.0])], &mut state, lr, &[1.0]).unwrap();
    }
    assert!((store.get(ParamId(0)).item() - p).abs() < 1e-15);
    // first step of plain Adam on g=1 moves by lr
    assert!((p - 0.5).abs() > 0.0);
}

#[test]
fn adamw_rejects_non_positive_lr() {
    let mut store = store_of(&[("p", t(&[1], &[0.5]))]);
    let mut state = AdamState::new(&store);
    let err = AdamW::default().step(&mut store, &[t(&[1], &[1.0])], &mut state, 0.0, &[1.0]);
    assert!(matches!(err, Err(Error::Config(_))));
}
