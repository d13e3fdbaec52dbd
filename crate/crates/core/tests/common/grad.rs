//! Finite-difference checks of graph ops and of a whole network.

use rand::Rng;
use specklenn::autodiff::{Graph, Var};
use specklenn::embedding::EmbeddingNet;
use specklenn::network::{prepare_batch, EmbeddingNetConfig, Mode, Network};
use specklenn::triplet::{triplet_loss_graph, Triplet};
use specklenn::{Real, Tensor};

use super::{central_difference, randn, rel_err, rng};

pub type Build<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Var;

/// Checks d/dinputs of `Σ (op(inputs) − target)²`, differentiated by the
/// `T` graph, against central differences of the same forward ops run in
/// f64 at the `T`-rounded input point. Keeping the reference in f64 means
/// the comparison measures the backward pass rather than the cancellation
/// noise of a low-precision difference quotient.
pub fn check_op<T: Real>(
    build: &Build<T>,
    reference: &Build<f64>,
    inputs: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
    h: f64,
    tol: f64,
) -> f64 {
    let tensors: Vec<Tensor<T>> = inputs
        .iter()
        .map(|(s, d)| Tensor::new(s.clone(), d.iter().map(|&v| T::from_f64(v)).collect()).unwrap())
        .collect();
    let point: Vec<Tensor<f64>> = tensors.iter().map(Tensor::cast).collect();
    let forward = |ts: &[Tensor<f64>]| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = reference(&mut g, &vars);
        g.value(out).data().to_vec()
    };
    let out0 = forward(&point);
    let target = randn(&mut rng(seed), out0.len());

    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let tv = g.input(Tensor::new(shape, target.iter().map(|&v| T::from_f64(v)).collect()).unwrap());
    let d = g.sub(out, tv).unwrap();
    let sq = g.square(d);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (which, t) in point.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(vars[which]).unwrap().iter().map(|v| v.as_f64()).collect();
        let max_abs = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in 0..t.numel() {
            let numeric = central_difference(
                |p| {
                    let mut ts = point.clone();
                    ts[which] = Tensor::new(t.shape().to_vec(), p.to_vec()).unwrap();
                    forward(&ts).iter().zip(&target).map(|(o, tt)| (o - tt).powi(2)).sum()
                },
                t.data(),
                idx,
                h,
                |v| v,
                |v| v,
            );
            let e = rel_err(analytic[idx], numeric, 1e-2 * max_abs.max(1e-3));
            worst = worst.max(e);
            assert!(e < tol, "input {which} coord {idx}: analytic {} numeric {numeric} (rel {e:e})", analytic[idx]);
        }
    }
    worst
}

pub fn conv_case(seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut r = rng(seed);
    vec![
        (vec![2, 2, 7, 6], randn(&mut r, 2 * 2 * 42)),
        (vec![3, 2, 5, 5], randn(&mut r, 150).iter().map(|v| v * 0.3).collect()),
        (vec![3], randn(&mut r, 3)),
    ]
}

pub fn bn_case(seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut r = rng(seed);
    vec![
        (vec![3, 2, 3, 3], randn(&mut r, 54).iter().map(|v| 2.0 * v + 1.0).collect()),
        (vec![2], vec![1.3, 0.7]),
        (vec![2], vec![0.1, -0.4]),
    ]
}

pub fn build_conv<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Var {
    g.conv2d(v[0], v[1], Some(v[2])).unwrap()
}

pub fn build_bn_train<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Var {
    g.batch_norm_train(v[0], v[1], v[2], T::from_f64(1e-5)).unwrap().0
}

pub fn build_bn_eval<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Var {
    let m = [T::from_f64(0.3), T::from_f64(-0.2)];
    let s = [T::from_f64(1.7), T::from_f64(0.6)];
    g.batch_norm_eval(v[0], v[1], v[2], &m, &s, T::from_f64(1e-5)).unwrap()
}

pub fn build_linear_l2<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Var {
    let y = g.linear(v[0], v[1], v[2]).unwrap();
    g.l2_normalize(y).unwrap()
}

pub fn build_relu_pool<T: Real>(g: &mut Graph<T>, v: &[Var]) -> Var {
    let r = g.relu(v[0]);
    g.max_pool2d(r, 2).unwrap()
}

pub fn linear_case(seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut r = rng(seed);
    vec![(vec![3, 5], randn(&mut r, 15)), (vec![4, 5], randn(&mut r, 20)), (vec![4], randn(&mut r, 4))]
}

pub fn pool_case(seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
    // well-separated values keep ±h away from ties and the ReLU kink
    let mut r = rng(seed);
    let mut vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| (i as f64 - 70.0) * 0.05).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut r);
    let vals = vals.into_iter().map(|v| if v.abs() < 0.02 { v + 0.025 } else { v }).collect();
    vec![(vec![2, 2, 6, 6], vals)]
}


pub struct NetGradReport {
    pub worst: f64,
    pub coords: usize,
    pub triplets: usize,
}

/// Parameter gradients of the triplet loss through a small `T` embedding
/// network in train mode, checked against f64 central differences of the
/// same network on `per_param` random coordinates of every parameter.
/// Triplets whose hinge sits within `1e-3` of its kink are left out.
pub fn check_embedding_triplet<T: Real>(seed: u64, per_param: usize, h: f64, tol: f64) -> NetGradReport {
    const SIDE: usize = 20;
    const B: usize = 6;
    let alpha = 0.5;
    let cfg = EmbeddingNetConfig { input_size: SIDE, conv1_out_channels: 3, conv2_out_channels: 4, fc_hidden: 12, output_dim: 6, ..Default::default() };
    let net = EmbeddingNet::<T>::build(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let images: Vec<Vec<f32>> =
        (0..B).map(|i| (0..SIDE * SIDE).map(|_| r.random::<f32>().powi(3) * (20.0 + 15.0 * i as f32)).collect()).collect();
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    let x = prepare_batch::<T>(&refs, SIDE).unwrap();
    let x64: Tensor<f64> = x.cast();
    let base: Network<f64> = net.network().cast();

    let embed64 = |n: &Network<f64>| -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let vars = n.register_frozen(&mut g);
        let xi = g.input(x64.clone());
        let (out, _) = n.forward(&mut g, &vars, xi, Mode::Train).unwrap();
        let e = g.l2_normalize(out).unwrap();
        g.value(e).clone()
    };
    let e0 = embed64(&base);
    let d2 = |i: usize, j: usize| -> f64 { e0.row(i).iter().zip(e0.row(j)).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut triplets = Vec::new();
    for a in 0..B {
        for p in 0..B {
            for n in 0..B {
                if a != p && a != n && p != n && (alpha + d2(a, p) - d2(a, n)).abs() > 1e-3 {
                    triplets.push(Triplet { anchor: a, positive: p, negative: n });
                }
            }
        }
    }
    triplets.retain(|_| r.random_bool(0.1));
    assert!(!triplets.is_empty());
    let loss64 = |n: &Network<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars = n.register_frozen(&mut g);
        let xi = g.input(x64.clone());
        let (out, _) = n.forward(&mut g, &vars, xi, Mode::Train).unwrap();
        let e = g.l2_normalize(out).unwrap();
        let l = triplet_loss_graph(&mut g, e, &triplets, alpha).unwrap();
        g.value(l).item()
    };

    let mut g = Graph::<T>::new();
    let vars = net.network().register(&mut g);
    let xi = g.input(x);
    let (e, _) = net.forward(&mut g, &vars, xi, Mode::Train).unwrap();
    let l = triplet_loss_graph(&mut g, e, &triplets, T::from_f64(alpha)).unwrap();
    g.backward(l).unwrap();
    let grads = net.network().collect_grads(&g, &vars);

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (pi, (name, t)) in base.params().iter().enumerate() {
        let analytic: Vec<f64> = grads[pi].iter().map(|v| v.as_f64()).collect();
        let max_abs = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..per_param.min(t.numel()) {
            let idx = r.random_range(0..t.numel());
            let at = |delta: f64| {
                let mut n = base.clone();
                n.param_mut(name).unwrap().data_mut()[idx] += delta;
                loss64(&n)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let e = rel_err(analytic[idx], numeric, 1e-2 * max_abs.max(1e-6));
            worst = worst.max(e);
            coords += 1;
            assert!(e < tol, "{name}[{idx}]: analytic {} numeric {numeric} (rel {e:e})", analytic[idx]);
        }
    }
    NetGradReport { worst, coords, triplets: triplets.len() }
}
