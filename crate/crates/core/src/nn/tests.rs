use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const ACTS: [Activation; 4] = [Activation::Identity, Activation::Tanh, Activation::Elu, Activation::Relu];

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn net(seed: u64, sizes: &[usize], hidden: Activation, out: Activation) -> NetParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = NetParams::new(sizes, hidden, out, 1.0, &mut rng);
    for l in &mut n.layers {
        l.b = rand_mat(&mut rng, l.b.nrows(), 1) * 0.3;
    }
    n
}

/// Naive per-sample loops, no matrix library arithmetic.
fn oracle(net: &NetParams<f64>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in &net.layers {
        let mut z = vec![0.0; l.w.nrows()];
        for (i, zi) in z.iter_mut().enumerate() {
            let mut s = l.b[(i, 0)];
            for (j, hj) in h.iter().enumerate() {
                s += l.w[(i, j)] * hj;
            }
            *zi = match l.act {
                Activation::Identity => s,
                Activation::Tanh => s.tanh(),
                Activation::Elu => {
                    if s > 0.0 {
                        s
                    } else {
                        s.exp() - 1.0
                    }
                }
                Activation::Relu => s.max(0.0),
            };
        }
        h = z;
    }
    h
}

#[test]
fn forward_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, a) in ACTS.iter().enumerate() {
        let n = net(k as u64, &[4, 6, 3], *a, Activation::Tanh);
        let x = rand_mat(&mut rng, 4, 5);
        let y = forward(&n, &x).unwrap().y;
        for c in 0..5 {
            let o = oracle(&n, x.column(c).as_slice());
            for r in 0..3 {
                assert!((y[(r, c)] - o[r]).abs() < 1e-12);
            }
        }
        assert_eq!(n.eval(&x).unwrap(), y);
    }
}

#[test]
fn zero_and_identity_nets() {
    let z = NetParams::<f64>::zeros(&[3, 4, 2], &[Activation::Tanh, Activation::Identity]);
    let x = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64 - 1.5);
    assert_eq!(forward(&z, &x).unwrap().y, DMatrix::zeros(2, 2));
    let mut id = NetParams::<f64>::zeros(&[3, 3], &[Activation::Identity]);
    id.layers[0].w = DMatrix::identity(3, 3);
    assert_eq!(forward(&id, &x).unwrap().y, x);
}

#[test]
fn shape_mismatch_rejected() {
    let n = net(1, &[4, 3, 1], Activation::Tanh, Activation::Identity);
    assert!(matches!(forward(&n, &DMatrix::zeros(3, 2)), Err(NnError::Shape(_))));
    let mut p = forward(&n, &DMatrix::zeros(4, 2)).unwrap();
    assert!(backward(&n, &mut p, &DMatrix::zeros(1, 3)).is_err());
}

#[test]
fn reused_tape_is_an_error() {
    let n = net(2, &[2, 3, 1], Activation::Tanh, Activation::Identity);
    let mut p = forward(&n, &DMatrix::from_element(2, 1, 0.5)).unwrap();
    let dy = DMatrix::from_element(1, 1, 1.0);
    backward(&n, &mut p, &dy).unwrap();
    assert!(matches!(backward(&n, &mut p, &dy), Err(NnError::TapeReused)));
}

#[test]
fn zero_dy_gives_zero_gradients() {
    let n = net(3, &[3, 5, 2], Activation::Elu, Activation::Identity);
    let mut p = forward(&n, &DMatrix::from_element(3, 4, 0.2)).unwrap();
    let g = backward(&n, &mut p, &DMatrix::zeros(2, 4)).unwrap();
    assert!(g.params.iter().all(|t| t.iter().all(|v| *v == 0.0)));
    assert!(g.input.iter().all(|v| *v == 0.0));
}

#[test]
fn linear_net_input_gradient_is_transpose_product() {
    let n = net(4, &[3, 2], Activation::Identity, Activation::Identity);
    let x = DMatrix::from_element(3, 1, 0.7);
    let dy = DMatrix::from_column_slice(2, 1, &[0.25, -2.0]);
    let mut p = forward(&n, &x).unwrap();
    let g = backward(&n, &mut p, &dy).unwrap();
    assert_eq!(g.input, n.layers[0].w.transpose() * &dy);
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` over every parameter entry.
fn fd_params(n: &NetParams<f64>, f: &dyn Fn(&NetParams<f64>) -> f64) -> Vec<DMatrix<f64>> {
    let h = 1e-6;
    let mut out = Vec::new();
    let base = n.clone();
    for t in 0..base.tensors().len() {
        let shape = base.tensors()[t].shape();
        let mut g = DMatrix::zeros(shape.0, shape.1);
        for i in 0..g.len() {
            let mut p = base.clone();
            p.tensors_mut()[t][i] += h;
            let mut m = base.clone();
            m.tensors_mut()[t][i] -= h;
            g[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, a) in ACTS.iter().enumerate() {
        let n = net(20 + k as u64, &[3, 5, 4, 2], *a, Activation::Tanh);
        let x = rand_mat(&mut rng, 3, 6);
        let dy = rand_mat(&mut rng, 2, 6);
        let f = |p: &NetParams<f64>| p.eval(&x).unwrap().component_mul(&dy).sum();
        let mut pass = forward(&n, &x).unwrap();
        let g = backward(&n, &mut pass, &dy).unwrap();
        let fd = fd_params(&n, &f);
        let mut worst: f64 = 0.0;
        for (a, b) in g.params.iter().zip(&fd) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max(rel(*x, *y));
            }
        }
        assert!(worst < 1e-4, "{a:?}: {worst}");
    }
}

#[test]
fn input_gradient_norm_cases() {
    // constant output
    let mut c = NetParams::<f64>::zeros(&[3, 4, 1], &[Activation::Tanh, Activation::Identity]);
    c.layers[1].b[(0, 0)] = 2.0;
    let x = DMatrix::from_fn(3, 2, |i, j| i as f64 - j as f64);
    assert!(input_gradient_norm(&c, &x).unwrap().iter().all(|v| *v == 0.0));
    // linear D(x) = w·x
    let mut l = NetParams::<f64>::zeros(&[3, 1], &[Activation::Identity]);
    l.layers[0].w = DMatrix::from_row_slice(1, 3, &[3.0, -4.0, 12.0]);
    assert!(input_gradient_norm(&l, &x).unwrap().iter().all(|v| *v == 13.0));
    // random net against finite-difference Jacobian
    let n = net(5, &[3, 8, 1], Activation::Tanh, Activation::Identity);
    let norms = input_gradient_norm(&n, &x).unwrap();
    for (col, got) in norms.iter().enumerate() {
        let mut s = 0.0;
        for i in 0..3 {
            let mut p = x.column(col).clone_owned();
            let mut m = p.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let yp = n.eval(&DMatrix::from_column_slice(3, 1, p.as_slice())).unwrap()[(0, 0)];
            let ym = n.eval(&DMatrix::from_column_slice(3, 1, m.as_slice())).unwrap()[(0, 0)];
            s += ((yp - ym) / 2e-6).powi(2);
        }
        assert!(rel(*got, s.sqrt()) < 1e-4);
    }
}

#[test]
fn gradient_penalty_double_backprop_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (k, a) in [Activation::Tanh, Activation::Elu].iter().enumerate() {
        let n = net(40 + k as u64, &[4, 6, 5, 1], *a, Activation::Identity);
        let x = rand_mat(&mut rng, 4, 5);
        let penalty = |p: &NetParams<f64>| -> f64 {
            let norms = input_gradient_norm(p, &x).unwrap();
            norms.iter().map(|v| v * v).sum::<f64>() / norms.len() as f64
        };
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let vars = n.record(&mut tape, xi, 0).unwrap();
        let seed = tape.input(DMatrix::from_element(1, 5, 1.0));
        let gx = n.record_input_gradient(&mut tape, &vars, seed).unwrap();
        let sq = tape.square(gx);
        let per = tape.sum_rows(sq);
        let out = tape.mean(per);
        assert!((tape.value(out)[(0, 0)] - penalty(&n)).abs() < 1e-12);
        let g = tape.backward(out, DMatrix::from_element(1, 1, 1.0)).unwrap();
        let got = n.collect_grads(&g, 0);
        let fd = fd_params(&n, &penalty);
        for (ga, gb) in got.iter().zip(&fd) {
            for (x, y) in ga.iter().zip(gb.iter()) {
                assert!(rel(*x, *y) < 1e-4, "{a:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a0 = rand_mat(&mut rng, 3, 4);
    let b0 = rand_mat(&mut rng, 3, 4);
    let f = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
        let m = a.component_mul(b);
        let s = (&m + a - b) * 1.7;
        let t = s.add_scalar(-0.3).map(|v| v * v);
        t.row_sum().sum() / 12.0
    };
    let mut tape = Tape::new();
    let (a, b) = (tape.input(a0.clone()), tape.input(b0.clone()));
    let m = tape.mul(a, b).unwrap();
    let s1 = tape.add(m, a).unwrap();
    let s2 = tape.sub(s1, b).unwrap();
    let s = tape.scale(s2, 1.7);
    let t0 = tape.add_scalar(s, -0.3);
    let t = tape.square(t0);
    let r = tape.sum_rows(t);
    let tot = tape.sum(r);
    let out = tape.scale(tot, 1.0 / 12.0);
    assert!((tape.value(out)[(0, 0)] - f(&a0, &b0)).abs() < 1e-12);
    let g = tape.backward(out, DMatrix::from_element(1, 1, 1.0)).unwrap();
    for i in 0..a0.len() {
        let mut ap = a0.clone();
        ap[i] += 1e-6;
        let mut am = a0.clone();
        am[i] -= 1e-6;
        let fd = (f(&ap, &b0) - f(&am, &b0)) / 2e-6;
        assert!(rel(g.wrt(a).unwrap()[i], fd) < 1e-4);
        let mut bp = b0.clone();
        bp[i] += 1e-6;
        let mut bm = b0.clone();
        bm[i] -= 1e-6;
        let fd = (f(&a0, &bp) - f(&a0, &bm)) / 2e-6;
        assert!(rel(g.wrt(b).unwrap()[i], fd) < 1e-4);
    }
}

#[test]
fn single_precision_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = NetParams::<f32>::new(&[3, 4, 1], Activation::Tanh, Activation::Identity, 1.0, &mut rng);
    let x = DMatrix::<f32>::from_element(3, 2, 0.25);
    let mut p = forward(&n, &x).unwrap();
    let g = backward(&n, &mut p, &DMatrix::from_element(1, 2, 1.0f32)).unwrap();
    assert_eq!(g.params.len(), 4);
    let n64 = NetParams::<f64> {
        layers: n
            .layers
            .iter()
            .map(|l| Layer {
                w: l.w.map(|v| v as f64),
                b: l.b.map(|v| v as f64),
                act: l.act,
            })
            .collect(),
    };
    let y64 = n64.eval(&x.map(|v| v as f64)).unwrap();
    assert!((p.y[(0, 0)] as f64 - y64[(0, 0)]).abs() < 1e-5);
}
