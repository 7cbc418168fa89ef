use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// `sum(r * x)` for a fixed random `r`, so every output element gets a
/// distinct upstream gradient.
struct Project {
    r: Tensor<f64>,
}

impl Backward<f64> for Project {
    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>, _: &[bool]) -> Vec<Option<Tensor<f64>>> {
        let g = grad.item();
        vec![Some(self.r.map(|v| v * g))]
    }
}

fn project(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let value: f64 = r.data().iter().zip(g.value(x).data()).map(|(a, b)| a * b).sum();
    g.record(&[x], Tensor::scalar(value), Project { r })
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares reverse-mode gradients of `f` with central differences for
/// every input element.
fn check_gradients(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.variable(v.clone())).collect();
        let out = f(&mut g, &ids);
        let root = project(&mut g, out, 99);
        (g, ids, root)
    };
    let (g, ids, root) = eval(inputs);
    let grads = g.backward(root, |l| matches!(l, Leaf::Variable));
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.node(ids[k]).expect("gradient for every input");
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (gp, _, rp) = eval(&plus);
            let (gm, _, rm) = eval(&minus);
            let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                "input {k} element {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_gradients() {
    // Keep values away from the leaky-relu kink.
    let x = random(&[3, 4], 1).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_gradients(&[x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check_gradients(&[x.clone()], |g, v| g.relu(v[0]));
    check_gradients(&[x.clone()], |g, v| g.tanh(v[0]));
    check_gradients(&[x], |g, v| g.sigmoid(v[0]));
}

#[test]
fn structural_gradients() {
    let a = random(&[3, 4], 2);
    let b = random(&[3, 2], 3);
    check_gradients(&[a.clone(), b], |g, v| g.concat_cols(v[0], v[1]).unwrap());
    check_gradients(&[a.clone()], |g, v| g.slice_cols(v[0], 1, 2).unwrap());
    check_gradients(&[a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap());
    check_gradients(&[random(&[2, 3, 2, 2], 4)], |g, v| g.flatten(v[0]).unwrap());
    check_gradients(&[a.clone(), random(&[3, 4], 5)], |g, v| {
        let x = g.concat_cols(v[0], v[1]).unwrap();
        g.slice_cols(x, 2, 5).unwrap()
    });
}

#[test]
fn linear_and_sum_gradients() {
    let x = random(&[4, 3], 6);
    let w = random(&[5, 3], 7);
    let b = random(&[5], 8);
    check_gradients(&[x, w, b], |g, v| g.linear(v[0], v[1], v[2]).unwrap());
    let s = [random(&[], 9), random(&[], 10)];
    check_gradients(&s, |g, v| g.weighted_sum(&[(v[0], 2.5), (v[1], -0.5), (v[0], 1.0)]));
}

#[test]
fn linear_matches_loop_oracle() {
    let (x, w, b) = (random(&[2, 3], 11), random(&[4, 3], 12), random(&[4], 13));
    let mut g = Graph::new();
    let (nx, nw, nb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(nx, nw, nb).unwrap();
    for r in 0..2 {
        for o in 0..4 {
            let expect = b.data()[o] + (0..3).map(|i| x.data()[r * 3 + i] * w.data()[o * 3 + i]).sum::<f64>();
            assert!((g.value(y).data()[r * 4 + o] - expect).abs() < 1e-12);
        }
    }
}

/// Direct convolution by definition.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    for n in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (y, xx) = ((i * stride + ki) as isize - pad as isize, (j * stride + kj) as isize - pad as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.data()[((n * c + ic) * h + y as usize) * wd + xx as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_convolution() {
    for (stride, pad, size) in [(1, 0, 5), (2, 1, 8), (1, 1, 4), (2, 0, 6)] {
        let x = random(&[2, 3, size, size], 20 + size as u64);
        let w = random(&[4, 3, 3, 3], 30);
        let mut g = Graph::new();
        let (nx, nw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(nx, nw, stride, pad).unwrap();
        let expect = conv_oracle(&x, &w, stride, pad);
        assert_eq!(g.shape(y), expect.shape());
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn transposed_convolution_is_the_adjoint() {
    // <conv(x), y> == <x, conv_t(y)> with the kernel read as (C_in, C_out).
    let x = random(&[2, 3, 8, 8], 40);
    let w = random(&[5, 3, 4, 4], 41);
    let mut g = Graph::new();
    let (nx, nw) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(nx, nw, 2, 1).unwrap();
    let probe = random(g.shape(y), 42);
    let np = g.constant(probe.clone());
    let back = g.conv_transpose2d(np, nw, 2, 1).unwrap();
    assert_eq!(g.shape(back), x.shape());
    let lhs: f64 = g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(g.value(back).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn convolution_gradients() {
    check_gradients(&[random(&[2, 2, 6, 6], 50), random(&[3, 2, 4, 4], 51)], |g, v| {
        g.conv2d(v[0], v[1], 2, 1).unwrap()
    });
    check_gradients(&[random(&[2, 3, 2, 2], 52), random(&[3, 2, 4, 4], 53)], |g, v| {
        g.conv_transpose2d(v[0], v[1], 2, 1).unwrap()
    });
    check_gradients(&[random(&[1, 2, 1, 1], 54), random(&[2, 3, 4, 4], 55)], |g, v| {
        g.conv_transpose2d(v[0], v[1], 1, 0).unwrap()
    });
}

#[test]
fn batch_norm_gradients() {
    let x = random(&[3, 2, 2, 2], 60);
    let gamma = random(&[2], 61);
    let beta = random(&[2], 62);
    check_gradients(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
    });
    check_gradients(&[random(&[4, 3], 63), random(&[3], 64), random(&[3], 65)], |g, v| {
        g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
    });
    check_gradients(&[x, gamma, beta], |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap()
    });
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let x = random(&[4, 3, 2, 2], 70);
    let mut g = Graph::new();
    let nx = g.constant(x);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, moments) = g.batch_norm_train(nx, gamma, beta, 0.0).unwrap();
    let v = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..4).map(move |p| (b, p)))
            .map(|(b, p)| v.data()[(b * 3 + c) * 4 + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    assert!(moments.var_unbiased.iter().all(|&v| v > 0.0));
}

#[test]
fn backward_only_reaches_requested_leaves() {
    let mut g = Graph::new();
    let a = g.variable(random(&[2, 2], 80));
    let b = g.constant(random(&[2, 2], 81));
    let s = g.concat_cols(a, b).unwrap();
    let root = project(&mut g, s, 1);
    let grads = g.backward(root, |l| matches!(l, Leaf::Variable));
    assert!(grads.node(a).is_some());
    assert!(grads.node(b).is_none());
    let d = g.detach(a);
    let root = project(&mut g, d, 2);
    assert!(g.backward(root, |l| matches!(l, Leaf::Variable)).node(a).is_none());
}

#[test]
fn shared_inputs_accumulate_gradients() {
    // x used twice: d/dx sum(r * [x, x]) = r_left + r_right.
    let mut g = Graph::new();
    let x = g.variable(Tensor::full(&[1, 2], 1.0));
    let both = g.concat_cols(x, x).unwrap();
    let r = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let value: f64 = r.data().iter().zip(g.value(both).data()).map(|(a, b)| a * b).sum();
    let root = g.record(&[both], Tensor::scalar(value), Project { r });
    let grads = g.backward(root, |l| matches!(l, Leaf::Variable));
    assert_eq!(grads.node(x).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn tensor_round_trips_through_f32() {
    let t = random(&[3, 5], 90);
    let back: Tensor<f64> = t.cast::<f32>().cast();
    for (a, b) in t.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-7);
    }
    assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
}
