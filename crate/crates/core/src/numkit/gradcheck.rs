//! Central finite-difference checks for every differentiable tape operation.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumError, Tensor, Var};

pub(crate) fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Norm-wise relative error between analytic and central-difference gradients.
pub(crate) fn max_relative_error(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    const STEP: f64 = 1e-4;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let analytic = g.gradient(loss, &vars).unwrap();

    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };

    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[j] -= STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = grad.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = grad.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

/// Projects an output onto fixed random weights so every element matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn assert_ok(name: &str, err: f64) {
    assert!(err < 1e-4, "{name}: relative error {err:e}");
}

#[test]
fn linear_and_quadratic_cases() {
    let mut g = Graph::new();
    let p = g.param(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
    let s = g.sum(p);
    assert!(g.gradient(s, &[p]).unwrap()[0].data().iter().all(|&v| v == 1.0));
    let sq = g.mul(p, p).unwrap();
    let s2 = g.sum(sq);
    let grad = &g.gradient(s2, &[p]).unwrap()[0];
    for (gv, pv) in grad.data().iter().zip(g.value(p).data()) {
        assert_eq!(*gv, 2.0 * pv);
    }
}

#[test]
fn unregistered_parameter_is_rejected() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones(&[2]));
    let s = g.sum(c);
    assert!(matches!(g.gradient(s, &[c]), Err(NumError::UnregisteredParameter { .. })));

    let mut other = Graph::new();
    let foreign = other.param(Tensor::ones(&[2]));
    assert!(matches!(g.gradient(s, &[foreign]), Err(NumError::UnregisteredParameter { .. })));

    let p = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.gradient(p, &[p]), Err(NumError::NotScalar { .. })));
}

#[test]
fn replayed_backward_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let a = g.param(random(&[3, 4], &mut rng));
    let b = g.param(random(&[4, 2], &mut rng));
    let c = g.matmul(a, b).unwrap();
    let s = g.softmax(c, 1).unwrap();
    let l = probe(&mut g, s, 2);
    let first = g.gradient(l, &[a, b]).unwrap();
    let second = g.gradient(l, &[a, b]).unwrap();
    assert_eq!(first, second);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    let s = random(&[1], &mut rng);
    assert_ok("add", max_relative_error(&[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        probe(g, y, 1)
    }));
    assert_ok("sub", max_relative_error(&[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        probe(g, y, 1)
    }));
    assert_ok("mul", max_relative_error(&[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        probe(g, y, 1)
    }));
    assert_ok("add_row", max_relative_error(&[a.clone(), bias], |g, v| {
        let y = g.add_row(v[0], v[1]).unwrap();
        probe(g, y, 1)
    }));
    assert_ok("mul_scalar", max_relative_error(&[a.clone(), s], |g, v| {
        let y = g.mul_scalar(v[0], v[1]).unwrap();
        probe(g, y, 1)
    }));
    assert_ok("scale/mean", max_relative_error(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        let y = g.mul(y, v[0]).unwrap();
        g.mean(y)
    }));
    assert_ok("gelu", max_relative_error(&[a.clone()], |g, v| {
        let y = g.gelu(v[0]);
        probe(g, y, 3)
    }));
    assert_ok("sigmoid", max_relative_error(&[a.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 3)
    }));
    // keep relu inputs away from the kink
    let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    assert_ok("relu", max_relative_error(&[shifted], |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 3)
    }));
}

#[test]
fn matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[5, 2], &mut rng);
    let bt = random(&[4, 5], &mut rng);
    assert_ok("matmul", max_relative_error(&[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        probe(g, y, 4)
    }));
    assert_ok("matmul_nt", max_relative_error(&[a.clone(), bt], |g, v| {
        let y = g.matmul_nt(v[0], v[1]).unwrap();
        probe(g, y, 4)
    }));
    assert_ok("transpose/reshape", max_relative_error(&[a], |g, v| {
        let y = g.transpose(v[0]).unwrap();
        let y = g.reshape(y, &[15]).unwrap();
        probe(g, y, 4)
    }));
}

#[test]
fn normalizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    for axis in 0..3 {
        assert_ok("softmax", max_relative_error(&[x.clone()], |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            probe(g, y, 5)
        }));
    }
    assert_ok("layer_norm", max_relative_error(&[x.clone(), gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        probe(g, y, 5)
    }));
    let m = random(&[3, 5], &mut rng);
    let allowed: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
    assert_ok("masked_softmax", max_relative_error(&[m], |g, v| {
        let y = g.masked_softmax(v[0], &allowed).unwrap();
        probe(g, y, 5)
    }));
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        assert_ok("conv2d", max_relative_error(&[x.clone(), k.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad).unwrap();
            probe(g, y, 6)
        }));
    }
    let y = random(&[3, 4, 4], &mut rng);
    assert_ok("add_channel", max_relative_error(&[y, b], |g, v| {
        let y = g.add_channel(v[0], v[1]).unwrap();
        probe(g, y, 6)
    }));
    for (h, w) in [(10, 10), (3, 2), (7, 4)] {
        assert_ok("bilinear_resize", max_relative_error(&[x.clone()], |g, v| {
            let y = g.bilinear_resize(v[0], h, w).unwrap();
            probe(g, y, 6)
        }));
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[4, 3], &mut rng);
    assert_ok("concat/slice_rows", max_relative_error(&[a.clone(), b.clone()], |g, v| {
        let c = g.concat(&[v[0], v[1]]).unwrap();
        let s = g.slice_rows(c, 1, 5).unwrap();
        probe(g, s, 7)
    }));
    assert_ok("concat_cols/slice_cols", max_relative_error(&[a.clone(), a.map(|x| x * 2.0)], |g, v| {
        let c = g.concat_cols(&[v[0], v[1]]).unwrap();
        let s = g.slice_cols(c, 2, 5).unwrap();
        probe(g, s, 7)
    }));
    assert_ok("gather_rows", max_relative_error(&[b], |g, v| {
        let s = g.gather_rows(v[0], &[3, 0, 3]).unwrap();
        probe(g, s, 7)
    }));
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&[4, 5], &mut rng);
    let targets = vec![0, 4, 2, 2];
    let weights = vec![1.0, 0.1, 1.0, 0.5];
    assert_ok("cross_entropy", max_relative_error(&[logits.clone()], |g, v| {
        g.cross_entropy(v[0], &targets, &weights).unwrap()
    }));
    let t = Rc::new((0..20).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    assert_ok("bce", max_relative_error(&[logits.clone()], |g, v| g.bce_with_logits(v[0], t.clone()).unwrap()));
    assert_ok("dice", max_relative_error(&[logits], |g, v| g.dice_loss(v[0], t.clone()).unwrap()));
}

#[test]
fn composite_matmul_softmax_layer_norm() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 6], &mut rng);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        assert_ok("composite", max_relative_error(&[x, w, gamma, beta], |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.softmax(h, 1).unwrap();
            let h = g.layer_norm(h, v[2], v[3], 1e-5).unwrap();
            probe(g, h, seed)
        }));
    }
}

#[test]
fn masked_softmax_rescues_empty_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0]).unwrap());
    let y = g.masked_softmax(x, &[false, true, false, false, false, false]).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..3], &[0.0, 1.0, 0.0]);
    for &w in &v[3..] {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}
