use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn check<F>(f: F, params: Vec<(&str, Tensor)>, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> crate::error::Result<Var>,
{
    let params: Vec<(String, Tensor)> = params.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let report = grad_check(f, &params, &GradCheckOptions { tol, ..Default::default() }).unwrap();
    assert!(report.passed(), "{report}");
}

// Weighted sum with fixed random weights turns any tensor into a scalar loss
// whose gradient exercises every output element.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = g.constant(rand_t(g.shape(x), seed));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::eye(2));
    let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_naive_loop() {
    let (a, b) = (rand_t(&[5, 7], 1), rand_t(&[7, 3], 2));
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert!(g.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient() {
    check(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            Ok(project(g, c, 9))
        },
        vec![("a", rand_t(&[3, 4], 3)), ("b", rand_t(&[4, 2], 4))],
        1e-6,
    );
}

#[test]
fn bmm_matches_per_batch_matmul_and_gradient() {
    let a = rand_t(&[3, 2, 4], 5);
    let b = rand_t(&[3, 5, 4], 6);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.bmm(va, vb, true).unwrap();
    for i in 0..3 {
        let ai = Tensor::matrix(2, 4, a.data()[i * 8..(i + 1) * 8].to_vec()).unwrap();
        let bi = Tensor::matrix(5, 4, b.data()[i * 20..(i + 1) * 20].to_vec()).unwrap();
        let mut h = Graph::new();
        let bt = h.constant(bi);
        let bt = h.transpose(bt).unwrap();
        let bt = h.value(bt).clone();
        let expect = naive_matmul(&ai, &bt);
        let got = &g.value(c).data()[i * 10..(i + 1) * 10];
        for (x, y) in got.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for trans in [false, true] {
        let bshape = if trans { [3, 5, 4] } else { [3, 4, 5] };
        check(
            move |g, p| {
                let c = g.bmm(p[0], p[1], trans)?;
                Ok(project(g, c, 11))
            },
            vec![("a", rand_t(&[3, 2, 4], 7)), ("b", rand_t(&bshape, 8))],
            1e-6,
        );
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(x).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let v = rand_t(&[7], 12);
    let x = g.constant(v.clone());
    let s = g.softmax(x).unwrap();
    let z: f64 = v.data().iter().map(|x| x.exp()).sum();
    for (got, x) in g.value(s).data().iter().zip(v.data()) {
        assert!((got - x.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_scalar() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.softmax(x), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_cross_entropy_gradient() {
    check(
        |g, p| {
            let ls = g.log_softmax(p[0])?;
            let picked = g.pick(ls, &[2, 0, 4])?;
            let m = g.mean(picked);
            Ok(g.scale(m, -1.0))
        },
        vec![("logits", rand_t(&[3, 5], 13))],
        1e-6,
    );
    check(
        |g, p| {
            let s = g.softmax(p[0])?;
            Ok(project(g, s, 14))
        },
        vec![("x", rand_t(&[4, 6], 15))],
        1e-6,
    );
}

#[test]
fn l1_loss_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.3, -1.0]));
    let l = g.l1_loss(x, x, L1Reduction::Mean).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let a = g.constant(Tensor::vector(vec![1.0, 3.0]));
    let b = g.constant(Tensor::vector(vec![2.0, 5.0]));
    let l = g.l1_loss(a, b, L1Reduction::Mean).unwrap();
    assert_eq!(g.value(l).item(), 1.5);
    let l = g.l1_loss(a, b, L1Reduction::Sum).unwrap();
    assert_eq!(g.value(l).item(), 3.0);
    let c = g.constant(Tensor::vector(vec![2.0]));
    assert!(g.l1_loss(a, c, L1Reduction::Mean).is_err());
}

#[test]
fn layer_norm_gradient() {
    check(
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-6)?;
            Ok(project(g, y, 16))
        },
        vec![
            ("x", rand_t(&[3, 5], 17)),
            ("gain", rand_t(&[5], 18)),
            ("bias", rand_t(&[5], 19)),
        ],
        1e-5,
    );
}

#[test]
fn elementwise_gradients() {
    let shape = [3, 4];
    check(
        |g, p| {
            let s = g.add(p[0], p[1])?;
            let d = g.sub(s, p[1])?;
            let d = g.sub(d, p[0])?;
            let m = g.mul(p[0], p[1])?;
            let m = g.add(m, d)?;
            let m = g.scale(m, 0.7);
            let b = g.bias_add(m, p[2])?;
            let r = g.relu(b);
            let e = g.gelu(b);
            let t = g.add(r, e)?;
            let t = g.transpose(t)?;
            Ok(project(g, t, 20))
        },
        vec![("a", rand_t(&shape, 21)), ("b", rand_t(&shape, 22)), ("bias", rand_t(&[4], 23))],
        1e-6,
    );
}

#[test]
fn structural_gradients() {
    check(
        |g, p| {
            let c = g.concat(&[p[0], p[1]], 1)?; // [2, 5, 3]
            let s = g.slice(c, 1, 1, 4)?; // [2, 3, 3]
            let q = g.permute(s, &[2, 0, 1])?; // [3, 2, 3]
            let r = g.reshape(q, &[6, 3])?;
            let sel = g.select_rows(r, &[5, 0, 0, 3])?;
            let sr = g.scale_rows(sel, p[2])?;
            let sa = g.sum_axis(sr, 0)?;
            let m = g.mean(r);
            let tot = project(g, sa, 24);
            let tot2 = g.add(tot, m)?;
            let l1 = g.l1_loss(sel, sr, L1Reduction::Mean)?;
            g.add(tot2, l1)
        },
        vec![
            ("a", rand_t(&[2, 2, 3], 25)),
            ("b", rand_t(&[2, 3, 3], 26)),
            ("rowscale", rand_t(&[4], 27)),
        ],
        1e-6,
    );
}

#[test]
fn concat_and_slice_values() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let r = g.concat(&[b, b], 0).unwrap();
    assert_eq!(g.shape(r), &[4, 2]);
    let s = g.slice(c, 1, 1, 3).unwrap();
    assert_eq!(g.value(s), g.value(b));
    assert!(g.slice(c, 1, 2, 2).is_err());
    assert!(g.concat(&[a, b], 0).is_err());
}

#[test]
fn backward_hand_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(w).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0]));
    let c = g.constant(Tensor::vector(vec![2.0]));
    let p = g.mul(w, c).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(w).unwrap().data(), &[2.0]);
}

#[test]
fn quadratic_grad_check_is_tight() {
    let params = vec![("w".to_string(), rand_t(&[6], 30))];
    let report = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        },
        &params,
        &GradCheckOptions {
            tol: 1e-8,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn corrupted_gradient_is_caught_and_named() {
    let params = vec![("w".to_string(), rand_t(&[4], 31)), ("v".to_string(), rand_t(&[4], 32))];
    let report = grad_check(
        |g, p| {
            let m = g.mul(p[0], p[1])?;
            Ok(g.sum(m))
        },
        &params,
        &GradCheckOptions {
            corrupt: Some(("v".into(), 2, 0.5)),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.worst().unwrap().name, "v");
    assert_eq!(report.worst().unwrap().worst_index, 2);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let w = g.param(rand_t(&[4, 6], 40));
        let x = g.constant(rand_t(&[3, 4], 41));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let s = g.softmax(h).unwrap();
        let l = project(&mut g, s, 42);
        g.backward(l).unwrap();
        g.grad(w).unwrap().clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest::proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
        rot in 0usize..20,
    ) {
        let t = Tensor::vector(xs.clone());
        let s = softmax_last(&t, "softmax").unwrap();
        let total: f64 = s.data().iter().sum();
        proptest::prop_assert!((total - 1.0).abs() < 1e-9);
        proptest::prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let k = rot % xs.len();
        let mut rotated = xs.clone();
        rotated.rotate_left(k);
        let sr = softmax_last(&Tensor::vector(rotated), "softmax").unwrap();
        let mut expect = s.data().to_vec();
        expect.rotate_left(k);
        for (a, b) in sr.data().iter().zip(&expect) {
            proptest::prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..500) {
        let params = vec![
            ("x".to_string(), rand_t(&[2, 3], seed)),
            ("w".to_string(), rand_t(&[3, 3], seed + 1)),
            ("g".to_string(), rand_t(&[3], seed + 2)),
            ("b".to_string(), rand_t(&[3], seed + 3)),
        ];
        let report = grad_check(
            |g, p| {
                let h = g.matmul(p[0], p[1])?;
                let h = g.layer_norm(h, p[2], p[3], 1e-6)?;
                let h = g.gelu(h);
                let h = g.bias_add(h, p[3])?;
                let s = g.log_softmax(h)?;
                Ok(project(g, s, seed + 4))
            },
            &params,
            &GradCheckOptions::default(),
        ).unwrap();
        proptest::prop_assert!(report.passed(), "{}", report);
    }
}

#[test]
fn kinks_are_reported_not_failed() {
    // the first element sits 3e-6 from the ReLU kink, inside one step
    let params = vec![("w".to_string(), Tensor::vector(vec![3e-6, 0.5, -0.7]))];
    let f = |g: &mut Graph, p: &[Var]| {
        let r = g.relu(p[0]);
        let sq = g.mul(r, r)?;
        let s = g.sum(sq);
        let lin = g.sum(r);
        g.add(s, lin)
    };
    let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.kinks, vec![("w".to_string(), 0)]);
    assert!(report.to_string().contains("skipped 1 element(s) at kinks: w[0]"));

    let strict = GradCheckOptions { kink_tol: 0.0, ..Default::default() };
    assert!(!grad_check(f, &params, &strict).unwrap().passed());

    let corrupt = GradCheckOptions { corrupt: Some(("w".into(), 0, 0.3)), ..Default::default() };
    let r = grad_check(f, &params, &corrupt).unwrap();
    assert!(!r.passed() && r.kinks.is_empty(), "{r}");
}
