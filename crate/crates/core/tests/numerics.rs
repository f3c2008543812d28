use liveedit::numerics::{
    cross_entropy, elementwise, grad_check, kl_divergence, softmax, AttentionSpec, Coverage, Graph, Tensor, Unary,
    Var,
};
use liveedit::{Error, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(&Tensor::eye(2));
    let m = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
    let y = g.matmul(i, m).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

    let a = g.constant(&t(&[1, 2], &[1., 0.]));
    let b = g.constant(&t(&[2, 1], &[0., 5.]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f32>::uniform([3, 4], 1.0, &mut rng);
    let b = Tensor::<f32>::uniform([4, 2], 1.0, &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(&a), g.constant(&b));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0f64;
            for k in 0..4 {
                s += a.at(i, k) as f64 * b.at(k, j) as f64;
            }
            assert!((g.value(c).at(i, j) as f64 - s).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(&Tensor::zeros([2, 3]));
    let b = g.constant(&Tensor::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
    let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|x| x.exp()).sum();
    for (i, x) in [1f64, 2., 3.].iter().enumerate() {
        assert!((s.data()[i] - x.exp() / z).abs() < 1e-7);
    }
    // axis 0 normalises columns
    let s = softmax(&t(&[2, 2], &[0., 1., 0., 3.]), 0).unwrap();
    assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
    assert!((s.at(0, 1) + s.at(1, 1) - 1.0).abs() < 1e-15);
}

#[test]
fn elementwise_examples() {
    let r = elementwise(Unary::Relu, &t(&[3], &[-1., 0., 2.])).unwrap();
    assert_eq!(r.data(), &[0., 0., 2.]);
    assert_eq!(elementwise(Unary::Sigmoid, &t(&[1], &[0.])).unwrap().item(), 0.5);
    let s = elementwise(Unary::Sigmoid, &t(&[1], &[2.])).unwrap().item();
    assert!((s - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-12);
    assert!((s - 0.880797).abs() < 1e-6);
    assert!(matches!(
        elementwise(Unary::Log, &t(&[2], &[1., 0.])),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn kl_examples() {
    let p = t(&[1, 3], &[0.2, -1.0, 0.7]);
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let shifted = p.map(|x| x + 3.0);
    assert!(kl_divergence(&shifted, &p).unwrap().abs() < 1e-10);
    let k = kl_divergence(&t(&[1, 2], &[1., 0.]), &t(&[1, 2], &[0., 1.])).unwrap();
    let (a, b) = (1f64.exp() / (1.0 + 1f64.exp()), 1.0 / (1.0 + 1f64.exp()));
    let oracle = a * (a / b).ln() + b * (b / a).ln();
    assert!((k - oracle).abs() < 1e-7);
    assert!(kl_divergence(&t(&[1, 2], &[1., 0.]), &t(&[1, 3], &[0., 1., 2.])).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut l = vec![0.0; 4];
    l[2] = 1000.0;
    assert!(cross_entropy(&t(&[1, 4], &l), &[2]).unwrap() < 1e-12);
    let u = cross_entropy(&t(&[1, 4], &[0.; 4]), &[1]).unwrap();
    assert!((u - 4f64.ln()).abs() < 1e-12);
    assert!((u - 1.386294).abs() < 1e-6);

    let logits = t(&[2, 3], &[0.3, -0.2, 1.1, 2.0, 0.5, -1.0]);
    let targets = [2, 0];
    let mut oracle = 0.0;
    for (i, &tg) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        oracle += -(row[tg].exp() / z).ln();
    }
    oracle /= 2.0;
    assert!((cross_entropy(&logits, &targets).unwrap() - oracle).abs() < 1e-6);
    assert!(matches!(
        cross_entropy(&logits, &[3, 0]),
        Err(Error::OutOfRange { .. })
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&t(&[3], &[1., -2., 0.5]));
    let s = g.sum(x).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[1., 1., 1.]);

    let mut g = Graph::<f64>::new();
    let x = g.param(&t(&[3], &[1., -2., 0.5]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let l = g.scale(s, 0.5).unwrap();
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get(x).unwrap().data(), &[1., -2., 0.5]);

    // non-scalar loss
    assert!(g.backward(x).is_err());
}

#[test]
fn leaf_gradient_accumulates_over_uses() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&t(&[1, 2], &[2., 3.]));
    let a = g.scale(x, 3.0).unwrap();
    let b = g.add(a, x).unwrap();
    let l = g.sum(b).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[4., 4.]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::<f32>::uniform([4, 6], 1.0, &mut rng);
    let w = Tensor::<f32>::uniform([6, 6], 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(&a);
        let wv = g.param(&w);
        let h = g.matmul(x, wv).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let l = g.cross_entropy(s, &[0, 1, 2, 3]).unwrap();
        g.backward(l).unwrap().get(wv).unwrap().clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn attention_single_key_broadcasts_value() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(&t(&[3, 2], &[1., 2., -1., 0., 5., 5.]));
    let k = g.constant(&t(&[1, 2], &[0.3, 0.4]));
    let v = g.constant(&t(&[1, 2], &[7., -8.]));
    let spec = AttentionSpec { groups: 1, heads: 1, causal: false, scale: 1.0 };
    let o = g.attention(q, k, v, spec).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(o).row(r), &[7., -8.]);
    }
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[4, 4]);
    let mut y = x.clone();
    for j in 0..4 {
        y.data_mut()[3 * 4 + j] += 1.0;
    }
    let run = |m: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(m);
        let spec = AttentionSpec { groups: 1, heads: 2, causal: true, scale: 0.5 };
        let o = g.attention(v, v, v, spec).unwrap();
        g.value(o).clone()
    };
    let (a, b) = (run(&x), run(&y));
    for r in 0..3 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(3), b.row(3));
}

/// Runs `build` on fresh leaves and compares against central differences.
fn fd_check(seed: u64, shapes: &[Vec<usize>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
    let f = |p: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = p.iter().map(|x| g.param(x)).collect();
        let l = build(&mut g, &vars)?;
        let gr = g.backward(l)?;
        let grads = vars.iter().zip(p).map(|(&v, x)| gr.get_or_zeros(v, x)).collect();
        Ok((g.value(l).item(), grads))
    };
    grad_check(f, &params, 1e-5, Coverage::All, &mut rng).unwrap().max_rel_err
}

/// A fixed random projection so every op's output feeds a scalar non-trivially.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let shape = g.shape(x).to_vec();
    let w = g.constant(&rand_t(&mut rng, &shape));
    let m = g.mul(x, w)?;
    g.sum(m)
}

#[test]
fn every_primitive_matches_finite_differences_on_20_seeds() {
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], Box::new(|g, v| g.matmul_t(v[0], v[1]))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_row", vec![vec![3, 2], vec![1, 2]], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("mul_scalar", vec![vec![2, 2], vec![1, 1]], Box::new(|g, v| g.mul_scalar(v[0], v[1]))),
        ("sigmoid", vec![vec![2, 3]], Box::new(|g, v| g.sigmoid(v[0]))),
        ("exp", vec![vec![2, 3]], Box::new(|g, v| g.exp(v[0]))),
        ("log_sigmoid", vec![vec![2, 3]], Box::new(|g, v| g.log_sigmoid(v[0]))),
        (
            "log",
            vec![vec![2, 3]],
            Box::new(|g, v| {
                let e = g.exp(v[0])?;
                g.log(e)
            }),
        ),
        ("relu", vec![vec![2, 3]], Box::new(|g, v| g.relu(v[0]))),
        ("softmax_rows", vec![vec![2, 4]], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax_cols", vec![vec![3, 2]], Box::new(|g, v| g.softmax(v[0], 0))),
        ("rms_norm", vec![vec![3, 4], vec![1, 4]], Box::new(|g, v| g.rms_norm(v[0], v[1], 1e-5))),
        (
            "attention",
            vec![vec![4, 4], vec![6, 4], vec![6, 2]],
            Box::new(|g, v| {
                let spec = AttentionSpec { groups: 2, heads: 2, causal: false, scale: 0.7 };
                g.attention(v[0], v[1], v[2], spec)
            }),
        ),
        (
            "causal_attention",
            vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            Box::new(|g, v| {
                let spec = AttentionSpec { groups: 2, heads: 2, causal: true, scale: 0.5 };
                g.attention(v[0], v[1], v[2], spec)
            }),
        ),
        ("gather_rows", vec![vec![3, 2]], Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2]))),
        ("concat_rows", vec![vec![1, 2], vec![2, 2]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![vec![2, 1], vec![2, 3]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("narrow_rows", vec![vec![4, 2]], Box::new(|g, v| g.narrow(v[0], 0, 1, 2))),
        ("narrow_cols", vec![vec![2, 4]], Box::new(|g, v| g.narrow(v[0], 1, 1, 2))),
        ("expand", vec![vec![2, 2]], Box::new(|g, v| g.expand(v[0], 3, 2))),
        ("tile_rows", vec![vec![2, 3]], Box::new(|g, v| g.tile_rows(v[0], 3))),
        ("sum_axis0", vec![vec![3, 2]], Box::new(|g, v| g.sum_axis(v[0], 0))),
        ("sum_axis1", vec![vec![3, 2]], Box::new(|g, v| g.sum_axis(v[0], 1))),
        ("cross_entropy", vec![vec![3, 5]], Box::new(|g, v| g.cross_entropy(v[0], &[4, 0, 2]))),
        ("kl_rows", vec![vec![2, 4], vec![2, 4]], Box::new(|g, v| g.kl_rows(v[0], v[1]))),
    ];
    for (name, shapes, build) in &cases {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let e = fd_check(seed, shapes, |g, v| {
                let y = build(g, v)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    project(g, y, seed)
                }
            });
            worst = worst.max(e);
        }
        assert!(worst < 1e-4, "{name}: max rel err {worst}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let s = softmax(&Tensor::<f64>::from_f64([3, 4], &data).unwrap(), 1).unwrap();
        for r in 0..3 {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_is_nonnegative(p in proptest::collection::vec(-20.0f64..20.0, 6), q in proptest::collection::vec(-20.0f64..20.0, 6)) {
        let pt = Tensor::<f64>::from_f64([2, 3], &p).unwrap();
        let qt = Tensor::<f64>::from_f64([2, 3], &q).unwrap();
        prop_assert!(kl_divergence(&pt, &qt).unwrap() >= -1e-9);
        prop_assert!(kl_divergence(&pt, &pt).unwrap().abs() < 1e-10);
    }
}

#[test]
fn finite_check_flags_overflow() {
    let mut g = Graph::<f32>::new();
    g.set_check_finite(true);
    let x = g.constant(&Tensor::full([1, 1], 1000.0));
    assert!(matches!(g.exp(x), Err(Error::Numerical(_))));
}
