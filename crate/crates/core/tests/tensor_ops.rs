use proptest::prelude::*;
use stn_icnn::gradcheck::{grad_check, randn, weighted_sum};
use stn_icnn::tensor::kernels::{grid_sample_forward, normalized_coord};
use stn_icnn::tensor::{Graph, Tensor, BN_EPS};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn identity_grid(h: usize, w: usize) -> Tensor<f64> {
    let mut g = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            g.push(normalized_coord::<f64>(x, w));
            g.push(normalized_coord::<f64>(y, h));
        }
    }
    t(&[1, h, w, 2], &g)
}

#[test]
fn upsample_replicates_blocks() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = g.upsample_nearest(x, 2).unwrap();
    let expected = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(g.value(y).data(), &expected);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 4.0));

    let id = g.upsample_nearest(x, 1).unwrap();
    assert_eq!(g.value(id), g.value(x));
    assert!(g.upsample_nearest(x, 0).is_err());
}

#[test]
fn avgpool_counts_padding_in_divisor() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 1], &[0.9]));
    let y = g.avgpool2d(x).unwrap();
    assert!((g.value(y).data()[0] - 0.1).abs() < 1e-15);

    let c = g.constant(Tensor::full(vec![1, 1, 9, 9], 2.5));
    let y = g.avgpool2d(c).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 5, 5]);
    // output (2,2) reads input rows/cols 3..=5: all interior
    assert!((g.value(y).data()[2 * 5 + 2] - 2.5).abs() < 1e-12);
}

#[test]
fn maxpool_routes_gradient_to_argmax() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 4], &[1., 5., 2., 2., 3., 0., 7., 2.]), true);
    let y = g.maxpool2d(x, false).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 7.0]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
}

#[test]
fn elementwise_definitions() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    let z = g.constant(t(&[1], &[0.0]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);

    let l = g.constant(Tensor::full(vec![2, 7, 3, 3], 1.3));
    let p = g.softmax_channels(l).unwrap();
    for v in g.value(p).data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }
}

#[test]
fn linear_identity_passes_through() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let w = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let b = g.constant(Tensor::zeros(vec![3]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn concat_requires_matching_extents() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let b = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let c = g.constant(Tensor::zeros(vec![1, 3, 5, 4]));
    let ab = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(ab), &[1, 5, 4, 4]);
    assert!(g.concat(&[a, c], 1).is_err());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let p = g.leaf(t(&[1], &[4.0]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    assert!(grads.get(p).is_none());

    let v = g.constant(t(&[2], &[1.0, 2.0]));
    assert!(g.backward(v).is_err());
}

#[test]
fn conv_relu_sum_chain_matches_finite_differences() {
    let x = randn(&[2, 2, 5, 6], 1);
    let w = randn(&[3, 2, 3, 3], 2);
    let b = randn(&[3], 3);
    let err = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            let r = g.relu(y);
            Ok(g.sum(r))
        },
        &[x, w, b],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn linear_grad_check_is_tight() {
    let err = grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, 9)
        },
        &[randn(&[3, 4], 4), randn(&[2, 4], 5), randn(&[2], 6)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn batchnorm_train_standardizes_and_eval_with_unit_stats_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[4, 3, 5, 5], 11).map(|v| 3.0 * v + 1.5));
    let gamma = g.constant(Tensor::full(vec![3], 1.0));
    let beta = g.constant(Tensor::zeros(vec![3]));
    let (y, _, _) = g.batchnorm_train(x, gamma, beta, BN_EPS).unwrap();
    let d = g.value(y).data();
    let plane = 25;
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|b| d[(b * 3 + c) * plane..(b * 3 + c + 1) * plane].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let e = g.batchnorm_eval(x, gamma, beta, &[0.0; 3], &[1.0; 3], BN_EPS).unwrap();
    assert!(g.value(e).max_abs_diff(g.value(x)).unwrap() < 1e-5 * 12.0);
}

#[test]
fn grid_sample_identity_and_integer_grids_are_exact() {
    let img = randn(&[1, 2, 6, 7], 21);
    let out = grid_sample_forward(&img, &identity_grid(6, 7)).unwrap();
    assert_eq!(out, img);

    // every source position lands on pixel (x+1, y+2)
    let mut grid = Vec::new();
    for y in 0..3 {
        for x in 0..4 {
            grid.push(normalized_coord::<f64>(x + 1, 7));
            grid.push(normalized_coord::<f64>(y + 2, 6));
        }
    }
    let out = grid_sample_forward(&img, &t(&[1, 3, 4, 2], &grid)).unwrap();
    for c in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(out.data()[(c * 3 + y) * 4 + x], img.data()[(c * 6 + y + 2) * 7 + x + 1]);
            }
        }
    }
}

#[test]
fn grid_sample_reproduces_linear_ramp() {
    let (h, w) = (9, 11);
    let ramp: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| x as f64 + 2.0 * y as f64)).collect();
    let img = t(&[1, 1, h, w], &ramp);
    let pts = [(0.3, 0.7), (-0.41, 0.12), (0.999, -0.999), (0.05, 0.95)];
    let grid: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
    let out = grid_sample_forward(&img, &t(&[1, 1, 4, 2], &grid)).unwrap();
    for (i, &(gx, gy)) in pts.iter().enumerate() {
        let (px, py) = ((gx + 1.0) / 2.0 * (w - 1) as f64, (gy + 1.0) / 2.0 * (h - 1) as f64);
        assert!((out.data()[i] - (px + 2.0 * py)).abs() < 1e-12);
    }
    let bad = Tensor::<f64>::zeros(vec![1, 2, 2, 3]);
    assert!(grid_sample_forward(&img, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooling_and_conv_shapes_follow_closed_form(b in 1usize..3, c in 1usize..4, h in 1usize..12, w in 1usize..12, f in 1usize..4) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![b, c, h, w], 0.5));
        let k = g.constant(Tensor::full(vec![2, c, 3, 3], 0.1));
        let conv = g.conv2d(x, k, None).unwrap();
        let avg = g.avgpool2d(x).unwrap();
        let max = g.maxpool2d(x, true).unwrap();
        let up = g.upsample_nearest(x, f).unwrap();
        prop_assert_eq!(g.shape(conv), &[b, 2, h, w]);
        prop_assert_eq!(g.shape(avg), &[b, c, h.div_ceil(2), w.div_ceil(2)]);
        prop_assert_eq!(g.shape(max), &[b, c, h.div_ceil(2), w.div_ceil(2)]);
        prop_assert_eq!(g.shape(up), &[b, c, f * h, f * w]);
    }

    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-60.0f64..60.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 2, 2], &vals));
        let p = g.softmax_channels(x).unwrap();
        let d = g.value(p).data();
        for i in 0..4 {
            let s: f64 = (0..3).map(|c| d[c * 4 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!((0..3).all(|c| d[c * 4 + i] >= 0.0));
        }
    }

    #[test]
    fn grid_sample_is_linear_in_the_image(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = randn(&[1, 2, 5, 6], seed);
        let y = randn(&[1, 2, 5, 6], seed + 1);
        let grid = randn(&[1, 4, 3, 2], seed + 2).map(|v| v * 0.8);
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = grid_sample_forward(&t(&[1, 2, 5, 6], &mix), &grid).unwrap();
        let sx = grid_sample_forward(&x, &grid).unwrap();
        let sy = grid_sample_forward(&y, &grid).unwrap();
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - (a * sx.data()[i] + b * sy.data()[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(randn(&[2, 3, 6, 6], seed), true);
            let w = g.leaf(randn(&[4, 3, 3, 3], seed + 1), true);
            let y = g.conv2d(x, w, None).unwrap();
            let p = g.maxpool2d(y, true).unwrap();
            let s = g.sum(p);
            let grads = g.backward(s).unwrap();
            (g.value(p).clone(), grads.get(w).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(ga.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
