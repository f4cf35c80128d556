use super::*;
use crate::oracle::{finite_diff_grad, relative_error};
use crate::rng::{CounterRng, Stream};

fn rand_tensor(rng: &mut CounterRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-scale, scale)).collect()).unwrap()
}

fn rand_box(rng: &mut CounterRng, shape: &[usize]) -> IntervalTensor<f64> {
    let c = rand_tensor(rng, shape, 1.0);
    let r = rand_tensor(rng, shape, 0.5).abs();
    IntervalTensor::from_center_radius(&c, &r).unwrap()
}

fn sample_in(rng: &mut CounterRng, iv: &IntervalTensor<f64>) -> Tensor<f64> {
    let data = iv
        .lower()
        .data()
        .iter()
        .zip(iv.upper().data())
        .map(|(&l, &u)| match rng.below(8) {
            0 => l,
            1 => u,
            _ => rng.uniform(l, u),
        })
        .collect();
    Tensor::new(iv.shape().to_vec(), data).unwrap()
}

fn rand_dense(rng: &mut CounterRng, out: usize, inp: usize) -> Layer<f64> {
    Layer::Dense(DenseLayer::new(rand_tensor(rng, &[out, inp], 1.0), rand_tensor(rng, &[out], 0.5)).unwrap())
}

fn rand_conv(rng: &mut CounterRng, c_out: usize, c_in: usize, k: usize, s: usize, p: usize) -> Layer<f64> {
    Layer::Conv2d(
        Conv2dLayer::new(rand_tensor(rng, &[c_out, c_in, k, k], 0.5), rand_tensor(rng, &[c_out], 0.2), (s, s), (p, p))
            .unwrap(),
    )
}

fn pool2() -> Layer<f64> {
    Layer::MaxPool2d(MaxPool2dLayer::new((2, 2), (2, 2)).unwrap())
}

#[test]
fn forward_examples() {
    let dense = Layer::Dense(DenseLayer::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 0.0]).unwrap());
    let (y, _) = dense.forward(&Tensor::vector(vec![1.0, 1.0])).unwrap();
    assert_eq!(y.data(), &[4.0, 7.0]);

    let ident = Layer::Conv2d(
        Conv2dLayer::new(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap(), Tensor::vector(vec![0.0]), (1, 1), (0, 0))
            .unwrap(),
    );
    let mut rng = CounterRng::new(0, Stream::Sampling);
    let x = rand_tensor(&mut rng, &[1, 4, 5], 3.0);
    assert_eq!(ident.apply(&x).unwrap(), x);

    let m = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(pool2().apply(&m).unwrap().data(), &[4.0]);
}

#[test]
fn forward_shape_error() {
    let dense = Layer::Dense(DenseLayer::from_rows(&[&[1.0, 2.0]], &[0.0]).unwrap());
    assert!(matches!(
        dense.apply(&Tensor::vector(vec![1.0, 2.0, 3.0])),
        Err(BtnError::LayerShape { kind: "dense", .. })
    ));
    let conv = Layer::Conv2d(
        Conv2dLayer::new(Tensor::<f64>::zeros(&[1, 2, 3, 3]), Tensor::zeros(&[1]), (1, 1), (1, 1)).unwrap(),
    );
    assert!(conv.apply(&Tensor::zeros(&[1, 4, 4])).is_err());
}

#[test]
fn backward_examples() {
    let dense = Layer::Dense(DenseLayer::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 0.0]).unwrap());
    let (_, cache) = dense.forward(&Tensor::vector(vec![1.0, 1.0])).unwrap();
    let (gx, gp) = dense.backward(&Tensor::vector(vec![1.0, 0.0]), &cache).unwrap();
    assert_eq!(gx.data(), &[1.0, 2.0]);
    assert_eq!(gp[0].data(), &[1.0, 1.0, 0.0, 0.0]);
    assert_eq!(gp[1].data(), &[1.0, 0.0]);

    let (_, cache) = Layer::<f64>::Relu.forward(&Tensor::vector(vec![-1.0, 2.0])).unwrap();
    let (gx, gp) = Layer::Relu.backward(&Tensor::vector(vec![5.0, 5.0]), &cache).unwrap();
    assert_eq!(gx.data(), &[0.0, 5.0]);
    assert!(gp.is_empty());

    let (_, cache) = Layer::<f64>::Relu.forward(&Tensor::vector(vec![0.0])).unwrap();
    let (gx, _) = Layer::Relu.backward(&Tensor::vector(vec![3.0]), &cache).unwrap();
    assert_eq!(gx.data(), &[0.0]);
}

#[test]
fn maxpool_ties_route_to_first_argmax() {
    let x = Tensor::from_f64(&[1, 2, 2], &[5.0, 5.0, 5.0, 1.0]).unwrap();
    let (_, cache) = pool2().forward(&x).unwrap();
    let (gx, _) = pool2().backward(&Tensor::from_f64(&[1, 1, 1], &[2.0]).unwrap(), &cache).unwrap();
    assert_eq!(gx.data(), &[2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn stale_cache_is_rejected() {
    let dense = Layer::Dense(DenseLayer::from_rows(&[&[1.0, 2.0]], &[0.0]).unwrap());
    let (_, relu_cache) = Layer::<f64>::Relu.forward(&Tensor::vector(vec![1.0])).unwrap();
    assert!(matches!(
        dense.backward(&Tensor::vector(vec![1.0]), &relu_cache),
        Err(BtnError::StaleCache(_))
    ));
    let (_, cache) = dense.forward(&Tensor::vector(vec![1.0, 1.0])).unwrap();
    assert!(matches!(
        dense.backward(&Tensor::vector(vec![1.0, 2.0]), &cache),
        Err(BtnError::StaleCache(_))
    ));
}

#[test]
fn interval_examples() {
    let dense = Layer::Dense(DenseLayer::from_rows(&[&[1.0, -1.0]], &[0.5]).unwrap());
    let iv = IntervalTensor::new(Tensor::vector(vec![0.0, 0.0]), Tensor::vector(vec![1.0, 1.0])).unwrap();
    let out = dense.interval_forward(&iv).unwrap();
    assert_eq!((out.lower().data()[0], out.upper().data()[0]), (-0.5, 1.5));

    let iv = IntervalTensor::new(Tensor::vector(vec![-1.0]), Tensor::vector(vec![2.0])).unwrap();
    let out = Layer::Relu.interval_forward(&iv).unwrap();
    assert_eq!((out.lower().data()[0], out.upper().data()[0]), (0.0, 2.0));

    let iv = IntervalTensor::new(
        Tensor::from_f64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap(),
        Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 5.0]).unwrap(),
    )
    .unwrap();
    let out = pool2().interval_forward(&iv).unwrap();
    assert_eq!((out.lower().data()[0], out.upper().data()[0]), (3.0, 5.0));
}

#[test]
fn weight_norm_examples() {
    let dense = Layer::Dense(DenseLayer::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, -4.0]], &[9.0, 9.0]).unwrap());
    let n = dense.weight_norms().unwrap();
    assert_eq!(n.l1_total, 10.0);
    assert_eq!(n.max_row_l1, 7.0);
    assert!(f64::abs(n.row_l2.data()[0] - 5f64.sqrt()) < 1e-15);
    assert_eq!(n.row_l2.data()[1], 5.0);

    let zero = Layer::Dense(DenseLayer::<f64>::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[3])).unwrap());
    let n = zero.weight_norms().unwrap();
    assert_eq!((n.l1_total, n.max_row_l1), (0.0, 0.0));
    assert_eq!(n.row_l2.data(), &[0.0, 0.0, 0.0]);

    let ones = Layer::Conv2d(
        Conv2dLayer::new(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::vector(vec![0.0]), (1, 1), (1, 1)).unwrap(),
    );
    assert_eq!(ones.weight_norms().unwrap().max_row_l1, 9.0);

    assert!(matches!(Layer::<f64>::Relu.weight_norms(), Err(BtnError::NonAffineLayer("relu"))));
    assert!(matches!(pool2().weight_norms(), Err(BtnError::NonAffineLayer("maxpool2d"))));
}

/// Sampled soundness: 10^4 (box, point) pairs per layer kind, zero violations.
#[test]
fn interval_forward_is_sound() {
    let mut rng = CounterRng::new(11, Stream::Sampling);
    let mut checked = 0;
    for trial in 0..100 {
        let (layer, shape): (Layer<f64>, Vec<usize>) = match trial % 4 {
            0 => (rand_dense(&mut rng, 5, 7), vec![7]),
            1 => (rand_conv(&mut rng, 2, 2, 3, 1, 1), vec![2, 5, 5]),
            2 => (Layer::Relu, vec![9]),
            _ => (pool2(), vec![2, 4, 4]),
        };
        let iv = rand_box(&mut rng, &shape);
        let out = layer.interval_forward(&iv).unwrap();
        for _ in 0..100 {
            let x = sample_in(&mut rng, &iv);
            assert!(out.contains(&layer.apply(&x).unwrap(), 1e-9).unwrap());
            checked += 1;
        }
    }
    assert_eq!(checked, 10_000);
}

/// The exact range of `Wx + b` over a box is attained at the corner that
/// follows the sign pattern of each row; enumerate all corners.
#[test]
fn dense_interval_is_exact_by_corner_enumeration() {
    let mut rng = CounterRng::new(12, Stream::Sampling);
    for trial in 0..30 {
        let inp = 1 + trial % 10;
        let layer = rand_dense(&mut rng, 3, inp);
        let iv = rand_box(&mut rng, &[inp]);
        let out = layer.interval_forward(&iv).unwrap();
        let mut lo = vec![f64::INFINITY; 3];
        let mut hi = vec![f64::NEG_INFINITY; 3];
        for mask in 0u32..(1 << inp) {
            let x: Vec<f64> = (0..inp)
                .map(|i| if mask >> i & 1 == 1 { iv.upper().data()[i] } else { iv.lower().data()[i] })
                .collect();
            let y = layer.apply(&Tensor::vector(x)).unwrap();
            for j in 0..3 {
                lo[j] = lo[j].min(y.data()[j]);
                hi[j] = hi[j].max(y.data()[j]);
            }
        }
        for j in 0..3 {
            assert!((out.lower().data()[j] - lo[j]).abs() < 1e-12);
            assert!((out.upper().data()[j] - hi[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_box_collapses_to_forward() {
    let mut rng = CounterRng::new(13, Stream::Sampling);
    let cases: Vec<(Layer<f64>, Vec<usize>)> = vec![
        (rand_dense(&mut rng, 4, 6), vec![6]),
        (rand_conv(&mut rng, 3, 2, 3, 1, 1), vec![2, 6, 6]),
        (rand_conv(&mut rng, 2, 1, 5, 2, 2), vec![1, 7, 7]),
        (Layer::Relu, vec![2, 3, 3]),
        (pool2(), vec![2, 4, 6]),
    ];
    for (layer, shape) in cases {
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let out = layer.interval_forward(&IntervalTensor::point(&x)).unwrap();
        let y = layer.apply(&x).unwrap();
        for ((l, u), v) in out.lower().data().iter().zip(out.upper().data()).zip(y.data()) {
            assert!((l - v).abs() <= 1e-12 && (u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn relu_and_pool_do_not_widen() {
    let mut rng = CounterRng::new(14, Stream::Sampling);
    for _ in 0..50 {
        let iv = rand_box(&mut rng, &[2, 4, 4]);
        let in_max = iv.widths().max_abs();
        let relu_out = Layer::Relu.interval_forward(&iv).unwrap();
        for (o, i) in relu_out.widths().data().iter().zip(iv.widths().data()) {
            assert!(o <= i);
        }
        let pool_out = pool2().interval_forward(&iv).unwrap();
        assert!(pool_out.widths().max_abs() <= in_max);
    }
}

/// Random linear probe `sum(a * y)` lets finite differences check a full
/// Jacobian-vector product.
fn probe(shape: &[usize], rng: &mut CounterRng) -> Tensor<f64> {
    rand_tensor(rng, shape, 1.0)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn set_flat(layer: &mut Layer<f64>, flat: &[f64]) {
    let mut off = 0;
    for p in layer.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn flat(layer: &Layer<f64>) -> Vec<f64> {
    layer.params().iter().flat_map(|p| p.data().to_vec()).collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(*a, *n);
        assert!(e < tol, "component {i}: analytic {a} vs numeric {n} (rel {e})");
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = CounterRng::new(15, Stream::Sampling);
    for &(s, p) in &[(1, 1), (2, 1), (1, 0)] {
        let layer = rand_conv(&mut rng, 3, 2, 3, s, p);
        let x = rand_tensor(&mut rng, &[2, 7, 7], 1.0);
        let (y, cache) = layer.forward(&x).unwrap();
        let a = probe(y.shape(), &mut rng);
        let (gx, gp) = layer.backward(&a, &cache).unwrap();

        let analytic: Vec<f64> = gp.iter().flat_map(|g| g.data().to_vec()).collect();
        let base = flat(&layer);
        let numeric = finite_diff_grad(
            |theta: &[f64]| {
                let mut l = layer.clone();
                set_flat(&mut l, theta);
                dot(&a, &l.apply(&x).unwrap())
            },
            &base,
            1e-5,
        )
        .unwrap();
        assert_close(&analytic, &numeric, 1e-6);

        let numeric_x = finite_diff_grad(
            |xs: &[f64]| dot(&a, &layer.apply(&Tensor::new(x.shape().to_vec(), xs.to_vec()).unwrap()).unwrap()),
            x.data(),
            1e-5,
        )
        .unwrap();
        assert_close(gx.data(), &numeric_x, 1e-6);
    }
}

#[test]
fn dense_relu_pool_input_gradients_match_finite_differences() {
    let mut rng = CounterRng::new(16, Stream::Sampling);
    let cases: Vec<(Layer<f64>, Vec<usize>)> = vec![
        (rand_dense(&mut rng, 4, 5), vec![5]),
        (Layer::Relu, vec![12]),
        (pool2(), vec![2, 4, 4]),
    ];
    for (layer, shape) in cases {
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let (y, cache) = layer.forward(&x).unwrap();
        let a = probe(y.shape(), &mut rng);
        let (gx, gp) = layer.backward(&a, &cache).unwrap();
        let numeric_x = finite_diff_grad(
            |xs: &[f64]| dot(&a, &layer.apply(&Tensor::new(shape.clone(), xs.to_vec()).unwrap()).unwrap()),
            x.data(),
            1e-5,
        )
        .unwrap();
        assert_close(gx.data(), &numeric_x, 1e-4);
        if layer.is_affine() {
            let analytic: Vec<f64> = gp.iter().flat_map(|g| g.data().to_vec()).collect();
            let numeric = finite_diff_grad(
                |theta: &[f64]| {
                    let mut l = layer.clone();
                    set_flat(&mut l, theta);
                    dot(&a, &l.apply(&x).unwrap())
                },
                &flat(&layer),
                1e-5,
            )
            .unwrap();
            assert_close(&analytic, &numeric, 1e-6);
        }
    }
}

#[test]
fn interval_gradients_match_finite_differences() {
    let mut rng = CounterRng::new(17, Stream::Sampling);
    let cases: Vec<(Layer<f64>, Vec<usize>)> = vec![
        (rand_dense(&mut rng, 4, 5), vec![5]),
        (rand_conv(&mut rng, 2, 2, 3, 1, 1), vec![2, 5, 5]),
        (Layer::Relu, vec![10]),
        (pool2(), vec![1, 4, 4]),
    ];
    for (layer, shape) in cases {
        let iv = rand_box(&mut rng, &shape);
        let (out, cache) = layer.interval_forward_cached(&iv).unwrap();
        let a = probe(out.shape(), &mut rng);
        let b = probe(out.shape(), &mut rng);
        let mut grads: Vec<Tensor<f64>> = layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (gl, gu) = layer.interval_backward(&a, &b, &cache, Some(&mut grads), true).unwrap().unwrap();
        let objective = |l: &Layer<f64>, iv: &IntervalTensor<f64>| {
            let o = l.interval_forward(iv).unwrap();
            dot(&a, o.lower()) + dot(&b, o.upper())
        };

        let n = iv.lower().len();
        let mut packed = iv.lower().data().to_vec();
        packed.extend_from_slice(iv.upper().data());
        let numeric = finite_diff_grad(
            |v: &[f64]| {
                let box_ = IntervalTensor::new(
                    Tensor::new(shape.clone(), v[..n].to_vec()).unwrap(),
                    Tensor::new(shape.clone(), v[n..].to_vec()).unwrap(),
                )
                .unwrap();
                objective(&layer, &box_)
            },
            &packed,
            1e-5,
        )
        .unwrap();
        let mut analytic = gl.data().to_vec();
        analytic.extend_from_slice(gu.data());
        assert_close(&analytic, &numeric, 1e-4);

        if layer.is_affine() {
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
            let numeric = finite_diff_grad(
                |theta: &[f64]| {
                    let mut l = layer.clone();
                    set_flat(&mut l, theta);
                    objective(&l, &iv)
                },
                &flat(&layer),
                1e-5,
            )
            .unwrap();
            assert_close(&analytic, &numeric, 1e-4);
        }
    }
}

#[test]
fn l2_ball_interval_gradients_match_finite_differences() {
    let mut rng = CounterRng::new(18, Stream::Sampling);
    let cases: Vec<(Layer<f64>, Vec<usize>)> = vec![
        (rand_dense(&mut rng, 3, 4), vec![4]),
        (rand_conv(&mut rng, 2, 1, 3, 1, 1), vec![1, 5, 5]),
    ];
    for (layer, shape) in cases {
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let eps = 0.3;
        let out = layer.l2_ball_interval(&x, eps).unwrap();
        let a = probe(out.shape(), &mut rng);
        let b = probe(out.shape(), &mut rng);
        let mut grads: Vec<Tensor<f64>> = layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        layer.l2_ball_interval_backward(&x, eps, &a, &b, &mut grads).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let numeric = finite_diff_grad(
            |theta: &[f64]| {
                let mut l = layer.clone();
                set_flat(&mut l, theta);
                let o = l.l2_ball_interval(&x, eps).unwrap();
                dot(&a, o.lower()) + dot(&b, o.upper())
            },
            &flat(&layer),
            1e-5,
        )
        .unwrap();
        assert_close(&analytic, &numeric, 1e-4);
    }
}

#[test]
fn l2_ball_interval_example() {
    let layer = Layer::Dense(DenseLayer::from_rows(&[&[3.0, 4.0]], &[0.0]).unwrap());
    let out = layer.l2_ball_interval(&Tensor::vector(vec![1.0, 1.0]), 0.5).unwrap();
    assert_eq!((out.lower().data()[0], out.upper().data()[0]), (4.5, 9.5));
}
