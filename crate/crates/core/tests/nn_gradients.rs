use ndarray::Array2;
use proptest::prelude::*;
use skdlab::gradcheck::relative_error;
use skdlab::nn::{Activation, Dense, Mlp};
use skdlab::rng::SeededRng;

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * (2.0 * rng.uniform() - 1.0))
}

/// `(1/B) Σ upstream ⊙ logits`, the scalar whose gradient `backward` returns.
fn probe_loss(model: &Mlp<f64>, x: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
    let logits = model.infer(x.view()).unwrap();
    (&logits * upstream).sum() / x.nrows() as f64
}

/// Max relative error of the analytic parameter gradient against central differences.
fn parameter_fd_error(model: &mut Mlp<f64>, x: &Array2<f64>, upstream: &Array2<f64>, h: f64) -> f64 {
    model.forward(x.view()).unwrap();
    let analytic = model.backward(upstream.view()).unwrap().flatten();
    let mut numeric = Vec::with_capacity(analytic.len());
    for l in 0..model.layers().len() {
        let (rows, cols) = model.layers()[l].weight.dim();
        for r in 0..rows {
            for c in 0..cols {
                let w0 = model.layers()[l].weight[[r, c]];
                model.layers_mut()[l].weight[[r, c]] = w0 + h;
                let up = probe_loss(model, x, upstream);
                model.layers_mut()[l].weight[[r, c]] = w0 - h;
                let down = probe_loss(model, x, upstream);
                model.layers_mut()[l].weight[[r, c]] = w0;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        for r in 0..model.layers()[l].bias.len() {
            let b0 = model.layers()[l].bias[r];
            model.layers_mut()[l].bias[r] = b0 + h;
            let up = probe_loss(model, x, upstream);
            model.layers_mut()[l].bias[r] = b0 - h;
            let down = probe_loss(model, x, upstream);
            model.layers_mut()[l].bias[r] = b0;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Moves any pre-activation within `margin` of the ReLU kink away from it.
fn nudge_off_kinks(model: &mut Mlp<f64>, x: &Array2<f64>, margin: f64) {
    if model.activation() != Activation::Relu {
        return;
    }
    let mut h = x.clone();
    let n = model.layers().len();
    for l in 0..n - 1 {
        let mut z = h.dot(&model.layers()[l].weight.t()) + &model.layers()[l].bias;
        for j in 0..z.ncols() {
            let close = z.column(j).iter().any(|v| v.abs() < margin);
            if close {
                model.layers_mut()[l].bias[j] += 3.0 * margin;
                z.column_mut(j).mapv_inplace(|v| v + 3.0 * margin);
            }
        }
        h = z.mapv(|v| v.max(0.0));
    }
}

#[test]
fn two_four_three_relu_matches_finite_differences() {
    let mut model = Mlp::init(&[2, 4, 3], Activation::Relu, 11).unwrap();
    let mut rng = SeededRng::new(5);
    let x = random_matrix(6, 2, 1.0, &mut rng);
    nudge_off_kinks(&mut model, &x, 1e-3);
    let upstream = random_matrix(6, 3, 1.0, &mut rng);
    let err = parameter_fd_error(&mut model, &x, &upstream, 1e-5);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let model = Mlp::<f64>::init(&[2, 3], Activation::Tanh, 0).unwrap();
    let err = model.backward(Array2::zeros((1, 3)).view()).unwrap_err();
    assert!(matches!(err, skdlab::Error::State(_)));
}

#[test]
fn untrained_teacher_round_trips_checkpoint() {
    let model = Mlp::<f64>::init(&[2, 64, 3], Activation::Relu, 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.model");
    model.save(&path).unwrap();
    let back = Mlp::<f64>::load(&path).unwrap();
    assert_eq!(back, model);
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("SKDLAB-MODEL-v1\n"));
}

fn arch() -> impl Strategy<Value = (Vec<usize>, bool)> {
    (prop::collection::vec(1usize..=16, 2..=5), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_networks_match_finite_differences((dims, tanh) in arch(), seed in any::<u64>(), batch in 1usize..5) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let mut model = Mlp::init(&dims, act, seed).unwrap();
        let mut rng = SeededRng::new(seed ^ 0xabc);
        let x = random_matrix(batch, dims[0], 1.0, &mut rng);
        nudge_off_kinks(&mut model, &x, 1e-3);
        let upstream = random_matrix(batch, *dims.last().unwrap(), 1.0, &mut rng);
        let err = parameter_fd_error(&mut model, &x, &upstream, 1e-5);
        prop_assert!(err < 1e-6, "dims {:?} act {:?} err {}", dims, act, err);
    }

    #[test]
    fn backward_is_linear_in_upstream(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut model = Mlp::init(&[3, 5, 4], Activation::Tanh, seed).unwrap();
        let mut rng = SeededRng::new(seed);
        let x = random_matrix(4, 3, 1.0, &mut rng);
        let g1 = random_matrix(4, 4, 1.0, &mut rng);
        let g2 = random_matrix(4, 4, 1.0, &mut rng);
        model.forward(x.view()).unwrap();
        let combined = model.backward((&g1 * a + &g2 * b).view()).unwrap().flatten();
        let t1 = model.backward(g1.view()).unwrap().flatten();
        let t2 = model.backward(g2.view()).unwrap().flatten();
        for ((c, u), v) in combined.iter().zip(&t1).zip(&t2) {
            prop_assert!((c - (a * u + b * v)).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly(dims in prop::collection::vec(1usize..=9, 2..=4), seed in any::<u64>(), tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let mut model = Mlp::<f64>::init(&dims, act, seed).unwrap();
        model.layers_mut()[0].bias.mapv_inplace(|_| 1.0 / 3.0);
        let back = Mlp::<f64>::from_checkpoint_str(&model.to_checkpoint_string()).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn glorot_bounds_and_zero_bias(fan_in in 1usize..40, fan_out in 1usize..40, seed in any::<u64>()) {
        let model = Mlp::<f64>::init(&[fan_in, fan_out], Activation::Relu, seed).unwrap();
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let layer: &Dense<f64> = &model.layers()[0];
        prop_assert!(layer.weight.iter().all(|w| w.abs() < s));
        prop_assert!(layer.bias.iter().all(|&b| b == 0.0));
    }
}
