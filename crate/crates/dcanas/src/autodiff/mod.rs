//! Minimal reverse-mode automatic differentiation: dense tensors, a
//! define-by-run tape, the primitives needed by the search/eval networks,
//! and the two optimizers the loops use.

mod batchnorm;
pub mod gradcheck;
mod kernels;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use batchnorm::RunningStats;
pub use optim::{clip_grad_norm, Adam, CosineSchedule, SgdMomentum};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::GradCheck;
    use super::*;

    #[test]
    fn relu_values() {
        let tape = Tape::<f32>::new();
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(&x);
        assert_eq!(*y.data(), [0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_constant_rows_is_uniform() {
        let tape = Tape::<f32>::new();
        for c in [-3.0f32, 0.0, 7.5] {
            let x = Tensor::filled(&[3], c);
            let y = tape.softmax(&x);
            for &v in y.data().iter() {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 6], 2.0, &mut rng);
        let y = tape.softmax(&x);
        let shifted_data: Vec<f32> = x.data().iter().map(|v| v + 11.25).collect();
        let xs = Tensor::from_vec(&[4, 6], shifted_data).unwrap();
        let ys = tape.softmax(&xs);
        for r in 0..4 {
            let row = &y.data()[r * 6..(r + 1) * 6];
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        for (a, b) in y.data().iter().zip(ys.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_shape_rule() {
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[16, 3, 3, 3], 0.1, &mut rng);
        let y = tape.conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 16, 8, 8]);
    }

    #[test]
    fn conv2d_shape_mismatch_names_primitive() {
        let tape = Tape::<f32>::new();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = tape.conv2d(&x, &w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d"), "{err}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::<f32>::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad_(true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f32>::new();
        let x = Tensor::zeros(&[2]).requires_grad_(true);
        let y = tape.relu(&x);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_on_detached_graph_is_a_warning_not_an_error() {
        let tape = Tape::<f32>::new();
        let x = Tensor::scalar(1.0);
        let y = tape.relu(&x); // nothing requires grad, tape stays empty
        assert!(tape.backward(&y).is_ok());
        assert!(y.grad().is_none());
        assert_eq!(y.grad_or_zeros(), vec![0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_grad_sums_to_zero() {
        let tape = Tape::<f32>::new();
        let logits = Tensor::zeros(&[2, 5]).requires_grad_(true);
        let loss = tape.cross_entropy(&logits, &[1, 3]).unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        for b in 0..2 {
            let s: f32 = g[b * 5..(b + 1) * 5].iter().sum();
            assert!(s.abs() < 1e-6, "row grad sum {s}");
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let tape = Tape::<f32>::new();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 2.0, 3.0])
            .unwrap()
            .requires_grad_(true);
        let y = tape.max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(*y.data(), [5.0]);
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    /// Three-layer MLP: analytic gradients against central differences in f64.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let labels = vec![0usize, 2, 1, 0];
        let w1 = Tensor::randn(&[8, 6], 0.5, &mut rng).requires_grad_(true);
        let b1 = Tensor::zeros(&[8]).requires_grad_(true);
        let w2 = Tensor::randn(&[5, 8], 0.5, &mut rng).requires_grad_(true);
        let b2 = Tensor::zeros(&[5]).requires_grad_(true);
        let w3 = Tensor::randn(&[3, 5], 0.5, &mut rng).requires_grad_(true);
        let b3 = Tensor::zeros(&[3]).requires_grad_(true);
        let params: Vec<(String, Tensor<f64>)> = [
            ("w1", &w1),
            ("b1", &b1),
            ("w2", &w2),
            ("b2", &b2),
            ("w3", &w3),
            ("b3", &b3),
        ]
        .iter()
        .map(|(n, t)| (n.to_string(), (*t).clone()))
        .collect();

        let forward = |tape: &Tape<f64>| {
            let h1 = tape.relu(&tape.linear(&x, &w1, &b1).unwrap());
            let h2 = tape.relu(&tape.linear(&h1, &w2, &b2).unwrap());
            let logits = tape.linear(&h2, &w3, &b3).unwrap();
            tape.cross_entropy(&logits, &labels).unwrap()
        };

        let tape = Tape::new();
        let loss = forward(&tape);
        tape.backward(&loss).unwrap();
        let grads: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();
        for (_, p) in &params {
            p.zero_grad();
        }

        let check = GradCheck { eps: 1e-4, ..GradCheck::default() };
        let report = check.run(&params, &grads, || {
            forward(&Tape::inference()).item()
        });
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    /// Every conv/pool/norm primitive against finite differences on small shapes.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[2, 4, 6, 6], 1.0, &mut rng).requires_grad_(true);
        let wc = Tensor::randn(&[3, 4, 3, 3], 0.4, &mut rng).requires_grad_(true);
        let wd = Tensor::randn(&[4, 3, 3], 0.4, &mut rng).requires_grad_(true);
        let gamma = Tensor::filled(&[4], 1.0).requires_grad_(true);
        let beta = Tensor::zeros(&[4]).requires_grad_(true);
        let running = RunningStats::<f64>::new(4);
        let alpha = Tensor::randn(&[3], 0.8, &mut rng).requires_grad_(true);

        let params: Vec<(String, Tensor<f64>)> = [
            ("x", &x),
            ("wc", &wc),
            ("wd", &wd),
            ("gamma", &gamma),
            ("beta", &beta),
            ("alpha", &alpha),
        ]
        .iter()
        .map(|(n, t)| (n.to_string(), (*t).clone()))
        .collect();

        // One expression touching conv2d, depthwise (dilated), both pools,
        // batch norm (train), softmax mixing, relu and global pooling.
        let forward = |tape: &Tape<f64>| {
            // Fresh stats per evaluation so train-mode normalization is pure.
            let stats = RunningStats::<f64>::new(4);
            let _ = &running;
            let c = tape.conv2d(&x, &wc, 1, 1).unwrap();
            let d = tape.depthwise_conv2d(&x, &wd, 1, 2, 2).unwrap();
            let bn = tape
                .batch_norm(&d, Some((&gamma, &beta)), &stats, true, 0.1, 1e-5)
                .unwrap();
            let mp = tape.max_pool2d(&bn, 3, 1, 1).unwrap();
            let ap = tape.avg_pool2d(&bn, 3, 2, 1).unwrap();
            let w = tape.softmax(&alpha);
            let parts = vec![mp.clone(), tape.relu(&mp), mp.clone()];
            let mixed = tape.mix(&parts, &w).unwrap();
            let ga = tape.global_avg_pool(&mixed).unwrap();
            let gb = tape.global_avg_pool(&ap).unwrap();
            let gc = tape.global_avg_pool(&c).unwrap();
            let s = tape.add(&ga, &gb).unwrap();
            let sq = tape.mul(&s, &s).unwrap();
            let t1 = tape.sum_all(&sq);
            let t2 = tape.sum_all(&gc);
            tape.add(&t1, &t2).unwrap()
        };

        let tape = Tape::new();
        let loss = forward(&tape);
        tape.backward(&loss).unwrap();
        let grads: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();
        for (_, p) in &params {
            p.zero_grad();
        }

        let check = GradCheck {
            eps: 1e-4,
            max_coords_per_tensor: Some(40),
            seed: 5,
        };
        let report = check.run(&params, &grads, || forward(&Tape::inference()).item());
        assert!(
            report.passes(1e-4),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn deterministic_trajectory_for_fixed_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x = Tensor::<f32>::randn(&[8, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 4], 0.5, &mut rng).requires_grad_(true);
            let b = Tensor::zeros(&[2]).requires_grad_(true);
            let mut opt = SgdMomentum::new(
                vec![("w".into(), w.clone()), ("b".into(), b.clone())],
                0.05,
                0.9,
                3e-4,
            );
            for _ in 0..5 {
                let tape = Tape::new();
                let logits = tape.linear(&x, &w, &b).unwrap();
                let loss = tape.cross_entropy(&logits, &[0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
                tape.backward(&loss).unwrap();
                opt.step().unwrap();
            }
            let snapshot = (w.data().to_vec(), b.data().to_vec());
            snapshot
        };
        let (w1, b1) = run();
        let (w2, b2) = run();
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
    }
}
