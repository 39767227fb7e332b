//! Central finite-difference gradient verification.
//!
//! The caller supplies `f64` parameter tensors, a snapshot of their analytic
//! gradients, and a closure that recomputes the loss from current parameter
//! values. Coordinates can be subsampled to keep large checks fast.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter name, flat index, analytic, finite-difference) of the worst
    /// coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub struct GradCheck {
    pub eps: f64,
    /// Cap on coordinates checked per tensor; `None` checks all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-3,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// `|a - f| / max(|a|, |f|, floor)`; the floor keeps noise on near-zero
/// coordinates from registering as a relative error.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-6);
    (analytic - fd).abs() / denom
}

impl GradCheck {
    pub fn run(
        &self,
        params: &[(String, Tensor<f64>)],
        analytic: &[Vec<f64>],
        mut forward: impl FnMut() -> f64,
    ) -> GradCheckReport {
        assert_eq!(params.len(), analytic.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for ((name, p), grads) in params.iter().zip(analytic) {
            let n = p.numel();
            assert_eq!(grads.len(), n);
            let mut coords: Vec<usize> = (0..n).collect();
            if let Some(cap) = self.max_coords_per_tensor {
                if n > cap {
                    coords.shuffle(&mut rng);
                    coords.truncate(cap);
                    coords.sort_unstable();
                }
            }
            for idx in coords {
                let original = p.data()[idx];
                p.data_mut()[idx] = original + self.eps;
                let plus = forward();
                p.data_mut()[idx] = original - self.eps;
                let minus = forward();
                p.data_mut()[idx] = original;
                let fd = (plus - minus) / (2.0 * self.eps);
                let err = rel_err(grads[idx], fd);
                report.checked += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((name.clone(), idx, grads[idx], fd));
                }
            }
        }
        report
    }
}
