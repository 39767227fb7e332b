//! Batch normalization over `[batch, channel, h, w]` activations.
//!
//! Training mode normalizes with batch statistics (and maintains running
//! buffers); eval mode normalizes with the running buffers. The affine
//! scale/shift pair is optional: search-phase networks run without it so
//! architecture weights cannot be absorbed into per-channel affines.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tape::Tape;
use super::tensor::Tensor;

pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Scalar> RunningStats<E> {
    pub fn new(channels: usize) -> Rc<RefCell<Self>> {
        Rc::new(RefCell::new(RunningStats {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }))
    }
}

impl<E: Scalar> Tape<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: &Tensor<E>,
        affine: Option<(&Tensor<E>, &Tensor<E>)>,
        running: &Rc<RefCell<RunningStats<E>>>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let sx = x.shape();
        if sx.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input {:?}", sx)));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if running.borrow().mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{} channels vs {} stat buffers", c, running.borrow().mean.len()),
            ));
        }
        if let Some((g, b)) = affine {
            if g.numel() != c || b.numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine sizes {}/{} for {c} channels", g.numel(), b.numel()),
                ));
            }
        }
        let plane = h * w;
        let m = batch * plane;
        let eps_e = E::from_f64(eps);

        // Per-channel (mean, inverse stddev) used for normalization.
        let mut mean = vec![E::zero(); c];
        let mut ivar = vec![E::zero(); c];
        if training {
            let xd = x.data();
            let inv_m = E::one() / E::from_f64(m as f64);
            for ch in 0..c {
                let mut acc = E::zero();
                for b in 0..batch {
                    let off = (b * c + ch) * plane;
                    acc += xd[off..off + plane].iter().copied().sum::<E>();
                }
                mean[ch] = acc * inv_m;
            }
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let mu = mean[ch];
                let mut acc = E::zero();
                for b in 0..batch {
                    let off = (b * c + ch) * plane;
                    for &v in &xd[off..off + plane] {
                        let d = v - mu;
                        acc += d * d;
                    }
                }
                var[ch] = acc * inv_m;
                ivar[ch] = E::one() / (var[ch] + eps_e).sqrt();
            }
            drop(xd);
            let mom = E::from_f64(momentum);
            let keep = E::one() - mom;
            let mut stats = running.borrow_mut();
            for ch in 0..c {
                let unbiased = if m > 1 {
                    var[ch] * E::from_f64(m as f64 / (m as f64 - 1.0))
                } else {
                    var[ch]
                };
                stats.mean[ch] = keep * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + mom * unbiased;
            }
        } else {
            let stats = running.borrow();
            for ch in 0..c {
                mean[ch] = stats.mean[ch];
                ivar[ch] = E::one() / (stats.var[ch] + eps_e).sqrt();
            }
        }

        let mut data = vec![E::zero(); x.numel()];
        {
            let xd = x.data();
            let (gd, bd) = match affine {
                Some((g, b)) => (Some(g.data().to_vec()), Some(b.data().to_vec())),
                None => (None, None),
            };
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let (mu, iv) = (mean[ch], ivar[ch]);
                    let (scale, shift) = match (&gd, &bd) {
                        (Some(g), Some(be)) => (g[ch] * iv, be[ch] - g[ch] * iv * mu),
                        _ => (iv, -(iv * mu)),
                    };
                    for (d, &v) in data[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                        *d = v * scale + shift;
                    }
                }
            }
        }
        let out = Tensor::from_parts(sx.clone(), data);

        let affine_grad = affine.map_or(false, |(g, b)| g.requires_grad() || b.requires_grad());
        if self.is_recording() && (x.requires_grad() || affine_grad) {
            let xt = x.clone();
            let ot = out.clone();
            let aff = affine.map(|(g, b)| (g.clone(), b.clone()));
            let step = move || {
                let g = ot.grad_or_zeros();
                let xd = xt.data().to_vec();
                let gamma: Option<Vec<E>> = aff.as_ref().map(|(gt, _)| gt.data().to_vec());
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut dx = vec![E::zero(); xd.len()];
                let inv_m = E::one() / E::from_f64(m as f64);
                for ch in 0..c {
                    let (mu, iv) = (mean[ch], ivar[ch]);
                    let gm = gamma.as_ref().map_or(E::one(), |gv| gv[ch]);
                    // Reductions over the channel slab.
                    let mut sum_g = E::zero();
                    let mut sum_gx = E::zero();
                    let mut sum_raw_g = E::zero();
                    let mut sum_raw_gx = E::zero();
                    for b in 0..batch {
                        let off = (b * c + ch) * plane;
                        for p in 0..plane {
                            let xhat = (xd[off + p] - mu) * iv;
                            let gi = g[off + p];
                            sum_raw_g += gi;
                            sum_raw_gx += gi * xhat;
                            let ghat = gi * gm;
                            sum_g += ghat;
                            sum_gx += ghat * xhat;
                        }
                    }
                    dgamma[ch] = sum_raw_gx;
                    dbeta[ch] = sum_raw_g;
                    if training {
                        let mg = sum_g * inv_m;
                        let mgx = sum_gx * inv_m;
                        for b in 0..batch {
                            let off = (b * c + ch) * plane;
                            for p in 0..plane {
                                let xhat = (xd[off + p] - mu) * iv;
                                dx[off + p] = iv * (g[off + p] * gm - mg - xhat * mgx);
                            }
                        }
                    } else {
                        let k = iv * gm;
                        for b in 0..batch {
                            let off = (b * c + ch) * plane;
                            for p in 0..plane {
                                dx[off + p] = g[off + p] * k;
                            }
                        }
                    }
                }
                if xt.requires_grad() {
                    xt.accumulate_grad(&dx);
                }
                if let Some((gt, bt)) = &aff {
                    if gt.requires_grad() {
                        gt.accumulate_grad(&dgamma);
                    }
                    if bt.requires_grad() {
                        bt.accumulate_grad(&dbeta);
                    }
                }
            };
            out.set_requires_grad(true);
            let steps = self;
            steps.push_step(Box::new(step));
        }
        Ok(out)
    }
}
