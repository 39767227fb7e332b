//! Evaluation phase: train a derived architecture from scratch and measure
//! test accuracy alongside its exact parameter/FLOP cost.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{clip_grad_norm, CosineSchedule, SgdMomentum, Tape};
use crate::cost::{derived_cost, CostMetric, TargetNetConfig};
use crate::data::{cutout_in_place, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::search::count_correct;
use crate::target::build_target_net;

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Cutout side length; `None` disables the augmentation.
    pub cutout: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
    pub target: TargetNetConfig,
    pub deterministic: bool,
}

impl EvalConfig {
    pub fn desk(classes: usize) -> Self {
        EvalConfig {
            epochs: 30,
            batch_size: 128,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            cutout: None,
            dropout: 0.2,
            seed: 0,
            target: TargetNetConfig::desk(classes),
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub final_test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub wall_clock_s: f64,
    pub curve: Vec<EvalEpochRecord>,
    pub seed: u64,
}

fn test_accuracy(
    net: &crate::target::TargetNet<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let images = dataset.batch_images::<f32>(chunk);
        let labels = dataset.batch_labels(chunk);
        let tape = Tape::inference();
        let logits = net.forward(&tape, &images, false, None)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Train the genotype's target network from random init on the dataset's
/// training portion and report accuracy on its held-out test split.
pub fn train_eval(genotype: &Genotype, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalResult> {
    if dataset.test.is_empty() {
        return Err(Error::config("dataset has no held-out test split"));
    }
    if cfg.target.classes != dataset.classes
        || cfg.target.input_channels != dataset.channels
        || cfg.target.input_hw != (dataset.height, dataset.width)
    {
        return Err(Error::config(format!(
            "target net shape {:?} does not match dataset {}x({}, {}) with {} classes",
            cfg.target, dataset.channels, dataset.height, dataset.width, dataset.classes
        )));
    }
    let started = Instant::now();
    let params = derived_cost(genotype, &cfg.target, CostMetric::Params)?;
    let flops = derived_cost(genotype, &cfg.target, CostMetric::Flops)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = build_target_net::<f32>(genotype, &cfg.target, cfg.dropout, &mut rng)?;
    debug_assert_eq!(net.param_count(), params);

    let mut opt = SgdMomentum::new(net.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let schedule = CosineSchedule::new(cfg.lr, cfg.epochs.max(1));
    let batch = cfg.batch_size.min(dataset.trainval.len());
    let mut stream = BatchStream::new(dataset.trainval.clone(), batch, cfg.seed ^ 0xE7A1)?;

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = 0.0f64;
    for epoch in 0..cfg.epochs {
        opt.set_lr(schedule.lr_at(epoch));
        let mut loss_sum = 0.0;
        let batches = stream.batches_per_epoch();
        for b in 0..batches {
            let idx = stream.next_batch();
            let images = dataset.batch_images::<f32>(&idx);
            if let Some(len) = cfg.cutout {
                cutout_in_place(&images, len, &mut rng);
            }
            let labels = dataset.batch_labels(&idx);
            let tape = Tape::new();
            let logits = net.forward(&tape, &images, true, Some(&mut rng))?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            let loss_v = loss.item() as f64;
            if !loss_v.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "eval epoch {epoch} batch {b}: loss={loss_v} lr={}",
                    opt.lr()
                )));
            }
            loss_sum += loss_v;
            tape.backward(&loss)?;
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(opt.params(), cfg.grad_clip);
            }
            opt.step()?;
        }
        let acc = test_accuracy(&net, dataset, &dataset.test)?;
        best = best.max(acc);
        curve.push(EvalEpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy: acc,
            lr: opt.lr(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
    }
    let final_acc = match curve.last() {
        Some(rec) => rec.test_accuracy,
        None => test_accuracy(&net, dataset, &dataset.test)?,
    };
    Ok(EvalResult {
        final_test_accuracy: final_acc,
        best_test_accuracy: best.max(final_acc),
        params,
        flops,
        wall_clock_s: started.elapsed().as_secs_f64(),
        curve,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::genotype::GenotypeEdge;

    fn small_genotype() -> Genotype {
        let mk = |a: &str, b: &str| {
            vec![
                GenotypeEdge { target: 2, source: 0, op: a.into() },
                GenotypeEdge { target: 2, source: 1, op: b.into() },
                GenotypeEdge { target: 3, source: 1, op: a.into() },
                GenotypeEdge { target: 3, source: 2, op: b.into() },
            ]
        };
        Genotype {
            nodes: 4,
            normal: mk("sep_conv_3x3", "skip_connect"),
            reduction: mk("max_pool_3x3", "skip_connect"),
        }
    }

    #[test]
    fn untrained_net_is_at_chance() {
        let ds = make_synthetic(SyntheticKind::Blobs, 200, 2, 0.0, 5).unwrap();
        let cfg = EvalConfig { epochs: 0, ..EvalConfig::desk(2) };
        let res = train_eval(&small_genotype(), &ds, &cfg).unwrap();
        assert!(res.curve.is_empty());
        // 2-class chance is 50%; an untrained net sits in a broad band.
        assert!(res.final_test_accuracy > 0.15 && res.final_test_accuracy < 0.85);
        assert!(res.params > 0 && res.flops > 0);
    }

    #[test]
    fn blobs_train_loss_decreases_and_accuracy_is_high() {
        let ds = make_synthetic(SyntheticKind::Blobs, 240, 2, 0.0, 6).unwrap();
        let cfg = EvalConfig {
            epochs: 5,
            batch_size: 32,
            dropout: 0.0,
            target: TargetNetConfig { layers: 3, ..TargetNetConfig::desk(2) },
            ..EvalConfig::desk(2)
        };
        let res = train_eval(&small_genotype(), &ds, &cfg).unwrap();
        assert!(
            res.curve.last().unwrap().train_loss < res.curve[0].train_loss,
            "loss should drop: {:?}",
            res.curve.iter().map(|r| r.train_loss).collect::<Vec<_>>()
        );
        assert!(res.best_test_accuracy > 0.99, "blobs should be easy, got {}", res.best_test_accuracy);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let ds = make_synthetic(SyntheticKind::Blobs, 120, 2, 0.0, 7).unwrap();
        let cfg = EvalConfig {
            epochs: 2,
            batch_size: 30,
            target: TargetNetConfig { layers: 3, ..TargetNetConfig::desk(2) },
            ..EvalConfig::desk(2)
        };
        let a = train_eval(&small_genotype(), &ds, &cfg).unwrap();
        let b = train_eval(&small_genotype(), &ds, &cfg).unwrap();
        assert_eq!(a.final_test_accuracy, b.final_test_accuracy);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn missing_test_split_is_an_error() {
        let mut ds = make_synthetic(SyntheticKind::Blobs, 120, 2, 0.0, 7).unwrap();
        ds.trainval.extend(ds.test.drain(..));
        assert!(train_eval(&small_genotype(), &ds, &EvalConfig::desk(2)).is_err());
    }
}
