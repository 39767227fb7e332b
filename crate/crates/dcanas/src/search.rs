//! The constrained search loop: alternating first-order descent on operation
//! weights (train split) and architecture parameters (val split), with
//! projected dual ascent on the Lagrange multiplier of the resource penalty,
//! and per-iteration re-derivation of derived cells.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{clip_grad_norm, Adam, CosineSchedule, Scalar, SgdMomentum, Tape, Tensor};
use crate::cost::{derived_cost, supernet_search_cost, CostMetric, SearchCost, TargetNetConfig};
use crate::data::{split_and_batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, Genotype};
use crate::space::{AlphaSnapshot, OpSet, Supernet, SupernetConfig};

/// The ablation axes: weight sharing, channel bottleneck, derived cells and
/// the resource constraint itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFlags {
    pub weight_sharing: bool,
    pub channel_bottleneck: bool,
    pub derived_cells: bool,
    pub resource_constraint: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self::all_on()
    }
}

impl FeatureFlags {
    pub fn all_on() -> Self {
        FeatureFlags {
            weight_sharing: true,
            channel_bottleneck: true,
            derived_cells: true,
            resource_constraint: true,
        }
    }

    pub fn all_off() -> Self {
        FeatureFlags {
            weight_sharing: false,
            channel_bottleneck: false,
            derived_cells: false,
            resource_constraint: false,
        }
    }

    /// Comma list of `ws|cb|dc|rc` tokens, each optionally prefixed with `-`
    /// (disable) or `+` (enable), applied to the all-on default:
    /// `-ws,-cb,-dc,-rc` is plain unconstrained search.
    pub fn parse(s: &str) -> Result<Self> {
        let mut flags = Self::all_on();
        for raw in s.split(',') {
            let tok = raw.trim();
            if tok.is_empty() {
                continue;
            }
            let (value, name) = match tok.strip_prefix('-') {
                Some(rest) => (false, rest),
                None => (true, tok.strip_prefix('+').unwrap_or(tok)),
            };
            match name {
                "ws" => flags.weight_sharing = value,
                "cb" => flags.channel_bottleneck = value,
                "dc" => flags.derived_cells = value,
                "rc" => flags.resource_constraint = value,
                other => return Err(Error::config(format!("unknown feature flag `{other}`"))),
            }
        }
        Ok(flags)
    }

    pub fn label(&self) -> String {
        let mark = |on: bool, name: &str| format!("{}{}", if on { "+" } else { "-" }, name);
        format!(
            "{}{}{}{}",
            mark(self.weight_sharing, "ws"),
            mark(self.channel_bottleneck, "cb"),
            mark(self.derived_cells, "dc"),
            mark(self.resource_constraint, "rc"),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintSource {
    Direct,
    Lug,
}

/// Device constraint `K_d` and the (tighter) search constraint `K_d'`.
#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub metric: CostMetric,
    pub kd: f64,
    pub kd_prime: f64,
    pub source: ConstraintSource,
    /// Multiplier applied to the raw violation `k_s − K_d'` inside the
    /// penalty and the λ update; search runs use `1/K_d'` so λ is
    /// dimensionless.
    pub penalty_scale: f64,
}

impl ConstraintSpec {
    pub fn direct(metric: CostMetric, kd: f64, kd_prime: f64) -> Result<Self> {
        if kd <= 0.0 || kd_prime <= 0.0 {
            return Err(Error::config("constraints must be positive"));
        }
        Ok(ConstraintSpec {
            metric,
            kd,
            kd_prime,
            source: ConstraintSource::Direct,
            penalty_scale: 1.0,
        })
    }

    /// Normalize violations by `K_d'` so λ and its learning rate transfer
    /// across metrics and scales.
    pub fn normalized(mut self) -> Self {
        self.penalty_scale = 1.0 / self.kd_prime;
        self
    }

    pub fn violation(&self, ks: f64) -> f64 {
        (ks - self.kd_prime) * self.penalty_scale
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LambdaEvent {
    pub iteration: u64,
    pub lambda: f64,
    pub ks: f64,
    pub violation: f64,
}

/// Non-negative multiplier updated by projected dual ascent.
#[derive(Clone, Debug)]
pub struct LagrangeState {
    pub lambda: f64,
    pub lr_lambda: f64,
    /// When set, the ascent step clamps the violation to ±this value (search
    /// runs use 1.0 in normalized units) so a large early violation cannot
    /// wind λ far past its equilibrium.
    pub ascent_clip: Option<f64>,
    pub history: Vec<LambdaEvent>,
}

impl LagrangeState {
    pub fn new(lr_lambda: f64) -> Self {
        LagrangeState { lambda: 0.0, lr_lambda, ascent_clip: None, history: Vec::new() }
    }

    pub fn with_ascent_clip(mut self, clip: f64) -> Self {
        self.ascent_clip = Some(clip);
        self
    }

    /// `λ ← max(0, λ + η_λ·violation)`, recording the event.
    pub fn step(&mut self, iteration: u64, ks: f64, spec: &ConstraintSpec) {
        debug_assert!(self
            .history
            .last()
            .map_or(true, |e| e.iteration < iteration));
        let violation = spec.violation(ks);
        let ascent = match self.ascent_clip {
            Some(c) => violation.clamp(-c, c),
            None => violation,
        };
        self.lambda = (self.lambda + self.lr_lambda * ascent).max(0.0);
        self.history.push(LambdaEvent { iteration, lambda: self.lambda, ks, violation });
    }
}

/// `L̃ = val_loss + λ·scale·(k_s − K_d')`.
pub fn lagrangian<E: Scalar>(
    tape: &Tape<E>,
    val_loss: &Tensor<E>,
    ks: &SearchCost<E>,
    spec: &ConstraintSpec,
    state: &LagrangeState,
) -> Result<Tensor<E>> {
    let shifted = tape.add_const(&ks.value, E::from_f64(-spec.kd_prime));
    let penalty = tape.scale(&shifted, E::from_f64(state.lambda * spec.penalty_scale));
    tape.add(val_loss, &penalty)
}

#[derive(Clone, Debug)]
pub struct SearchRunConfig {
    pub epochs: usize,
    /// Leading epochs that train only w (no α or λ updates), letting the
    /// candidate ops become informative before the penalty starts pruning.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    /// Global-norm gradient clip for w; 0 disables (search default).
    pub grad_clip: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
    pub lambda_lr: f64,
    /// Update λ once per epoch instead of once per batch.
    pub lambda_per_epoch: bool,
    pub val_fraction: f64,
    pub seed: u64,
    pub flags: FeatureFlags,
    /// Candidate operation set; α column order follows it.
    pub op_set: OpSet,
    pub supernet: SupernetConfig,
    /// Evaluation-network shape used to price derived genotypes.
    pub target: TargetNetConfig,
    pub metric: CostMetric,
    /// Stop when the derived genotype is unchanged this many consecutive
    /// epochs; 0 disables.
    pub early_stop_patience: usize,
    pub track_val_accuracy: bool,
    /// Adds the penalty term to the train loss as well. The penalty has no
    /// w-gradient, so w-updates must not change; kept for verifying that.
    pub penalty_in_train_loss: bool,
    pub deterministic: bool,
}

impl Default for SearchRunConfig {
    fn default() -> Self {
        SearchRunConfig {
            epochs: 50,
            warmup_epochs: 0,
            batch_size: 64,
            w_lr: 0.2,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            grad_clip: 0.0,
            alpha_lr: 6e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            lambda_lr: 1e-3,
            lambda_per_epoch: false,
            val_fraction: 0.5,
            seed: 0,
            flags: FeatureFlags::all_on(),
            op_set: OpSet::default_darts(),
            supernet: SupernetConfig::default(),
            target: TargetNetConfig::desk(2),
            metric: CostMetric::Params,
            early_stop_patience: 10,
            track_val_accuracy: true,
            penalty_in_train_loss: false,
            deterministic: true,
        }
    }
}

impl SearchRunConfig {
    /// Small configuration that finishes a search in seconds on one CPU.
    pub fn desk(classes: usize) -> Self {
        SearchRunConfig {
            epochs: 15,
            warmup_epochs: 5,
            batch_size: 24,
            supernet: SupernetConfig::desk(classes),
            target: TargetNetConfig::desk(classes),
            // Desk runs take ~100 α steps, not tens of thousands; α and λ
            // need proportionally faster rates to cover the same ground,
            // and a gentler w rate to stay stable on noisy toy tasks.
            w_lr: 0.15,
            alpha_lr: 0.01,
            lambda_lr: 0.05,
            op_set: OpSet::desk(),
            ..Default::default()
        }
    }

    /// Supernet config with the run's feature flags applied.
    pub fn resolved_supernet(&self) -> SupernetConfig {
        SupernetConfig {
            weight_sharing: self.flags.weight_sharing,
            channel_bottleneck: self.flags.channel_bottleneck,
            derived_cells: self.flags.derived_cells,
            ..self.supernet.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ks: f64,
    pub lambda: f64,
    pub violation: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub genotype: Genotype,
    pub alpha: AlphaSnapshot,
    pub lambda_history: Vec<LambdaEvent>,
    pub epochs: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
    pub wall_clock_s: f64,
    /// Evaluation-phase cost of the final genotype, priced by the cost model
    /// (not by k_s).
    pub derived_cost: u64,
    pub seed: u64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub ks: Option<f64>,
    pub lambda: f64,
}

/// One search run's mutable state; `run_search` drives it epoch by epoch and
/// tests can drive single steps.
pub struct SearchSession<'d> {
    pub cfg: SearchRunConfig,
    pub constraint: Option<ConstraintSpec>,
    pub net: Supernet<f32>,
    pub lagrange: LagrangeState,
    pub op_set: OpSet,
    w_opt: SgdMomentum<f32>,
    alpha_opt: Adam<f32>,
    train: BatchStream,
    val: BatchStream,
    schedule: CosineSchedule,
    dataset: &'d Dataset,
    iteration: u64,
    started: Instant,
}

impl<'d> SearchSession<'d> {
    pub fn new(
        cfg: SearchRunConfig,
        constraint: Option<ConstraintSpec>,
        dataset: &'d Dataset,
    ) -> Result<Self> {
        if cfg.supernet.classes != dataset.classes {
            return Err(Error::config(format!(
                "supernet has {} classes, dataset has {}",
                cfg.supernet.classes, dataset.classes
            )));
        }
        if cfg.flags.resource_constraint && constraint.is_none() {
            return Err(Error::config(
                "resource constraint enabled but no constraint given",
            ));
        }
        let sup_cfg = cfg.resolved_supernet();
        if sup_cfg.input_channels != dataset.channels
            || sup_cfg.input_hw != (dataset.height, dataset.width)
        {
            return Err(Error::config(format!(
                "supernet stem {}x{:?} vs dataset {}x({}, {})",
                sup_cfg.input_channels,
                sup_cfg.input_hw,
                dataset.channels,
                dataset.height,
                dataset.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let op_set = cfg.op_set.clone();
        let net = Supernet::build(sup_cfg, op_set.clone(), &mut rng)?;
        let (train, val) = split_and_batch(dataset, cfg.val_fraction, cfg.batch_size, cfg.seed)?;
        let w_opt = SgdMomentum::new(net.w_params(), cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
            .allow_missing_grads();
        let alpha_opt = Adam::new(
            net.alpha_params(),
            cfg.alpha_lr,
            cfg.alpha_betas,
            cfg.alpha_weight_decay,
        )
        .allow_missing_grads();
        let schedule = CosineSchedule::new(cfg.w_lr, cfg.epochs.max(1));
        let lagrange = LagrangeState::new(cfg.lambda_lr).with_ascent_clip(1.0);
        Ok(SearchSession {
            cfg,
            constraint,
            net,
            lagrange,
            op_set,
            w_opt,
            alpha_opt,
            train,
            val,
            schedule,
            dataset,
            iteration: 0,
            started: Instant::now(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.batches_per_epoch()
    }

    fn rc_active(&self) -> bool {
        self.cfg.flags.resource_constraint && self.constraint.is_some()
    }

    fn abort_snapshot(&self, what: &str, train_loss: f64, val_loss: f64, ks: Option<f64>) -> Error {
        Error::NonFiniteLoss(format!(
            "{what} at iteration {}: train_loss={train_loss} val_loss={val_loss} ks={:?} lambda={} lr={}",
            self.iteration,
            ks,
            self.lagrange.lambda,
            self.w_opt.lr(),
        ))
    }

    /// w-step on the next train batch with α frozen; the penalty term (if
    /// included) is constant here and must not perturb the update.
    fn w_step(&mut self) -> Result<f64> {
        let sup_cfg = self.cfg.resolved_supernet();
        let idx = self.train.next_batch();
        let images = self.dataset.batch_images::<f32>(&idx);
        let labels = self.dataset.batch_labels(&idx);
        self.net.alpha.set_requires_grad(false);
        let tape = Tape::new();
        let logits = self.net.forward(&tape, &images, true)?;
        let mut loss = tape.cross_entropy(&logits, &labels)?;
        if self.cfg.penalty_in_train_loss && self.rc_active() {
            let ks = supernet_search_cost(&tape, &self.net.alpha, &sup_cfg, &self.op_set, self.cfg.metric)?;
            loss = lagrangian(&tape, &loss, &ks, self.constraint.as_ref().unwrap(), &self.lagrange)?;
        }
        let train_loss = loss.item() as f64;
        if !train_loss.is_finite() {
            self.net.alpha.set_requires_grad(true);
            return Err(self.abort_snapshot("non-finite train loss", train_loss, f64::NAN, None));
        }
        tape.backward(&loss)?;
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(self.w_opt.params(), self.cfg.grad_clip);
        }
        self.w_opt.step()?;
        self.net.alpha.set_requires_grad(true);
        Ok(train_loss)
    }

    /// One alternation: w-step on a train batch, α-step on a val batch,
    /// λ-step, re-derivation of derived cells.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let sup_cfg = self.cfg.resolved_supernet();
        let train_loss = self.w_step()?;

        // α-step on the validation batch with w frozen (first-order bilevel).
        let idx = self.val.next_batch();
        let images = self.dataset.batch_images::<f32>(&idx);
        let labels = self.dataset.batch_labels(&idx);
        self.net.set_w_requires_grad(false);
        let tape = Tape::new();
        let logits = self.net.forward(&tape, &images, true)?;
        let val_loss_t = tape.cross_entropy(&logits, &labels)?;
        let val_loss = val_loss_t.item() as f64;
        let mut ks_value = None;
        let objective = if self.rc_active() {
            let ks = supernet_search_cost(&tape, &self.net.alpha, &sup_cfg, &self.op_set, self.cfg.metric)?;
            ks_value = Some(ks.item());
            lagrangian(&tape, &val_loss_t, &ks, self.constraint.as_ref().unwrap(), &self.lagrange)?
        } else {
            val_loss_t
        };
        if !val_loss.is_finite() {
            self.net.set_w_requires_grad(true);
            return Err(self.abort_snapshot("non-finite val loss", train_loss, val_loss, ks_value));
        }
        tape.backward(&objective)?;
        self.alpha_opt.step()?;
        self.net.set_w_requires_grad(true);

        self.iteration += 1;
        if self.rc_active() && !self.cfg.lambda_per_epoch {
            let spec = self.constraint.as_ref().unwrap();
            self.lagrange.step(self.iteration, ks_value.unwrap(), spec);
        }
        if self.cfg.flags.derived_cells {
            self.net.rederive()?;
        }
        Ok(StepMetrics {
            train_loss,
            val_loss,
            ks: ks_value,
            lambda: self.lagrange.lambda,
        })
    }

    /// Current k_s on a throwaway inference tape (for logging when the
    /// constraint machinery is off).
    pub fn current_ks(&self) -> Result<f64> {
        let tape = Tape::inference();
        let ks = supernet_search_cost(
            &tape,
            &self.net.alpha,
            &self.cfg.resolved_supernet(),
            &self.op_set,
            self.cfg.metric,
        )?;
        Ok(ks.item())
    }

    /// Accuracy of the current supernet on the validation split (eval mode).
    pub fn val_accuracy(&self) -> Result<f64> {
        let indices = self.val.all_indices();
        let mut correct = 0usize;
        for chunk in indices.chunks(256.min(indices.len().max(1))) {
            let images = self.dataset.batch_images::<f32>(chunk);
            let labels = self.dataset.batch_labels(chunk);
            let tape = Tape::inference();
            let logits = self.net.forward(&tape, &images, false)?;
            correct += count_correct(&logits, &labels);
        }
        Ok(correct as f64 / indices.len() as f64)
    }

    pub fn derive(&self) -> Result<Genotype> {
        derive_genotype(&self.net.alpha.snapshot(), &self.op_set)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        self.w_opt.set_lr(self.schedule.lr_at(epoch));
        let warmup = epoch < self.cfg.warmup_epochs;
        let batches = self.batches_per_epoch();
        let mut train_sum = 0.0;
        let mut val_sum = 0.0;
        let mut val_batches = 0usize;
        let mut last_ks = None;
        for _ in 0..batches {
            if warmup {
                train_sum += self.w_step()?;
                continue;
            }
            let m = self.step()?;
            train_sum += m.train_loss;
            val_sum += m.val_loss;
            val_batches += 1;
            if m.ks.is_some() {
                last_ks = m.ks;
            }
        }
        let ks = match last_ks {
            Some(v) => v,
            None => self.current_ks()?,
        };
        if self.rc_active() && self.cfg.lambda_per_epoch && !warmup {
            let spec = self.constraint.as_ref().unwrap();
            self.lagrange.step(self.iteration, ks, spec);
        }
        let violation = self
            .constraint
            .as_ref()
            .map(|s| s.violation(ks))
            .unwrap_or(0.0);
        let val_accuracy = if self.cfg.track_val_accuracy {
            Some(self.val_accuracy()?)
        } else {
            None
        };
        Ok(EpochRecord {
            epoch,
            train_loss: train_sum / batches as f64,
            val_loss: if val_batches > 0 { val_sum / val_batches as f64 } else { f64::NAN },
            ks,
            lambda: self.lagrange.lambda,
            violation,
            lr: self.w_opt.lr(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            val_accuracy,
        })
    }

    /// Snapshot of all w parameter values (bit-comparison helper).
    pub fn w_values(&self) -> Vec<Vec<f32>> {
        self.w_opt.params().iter().map(|(_, p)| p.data().to_vec()).collect()
    }

    pub fn alpha_values(&self) -> Vec<Vec<f32>> {
        self.net
            .alpha_params()
            .iter()
            .map(|(_, p)| p.data().to_vec())
            .collect()
    }
}

pub(crate) fn count_correct<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> usize {
    let shape = logits.shape();
    let classes = shape[1];
    let data = logits.data();
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &data[b * classes..(b + 1) * classes];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

pub fn accuracy<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> f64 {
    count_correct(logits, labels) as f64 / labels.len() as f64
}

/// Full search: epochs of alternation, early stop on a stable genotype,
/// final derivation and evaluation-phase pricing.
pub fn run_search(
    cfg: SearchRunConfig,
    constraint: Option<ConstraintSpec>,
    dataset: &Dataset,
) -> Result<SearchResult> {
    let started = Instant::now();
    let target = cfg.target.clone();
    let metric = cfg.metric;
    let seed = cfg.seed;
    let patience = cfg.early_stop_patience;
    let epochs = cfg.epochs;
    let mut session = SearchSession::new(cfg, constraint, dataset)?;
    let mut records = Vec::with_capacity(epochs);
    let mut best_val = None;
    let mut stable: usize = 0;
    let mut last_genotype_text = session.derive()?.to_text();
    let mut stopped_early = false;
    for epoch in 0..epochs {
        let rec = session.run_epoch(epoch)?;
        if let Some(acc) = rec.val_accuracy {
            best_val = Some(best_val.map_or(acc, |b: f64| b.max(acc)));
        }
        records.push(rec);
        let text = session.derive()?.to_text();
        if epoch < session.cfg.warmup_epochs {
            stable = 0; // α is frozen during warmup
        } else if text == last_genotype_text {
            stable += 1;
        } else {
            stable = 0;
            last_genotype_text = text;
        }
        if patience > 0 && stable >= patience {
            stopped_early = true;
            break;
        }
    }
    let genotype = session.derive()?;
    genotype.validate()?;
    let cost = derived_cost(&genotype, &target, metric)?;
    Ok(SearchResult {
        genotype,
        alpha: session.net.alpha.snapshot(),
        lambda_history: session.lagrange.history.clone(),
        epochs: records,
        best_val_accuracy: best_val,
        wall_clock_s: started.elapsed().as_secs_f64(),
        derived_cost: cost,
        seed,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};

    fn toy_dataset() -> Dataset {
        make_synthetic(SyntheticKind::Blobs, 120, 2, 0.0, 3).unwrap()
    }

    fn tiny_cfg(seed: u64, flags: FeatureFlags) -> SearchRunConfig {
        SearchRunConfig {
            epochs: 1,
            batch_size: 8,
            seed,
            flags,
            supernet: SupernetConfig {
                cells: 4,
                channels: 4,
                nodes: 4,
                classes: 2,
                ..Default::default()
            },
            target: TargetNetConfig::desk(2),
            track_val_accuracy: false,
            ..Default::default()
        }
    }

    #[test]
    fn flag_parsing() {
        assert_eq!(FeatureFlags::parse("").unwrap(), FeatureFlags::all_on());
        let f = FeatureFlags::parse("-ws,-cb,-dc,-rc").unwrap();
        assert_eq!(f, FeatureFlags::all_off());
        let f = FeatureFlags::parse("-dc").unwrap();
        assert!(f.weight_sharing && !f.derived_cells && f.resource_constraint);
        assert!(FeatureFlags::parse("xy").is_err());
        assert_eq!(FeatureFlags::all_off().label(), "-ws-cb-dc-rc");
    }

    #[test]
    fn lagrangian_values() {
        let spec = ConstraintSpec::direct(CostMetric::Params, 10.0, 10.0).unwrap();
        let mut state = LagrangeState::new(0.01);
        let tape = Tape::<f64>::new();
        let val_loss = Tensor::scalar(1.0);
        let ks = SearchCost { value: Tensor::scalar(12.0), metric: CostMetric::Params };
        // λ = 0 ⇒ exactly the val loss.
        let l0 = lagrangian(&tape, &val_loss, &ks, &spec, &state).unwrap();
        assert_eq!(l0.item(), 1.0);
        // λ = 0.5, k_s − K' = 2 ⇒ 1 + 0.5·2 = 2.
        state.lambda = 0.5;
        let l = lagrangian(&tape, &val_loss, &ks, &spec, &state).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_projection_and_ascent() {
        let spec = ConstraintSpec::direct(CostMetric::Params, 10.0, 10.0).unwrap();
        let mut state = LagrangeState::new(0.01);
        // Satisfied constraint keeps λ at the boundary.
        state.step(1, 5.0, &spec);
        assert_eq!(state.lambda, 0.0);
        // Violation of 10 with η=0.01 from λ=0.5 gives 0.6.
        state.lambda = 0.5;
        state.step(2, 20.0, &spec);
        assert!((state.lambda - 0.6).abs() < 1e-12);
        assert_eq!(state.history.len(), 2);
        assert!(state.history[0].iteration < state.history[1].iteration);
    }

    #[test]
    fn lambda_increases_monotonically_under_persistent_violation() {
        let spec = ConstraintSpec::direct(CostMetric::Params, 100.0, 100.0)
            .unwrap()
            .normalized();
        let mut state = LagrangeState::new(0.05);
        let mut prev = state.lambda;
        for it in 1..=50 {
            state.step(it, 180.0, &spec); // violation stays positive
            assert!(state.lambda > prev);
            prev = state.lambda;
        }
        // Sign flip starts decreasing λ.
        state.step(51, 50.0, &spec);
        assert!(state.lambda < prev);
    }

    #[test]
    fn epoch_zero_returns_initial_genotype() {
        let ds = toy_dataset();
        let mut cfg = tiny_cfg(4, FeatureFlags::all_on());
        cfg.epochs = 0;
        let spec = ConstraintSpec::direct(CostMetric::Params, 4000.0, 3000.0)
            .unwrap()
            .normalized();
        let res = run_search(cfg.clone(), Some(spec), &ds).unwrap();
        assert!(res.epochs.is_empty());
        // Same seed ⇒ same initial α ⇒ same genotype.
        let session = SearchSession::new(
            cfg,
            Some(ConstraintSpec::direct(CostMetric::Params, 4000.0, 3000.0).unwrap()),
            &ds,
        )
        .unwrap();
        assert_eq!(res.genotype, session.derive().unwrap());
        assert!(res.derived_cost > 0);
    }

    #[test]
    fn search_is_deterministic_for_a_seed() {
        let ds = toy_dataset();
        let run = || {
            let cfg = tiny_cfg(9, FeatureFlags::all_on());
            let spec = ConstraintSpec::direct(CostMetric::Params, 4000.0, 3000.0)
                .unwrap()
                .normalized();
            let res = run_search(cfg, Some(spec), &ds).unwrap();
            (res.genotype.to_text(), res.epochs[0].train_loss, res.derived_cost)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn penalty_term_has_zero_w_gradient() {
        // One step with the penalty folded into the train loss must produce
        // bit-identical w values to one without it.
        let ds = toy_dataset();
        let spec = || {
            ConstraintSpec::direct(CostMetric::Params, 2000.0, 1500.0)
                .unwrap()
                .normalized()
        };
        let mut with = SearchSession::new(
            SearchRunConfig { penalty_in_train_loss: true, ..tiny_cfg(11, FeatureFlags::all_on()) },
            Some(spec()),
            &ds,
        )
        .unwrap();
        let mut without = SearchSession::new(
            SearchRunConfig { penalty_in_train_loss: false, ..tiny_cfg(11, FeatureFlags::all_on()) },
            Some(spec()),
            &ds,
        )
        .unwrap();
        with.lagrange.lambda = 0.75;
        without.lagrange.lambda = 0.75;
        with.step().unwrap();
        without.step().unwrap();
        let (a, b) = (with.w_values(), without.w_values());
        assert_eq!(a.len(), b.len());
        for (ta, tb) in a.iter().zip(&b) {
            for (va, vb) in ta.iter().zip(tb) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }
}
