//! Training loop: Adam over the chosen objective with per-iteration random
//! rater selection, optional augmentation, and early stopping on the
//! validation loss. The parameters at the minimum validation loss are the
//! ones left in the store when training finishes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Phase;
use crate::data::{augment, compute_norm_stats, normalize, MultiRaterSample, NormStats};
use crate::error::{Error, Result};
use crate::model::{KlMode, Model, Network};
use crate::optim::Adam;
use crate::params::Graph;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub kl_mode: KlMode,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive".to_string()));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("need at least one epoch".to_string()));
        }
        if let KlMode::MonteCarlo { samples } = self.kl_mode {
            if samples == 0 {
                return Err(Error::config("monte-carlo KL needs at least one sample".to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ce: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training-split statistics used to normalize every input.
    pub norm: NormStats,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,ce,kl\n");
        for row in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.epoch, row.train_loss, row.val_loss, row.ce, row.kl
            ));
        }
        out
    }
}

pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; `Stop` once more than `patience`
/// consecutive epochs fail to improve it.
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// A normalized image batch with per-pixel class targets.
pub(crate) struct Batch {
    pub images: Tensor,
    pub targets: Vec<f64>,
}

/// Assembles a batch: one rater mask per sample as the target, image
/// normalized with the training statistics, optional shared augmentation.
pub(crate) fn assemble_batch<R: Rng>(
    samples: &[&MultiRaterSample],
    raters: &[usize],
    norm: &NormStats,
    do_augment: bool,
    rng: &mut R,
) -> Batch {
    let size = samples[0].size;
    let mut images = Vec::with_capacity(samples.len() * size * size);
    let mut targets = Vec::with_capacity(samples.len() * size * size);
    for (&sample, &rater) in samples.iter().zip(raters) {
        let augmented;
        let view = if do_augment {
            augmented = augment(sample, rng);
            &augmented
        } else {
            sample
        };
        images.extend(normalize(&view.image, norm));
        targets.extend(view.masks[rater].iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Batch {
        images: Tensor::new(vec![samples.len(), 1, size, size], images).expect("sized above"),
        targets,
    }
}

fn check_finite(step: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "training aborted at step {step}: {name} term is {value}"
        )))
    }
}

/// Mean validation loss with a fixed noise stream, so values are comparable
/// across epochs.
fn validation_loss(
    model: &mut Model,
    val: &[MultiRaterSample],
    raters_used: usize,
    norm: &NormStats,
    schedule: &TrainSchedule,
) -> Result<f64> {
    let mut vrng = stream(schedule.seed, "train/val-noise");
    let mut total = 0.0;
    let mut batches = 0usize;
    let indices: Vec<usize> = (0..val.len()).collect();
    for chunk in indices.chunks(schedule.batch_size) {
        let samples: Vec<&MultiRaterSample> = chunk.iter().map(|&i| &val[i]).collect();
        let raters: Vec<usize> = chunk.iter().map(|&i| i % raters_used).collect();
        let batch = assemble_batch(&samples, &raters, norm, false, &mut vrng);
        let Model { store, net, .. } = model;
        let mut g = Graph::new(store);
        let terms = net.loss(
            &mut g,
            &batch.images,
            &batch.targets,
            Phase::Eval,
            schedule.kl_mode,
            &mut vrng,
        )?;
        total += g.tape.scalar_value(terms.loss);
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains in place and returns the per-epoch log. Raters are drawn uniformly
/// from the first `raters_used` masks each iteration; evaluation elsewhere
/// may still use all raters.
pub fn train(
    model: &mut Model,
    train_set: &[MultiRaterSample],
    val_set: &[MultiRaterSample],
    raters_used: usize,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val_set, raters_used, schedule, &mut |_| {})
}

/// [`train`] with a per-epoch observer, for live logging from callers.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &[MultiRaterSample],
    val_set: &[MultiRaterSample],
    raters_used: usize,
    schedule: &TrainSchedule,
    progress: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::data("training needs non-empty train and val splits".to_string()));
    }
    let available = train_set[0].masks.len();
    if raters_used == 0 || raters_used > available {
        return Err(Error::config(format!(
            "raters_used must be in 1..={available}, got {raters_used}"
        )));
    }
    if matches!(model.net, Network::Prob(_)) || model.spec.latent.is_some() {
        // probabilistic nets need the mixture/closed-form pairing checked
        // before the first expensive epoch
        if let (Some(latent), KlMode::ClosedForm) = (&model.spec.latent, schedule.kl_mode) {
            if latent.mixture.is_some() {
                return Err(Error::config(
                    "closed-form KL is undefined for mixtures; use monte-carlo".to_string(),
                ));
            }
        }
    }

    let norm = compute_norm_stats(train_set)?;
    let mut trng: ChaCha8Rng = stream(schedule.seed, "train");
    let mut adam = Adam::new(&model.store, schedule.lr);
    let mut stopper = EarlyStopping::new(schedule.patience);
    let mut best_params: Vec<Vec<f64>> =
        model.store.entries().iter().map(|e| e.tensor.values().to_vec()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=schedule.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut trng);
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            step += 1;
            let samples: Vec<&MultiRaterSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let raters: Vec<usize> = samples
                .iter()
                .map(|_| trng.random_range(0..raters_used))
                .collect();
            let batch = assemble_batch(&samples, &raters, &norm, schedule.augment, &mut trng);
            let Model { store, net, .. } = model;
            let mut g = Graph::new(store);
            let terms = net.loss(
                &mut g,
                &batch.images,
                &batch.targets,
                Phase::Train,
                schedule.kl_mode,
                &mut trng,
            )?;
            let ce_v = g.tape.scalar_value(terms.ce);
            let kl_v = g.tape.scalar_value(terms.kl);
            let loss_v = g.tape.scalar_value(terms.loss);
            check_finite(step, "cross-entropy", ce_v)?;
            check_finite(step, "kl", kl_v)?;
            check_finite(step, "loss", loss_v)?;
            g.tape.backward(terms.loss)?;
            let grads = g.gradients();
            drop(g);
            adam.step(&mut model.store, &grads);
            loss_sum += loss_v;
            ce_sum += ce_v;
            kl_sum += kl_v;
            batches += 1;
        }

        let val_loss = validation_loss(model, val_set, raters_used, &norm, schedule)?;
        let n = batches as f64;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            ce: ce_sum / n,
            kl: kl_sum / n,
        };
        progress(&row);
        log.push(row);
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                for (dst, e) in best_params.iter_mut().zip(model.store.entries()) {
                    dst.copy_from_slice(e.tensor.values());
                }
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let ids: Vec<_> = model.store.ids().collect();
    for (id, src) in ids.into_iter().zip(&best_params) {
        model.store.values_mut(id).copy_from_slice(src);
    }
    Ok(TrainOutcome {
        log,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::model::{build, CovKind, LatentSpec, ModelSpec};

    #[test]
    fn patience_counts_epochs_without_improvement() {
        let mut stopper = EarlyStopping::new(20);
        assert!(matches!(stopper.observe(1, 1.0), StopDecision::Improved));
        for epoch in 2..=21 {
            assert!(
                matches!(stopper.observe(epoch, 1.1), StopDecision::Continue),
                "epoch {epoch} still within patience"
            );
        }
        assert!(matches!(stopper.observe(22, 1.1), StopDecision::Stop));
        assert_eq!(stopper.best_epoch(), 1);
        assert_eq!(stopper.best_loss(), 1.0);
    }

    #[test]
    fn equal_loss_does_not_count_as_improvement() {
        let mut stopper = EarlyStopping::new(1);
        stopper.observe(1, 0.5);
        assert!(matches!(stopper.observe(2, 0.5), StopDecision::Continue));
        assert!(matches!(stopper.observe(3, 0.5), StopDecision::Stop));
        assert_eq!(stopper.best_epoch(), 1);
    }

    fn tiny_dataset() -> crate::data::Dataset {
        let config = SyntheticConfig {
            size: 16,
            raters: 2,
            core_radius: (2.5, 3.5),
            annex_radius: (2.0, 3.0),
            n_train: 10,
            n_val: 4,
            n_test: 4,
            ..SyntheticConfig::default()
        };
        generate(&config).unwrap()
    }

    fn tiny_schedule(max_epochs: usize) -> TrainSchedule {
        TrainSchedule {
            lr: 3e-3,
            batch_size: 5,
            patience: 50,
            max_epochs,
            seed: 3,
            augment: false,
            kl_mode: KlMode::ClosedForm,
        }
    }

    fn tiny_spec(latent: Option<LatentSpec>) -> ModelSpec {
        ModelSpec {
            in_channels: 1,
            image_size: 16,
            filters: vec![2, 3, 4],
            bottleneck: 6,
            latent,
            dropout: 0.0,
            beta: 1.0,
        }
    }

    #[test]
    fn smoke_training_reduces_the_loss() {
        let ds = tiny_dataset();
        let mut model = build(&tiny_spec(None), 7).unwrap();
        let outcome = train(&mut model, &ds.train, &ds.val, 2, &tiny_schedule(8)).unwrap();
        assert_eq!(outcome.log.len(), 8);
        let first = outcome.log.first().unwrap().ce;
        let last = outcome.log.last().unwrap().ce;
        assert!(last < first, "CE did not drop: {first} -> {last}");
        assert!(outcome.best_epoch >= 1);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = tiny_dataset();
        let spec = tiny_spec(Some(LatentSpec { dim: 2, cov: CovKind::Diag, mixture: None }));
        let run = |seed: u64| {
            let mut model = build(&spec, seed).unwrap();
            let schedule = TrainSchedule { seed, ..tiny_schedule(2) };
            let outcome = train(&mut model, &ds.train, &ds.val, 2, &schedule).unwrap();
            let params: Vec<f64> = model
                .store
                .entries()
                .iter()
                .flat_map(|e| e.tensor.values().to_vec())
                .collect();
            (outcome.log, params)
        };
        let (log_a, params_a) = run(13);
        let (log_b, params_b) = run(13);
        let (log_c, params_c) = run(14);
        assert_eq!(log_a, log_b);
        assert_eq!(params_a, params_b);
        assert_ne!(params_a, params_c, "different seeds must differ");
        assert_ne!(log_a, log_c);
    }

    #[test]
    fn single_rater_training_works() {
        let ds = tiny_dataset();
        let mut model = build(&tiny_spec(None), 7).unwrap();
        train(&mut model, &ds.train, &ds.val, 1, &tiny_schedule(1)).unwrap();
        let err = train(&mut model, &ds.train, &ds.val, 3, &tiny_schedule(1)).unwrap_err();
        assert_eq!(err.category(), "config", "more raters than the dataset has");
    }

    #[test]
    fn best_epoch_parameters_are_kept() {
        let ds = tiny_dataset();
        let spec = tiny_spec(None);
        // long run with tiny patience: training stops once val loss stalls,
        // and the kept parameters must reproduce the recorded best val loss
        let schedule = TrainSchedule { patience: 2, ..tiny_schedule(40) };
        let mut model = build(&spec, 9).unwrap();
        let outcome = train(&mut model, &ds.train, &ds.val, 2, &schedule).unwrap();
        let best_from_log = outcome
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_val_loss, best_from_log);
        let check = validation_loss(&mut model, &ds.val, 2, &outcome.norm, &schedule).unwrap();
        assert!(
            (check - outcome.best_val_loss).abs() < 1e-12,
            "restored parameters give val loss {check}, expected {}",
            outcome.best_val_loss
        );
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let ds = tiny_dataset();
        let mut model = build(&tiny_spec(None), 7).unwrap();
        let outcome = train(&mut model, &ds.train, &ds.val, 2, &tiny_schedule(2)).unwrap();
        let csv = outcome.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,ce,kl");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
    }
}
