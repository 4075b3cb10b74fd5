//! Frozen-backbone fine-tuning: SGD with momentum, cosine warmup
//! schedule, per-epoch evaluation, and the learning-rate grid search.

use std::time::Instant;

use ila_core::graph::Graph;
use ila_core::ila::apply_bn_updates;
use ila_core::model::{ForwardOptions, Model};
use ila_core::optim::SgdMomentum;
use ila_core::rng::Rng;
use ila_core::schedule::cosine_warmup_lr;
use ila_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{batch_images, PreprocessMode, Sample};
use crate::{LabError, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
    /// Epochs per grid point during the learning-rate search.
    pub search_epochs: usize,
    /// Raw side images are resized to before cropping.
    pub resize_to: usize,
    /// Network input side; must match the model's image_size.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            warmup_steps: 500,
            epochs: 50,
            seed: 0,
            lr_grid: vec![0.3, 0.1, 0.03, 0.01, 0.003],
            search_epochs: 10,
            resize_to: 32,
            crop: 24,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(LabError::Config("lr_grid must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be positive".into()));
        }
        if self.crop > self.resize_to {
            return Err(LabError::Config(format!(
                "crop {} exceeds resize_to {}",
                self.crop, self.resize_to
            )));
        }
        let total = self.total_steps(train_len);
        if self.epochs > 0 && self.warmup_steps >= total {
            return Err(LabError::Config(format!(
                "warmup_steps {} must be below total steps {total}",
                self.warmup_steps
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_len)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub chosen_lr: f64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_eval_acc: Vec<f64>,
    pub final_acc: f64,
    /// Wall-clock seconds; excluded from serialization so identical runs
    /// produce identical bytes.
    #[serde(skip)]
    pub wall_clock: f64,
}

/// Top-1 accuracy in percent; logit ties resolve to the lowest class.
pub fn evaluate_top1(model: &Model, split: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    if split.is_empty() {
        return Err(LabError::Config("evaluate_top1 on an empty split".into()));
    }
    let mut rng = Rng::derive(0, "eval-noop");
    let mut correct = 0usize;
    for chunk in split.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, labels) =
            batch_images(&refs, PreprocessMode::Eval, cfg.resize_to, cfg.crop, &mut rng)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images, ForwardOptions::default())?;
        let logits = g.data(out.logits);
        let c = model.vit.num_classes;
        for (b, &label) in labels.iter().enumerate() {
            let row = &logits[b * c..(b + 1) * c];
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
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// The full fine-tuning loop. The model's backbone stays frozen; only
/// adapter, head, and final-norm tensors move. Deterministic in
/// (model, data, cfg.seed).
pub fn train_model(model: &mut Model, train: &[Sample], eval: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate(train.len())?;
    if train.is_empty() {
        return Err(LabError::Config("empty training split".into()));
    }
    let started = Instant::now();
    let mut order_rng = Rng::derive(cfg.seed, "epoch-order");
    let mut aug_rng = Rng::derive(cfg.seed, "augment");
    let mut opt = SgdMomentum::new(cfg.momentum);
    let total_steps = cfg.total_steps(train.len());
    let mut step = 0usize;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut accs = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (images, labels) = batch_images(
                &refs,
                PreprocessMode::Train,
                cfg.resize_to,
                cfg.crop,
                &mut aug_rng,
            )?;
            let loss_val = train_step(model, &mut opt, &images, &labels, step, total_steps, cfg)?;
            if !loss_val.is_finite() {
                return Err(LabError::Divergence(format!(
                    "non-finite loss {loss_val} at step {step}"
                )));
            }
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
        }
        losses.push(epoch_loss / batches as f64);
        accs.push(evaluate_top1(model, eval, cfg)?);
    }
    let final_acc = match accs.last() {
        Some(&a) => a,
        None => evaluate_top1(model, eval, cfg)?,
    };
    Ok(TrainReport {
        seed: cfg.seed,
        chosen_lr: cfg.base_lr,
        epoch_train_loss: losses,
        epoch_eval_acc: accs,
        final_acc,
        wall_clock: started.elapsed().as_secs_f64(),
    })
}

/// One optimizer step on one batch; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut SgdMomentum,
    images: &Tensor,
    labels: &[usize],
    step: usize,
    total_steps: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        images,
        ForwardOptions {
            training: true,
            ..Default::default()
        },
    )?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let loss_val = g.data(loss)[0];
    let grads = g.backward(loss)?;
    model.store.accumulate(&grads, &out.bound)?;
    let lr = cosine_warmup_lr(step, cfg.base_lr, cfg.warmup_steps, total_steps);
    opt.step(&mut model.store, lr)?;
    model.store.zero_grads();
    apply_bn_updates(&mut model.store, &out.bn_updates, BN_MOMENTUM)?;
    Ok(loss_val)
}

/// Stratified 80/20 split of `train` by class, deterministic in `seed`.
pub fn stratified_split(train: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut byclass: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in train.iter().enumerate() {
        byclass.entry(s.label).or_default().push(i);
    }
    let mut rng = Rng::derive(seed, "lr-search-split");
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in byclass {
        rng.shuffle(&mut idx);
        let n_val = (idx.len() / 5).max(1);
        for (k, &i) in idx.iter().enumerate() {
            if k < n_val {
                val.push(train[i].clone());
            } else {
                fit.push(train[i].clone());
            }
        }
    }
    (fit, val)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSearchOutcome {
    pub lr: f64,
    /// Validation accuracy, or the divergence message for failed runs.
    pub accuracy: Option<f64>,
    pub message: Option<String>,
}

/// Short training per grid LR on a stratified 80/20 split of the train
/// data; argmax validation accuracy, ties toward the smaller LR.
pub fn lr_search(
    factory: &dyn Fn() -> Result<Model>,
    train: &[Sample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<LrSearchOutcome>)> {
    if cfg.lr_grid.is_empty() {
        return Err(LabError::Config("lr_grid must not be empty".into()));
    }
    let (fit, val) = stratified_split(train, cfg.seed);
    if fit.is_empty() || val.is_empty() {
        return Err(LabError::Config(
            "train split too small to carve a validation subset".into(),
        ));
    }
    let mut outcomes = Vec::new();
    for &lr in &cfg.lr_grid {
        let run_cfg = TrainConfig {
            base_lr: lr,
            epochs: cfg.search_epochs,
            ..cfg.clone()
        };
        let result = factory().and_then(|mut model| train_model(&mut model, &fit, &val, &run_cfg));
        match result {
            Ok(report) => outcomes.push(LrSearchOutcome {
                lr,
                accuracy: Some(report.final_acc),
                message: None,
            }),
            Err(LabError::Divergence(m)) => outcomes.push(LrSearchOutcome {
                lr,
                accuracy: None,
                message: Some(m),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for o in &outcomes {
        if let Some(acc) = o.accuracy {
            best = match best {
                None => Some((o.lr, acc)),
                // strictly-greater keeps earlier entries on ties; combined
                // with the final min() this lands on the smallest tied LR
                Some((blr, bacc)) => {
                    if acc > bacc || (acc == bacc && o.lr < blr) {
                        Some((o.lr, acc))
                    } else {
                        Some((blr, bacc))
                    }
                }
            };
        }
    }
    match best {
        Some((lr, _)) => Ok((lr, outcomes)),
        None => {
            let detail: Vec<String> = outcomes
                .iter()
                .map(|o| format!("lr {}: {}", o.lr, o.message.as_deref().unwrap_or("failed")))
                .collect();
            Err(LabError::Divergence(format!(
                "all learning rates diverged: {}",
                detail.join("; ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use ila_core::ila::{IlaConfig, IlaVariant};
    use ila_core::params::ParamKind;
    use ila_core::vit::ViTConfig;

    fn tiny_vit() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            depth: 3,
            hidden_dim: 16,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn tiny_ila() -> IlaConfig {
        IlaConfig {
            bottleneck_dim: 4,
            kernel: 1,
            intra_adapter_dim: 4,
            ..IlaConfig::default()
        }
    }

    fn tiny_data() -> (Vec<Sample>, Vec<Sample>) {
        generate_synthetic(&SyntheticSpec {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 12,
            delta: 0.30,
            sigma: 0.02,
            seed: 4,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            base_lr: 0.05,
            warmup_steps: 2,
            epochs: 3,
            batch_size: 4,
            resize_to: 12,
            crop: 8,
            search_epochs: 1,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_reports_untrained_accuracy() {
        let (train, test) = tiny_data();
        let mut model = Model::build(tiny_vit(), tiny_ila(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let report = train_model(&mut model, &train, &test, &cfg).unwrap();
        assert!(report.epoch_train_loss.is_empty());
        assert!((0.0..=100.0).contains(&report.final_acc));
    }

    #[test]
    fn same_seed_identical_loss_curves() {
        let (train, test) = tiny_data();
        let cfg = tiny_cfg();
        let mut m1 = Model::build(tiny_vit(), tiny_ila(), 3).unwrap();
        let r1 = train_model(&mut m1, &train, &test, &cfg).unwrap();
        let mut m2 = Model::build(tiny_vit(), tiny_ila(), 3).unwrap();
        let r2 = train_model(&mut m2, &train, &test, &cfg).unwrap();
        assert_eq!(r1.epoch_train_loss, r2.epoch_train_loss);
        assert_eq!(r1.epoch_eval_acc, r2.epoch_eval_acc);
    }

    #[test]
    fn frozen_tensors_bit_identical_after_training() {
        let (train, test) = tiny_data();
        let mut model = Model::build(tiny_vit(), tiny_ila(), 3).unwrap();
        let before: Vec<(String, Vec<f64>)> = model
            .store
            .names_with_kind(ParamKind::Frozen)
            .into_iter()
            .map(|n| {
                let v = model.store.value(&n).unwrap().data().to_vec();
                (n, v)
            })
            .collect();
        train_model(&mut model, &train, &test, &tiny_cfg()).unwrap();
        for (name, old) in before {
            assert_eq!(
                model.store.value(&name).unwrap().data(),
                old.as_slice(),
                "{name} moved"
            );
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let (train, _) = tiny_data();
        let mut model = Model::build(tiny_vit(), tiny_ila(), 3).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.05,
            warmup_steps: 0,
            ..tiny_cfg()
        };
        let refs: Vec<&Sample> = train.iter().take(4).collect();
        let mut rng = Rng::derive(0, "fixed");
        let (images, labels) =
            batch_images(&refs, PreprocessMode::Eval, 12, 8, &mut rng).unwrap();
        let mut opt = SgdMomentum::new(cfg.momentum);
        let mut losses = Vec::new();
        for step in 0..10 {
            losses.push(train_step(&mut model, &mut opt, &images, &labels, step, 100, &cfg).unwrap());
        }
        assert!(losses[9] < losses[0], "{losses:?}");
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let model = Model::build(tiny_vit(), tiny_ila(), 0).unwrap();
        assert!(evaluate_top1(&model, &[], &tiny_cfg()).is_err());
    }

    #[test]
    fn single_element_grid_is_chosen_after_one_run() {
        let (train, _) = tiny_data();
        let cfg = TrainConfig {
            lr_grid: vec![0.02],
            ..tiny_cfg()
        };
        let factory = || Model::build(tiny_vit(), tiny_ila(), 0).map_err(LabError::Core);
        let (lr, outcomes) = lr_search(&factory, &train, &cfg).unwrap();
        assert_eq!(lr, 0.02);
        assert_eq!(outcomes.len(), 1);
    }

    #[test]
    fn stratified_split_keeps_all_classes() {
        let (train, _) = tiny_data();
        let (fit, val) = stratified_split(&train, 0);
        assert_eq!(fit.len() + val.len(), train.len());
        for c in 0..3 {
            assert!(fit.iter().any(|s| s.label == c));
            assert!(val.iter().any(|s| s.label == c));
        }
    }

    #[test]
    fn variant_none_trains_head_only() {
        let cfg = IlaConfig {
            variant: IlaVariant::None,
            ..tiny_ila()
        };
        let model = Model::build(tiny_vit(), cfg, 0).unwrap();
        for name in model.store.trainable_names() {
            assert!(name.starts_with("head."), "{name}");
        }
    }
}
