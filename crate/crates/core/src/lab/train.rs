use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use super::data::SyntheticExample;
use super::model::{AdapterModel, Target};
use super::optim::{clip_global_norm, lr_at, AdamW};
use super::stream;
use crate::annotation::{categorize, entropy, BinningScheme, EntropyCategory};
use crate::error::{Error, Result};
use crate::trajectory::{
    CheckpointSchedule, CosineRecord, GradNormRecord, LossTrajectory, MethodTag, RunLog, RunMeta,
};

pub(crate) const PRETRAIN_STREAM: u64 = 3;
pub(crate) const ADAPTER_STREAM: u64 = 4;
pub(crate) const FINETUNE_STREAM: u64 = 5;

/// One member of the training union.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: Vec<f64>,
    /// Hard label, also used for class weighting.
    pub label: usize,
    /// Full target distribution for soft-label training.
    pub soft: Option<Vec<f64>>,
    /// Position in the tracked probe list, if any.
    pub tracked: Option<usize>,
}

impl TrainExample {
    fn target(&self) -> Target<'_> {
        match &self.soft {
            Some(t) => Target::Soft(t),
            None => Target::Hard(self.label),
        }
    }
}

/// Inverse class frequencies normalized to mean 1.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Config(format!("label {y} outside {num_classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} is absent from the training union")));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / num_classes as f64;
    Ok(inv.iter().map(|w| w / mean).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

struct Loop<'a> {
    config: &'a ToyConfig,
    peak: f64,
    total: u64,
    warmup: u64,
}

impl Loop<'_> {
    fn new(config: &ToyConfig, peak: f64, epochs: usize, n: usize) -> Loop<'_> {
        let total = epochs as u64 * steps_per_epoch(n, config.batch_size);
        let warmup = (config.warmup_fraction * total as f64).round() as u64;
        Loop {
            config,
            peak,
            total,
            warmup,
        }
    }

    /// One optimizer update on `batch`. Returns the step record.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        t: u64,
        model: &mut AdapterModel,
        opt: &mut AdamW,
        union: &[TrainExample],
        batch: &[usize],
        weights: &[f64],
        rng: &mut impl Rng,
    ) -> Result<StepRecord> {
        let mut grad = vec![0.0; model.num_trainable()];
        let inv = 1.0 / batch.len() as f64;
        let dropout = (model.method == MethodTag::Lowrank && self.config.adapter_dropout > 0.0)
            .then_some(self.config.adapter_dropout);
        let mut loss = 0.0;
        let mut mask = vec![1.0; model.d];
        for &i in batch {
            let ex = &union[i];
            if let Some(p) = dropout {
                let keep = 1.0 / (1.0 - p);
                for m in mask.iter_mut() {
                    *m = if rng.random::<f64>() < p { 0.0 } else { keep };
                }
            }
            let w = weights[ex.label];
            loss += inv
                * model.accumulate_grad(
                    &ex.features,
                    ex.target(),
                    w,
                    dropout.map(|_| &mask[..]),
                    inv,
                    &mut grad,
                );
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: t as usize,
                reason: format!("non-finite loss {loss}"),
            });
        }
        let grad_norm = clip_global_norm(&mut grad, self.config.clip_norm);
        let clipped_norm = super::model::norm(&grad);
        let lr = lr_at(t, self.peak, self.warmup, self.total);
        let mut params = model.trainable();
        opt.update(&mut params, &grad, lr);
        model.set_trainable(&params);
        Ok(StepRecord {
            step: t,
            lr,
            loss,
            grad_norm,
            clipped_norm,
        })
    }
}

fn optimizer(model: &AdapterModel, config: &ToyConfig) -> AdamW {
    AdamW::new(
        model.num_trainable(),
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.weight_decay,
        model.decay_mask(),
    )
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Trains `W0` and the bias on the bulk set with unweighted cross-entropy.
pub fn pretrain_base(bulk: &[SyntheticExample], config: &ToyConfig) -> Result<AdapterModel> {
    config.validate()?;
    if bulk.is_empty() {
        return Err(Error::EmptyInput("pretraining needs a non-empty bulk set"));
    }
    let mut rng = stream(config.seed, PRETRAIN_STREAM);
    let mut model = AdapterModel::base(config.feature_dim, config.num_classes);
    if config.base_init_std > 0.0 {
        let normal = Normal::new(0.0, config.base_init_std).map_err(|e| Error::Config(e.to_string()))?;
        for w in model.w0.iter_mut() {
            *w = normal.sample(&mut rng);
        }
    }
    let union: Vec<TrainExample> = bulk
        .iter()
        .map(|e| TrainExample {
            features: e.features.clone(),
            label: e.gold,
            soft: None,
            tracked: None,
        })
        .collect();
    let weights = vec![1.0; config.num_classes];
    let lp = Loop::new(config, config.pretrain_lr, config.pretrain_epochs, union.len());
    let mut opt = optimizer(&model, config);
    let mut order: Vec<usize> = (0..union.len()).collect();
    let mut t = 0;
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            t += 1;
            lp.step(t, &mut model, &mut opt, &union, batch, &weights, &mut rng)?;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Knobs the protocols turn on top of a plain fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneOptions {
    pub run_id: String,
    pub dataset: String,
    /// Which tracked examples join the training union; all when `None`.
    pub train_mask: Option<Vec<bool>>,
    /// Training labels for tracked examples; tracking still uses `gold`.
    pub label_overrides: Option<Vec<usize>>,
    /// Train tracked examples against their vote distribution.
    pub soft: bool,
    /// Log per-example gradient norms and the clean/contested cosine.
    pub track_gradients: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub log: RunLog,
    pub model: AdapterModel,
    pub steps: Vec<StepRecord>,
    pub class_weights: Vec<f64>,
    /// Number of gradient contributions per tracked example.
    pub trained_counts: Vec<u64>,
}

/// Checkpoint steps (every `log_every` updates plus each epoch end) and the
/// epoch-end subset, for a training union of `n` examples.
pub fn checkpoint_schedule(config: &ToyConfig, n: usize) -> Result<(CheckpointSchedule, Vec<u64>)> {
    let spe = steps_per_epoch(n, config.batch_size);
    let total = spe * config.epochs as u64;
    if total == 0 {
        return Err(Error::Config("fine-tuning needs at least one update".into()));
    }
    let every = config.log_every as u64;
    let steps: Vec<u64> = (1..=total).filter(|s| s % every == 0 || s % spe == 0).collect();
    let epochs: Vec<u64> = (1..=config.epochs as u64).map(|e| e * spe).collect();
    Ok((CheckpointSchedule::new(steps)?, epochs))
}

fn category_of(ex: &SyntheticExample, scheme: &BinningScheme) -> Result<Option<EntropyCategory>> {
    Ok(categorize(entropy(&ex.counts)?, scheme)?.category())
}

/// Adapts a copy of `base` on bulk plus tracked probe examples and records
/// every tracked example's loss at each checkpoint.
pub fn finetune(
    base: &AdapterModel,
    tracked: &[SyntheticExample],
    bulk: &[SyntheticExample],
    config: &ToyConfig,
    options: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if base.d != config.feature_dim || base.c != config.num_classes {
        return Err(Error::Config(format!(
            "base model is {}x{} but config wants {}x{}",
            base.d, base.c, config.feature_dim, config.num_classes
        )));
    }
    if tracked.iter().chain(bulk).any(|e| e.features.len() != config.feature_dim) {
        return Err(Error::Config("example feature length differs from feature_dim".into()));
    }
    let n_tracked = tracked.len();
    for (name, len) in [
        ("train_mask", options.train_mask.as_ref().map(Vec::len)),
        ("label_overrides", options.label_overrides.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != n_tracked {
                return Err(Error::Config(format!("{name} has {len} entries for {n_tracked} tracked examples")));
            }
        }
    }

    let mut rng = stream(config.seed, FINETUNE_STREAM);
    let mut model = base.with_method(
        config.method,
        config.rank,
        config.effective_alpha(),
        config.adapter_init_std,
        &mut stream(config.seed, ADAPTER_STREAM),
    )?;

    let mut union: Vec<TrainExample> = bulk
        .iter()
        .map(|e| TrainExample {
            features: e.features.clone(),
            label: e.gold,
            soft: options.soft.then(|| e.vote_distribution()),
            tracked: None,
        })
        .collect();
    for (i, e) in tracked.iter().enumerate() {
        if options.train_mask.as_ref().is_some_and(|m| !m[i]) {
            continue;
        }
        let label = options.label_overrides.as_ref().map_or(e.gold, |o| o[i]);
        union.push(TrainExample {
            features: e.features.clone(),
            label,
            soft: options.soft.then(|| e.vote_distribution()),
            tracked: Some(i),
        });
    }
    if union.is_empty() {
        return Err(Error::Config("training union is empty".into()));
    }
    let labels: Vec<usize> = union.iter().map(|e| e.label).collect();
    let weights = class_weights(&labels, config.num_classes)?;

    let (schedule, epoch_steps) = checkpoint_schedule(config, union.len())?;
    let scheme = BinningScheme::fixed(config.clean_threshold, config.contested_threshold)?;
    let categories: Vec<Option<EntropyCategory>> =
        tracked.iter().map(|e| category_of(e, &scheme)).collect::<Result<_>>()?;

    let t_count = schedule.len();
    let mut losses = vec![Vec::with_capacity(t_count); n_tracked];
    let mut gold_probs = vec![Vec::with_capacity(t_count); n_tracked];
    let mut dists = vec![Vec::with_capacity(t_count); n_tracked];
    let mut grad_norms = Vec::new();
    let mut cosines = Vec::new();

    let lp = Loop::new(config, config.lr, config.epochs, union.len());
    let mut opt = optimizer(&model, config);
    let mut order: Vec<usize> = (0..union.len()).collect();
    let mut trained_counts = vec![0u64; n_tracked];
    let mut steps = Vec::with_capacity(lp.total as usize);
    let mut next_checkpoint = 0;
    let mut t = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            t += 1;
            for &i in batch {
                if let Some(k) = union[i].tracked {
                    trained_counts[k] += 1;
                }
            }
            steps.push(lp.step(t, &mut model, &mut opt, &union, batch, &weights, &mut rng)?);
            if schedule.steps().get(next_checkpoint) != Some(&t) {
                continue;
            }
            next_checkpoint += 1;
            for (k, ex) in tracked.iter().enumerate() {
                let q = model.predict(&ex.features);
                let p = q[ex.gold];
                let l = model.loss(&ex.features, Target::Hard(ex.gold), 1.0).map_err(|e| Error::Training {
                    step: t as usize,
                    reason: e.to_string(),
                })?;
                losses[k].push(l);
                gold_probs[k].push(p);
                dists[k].push(q);
            }
            if options.track_gradients {
                let train_label =
                    |k: usize| options.label_overrides.as_ref().map_or(tracked[k].gold, |o| o[k]);
                let norms: BTreeMap<String, f64> = tracked
                    .iter()
                    .enumerate()
                    .map(|(k, ex)| {
                        let y = train_label(k);
                        model
                            .per_example_gradient_norm(&ex.features, Target::Hard(y), weights[y])
                            .map(|n| (ex.uid.clone(), n))
                    })
                    .collect::<Result<_>>()?;
                grad_norms.push(GradNormRecord { step: t, norms });
                let group = |cat: EntropyCategory| -> Vec<(&[f64], Target<'_>, f64)> {
                    (0..n_tracked)
                        .filter(|&k| categories[k] == Some(cat))
                        .map(|k| {
                            let y = train_label(k);
                            (&tracked[k].features[..], Target::Hard(y), weights[y])
                        })
                        .collect()
                };
                let (clean, contested) = (group(EntropyCategory::Clean), group(EntropyCategory::Contested));
                let cosine = if clean.is_empty() || contested.is_empty() {
                    None
                } else {
                    model.group_gradient_cosine(&clean, &contested)?
                };
                cosines.push(CosineRecord { step: t, cosine });
            }
        }
    }

    let mut trajectories: Vec<LossTrajectory> = tracked
        .iter()
        .zip(losses)
        .zip(gold_probs)
        .zip(dists)
        .map(|(((ex, l), p), q)| LossTrajectory {
            uid: ex.uid.clone(),
            losses: l,
            gold_probs: Some(p),
            pred_dists: Some(q),
        })
        .collect();
    trajectories.sort_by(|a, b| a.uid.cmp(&b.uid));
    let meta = RunMeta {
        run_id: options.run_id.clone(),
        method: config.method,
        rank: if config.method == MethodTag::Lowrank { config.rank } else { 0 },
        alpha: config.effective_alpha(),
        seed: config.seed,
        dataset: options.dataset.clone(),
        schedule,
        epoch_steps,
    };
    Ok(FinetuneOutcome {
        log: RunLog {
            meta,
            trajectories,
            grad_norms,
            cosines,
        },
        model,
        steps,
        class_weights: weights,
        trained_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::{generate_dataset, stratified_split};

    fn tiny() -> ToyConfig {
        ToyConfig {
            probe_size: 60,
            bulk_size: 300,
            epochs: 2,
            log_every: 5,
            pretrain_epochs: 1,
            ..ToyConfig::default()
        }
    }

    fn setup(cfg: &ToyConfig) -> (AdapterModel, Vec<SyntheticExample>, Vec<SyntheticExample>) {
        let ds = generate_dataset(cfg, cfg.seed).unwrap();
        let (train, _) = stratified_split(&ds.probe, cfg, cfg.seed).unwrap();
        let base = pretrain_base(&ds.bulk, cfg).unwrap();
        (base, train, ds.bulk)
    }

    #[test]
    fn weights_normalized() {
        let w = class_weights(&[0, 0, 0, 1, 2, 2], 3).unwrap();
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 3.0).abs() < 1e-12);
        let eq = class_weights(&[0, 1, 2, 2, 1, 0], 3).unwrap();
        assert!(eq.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!(class_weights(&[0, 0], 3).is_err());
    }

    #[test]
    fn pretraining_separates_bulk() {
        let cfg = ToyConfig::default();
        let ds = generate_dataset(&cfg, 42).unwrap();
        let base = pretrain_base(&ds.bulk, &cfg).unwrap();
        let acc = ds.bulk.iter().filter(|e| {
            let q = base.predict(&e.features);
            (0..3).all(|c| q[e.gold] >= q[c])
        });
        assert!(acc.count() as f64 / ds.bulk.len() as f64 >= 0.9);
        assert_eq!(base, pretrain_base(&ds.bulk, &cfg).unwrap());
        let zero = ToyConfig {
            pretrain_epochs: 0,
            ..cfg.clone()
        };
        let untouched = pretrain_base(&ds.bulk, &zero).unwrap();
        let mut rng = stream(cfg.seed, PRETRAIN_STREAM);
        let normal = Normal::new(0.0, cfg.base_init_std).unwrap();
        let init: Vec<f64> = (0..cfg.feature_dim * 3).map(|_| normal.sample(&mut rng)).collect();
        assert_eq!(untouched.w0, init);
    }

    #[test]
    fn zero_lr_freezes_trajectories() {
        let cfg = ToyConfig { lr: 0.0, ..tiny() };
        let (base, train, bulk) = setup(&cfg);
        let out = finetune(&base, &train, &bulk, &cfg, &FinetuneOptions::default()).unwrap();
        for tr in &out.log.trajectories {
            assert_eq!(tr.delta_loss().unwrap(), 0.0);
        }
    }

    #[test]
    fn frozen_parameters_stay_frozen() {
        for method in [MethodTag::Lowrank, MethodTag::Scaling, MethodTag::Full] {
            let cfg = tiny().with_method(method, 2);
            let (base, train, bulk) = setup(&cfg);
            let out = finetune(&base, &train, &bulk, &cfg, &FinetuneOptions::default()).unwrap();
            if method == MethodTag::Full {
                assert_ne!(out.model.w0, base.w0);
            } else {
                assert_eq!(out.model.w0, base.w0);
            }
            assert_ne!(out.model.bias, base.bias);
            for s in &out.steps {
                assert!(s.clipped_norm <= cfg.clip_norm + 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_runs() {
        let cfg = tiny();
        let (base, train, bulk) = setup(&cfg);
        let opts = FinetuneOptions {
            track_gradients: true,
            ..Default::default()
        };
        let a = finetune(&base, &train, &bulk, &cfg, &opts).unwrap();
        let b = finetune(&base, &train, &bulk, &cfg, &opts).unwrap();
        assert_eq!(a.log.emit(), b.log.emit());
        assert_eq!(a.log.cosines.len(), a.log.meta.schedule.len());
        assert!(a.log.cosines.iter().all(|c| c.cosine.is_none_or(|v| (-1.0..=1.0).contains(&v))));
    }

    #[test]
    fn schedule_hits_warmup_peak_and_decays_to_zero() {
        let cfg = tiny();
        let (base, train, bulk) = setup(&cfg);
        let out = finetune(&base, &train, &bulk, &cfg, &FinetuneOptions::default()).unwrap();
        let total = out.steps.len() as u64;
        let warm = (cfg.warmup_fraction * total as f64).round() as u64;
        assert!((out.steps[warm as usize - 1].lr - cfg.lr).abs() < 1e-12);
        assert!(out.steps.last().unwrap().lr.abs() < 1e-12);
        let sched = out.log.meta.schedule.steps();
        assert_eq!(*sched.last().unwrap(), total);
        assert_eq!(out.log.meta.epoch_steps.len(), cfg.epochs);
    }

    #[test]
    fn masked_examples_get_no_updates() {
        let cfg = tiny();
        let (base, train, bulk) = setup(&cfg);
        let mask: Vec<bool> = (0..train.len()).map(|i| i % 2 == 0).collect();
        let opts = FinetuneOptions {
            train_mask: Some(mask.clone()),
            ..Default::default()
        };
        let out = finetune(&base, &train, &bulk, &cfg, &opts).unwrap();
        for (m, n) in mask.iter().zip(&out.trained_counts) {
            assert_eq!(*n, if *m { cfg.epochs as u64 } else { 0 });
        }
        assert_eq!(out.log.trajectories.len(), train.len());
    }

    #[test]
    fn uniform_soft_target_pulls_toward_uniform() {
        let mut model = AdapterModel::base(4, 3);
        model.w0 = vec![1.0, -0.5, 0.2, 0.3, 0.8, -1.0, -0.4, 0.1, 0.6, 0.9, -0.2, 0.05];
        let mut model = model.with_method(MethodTag::Full, 0, 0.0, 0.0, &mut stream(1, 1)).unwrap();
        let x = [0.5, -1.0, 2.0, 0.3];
        let u = [1.0 / 3.0; 3];
        let kl = |m: &AdapterModel| m.predict(&x).iter().map(|q| u[0] * (u[0] / q).ln()).sum::<f64>();
        let start = kl(&model);
        let mut last = start;
        for _ in 0..200 {
            let (_, g) = model.loss_and_grad(&x, Target::Soft(&u), 1.0, None);
            let p: Vec<f64> = model.trainable().iter().zip(&g).map(|(p, g)| p - 0.02 * g).collect();
            model.set_trainable(&p);
            let now = kl(&model);
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
        assert!(last < 0.1 * start, "{last} vs {start}");
    }
}
