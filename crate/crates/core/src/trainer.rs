//! SAE and Bin-DANN training loops, threshold sweep and binarization.
//!
//! Every random draw comes from one seeded ChaCha8 generator split into
//! streams: parameter init, source batch indices, source dropout seeds,
//! target batch indices and target dropout seeds. The source streams are
//! consumed identically by both trainers, so Bin-DANN with λ = 0 follows
//! the SAE trajectory bit for bit.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{split_patches, BinaryMask, Dataset, Page, ProbabilityMap};
use crate::error::{Error, Result};
use crate::graph::{Bindings, ForwardOptions, Gradients, NodeId};
use crate::metrics::{confusion_bits, Confusion};
use crate::models::{self, BinDannConfig, Model, ModelKind, SaeConfig};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 0;
const STREAM_SOURCE_BATCH: u64 = 1;
const STREAM_SOURCE_DROPOUT: u64 = 2;
const STREAM_TARGET_BATCH: u64 = 3;
const STREAM_TARGET_DROPOUT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub sweep_step: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            sweep_step: 0.05,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("epochs and batch must be at least 1".into()));
        }
        if !(self.sweep_step > 0.0 && self.sweep_step < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sweep step must be in (0, 1), got {}",
                self.sweep_step
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bin_loss: f64,
    pub domain_loss: f64,
    pub lambda: f64,
    pub val_f1: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedBinarizer {
    pub model: Model,
    /// Threshold maximizing validation F1 at the best epoch.
    pub threshold: f64,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainedBinarizer {
    pub fn predict(&self, page: &Page) -> Result<ProbabilityMap> {
        self.model.predict_prob_map(page)
    }

    pub fn binarize_page(&self, page: &Page) -> Result<BinaryMask> {
        Ok(binarize(&self.predict(page)?, self.threshold))
    }

    /// `epoch,bin_loss,domain_loss,lambda,val_f1,th_s` rows.
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,bin_loss,domain_loss,lambda,val_f1,th_s\n");
    for r in history {
        writeln!(
            out,
            "{},{:.10},{:.10},{:.4},{:.10},{:.4}",
            r.epoch, r.bin_loss, r.domain_loss, r.lambda, r.val_f1, r.threshold
        )
        .expect("string write");
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub bin_loss: f64,
    pub domain_loss: f64,
}

/// Training patches of one domain, already tiled.
struct PatchPool {
    images: Vec<Tensor>,
    masks: Vec<Tensor>,
}

fn pool(ds: &Dataset, indices: &[usize], patch: (usize, usize), with_masks: bool) -> PatchPool {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for &i in indices {
        images.extend(split_patches(&ds.pages[i], patch.0, patch.1).patches);
        if with_masks {
            masks.extend(split_patches(&ds.ground_truth[i].to_page(), patch.0, patch.1).patches);
        }
    }
    PatchPool { images, masks }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Sample<'a> {
    image: &'a Tensor,
    mask: Option<&'a Tensor>,
    seed: u64,
}

/// Step-level training state shared by both models.
pub struct Trainer {
    model: Model,
    optimizer: OptimizerState,
    source: PatchPool,
    target: Option<PatchPool>,
    source_batch: ChaCha8Rng,
    source_dropout: ChaCha8Rng,
    target_batch: ChaCha8Rng,
    target_dropout: ChaCha8Rng,
    batch: usize,
    domain_zeros: Tensor,
    domain_ones: Tensor,
}

impl Trainer {
    fn with_model(model: Model, source: &Dataset, target: Option<&Dataset>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train = source.train_indices();
        if train.is_empty() {
            return Err(Error::InvalidArgument("source has no training pages".into()));
        }
        if source.ground_truth.len() != source.len() {
            return Err(Error::Dataset("source pages need ground truth".into()));
        }
        let patch = model.config.sae.patch;
        let source_pool = pool(source, &train, patch, true);
        let target_pool = match target {
            Some(t) if t.is_empty() => return Err(Error::InvalidArgument("target dataset is empty".into())),
            Some(t) => Some(pool(t, &(0..t.len()).collect::<Vec<_>>(), patch, false)),
            None => None,
        };
        let map_shape = [1, patch.0, patch.1];
        Ok(Trainer {
            optimizer: OptimizerState::new(cfg.optimizer, cfg.learning_rate)?,
            model,
            source: source_pool,
            target: target_pool,
            source_batch: stream(cfg.seed, STREAM_SOURCE_BATCH),
            source_dropout: stream(cfg.seed, STREAM_SOURCE_DROPOUT),
            target_batch: stream(cfg.seed, STREAM_TARGET_BATCH),
            target_dropout: stream(cfg.seed, STREAM_TARGET_DROPOUT),
            batch: cfg.batch,
            domain_zeros: Tensor::zeros(&map_shape),
            domain_ones: Tensor::full(&map_shape, 1.0),
        })
    }

    pub fn sae(source: &Dataset, config: &SaeConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = models::build_sae(config, &mut stream(cfg.seed, STREAM_INIT))?;
        Self::with_model(model, source, None, cfg)
    }

    pub fn bindann(source: &Dataset, target: &Dataset, config: &BinDannConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = models::build_bindann(config, &mut stream(cfg.seed, STREAM_INIT))?;
        Self::with_model(model, source, Some(target), cfg)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// `ceil(train patches / batch)`.
    pub fn steps_per_epoch(&self) -> usize {
        self.source.images.len().div_ceil(self.batch)
    }

    fn draw<'a>(pool: &'a PatchPool, n: usize, batch: &mut ChaCha8Rng, dropout: &mut ChaCha8Rng) -> Vec<Sample<'a>> {
        let picks: Vec<usize> = (0..n).map(|_| batch.random_range(0..pool.images.len())).collect();
        picks
            .into_iter()
            .map(|i| Sample {
                image: &pool.images[i],
                mask: pool.masks.get(i),
                seed: dropout.random(),
            })
            .collect()
    }

    fn run_sample(&self, sample: &Sample<'_>, loss: NodeId, domain_target: Option<&Tensor>) -> Result<(Tensor, Gradients)> {
        let mut bindings = Bindings::new();
        bindings.insert(models::IMAGE_INPUT.into(), sample.image.clone());
        if let Some(m) = sample.mask {
            bindings.insert(models::MASK_INPUT.into(), m.clone());
        }
        if let Some(t) = domain_target {
            bindings.insert(models::DOMAIN_INPUT.into(), t.clone());
        }
        let g = &self.model.graph;
        let eval = g.evaluate(&self.model.params, &bindings, ForwardOptions::training(sample.seed), &[loss])?;
        let grads = g.backward(&eval, loss)?;
        let losses = [models::BIN_LOSS, models::DOMAIN_LOSS]
            .iter()
            .map(|name| {
                g.output(name)
                    .ok()
                    .and_then(|id| eval.value(id))
                    .map_or(0.0, |t| t.data()[0])
            })
            .collect();
        Ok((Tensor::from_vec(losses), grads))
    }

    /// One optimizer step at GRL coefficient `lambda` (ignored by the SAE).
    pub fn step(&mut self, lambda: f64) -> Result<StepLosses> {
        let b = self.batch;
        let sources = Self::draw(&self.source, b, &mut self.source_batch, &mut self.source_dropout);
        let targets = match &self.target {
            Some(t) => Self::draw(t, b, &mut self.target_batch, &mut self.target_dropout),
            None => Vec::new(),
        };
        let dann = self.model.kind == ModelKind::BinDann;
        if dann {
            self.model.graph.set_grl_lambda(lambda)?;
        }
        let g = &self.model.graph;
        let (source_loss, target_loss) = if dann {
            (g.output(models::TOTAL_LOSS)?, Some(g.output(models::DOMAIN_LOSS)?))
        } else {
            (g.output(models::BIN_LOSS)?, None)
        };
        let zeros = dann.then_some(&self.domain_zeros);
        let this = &*self;
        let source_results = sources
            .par_iter()
            .map(|s| this.run_sample(s, source_loss, zeros))
            .collect::<Result<Vec<_>>>()?;
        let target_results = match target_loss {
            Some(loss) => targets
                .par_iter()
                .map(|s| this.run_sample(s, loss, Some(&this.domain_ones)))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };

        // Sequential reduction keeps the sum order fixed.
        let mut losses = StepLosses::default();
        let mut sums: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for (_, grads) in source_results.iter().chain(&target_results) {
            for (name, t) in &grads.params {
                match sums.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v),
                    None => {
                        sums.insert(name.clone(), t.data().to_vec());
                    }
                }
            }
        }
        for (l, _) in &source_results {
            losses.bin_loss += l.data()[0] / b as f64;
            losses.domain_loss += l.data()[1];
        }
        for (l, _) in &target_results {
            losses.domain_loss += l.data()[1];
        }
        if dann {
            losses.domain_loss /= (2 * b) as f64;
        }
        let scale = 1.0 / b as f64;
        for (name, mut g) in sums {
            g.iter_mut().for_each(|v| *v *= scale);
            self.model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?
                .set_grad(g)?;
        }
        self.optimizer.step(&mut self.model.params)?;
        Ok(losses)
    }
}

/// Thresholds `{step, 2·step, …}` strictly below 1.
pub fn sweep_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (1..n).map(|k| k as f64 * step).filter(|&t| t < 1.0 - 1e-12).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub threshold: f64,
    pub f1: f64,
    /// `(threshold, F1)` over the whole grid.
    pub curve: Vec<(f64, f64)>,
}

/// Pools confusion counts over all pages at each grid threshold and returns
/// the F1-maximizing threshold (lowest on ties).
pub fn sweep_threshold_maps(maps: &[ProbabilityMap], truth: &[&BinaryMask], step: f64) -> Result<SweepResult> {
    if maps.is_empty() || maps.len() != truth.len() {
        return Err(Error::InvalidArgument("sweep needs one ground truth per non-empty map list".into()));
    }
    let curve: Vec<(f64, f64)> = sweep_grid(step)
        .into_iter()
        .map(|th| {
            let c: Confusion = maps
                .iter()
                .zip(truth)
                .map(|(m, gt)| {
                    let pred: Vec<bool> = m.values.iter().map(|&p| p >= th).collect();
                    confusion_bits(&pred, &gt.bits)
                })
                .sum();
            (th, c.f1())
        })
        .collect();
    let (threshold, f1) = curve
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, (t, f)| if f > best.1 { (t, f) } else { best });
    Ok(SweepResult { threshold, f1, curve })
}

pub fn sweep_threshold(model: &Model, pages: &[&Page], truth: &[&BinaryMask], step: f64) -> Result<SweepResult> {
    let maps = pages
        .par_iter()
        .map(|p| model.predict_prob_map(p))
        .collect::<Result<Vec<_>>>()?;
    sweep_threshold_maps(&maps, truth, step)
}

/// Foreground where `p >= threshold`.
pub fn binarize(map: &ProbabilityMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: map.width,
        height: map.height,
        bits: map.values.iter().map(|&p| p >= threshold).collect(),
    }
}

fn fit(mut trainer: Trainer, source: &Dataset, cfg: &TrainConfig, lambda_at: impl Fn(usize) -> f64) -> Result<TrainedBinarizer> {
    let val = source.validation_indices();
    if val.is_empty() {
        return Err(Error::InvalidArgument("source has no validation pages".into()));
    }
    let pages: Vec<&Page> = val.iter().map(|&i| &source.pages[i]).collect();
    let truth: Vec<&BinaryMask> = val.iter().map(|&i| &source.ground_truth[i]).collect();
    let steps = trainer.steps_per_epoch();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, crate::params::Parameters)> = None;
    for epoch in 0..cfg.epochs {
        let lambda = lambda_at(epoch);
        let mut bin = 0.0;
        let mut dom = 0.0;
        for _ in 0..steps {
            let l = trainer.step(lambda)?;
            bin += l.bin_loss;
            dom += l.domain_loss;
        }
        let sweep = sweep_threshold(trainer.model(), &pages, &truth, cfg.sweep_step)?;
        history.push(EpochRecord {
            epoch,
            bin_loss: bin / steps as f64,
            domain_loss: dom / steps as f64,
            lambda,
            val_f1: sweep.f1,
            threshold: sweep.threshold,
        });
        if best.as_ref().is_none_or(|b| sweep.f1 > b.1) {
            best = Some((epoch, sweep.f1, sweep.threshold, trainer.model().params.clone()));
        }
    }
    let (best_epoch, best_f1, threshold, params) = best.expect("at least one epoch");
    let mut model = trainer.into_model();
    model.params = params;
    Ok(TrainedBinarizer { model, threshold, best_epoch, best_f1, history })
}

pub fn train_sae(source: &Dataset, config: &SaeConfig, cfg: &TrainConfig) -> Result<TrainedBinarizer> {
    let trainer = Trainer::sae(source, config, cfg)?;
    fit(trainer, source, cfg, |_| 0.0)
}

/// Adversarial training; `th_s` still comes from source validation only.
pub fn train_bindann(source: &Dataset, target: &Dataset, config: &BinDannConfig, cfg: &TrainConfig) -> Result<TrainedBinarizer> {
    let trainer = Trainer::bindann(source, target, config, cfg)?;
    fit(trainer, source, cfg, |e| config.lambda_at(e))
}
