//! β-annealed ELBO training with dimension-wise free bits, Adam, optional
//! decoder pretraining, and per-step metric logging.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::{LmVae, Prepared};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_beta: f64,
    /// Total KL floor in nats, spread evenly over latent dimensions.
    pub target_kl: f64,
    pub n_cycles: usize,
    pub freeze_base: bool,
    pub seed: u64,
    /// Reuse pooled encoder outputs across epochs while the encoder is frozen.
    #[serde(default = "yes")]
    pub cache_encoder: bool,
    /// Plain language-model epochs on the decoder before VAE training.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_learning_rate: f64,
}

fn yes() -> bool {
    true
}

fn default_pretrain_lr() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 50,
            max_beta: 1.0,
            target_kl: 2.0,
            n_cycles: 40,
            freeze_base: true,
            seed: 0,
            cache_encoder: true,
            pretrain_epochs: 0,
            pretrain_learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_beta > 0.0 && self.max_beta <= 1.0) {
            return Err(Error::Config(format!("max_beta {} not in (0, 1]", self.max_beta)));
        }
        if self.n_cycles == 0 {
            return Err(Error::Config("n_cycles must be at least 1".into()));
        }
        if !(self.target_kl >= 0.0) {
            return Err(Error::Config(format!("target_kl {} is negative", self.target_kl)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Cyclical β: `n_cycles` equal cycles over `total_steps`; each ramps
/// linearly from 0 to `max_beta` over its first half, then holds.
pub fn beta_schedule(step: usize, total_steps: usize, n_cycles: usize, max_beta: f64) -> Result<f64> {
    if n_cycles == 0 || n_cycles > total_steps {
        return Err(Error::Config(format!(
            "{n_cycles} cycles do not fit in {total_steps} steps"
        )));
    }
    if step >= total_steps {
        return Err(Error::Invalid(format!("step {step} beyond {total_steps} total steps")));
    }
    let start = |c: usize| c * total_steps / n_cycles;
    let mut c = step * n_cycles / total_steps;
    while c + 1 < n_cycles && start(c + 1) <= step {
        c += 1;
    }
    while start(c) > step {
        c -= 1;
    }
    let len = (start(c + 1) - start(c)) as f64;
    let into = (step - start(c)) as f64;
    Ok(max_beta * (2.0 * into / len).min(1.0))
}

/// Scalar loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub beta: f64,
    pub recon_nll: f64,
    pub kl_raw: f64,
    pub kl_thresholded: f64,
    pub total: f64,
}

/// Loss nodes built from the reconstruction term and per-dimension KL.
pub struct LossTerms {
    pub total: Var,
    pub kl_raw: Var,
    pub kl_thresholded: Var,
}

/// `total = recon + β · Σ_i max(KL_i, target_kl / D)`.
pub fn loss_terms(tape: &mut Tape, recon: Var, kl_per_dim: Var, beta: f64, target_kl: f64) -> Result<LossTerms> {
    let d = tape.value(kl_per_dim).len();
    let kl_raw = tape.sum(kl_per_dim)?;
    let floored = tape.floor_at(kl_per_dim, target_kl / d as f64)?;
    let kl_thresholded = tape.sum(floored)?;
    let total = if beta == 0.0 {
        recon
    } else {
        let weighted = tape.scale(kl_thresholded, beta)?;
        tape.add(recon, weighted)?
    };
    Ok(LossTerms {
        total,
        kl_raw,
        kl_thresholded,
    })
}

/// Adam over every parameter that requires a gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// First and second moments by parameter name.
    #[serde(skip)]
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().filter(|&id| store.requires_grad(id)).collect();
        for id in ids {
            let Some(g) = store.grad(id).cloned() else { continue };
            let name = store.param(id).name().to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(id);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    order
}

fn diverged(step: usize, beta: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            recon: f64::NAN,
            kl: f64::NAN,
            beta,
        },
        other => other,
    }
}

/// Teacher-forced LM training of the decoder alone (no injection). Returns
/// the mean per-token loss of every epoch.
pub fn pretrain_decoder(model: &mut LmVae, data: &[Prepared], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let saved: Vec<_> = model.store.ids().map(|id| (id, model.store.requires_grad(id))).collect();
    let decoder_ids = model.decoder().params();
    for &(id, _) in &saved {
        model.store.set_requires_grad(id, decoder_ids.contains(&id));
    }
    let mut adam = Adam::new(cfg.pretrain_learning_rate);
    let mut losses = Vec::new();
    let result = (|| {
        for epoch in 0..cfg.pretrain_epochs {
            let order = epoch_order(cfg.seed.wrapping_add(0x5eed), epoch, data.len());
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let inputs: Vec<&[u32]> = chunk.iter().map(|&i| &data[i].tokens[..data[i].tokens.len() - 1]).collect();
                let targets: Vec<usize> = chunk
                    .iter()
                    .flat_map(|&i| data[i].tokens[1..].iter().map(|&t| t as usize))
                    .collect();
                let logits = model.decoder().forward(&mut tape, &model.store, &inputs, None)?;
                let loss = tape.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
                sum += tape.value(loss).item() * chunk.len() as f64;
                model.store.zero_grad();
                tape.backward(loss, &mut model.store)?;
                adam.step(&mut model.store);
            }
            losses.push(sum / data.len() as f64);
        }
        Ok(())
    })();
    for (id, flag) in saved {
        model.store.set_requires_grad(id, flag);
    }
    model.store.zero_grad();
    result.map(|_| losses)
}

/// Training state: model, optimiser, schedule position, noise RNG and log.
pub struct Trainer {
    pub model: LmVae,
    cfg: TrainConfig,
    pub(crate) adam: Adam,
    pub(crate) step: usize,
    pub(crate) epoch: usize,
    pub(crate) pretrained: bool,
    pub(crate) rng: ChaCha8Rng,
    n_train: usize,
    pooled: Option<Vec<Tensor>>,
    log: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(mut model: LmVae, cfg: TrainConfig, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        if n_train == 0 {
            return Err(Error::Invalid("empty training set".into()));
        }
        let total = cfg.epochs * cfg.steps_per_epoch(n_train);
        if total > 0 && cfg.n_cycles > total {
            return Err(Error::Config(format!(
                "{} beta cycles do not fit in {total} steps",
                cfg.n_cycles
            )));
        }
        model.set_freeze_base(cfg.freeze_base);
        Ok(Trainer {
            adam: Adam::new(cfg.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            step: 0,
            epoch: 0,
            pretrained: false,
            n_train,
            pooled: None,
            log: Vec::new(),
        })
    }

    /// Rebuild a trainer mid-run from saved state.
    pub(crate) fn restore(
        model: LmVae,
        cfg: TrainConfig,
        n_train: usize,
        adam: Adam,
        step: usize,
        epoch: usize,
        pretrained: bool,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let mut t = Trainer::new(model, cfg, n_train)?;
        t.adam = adam;
        t.step = step;
        t.epoch = epoch;
        t.pretrained = pretrained;
        t.rng = rng;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.cfg.steps_per_epoch(self.n_train)
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Run every remaining epoch.
    pub fn train(&mut self, data: &[Prepared]) -> Result<()> {
        let left = self.cfg.epochs - self.epoch;
        self.train_epochs(data, left)
    }

    /// Run up to `k` more epochs.
    pub fn train_epochs(&mut self, data: &[Prepared], k: usize) -> Result<()> {
        if data.len() != self.n_train {
            return Err(Error::Invalid(format!(
                "trainer was set up for {} sentences, got {}",
                self.n_train,
                data.len()
            )));
        }
        if !self.pretrained {
            if self.cfg.pretrain_epochs > 0 {
                let losses = pretrain_decoder(&mut self.model, data, &self.cfg)?;
                log::info!("decoder pretraining losses: {losses:?}");
            }
            self.pretrained = true;
        }
        let use_cache = self.cfg.cache_encoder && self.model.encoder().params().iter().all(|&id| !self.model.store.requires_grad(id));
        if use_cache && self.pooled.is_none() {
            self.pooled = Some(data.iter().map(|x| self.model.pooled_encoding(x)).collect::<Result<_>>()?);
        }
        let end = (self.epoch + k).min(self.cfg.epochs);
        while self.epoch < end {
            let order = epoch_order(self.cfg.seed, self.epoch, data.len());
            for chunk in order.chunks(self.cfg.batch_size) {
                let rec = self.train_step(data, chunk, use_cache)?;
                log::debug!("{rec:?}");
                self.log.push(rec);
            }
            self.epoch += 1;
        }
        Ok(())
    }

    fn train_step(&mut self, data: &[Prepared], idx: &[usize], use_cache: bool) -> Result<StepRecord> {
        let beta = beta_schedule(self.step, self.total_steps(), self.cfg.n_cycles, self.cfg.max_beta)?;
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
        let pooled: Option<Vec<Tensor>> = if use_cache {
            let cache = self.pooled.as_ref().unwrap();
            Some(idx.iter().map(|&i| cache[i].clone()).collect())
        } else {
            None
        };
        let eps = standard_normal(&[batch.len(), self.model.config().latent_dim], &mut self.rng);
        let mut tape = Tape::new();
        let step = self.step;
        let out = self
            .model
            .forward_batch(&mut tape, &batch, eps, pooled.as_deref())
            .map_err(diverged(step, beta))?;
        let terms = loss_terms(&mut tape, out.recon, out.kl_per_dim, beta, self.cfg.target_kl)
            .map_err(diverged(step, beta))?;
        let rec = StepRecord {
            step,
            beta,
            recon_nll: tape.value(out.recon).item(),
            kl_raw: tape.value(terms.kl_raw).item(),
            kl_thresholded: tape.value(terms.kl_thresholded).item(),
            total: tape.value(terms.total).item(),
        };
        if !rec.total.is_finite() {
            return Err(Error::Diverged {
                step,
                recon: rec.recon_nll,
                kl: rec.kl_raw,
                beta,
            });
        }
        self.model.store.zero_grad();
        tape.backward(terms.total, &mut self.model.store)
            .map_err(diverged(step, beta))?;
        self.adam.step(&mut self.model.store);
        self.step += 1;
        Ok(rec)
    }
}

/// Metric log as CSV: step, beta, recon_nll, kl_raw, kl_thresholded, total.
pub fn write_log_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
