//! Mini-batch training with Adam.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, Tape};
use crate::checkpoint::{Checkpoint, TrainedModel};
use crate::config::RunConfig;
use crate::error::{FitError, Result};
use crate::features::{
    build_vocabularies, encode_target, encode_user, EncodedUser, ItemIndex, TrainingInstance,
    Vocabularies,
};
use crate::model::{Method, Model, ModelConfig};
use crate::sampling::{derive_seed, sample_epoch, ItemPool, SamplingPolicy};
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 7,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FitError::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FitError::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(FitError::config("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FitError::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(FitError::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Adam. Parameters reached only through row lookups get lazy updates:
/// rows without gradient keep their moments and values.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            scratch: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        self.t += 1;
        let h = Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            c1: 1.0 - self.beta1.powi(self.t),
            c2: 1.0 - self.beta2.powi(self.t),
        };
        for (id, pg) in grads.iter() {
            let t = params.get_mut(id);
            let cols = t.cols();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if pg.dense.is_none() {
                for (&r, g) in &pg.rows {
                    let span = r * cols..(r + 1) * cols;
                    h.apply(&mut t.data_mut()[span.clone()], g, &mut m[span.clone()], &mut v[span]);
                }
                continue;
            }
            let g = &mut self.scratch;
            g.clear();
            g.resize(t.numel(), 0.0);
            pg.add_to(g, cols);
            h.apply(t.data_mut(), g, m, v);
        }
    }
}

struct Hyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

impl Hyper {
    fn apply(&self, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
        for (((p, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            *p -= self.lr * (*mi / self.c1) / ((*vi / self.c2).sqrt() + self.eps);
        }
    }
}

/// One user context with all of its targets for an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub user: EncodedUser,
    pub targets: Vec<(ItemIndex, u8)>,
    pub label_intent: u8,
}

impl Group {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Summed loss, instance count and summed gradients over `groups`.
pub fn batch_gradients(model: &Model, groups: &[&Group]) -> Result<(f64, usize, ParamGrads)> {
    let one = |g: &&Group| -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new(model.params());
        let loss = model.group_loss(&mut tape, &g.user, &g.targets, g.label_intent)?;
        let value = tape.scalar(loss);
        Ok((value, tape.backward(loss)?.into_params()))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        groups.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = groups.iter().map(one).collect();

    let mut total = 0.0;
    let mut grads = ParamGrads::default();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.merge(g);
    }
    Ok((total, groups.iter().map(|g| g.len()).sum(), grads))
}

/// Mean loss of one batch, without updating anything.
pub fn batch_loss(model: &Model, groups: &[&Group]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for g in groups {
        let mut tape = Tape::new(model.params());
        let loss = model.group_loss(&mut tape, &g.user, &g.targets, g.label_intent)?;
        total += tape.scalar(loss);
        n += g.len();
    }
    Ok(total / n as f64)
}

/// Encoded corpus ready for epoch expansion.
pub struct Prepared<'a> {
    corpus: &'a [TrainingInstance],
    users: Vec<EncodedUser>,
    targets: Vec<ItemIndex>,
}

impl<'a> Prepared<'a> {
    pub fn new(corpus: &'a [TrainingInstance], vocabs: &Vocabularies) -> Result<Self> {
        if corpus.is_empty() {
            return Err(FitError::invalid("training corpus is empty"));
        }
        let users = corpus
            .iter()
            .map(|i| encode_user(&i.user, vocabs))
            .collect::<Result<_>>()?;
        let targets = corpus
            .iter()
            .map(|i| encode_target(&i.target, vocabs))
            .collect::<Result<_>>()?;
        Ok(Self {
            corpus,
            users,
            targets,
        })
    }

    /// Every corpus instance grouped with freshly sampled negatives, in a
    /// seeded shuffled order.
    pub fn epoch_groups(
        &self,
        vocabs: &Vocabularies,
        pool: &ItemPool,
        policy: &SamplingPolicy,
        shuffle_seed: u64,
        epoch: usize,
    ) -> Result<Vec<Group>> {
        let negatives = sample_epoch(self.corpus, pool, policy, epoch as u64)?;
        let mut groups = Vec::with_capacity(self.corpus.len());
        for (i, inst) in self.corpus.iter().enumerate() {
            let mut targets = vec![(self.targets[i], inst.label_click)];
            for item in &negatives[i] {
                targets.push((encode_target(item, vocabs)?, 0));
            }
            groups.push(Group {
                user: self.users[i].clone(),
                targets,
                label_intent: inst.label_intent,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed, epoch as u64, u64::MAX));
        groups.shuffle(&mut rng);
        Ok(groups)
    }
}

/// Consecutive groups packed until each batch holds at least `batch_size`
/// instances.
pub fn pack_batches(groups: &[Group], batch_size: usize) -> Vec<Vec<&Group>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for g in groups {
        cur.push(g);
        n += g.len();
        if n >= batch_size {
            out.push(std::mem::take(&mut cur));
            n = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Trains `model` in place and returns the mean instance loss per epoch.
pub fn train_model(
    model: &mut Model,
    vocabs: &Vocabularies,
    corpus: &[TrainingInstance],
    pool: &ItemPool,
    policy: &SamplingPolicy,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    policy.validate()?;
    let prepared = Prepared::new(corpus, vocabs)?;
    let mut adam = Adam::new(cfg, model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let groups = prepared.epoch_groups(vocabs, pool, policy, cfg.shuffle_seed, epoch)?;
        let mut total = 0.0;
        let mut count = 0;
        for (b, batch) in pack_batches(&groups, cfg.batch_size).iter().enumerate() {
            let (loss, n, mut grads) = batch_gradients(model, batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(FitError::Divergence { epoch, batch: b });
            }
            grads.scale(1.0 / n as f64);
            adam.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(FitError::Divergence { epoch, batch: b });
            }
            total += loss;
            count += n;
        }
        let mean = total / count as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocabularies: Vocabularies,
    pub loss_history: Vec<f64>,
}

/// Builds vocabularies from the corpus, initializes a model and trains it.
pub fn train(
    corpus: &[TrainingInstance],
    pool: &ItemPool,
    model_config: &ModelConfig,
    policy: &SamplingPolicy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let vocabularies = build_vocabularies(corpus)?;
    let mut model = Model::new(model_config.clone(), &vocabularies)?;
    let loss_history = train_model(&mut model, &vocabularies, corpus, pool, policy, cfg, |_, _| {})?;
    Ok(TrainOutcome {
        model,
        vocabularies,
        loss_history,
    })
}

/// Trains every method in `cfg` on one shared vocabulary and bundles the
/// results into a checkpoint.
pub fn train_methods(
    corpus: &[TrainingInstance],
    pool: &ItemPool,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(Method, usize, f64),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let vocabularies = build_vocabularies(corpus)?;
    let mut models = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let config = method
            .model_config(&cfg.model)
            .ok_or_else(|| FitError::config(format!("{method} has no trainable model")))?;
        let mut model = Model::new(config, &vocabularies)?;
        let loss_history = train_model(&mut model, &vocabularies, corpus, pool, &cfg.sampling, &cfg.train, |e, l| {
            on_epoch(method, e, l)
        })?;
        models.push(TrainedModel {
            method,
            model,
            loss_history,
        });
    }
    Ok(Checkpoint {
        vocabularies,
        train: cfg.train.clone(),
        sampling: cfg.sampling.clone(),
        models,
    })
}
