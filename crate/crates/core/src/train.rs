//! Training primitives shared by the search and retrain phases.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{epoch_batches, Checkpoint, Dataset, ModalityBatch, Record};
use crate::error::{Error, Result};
use crate::losses::{total_loss, FeatureBatch, LossConfig, LossValues};
use crate::nn::{Adam, AdamConfig, Network, ParamGroup};
use crate::tensor::Graph;

/// Step-decay learning-rate schedule over whole epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub weights: AdamConfig,
    /// Epochs (0-based) at which the rate is multiplied by `gamma`.
    pub drops: Vec<usize>,
    pub gamma: f64,
}

impl Schedule {
    /// Drops at 40/120 and 70/120 of the run, rounded to whole epochs. The
    /// first epoch always runs at the base rate.
    pub fn scaled(epochs: usize, weights: AdamConfig) -> Self {
        let at = |num: f64| ((num / 120.0 * epochs as f64).round() as usize).max(1);
        Self {
            epochs,
            weights,
            drops: vec![at(40.0), at(70.0)],
            gamma: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.drops.iter().filter(|&&d| epoch >= d).count();
        self.weights.lr * self.gamma.powi(n as i32)
    }
}

/// Dense classifier index of every identity of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassIndex(BTreeMap<u32, usize>);

impl ClassIndex {
    pub fn new(identities: &[u32]) -> Self {
        let mut ids = identities.to_vec();
        ids.sort_unstable();
        ids.dedup();
        Self(ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self, identities: &[u32]) -> Result<Vec<usize>> {
        identities
            .iter()
            .map(|id| {
                self.0
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("identity {id} has no classifier row")))
            })
            .collect()
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: Network,
    pub weights: Adam,
    /// Architecture optimizer; present only while searching.
    pub arch: Option<Adam>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(net: Network, weights: AdamConfig, arch: Option<AdamConfig>, seed: u64) -> Self {
        Self {
            net,
            weights: Adam::new(weights, ParamGroup::Weight),
            arch: arch.map(|c| Adam::new(c, ParamGroup::Arch)),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        }
    }

    /// Parameters, buffers, optimizer moments, RNG and epoch.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_params("param/", &self.net.store);
        c.put_adam("adam.w/", &self.weights, &self.net.store);
        if let Some(a) = &self.arch {
            c.put_adam("adam.a/", a, &self.net.store);
        }
        c.put_rng("rng", &self.rng);
        c.put("epoch", Record::U64(self.epoch as u64));
        c
    }

    /// Loads a checkpoint into this state; on any error the state is left
    /// untouched.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let mut next = self.clone();
        c.restore_params("param/", &mut next.net.store)?;
        c.restore_adam("adam.w/", &mut next.weights, &next.net.store)?;
        if let Some(a) = next.arch.as_mut() {
            c.restore_adam("adam.a/", a, &next.net.store)?;
        }
        next.rng = c.rng("rng")?;
        next.epoch = c.u64("epoch")? as usize;
        *self = next;
        Ok(())
    }
}

/// Forward in training mode and the full objective on one batch.
pub(crate) fn batch_loss(
    g: &Graph,
    net: &Network,
    batch: &ModalityBatch,
    classes: &ClassIndex,
    loss: &LossConfig,
) -> Result<(crate::losses::LossTerms, Vec<crate::nn::BufferUpdate>)> {
    let out = net.forward(g, &batch.images, &batch.modality, true)?;
    let fb = FeatureBatch::new(out.embedding, batch.identities.clone(), batch.modality.clone());
    let labels = classes.labels(&batch.identities)?;
    Ok((total_loss(g, &fb, out.logits, &labels, loss)?, out.updates))
}

/// One weight update: gradients of the full objective, Adam on the weight
/// group, then the queued running-statistic writes.
pub fn weight_step(
    net: &mut Network,
    opt: &mut Adam,
    batch: &ModalityBatch,
    classes: &ClassIndex,
    loss: &LossConfig,
    lr: f64,
) -> Result<LossValues> {
    let g = Graph::new();
    let (terms, updates) = batch_loss(&g, net, batch, classes, loss)?;
    let grads = g.backward(terms.total)?;
    opt.step(&mut net.store, &grads, lr);
    net.apply_updates(updates);
    Ok(terms.values)
}

/// Running mean of [`LossValues`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossMeter {
    sum: LossValues,
    n: usize,
}

impl LossMeter {
    pub fn add(&mut self, v: LossValues) {
        self.sum.cls += v.cls;
        self.sum.triplet += v.triplet;
        self.sum.cmmd += v.cmmd;
        self.sum.cc += v.cc;
        self.sum.total += v.total;
        self.n += 1;
    }

    pub fn mean(&self) -> LossValues {
        let n = self.n.max(1) as f64;
        LossValues {
            cls: self.sum.cls / n,
            triplet: self.sum.triplet / n,
            cmmd: self.sum.cmmd / n,
            cc: self.sum.cc / n,
            total: self.sum.total / n,
        }
    }
}

/// Hyper-parameters of fixed-architecture training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub p: usize,
    pub k: usize,
    pub flip: bool,
}

/// One epoch of weight training over `data`; returns the mean losses.
pub fn train_epoch(state: &mut TrainState, data: &Dataset, classes: &ClassIndex, cfg: &TrainConfig) -> Result<LossValues> {
    let lr = cfg.schedule.lr_at(state.epoch);
    let batches = epoch_batches(data, cfg.p, cfg.k, cfg.flip, &mut state.rng)?;
    let mut meter = LossMeter::default();
    for b in &batches {
        meter.add(weight_step(&mut state.net, &mut state.weights, b, classes, &cfg.loss, lr)?);
    }
    state.epoch += 1;
    Ok(meter.mean())
}
