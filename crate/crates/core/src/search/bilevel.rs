use super::arch::{discretize, ArchBitstring, ArchParams};
use crate::data::{epoch_batches, sample_pk_batch, split_identities, Dataset, ModalityBatch};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossValues};
use crate::nn::{Adam, AdamConfig, BackboneConfig, Network};
use crate::tensor::Graph;
use crate::train::{batch_loss, weight_step, ClassIndex, LossMeter, Schedule, TrainState};

/// Weight schedule plus the (constant-rate) architecture optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSchedule {
    pub weights: Schedule,
    pub arch: AdamConfig,
}

impl SearchSchedule {
    pub fn scaled(epochs: usize) -> Self {
        Self {
            weights: Schedule::scaled(epochs, AdamConfig::weights()),
            arch: AdamConfig::arch(),
        }
    }
}

/// Losses of one alternating step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilevelLog {
    pub train: LossValues,
    pub val: LossValues,
}

/// Architecture update on a validation batch: Adam on the architecture
/// group only. Running statistics are not written.
pub fn arch_step(
    net: &mut Network,
    opt: &mut Adam,
    batch: &ModalityBatch,
    classes: &ClassIndex,
    loss: &LossConfig,
) -> Result<LossValues> {
    let g = Graph::new();
    let (terms, _) = batch_loss(&g, net, batch, classes, loss)?;
    let grads = g.backward(terms.total)?;
    let lr = opt.config.lr;
    opt.step(&mut net.store, &grads, lr);
    Ok(terms.values)
}

/// First-order alternation: a weight step on `train` at rate `lr_w`, then an
/// architecture step on `val` using the updated weights.
pub fn bilevel_step(
    state: &mut TrainState,
    train: &ModalityBatch,
    val: &ModalityBatch,
    classes: &ClassIndex,
    loss: &LossConfig,
    lr_w: f64,
) -> Result<BilevelLog> {
    let arch = state
        .arch
        .as_mut()
        .ok_or_else(|| Error::InvalidArgument("bilevel step needs an architecture optimizer".into()))?;
    let t = weight_step(&mut state.net, &mut state.weights, train, classes, loss, lr_w)?;
    let v = arch_step(&mut state.net, arch, val, classes, loss)?;
    Ok(BilevelLog { train: t, val: v })
}

/// Settings of a search run.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// Backbone shape; routing is overridden to searchable.
    pub backbone: BackboneConfig,
    pub schedule: SearchSchedule,
    pub loss: LossConfig,
    pub p: usize,
    pub k: usize,
    pub flip: bool,
    /// Fraction of identities kept for weight training; the rest drive the
    /// architecture step.
    pub train_ratio: f64,
    pub seed: u64,
}

/// Per-epoch search record.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossValues,
    pub val: LossValues,
    pub probs: Vec<(f64, f64)>,
    pub bits: ArchBitstring,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub bits: ArchBitstring,
    pub arch: ArchParams,
    pub state: TrainState,
    pub log: Vec<SearchEpoch>,
}

/// Data and labels of a search, derived deterministically from the config.
pub struct SearchData {
    pub train: Dataset,
    pub val: Dataset,
    pub classes: ClassIndex,
}

impl SearchData {
    pub fn new(data: &Dataset, cfg: &SearchConfig) -> Result<Self> {
        let (train, val) = split_identities(data, cfg.train_ratio, cfg.seed)?;
        for (name, d) in [("training", &train), ("validation", &val)] {
            if d.identities().len() < 2 {
                return Err(Error::Split(format!("the {name} split needs at least 2 identities for triplet mining")));
            }
        }
        Ok(Self {
            train,
            val,
            classes: ClassIndex::new(&data.identities()),
        })
    }
}

/// Fresh searchable state; the classifier covers every identity of the
/// search data so validation batches have targets.
pub fn init_search(data: &SearchData, cfg: &SearchConfig) -> Result<TrainState> {
    let mut bb = cfg.backbone.searchable();
    bb.num_classes = data.classes.len();
    let net = Network::build(&bb, cfg.seed)?;
    Ok(TrainState::new(
        net,
        cfg.schedule.weights.weights,
        Some(cfg.schedule.arch),
        crate::data::derive_seed(&[cfg.seed, 1]),
    ))
}

/// One search epoch: every training batch is paired with a fresh validation
/// batch for a bilevel step.
pub fn search_epoch(state: &mut TrainState, data: &SearchData, cfg: &SearchConfig) -> Result<SearchEpoch> {
    let lr = cfg.schedule.weights.lr_at(state.epoch);
    let batches = epoch_batches(&data.train, cfg.p, cfg.k, cfg.flip, &mut state.rng)?;
    let p_val = cfg.p.min(data.val.identities().len());
    let (mut tm, mut vm) = (LossMeter::default(), LossMeter::default());
    for b in &batches {
        let v = sample_pk_batch(&data.val, p_val, cfg.k, cfg.flip, &mut state.rng)?;
        let log = bilevel_step(state, b, &v, &data.classes, &cfg.loss, lr)?;
        tm.add(log.train);
        vm.add(log.val);
    }
    let alphas = state.net.alphas();
    let arch = ArchParams {
        alphas,
        optimizer: cfg.schedule.arch,
    };
    let rec = SearchEpoch {
        epoch: state.epoch,
        lr,
        train: tm.mean(),
        val: vm.mean(),
        probs: arch.probs(),
        bits: arch.discretize(),
    };
    state.epoch += 1;
    Ok(rec)
}

/// Runs (or, given a partially trained `state`, continues) a search and
/// discretizes the final architecture. `on_epoch` sees the state after each
/// epoch, e.g. to checkpoint it.
pub fn run_search(
    data: &SearchData,
    cfg: &SearchConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState, &SearchEpoch) -> Result<()>,
) -> Result<SearchResult> {
    cfg.loss.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => init_search(data, cfg)?,
    };
    let mut log = Vec::new();
    while state.epoch < cfg.schedule.weights.epochs {
        let rec = search_epoch(&mut state, data, cfg)?;
        on_epoch(&state, &rec)?;
        log.push(rec);
    }
    let arch = ArchParams {
        alphas: state.net.alphas(),
        optimizer: cfg.schedule.arch,
    };
    Ok(SearchResult {
        bits: discretize(&arch.alphas),
        arch,
        state,
        log,
    })
}

/// Convenience: full search from a dataset with a fresh seed-derived state.
pub fn search(data: &Dataset, cfg: &SearchConfig) -> Result<SearchResult> {
    let sd = SearchData::new(data, cfg)?;
    run_search(&sd, cfg, None, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};
    use crate::nn::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SearchData, SearchConfig) {
        let d = generate_dataset(&SynthConfig {
            identities: 6,
            images_per_modality: 2,
            resolution: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = SearchConfig {
            backbone: BackboneConfig {
                resolution: 8,
                widths: vec![4, 8],
                blocks: vec![1, 1],
                stem_width: 4,
                embedding_dim: 8,
                ..BackboneConfig::default()
            },
            schedule: SearchSchedule::scaled(2),
            loss: LossConfig::default(),
            p: 2,
            k: 2,
            flip: false,
            train_ratio: 0.67,
            seed: 3,
        };
        (SearchData::new(&d, &cfg).unwrap(), cfg)
    }

    #[test]
    fn each_substep_touches_only_its_group() {
        let (sd, cfg) = setup();
        let mut st = init_search(&sd, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tb = sample_pk_batch(&sd.train, 2, 2, false, &mut rng).unwrap();
        let before = st.net.store.clone();
        weight_step(&mut st.net, &mut st.weights, &tb, &sd.classes, &cfg.loss, 0.01).unwrap();
        assert!(st.net.store.group_bit_eq(&before, ParamGroup::Arch));
        assert!(!st.net.store.group_bit_eq(&before, ParamGroup::Weight));
        assert!(!st.net.store.group_bit_eq(&before, ParamGroup::Buffer));
        let mid = st.net.store.clone();
        let vb = sample_pk_batch(&sd.val, 2, 2, false, &mut rng).unwrap();
        arch_step(&mut st.net, st.arch.as_mut().unwrap(), &vb, &sd.classes, &cfg.loss).unwrap();
        assert!(st.net.store.group_bit_eq(&mid, ParamGroup::Weight));
        assert!(st.net.store.group_bit_eq(&mid, ParamGroup::Buffer));
        assert!(!st.net.store.group_bit_eq(&mid, ParamGroup::Arch));
    }

    #[test]
    fn search_is_deterministic_and_logs_every_epoch() {
        let (sd, cfg) = setup();
        let a = run_search(&sd, &cfg, None, |_, _| Ok(())).unwrap();
        let b = run_search(&sd, &cfg, None, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.bits.len(), cfg.backbone.norm_layer_count());
        for (p1, p2) in &a.log[1].probs {
            assert!((p1 + p2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilevel_needs_arch_optimizer() {
        let (sd, cfg) = setup();
        let mut st = init_search(&sd, &cfg).unwrap();
        st.arch = None;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_pk_batch(&sd.train, 2, 2, false, &mut rng).unwrap();
        assert!(bilevel_step(&mut st, &b, &b, &sd.classes, &cfg.loss, 0.01).is_err());
    }
}
