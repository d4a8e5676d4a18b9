//! Batch and instance normalization with shared, per-modality and
//! searchable parameter routing.

use super::params::{ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Modality, Result};
use crate::tensor::{Graph, NormStats, Tensor, Var};

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel statistics over batch and space, with running averages.
    Batch,
    /// Per-sample, per-channel statistics over space; no running state.
    Instance,
}

/// One affine parameter set plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl NormParams {
    pub fn alloc(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        kind: NormKind,
        momentum: f64,
        eps: f64,
    ) -> Self {
        assert!(momentum > 0.0 && momentum < 1.0 && eps > 0.0);
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamGroup::Weight);
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamGroup::Weight);
        let (running_mean, running_var) = match kind {
            NormKind::Batch => (
                Some(store.add(
                    format!("{prefix}.running_mean"),
                    Tensor::zeros(&[channels]),
                    ParamGroup::Buffer,
                )),
                Some(store.add(
                    format!("{prefix}.running_var"),
                    Tensor::ones(&[channels]),
                    ParamGroup::Buffer,
                )),
            ),
            NormKind::Instance => (None, None),
        };
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum,
            eps,
        }
    }

    /// Trainable entries (gamma and beta).
    pub fn trainable_len(&self) -> usize {
        2 * self.channels
    }
}

/// A pending write to a buffer, produced by a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

/// Sample indices of each modality within a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityRouting {
    vis: Vec<usize>,
    ir: Vec<usize>,
    /// Position of each original sample inside `vis ++ ir`.
    restore: Vec<usize>,
}

impl ModalityRouting {
    pub fn new(modality: &[Modality]) -> Self {
        let vis: Vec<usize> = (0..modality.len()).filter(|&i| modality[i] == Modality::Vis).collect();
        let ir: Vec<usize> = (0..modality.len()).filter(|&i| modality[i] == Modality::Ir).collect();
        let mut restore = vec![0; modality.len()];
        for (pos, &i) in vis.iter().chain(&ir).enumerate() {
            restore[i] = pos;
        }
        Self { vis, ir, restore }
    }

    pub fn batch_len(&self) -> usize {
        self.restore.len()
    }

    pub fn indices(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Vis => &self.vis,
            Modality::Ir => &self.ir,
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        !self.indices(m).is_empty()
    }

    /// True when the batch is already laid out as all vis then all ir.
    fn is_sorted(&self) -> bool {
        self.restore.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Runs `f` on each present modality's sub-batch and reassembles the
    /// results in the original sample order.
    pub fn split_apply(
        &self,
        g: &Graph,
        x: Var,
        mut f: impl FnMut(Modality, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        for m in [Modality::Vis, Modality::Ir] {
            let idx = self.indices(m);
            if idx.is_empty() {
                continue;
            }
            let sub = if idx.len() == self.batch_len() {
                x
            } else {
                g.select_rows(x, idx)
            };
            parts.push(f(m, sub)?);
        }
        let joined = if parts.len() == 1 { parts[0] } else { g.concat(&parts) };
        Ok(if self.is_sorted() {
            joined
        } else {
            g.select_rows(joined, &self.restore)
        })
    }
}

fn check_input(g: &Graph, x: Var, p: &NormParams) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::Shape(format!("normalization expects [N, C, H, W], got {s:?}")));
    }
    if s[1] != p.channels {
        return Err(Error::Shape(format!(
            "normalization has {} channels, input has {}",
            p.channels, s[1]
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Normalizes `x` with one parameter set.
///
/// Batch kind in training uses batch statistics and queues the EMA update
/// of the running statistics in `updates`; in inference it uses the running
/// statistics. Instance kind always uses per-sample statistics.
pub fn norm_forward(
    g: &Graph,
    store: &ParamStore,
    x: Var,
    p: &NormParams,
    kind: NormKind,
    training: bool,
    updates: &mut Vec<BufferUpdate>,
) -> Result<Var> {
    let [n, c, h, w] = check_input(g, x, p)?;
    let gamma = g.param(p.gamma.0, store.get(p.gamma));
    let beta = g.param(p.beta.0, store.get(p.beta));
    match kind {
        NormKind::Instance => {
            if h * w < 2 {
                return Err(Error::BatchTooSmall(h * w));
            }
            Ok(g.normalize(x, gamma, beta, NormStats::Instance, p.eps).0)
        }
        NormKind::Batch if training => {
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            let (y, stats) = g.normalize(x, gamma, beta, NormStats::Batch, p.eps);
            let (bm, bv) = stats.expect("batch statistics");
            let (rm_id, rv_id) = (
                p.running_mean.expect("batch norm has running stats"),
                p.running_var.expect("batch norm has running stats"),
            );
            let count = (n * h * w) as f64;
            let bessel = count / (count - 1.0);
            let m = p.momentum;
            let rm = store.get(rm_id);
            let rv = store.get(rv_id);
            let new_rm = Tensor::new(
                vec![c],
                rm.data().iter().zip(&bm).map(|(r, b)| (1.0 - m) * r + m * b).collect(),
            )?;
            let new_rv = Tensor::new(
                vec![c],
                rv.data().iter().zip(&bv).map(|(r, b)| (1.0 - m) * r + m * b * bessel).collect(),
            )?;
            updates.push(BufferUpdate { id: rm_id, value: new_rm });
            updates.push(BufferUpdate { id: rv_id, value: new_rv });
            Ok(y)
        }
        NormKind::Batch => {
            let rm = store.get(p.running_mean.expect("batch norm has running stats"));
            let rv = store.get(p.running_var.expect("batch norm has running stats"));
            let stats = NormStats::Fixed {
                mean: rm.data(),
                var: rv.data(),
            };
            Ok(g.normalize(x, gamma, beta, stats, p.eps).0)
        }
    }
}

/// Normalization unit whose separate-vs-shared status is searched.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchableNormLayer {
    /// Operation o2: one parameter set for both modalities.
    pub shared: NormParams,
    /// Operation o1, visible half.
    pub vis: NormParams,
    /// Operation o1, infrared half.
    pub ir: NormParams,
    pub alpha_separate: ParamId,
    pub alpha_share: ParamId,
    /// Position in topological order.
    pub layer_index: usize,
}

/// How a normalization layer routes samples to parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub enum NormRouting {
    Shared(NormParams),
    Separate { vis: NormParams, ir: NormParams },
    Searchable(SearchableNormLayer),
}

/// A normalization layer of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    /// Name of the block holding the layer (`s1`, `s2_1`, ...).
    pub block: String,
    pub kind: NormKind,
    pub routing: NormRouting,
}

fn separate_forward(
    g: &Graph,
    store: &ParamStore,
    x: Var,
    routing: &ModalityRouting,
    vis: &NormParams,
    ir: &NormParams,
    kind: NormKind,
    training: bool,
    updates: &mut Vec<BufferUpdate>,
) -> Result<Var> {
    routing.split_apply(g, x, |m, sub| {
        let p = match m {
            Modality::Vis => vis,
            Modality::Ir => ir,
        };
        norm_forward(g, store, sub, p, kind, training, updates)
    })
}

/// Mixture `p1 * o1(x) + p2 * o2(x)` of the separate branch `o1` and the
/// shared branch `o2`; `probs` is a `[2]` var `(p1, p2)`.
///
/// Both branches queue running-statistic updates in training regardless of
/// the mixture weights.
#[allow(clippy::too_many_arguments)]
pub fn searchable_norm_forward(
    g: &Graph,
    store: &ParamStore,
    x: Var,
    routing: &ModalityRouting,
    layer: &SearchableNormLayer,
    probs: Var,
    training: bool,
    updates: &mut Vec<BufferUpdate>,
) -> Result<Var> {
    let pv = g.value(probs);
    if pv.len() != 2 || (pv.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "mixture weights must be two values summing to 1, got {:?}",
            pv.data()
        )));
    }
    if routing.batch_len() != g.shape(x)[0] {
        return Err(Error::Shape("modality mask length differs from batch size".into()));
    }
    let p_sep = pv.data()[0];
    let shape = g.shape(x);

    let mut missing = None;
    for m in [Modality::Vis, Modality::Ir] {
        if !routing.has(m) {
            missing = Some(m);
        }
    }
    let separate_active = !(training && missing.is_some());
    if !separate_active && p_sep > 0.0 {
        return Err(Error::ModalityAbsent(missing.expect("checked")));
    }

    let shared = norm_forward(g, store, x, &layer.shared, NormKind::Batch, training, updates)?;
    let w_share = g.broadcast(g.gather(probs, &[1]), &shape);
    let mixed_shared = g.mul(w_share, shared);
    if !separate_active {
        return Ok(mixed_shared);
    }
    let sep = separate_forward(
        g,
        store,
        x,
        routing,
        &layer.vis,
        &layer.ir,
        NormKind::Batch,
        training,
        updates,
    )?;
    let w_sep = g.broadcast(g.gather(probs, &[0]), &shape);
    Ok(g.add(g.mul(w_sep, sep), mixed_shared))
}

impl NormLayer {
    /// Forward pass. `probs` must be given for searchable layers.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Var,
        routing: &ModalityRouting,
        probs: Option<Var>,
        training: bool,
        updates: &mut Vec<BufferUpdate>,
    ) -> Result<Var> {
        match &self.routing {
            NormRouting::Shared(p) => norm_forward(g, store, x, p, self.kind, training, updates),
            NormRouting::Separate { vis, ir } => {
                separate_forward(g, store, x, routing, vis, ir, self.kind, training, updates)
            }
            NormRouting::Searchable(layer) => {
                let probs = probs.ok_or_else(|| {
                    Error::InvalidArgument(format!("searchable layer {} needs mixture weights", self.name))
                })?;
                searchable_norm_forward(g, store, x, routing, layer, probs, training, updates)
            }
        }
    }

    pub fn is_searchable(&self) -> bool {
        matches!(self.routing, NormRouting::Searchable(_))
    }

    pub fn is_separate(&self) -> bool {
        matches!(self.routing, NormRouting::Separate { .. })
    }

    /// Trainable entries owned by this layer.
    pub fn trainable_len(&self) -> usize {
        match &self.routing {
            NormRouting::Shared(p) => p.trainable_len(),
            NormRouting::Separate { vis, ir } => vis.trainable_len() + ir.trainable_len(),
            NormRouting::Searchable(l) => {
                l.shared.trainable_len() + l.vis.trainable_len() + l.ir.trainable_len()
            }
        }
    }
}
