//! Training objectives.
//!
//! The basic loss is softmax cross-entropy plus a batch-hard triplet loss.
//! On top of it sit two modality-alignment terms on the embedding features:
//! a class-specific MMD under the polynomial kernel `k(x, y) = (x . y)^2`,
//! and a correlation-consistency penalty comparing row-normalized Gram
//! matrices of index-aligned visible and infrared features.

use std::collections::BTreeMap;

use crate::error::{Error, Modality, Result};
use crate::tensor::{Graph, Var};

/// Weights and toggles of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the class-specific MMD term.
    pub lambda1: f64,
    /// Weight of the correlation-consistency term.
    pub lambda2: f64,
    pub margin: f64,
    pub use_cmmd: bool,
    pub use_cc: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 5.0,
            margin: 0.3,
            use_cmmd: true,
            use_cc: true,
        }
    }
}

impl LossConfig {
    /// Basic loss only.
    pub fn basic() -> Self {
        Self {
            use_cmmd: false,
            use_cc: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda1) && ok(self.lambda2) && ok(self.margin)) {
            return Err(Error::Config("loss weights and margin must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Embedding features of a batch with their labels.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    /// `[n, d]` features on the tape.
    pub features: Var,
    pub identities: Vec<u32>,
    pub modality: Vec<Modality>,
}

impl FeatureBatch {
    pub fn new(features: Var, identities: Vec<u32>, modality: Vec<Modality>) -> Self {
        Self {
            features,
            identities,
            modality,
        }
    }

    /// `(vis indices, ir indices)` per identity, identities sorted.
    fn by_class(&self) -> BTreeMap<u32, (Vec<usize>, Vec<usize>)> {
        let mut m: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, (&id, &md)) in self.identities.iter().zip(&self.modality).enumerate() {
            let e = m.entry(id).or_default();
            match md {
                Modality::Vis => e.0.push(i),
                Modality::Ir => e.1.push(i),
            }
        }
        m
    }

    /// Index-aligned `(vis, ir)` rows: the k-th visible and k-th infrared
    /// sample of each identity form a pair.
    pub fn aligned_pairs(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut vis = Vec::new();
        let mut ir = Vec::new();
        for (id, (v, i)) in self.by_class() {
            if v.len() != i.len() {
                return Err(Error::InvalidArgument(format!(
                    "identity {id} has {} visible and {} infrared samples; correlation consistency needs equal counts",
                    v.len(),
                    i.len()
                )));
            }
            vis.extend(v);
            ir.extend(i);
        }
        Ok((vis, ir))
    }
}

/// Mean softmax cross-entropy of `logits: [n, C]` against class indices.
pub fn cls_loss(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] == 0 || labels.is_empty() {
        return Err(Error::InvalidArgument("classification loss of an empty batch".into()));
    }
    if labels.len() != s[0] {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), s[0])));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::InvalidArgument(format!("label {l} outside {} classes", s[1])));
    }
    let lp = g.log_softmax(logits);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * s[1] + l).collect();
    let picked = g.gather(lp, &idx);
    Ok(g.neg(g.mean(picked)))
}

/// Euclidean distance matrix `[n, n]` of the rows of `x: [n, d]`.
pub fn pairwise_distances(g: &Graph, x: Var) -> Var {
    let s = g.shape(x);
    let (n, d) = (s[0], s[1]);
    let a = g.broadcast(g.reshape(x, &[n, 1, d]), &[n, n, d]);
    let b = g.broadcast(g.reshape(x, &[1, n, d]), &[n, n, d]);
    let diff = g.sub(a, b);
    let sq = g.sum_axes(g.square(diff), &[2]);
    g.sqrt_clamped(g.reshape(sq, &[n, n]))
}

/// Batch-hard triplet loss: mean over anchors of
/// `max(0, hardest positive distance - hardest negative distance + margin)`.
pub fn triplet_loss(g: &Graph, features: Var, identities: &[u32], margin: f64) -> Result<Var> {
    let n = g.shape(features)[0];
    if identities.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} features", identities.len())));
    }
    let dist = pairwise_distances(g, features);
    let dv = g.value(dist);
    let d = dv.data();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let k = i * n + j;
            if identities[j] == identities[i] {
                if hp.is_none_or(|p| d[k] > d[p]) {
                    hp = Some(k);
                }
            } else if hn.is_none_or(|q| d[k] < d[q]) {
                hn = Some(k);
            }
        }
        match (hp, hn) {
            (Some(p), Some(q)) => {
                pos.push(p);
                neg.push(q);
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "triplet anchor {i} (identity {}) lacks a positive or a negative",
                    identities[i]
                )))
            }
        }
    }
    let hinge = g.add_scalar(g.sub(g.gather(dist, &pos), g.gather(dist, &neg)), margin);
    Ok(g.mean(g.relu(hinge)))
}

fn kernel_mean(g: &Graph, a: Var, b: Var) -> Var {
    let k = g.matmul(a, g.transpose(b));
    g.mean(g.square(k))
}

/// Class-specific MMD: mean over classes of the RKHS distance between the
/// visible and infrared mean embeddings under `k(x, y) = (x . y)^2`.
///
/// The squared distance is computed by the kernel trick and clamped at zero
/// before the square root.
pub fn cmmd_loss(g: &Graph, batch: &FeatureBatch) -> Result<Var> {
    let classes = batch.by_class();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("class-specific MMD of an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(classes.len());
    for (class, (v, i)) in &classes {
        if v.is_empty() || i.is_empty() {
            let modality = if v.is_empty() { Modality::Vis } else { Modality::Ir };
            return Err(Error::MissingModality {
                class: *class,
                modality,
            });
        }
        let fv = g.select_rows(batch.features, v);
        let fi = g.select_rows(batch.features, i);
        let kvv = kernel_mean(g, fv, fv);
        let kii = kernel_mean(g, fi, fi);
        let kvi = kernel_mean(g, fv, fi);
        let mmd2 = g.sub(g.add(kvv, kii), g.mul_scalar(kvi, 2.0));
        terms.push(g.sqrt_clamped(mmd2));
    }
    Ok(g.mean(g.concat(&terms)))
}

/// `F F^T` with each row divided by its Euclidean norm.
pub fn row_normalized_gram(g: &Graph, f: Var) -> Result<Var> {
    let gram = g.matmul(f, g.transpose(f));
    let norms = g.row_l2_norm(gram);
    if let Some(r) = g.value(norms).data().iter().position(|&v| v == 0.0) {
        return Err(Error::DegenerateFeatures(r));
    }
    let shape = g.shape(gram);
    Ok(g.div(gram, g.broadcast(norms, &shape)))
}

/// `(1 / n^2) * ||G_vis - G_ir||_F^2` on row-normalized Gram matrices.
pub fn cc_loss(g: &Graph, f_vis: Var, f_ir: Var) -> Result<Var> {
    let (sv, si) = (g.shape(f_vis), g.shape(f_ir));
    if sv[0] != si[0] {
        return Err(Error::Shape(format!("{} visible rows vs {} infrared rows", sv[0], si[0])));
    }
    let n = sv[0] as f64;
    let gv = row_normalized_gram(g, f_vis)?;
    let gi = row_normalized_gram(g, f_ir)?;
    let diff = g.sub(gv, gi);
    Ok(g.mul_scalar(g.sum(g.square(diff)), 1.0 / (n * n)))
}

/// Values of each term of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub triplet: f64,
    pub cmmd: f64,
    pub cc: f64,
    pub total: f64,
}

/// Tape handle of a loss plus the per-term values.
pub struct LossTerms {
    pub total: Var,
    pub values: LossValues,
}

/// `lambda1 * CMMD + lambda2 * CC`, skipping disabled terms.
pub fn c3mmd_loss(g: &Graph, batch: &FeatureBatch, cfg: &LossConfig) -> Result<Option<(Var, f64, f64)>> {
    let mut acc: Option<Var> = None;
    let (mut cm, mut cc) = (0.0, 0.0);
    if cfg.use_cmmd {
        let t = cmmd_loss(g, batch)?;
        cm = g.scalar(t);
        acc = Some(g.mul_scalar(t, cfg.lambda1));
    }
    if cfg.use_cc {
        let (vi, ii) = batch.aligned_pairs()?;
        let t = cc_loss(g, g.select_rows(batch.features, &vi), g.select_rows(batch.features, &ii))?;
        cc = g.scalar(t);
        let w = g.mul_scalar(t, cfg.lambda2);
        acc = Some(match acc {
            Some(a) => g.add(a, w),
            None => w,
        });
    }
    Ok(acc.map(|a| (a, cm, cc)))
}

/// Full objective: cross-entropy + triplet + weighted alignment terms.
pub fn total_loss(
    g: &Graph,
    batch: &FeatureBatch,
    logits: Var,
    classes: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let cls = cls_loss(g, logits, classes)?;
    let tri = triplet_loss(g, batch.features, &batch.identities, cfg.margin)?;
    let basic = g.add(cls, tri);
    let mut values = LossValues {
        cls: g.scalar(cls),
        triplet: g.scalar(tri),
        ..LossValues::default()
    };
    let total = match c3mmd_loss(g, batch, cfg)? {
        Some((c3, cm, cc)) => {
            values.cmmd = cm;
            values.cc = cc;
            g.add(basic, c3)
        }
        None => basic,
    };
    g.check_finite(total, "loss")?;
    values.total = g.scalar(total);
    Ok(LossTerms { total, values })
}
