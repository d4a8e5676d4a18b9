//! Cross-modality retrieval metrics.
//!
//! Embeddings are L2-normalized and ranked by negative cosine similarity.
//! Equal distances keep gallery order, so results are reproducible.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Modality, Result};
use crate::nn::Network;
use crate::parallel;
use crate::tensor::Tensor;

/// Images per inference chunk.
pub const EMBED_CHUNK: usize = 64;

/// CMC curve (`cmc[r]` = fraction of queries matched within rank `r + 1`)
/// and mean average precision over an `nq x ng` row-major distance matrix.
/// Every query identity must occur in the gallery.
pub fn compute_cmc_map(dist: &[f64], query_ids: &[u32], gallery_ids: &[u32], max_rank: usize) -> Result<(Vec<f64>, f64)> {
    let (nq, ng) = (query_ids.len(), gallery_ids.len());
    if nq == 0 || ng == 0 || dist.len() != nq * ng {
        return Err(Error::Eval(format!("{} distances for {nq} queries x {ng} gallery items", dist.len())));
    }
    if dist.iter().any(|d| d.is_nan()) {
        return Err(Error::Eval("NaN distance".into()));
    }
    let max_rank = max_rank.max(1);
    let mut cmc = vec![0.0; max_rank];
    let (mut ap_sum, mut valid) = (0.0, 0usize);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..nq {
        let row = &dist[q * ng..(q + 1) * ng];
        order.clear();
        order.extend(0..ng);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first = None;
        for (pos, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == query_ids[q] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        let Some(first) = first else {
            return Err(Error::Eval(format!("query identity {} is absent from the gallery", query_ids[q])));
        };
        valid += 1;
        ap_sum += ap / hits as f64;
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= valid as f64);
    Ok((cmc, ap_sum / valid as f64))
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Inference embeddings of every image of `data`, `[n, d]`, in storage order.
pub fn embed_dataset(net: &Network, data: &Dataset) -> Result<Tensor> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Eval("empty dataset".into()));
    }
    let chunks = n.div_ceil(EMBED_CHUNK);
    let parts = parallel::map_indexed(chunks, |c| {
        let idx: Vec<usize> = (c * EMBED_CHUNK..((c + 1) * EMBED_CHUNK).min(n)).collect();
        let mods: Vec<Modality> = idx.iter().map(|&i| data.sample(i).modality).collect();
        net.embed(&data.batch(&idx, &[])?, &mods)
    });
    let mut out = Vec::with_capacity(n * net.config().embedding_dim);
    for p in parts {
        out.extend_from_slice(p?.data());
    }
    Tensor::new(vec![n, net.config().embedding_dim], out)
}

/// Retrieval protocol over the test identities.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub query: Modality,
    pub gallery: Modality,
    /// Gallery images drawn per identity each repeat.
    pub shots: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Protocol {
    /// Single- or ten-shot galleries.
    pub fn is_standard(&self) -> bool {
        self.shots == 1 || self.shots == 10
    }

    pub fn name(&self) -> String {
        format!("{}-to-{}", self.query, self.gallery)
    }

    /// Both directions with the given shots and repeats.
    pub fn both(shots: usize, repeats: usize, seed: u64) -> [Protocol; 2] {
        [
            Protocol { query: Modality::Vis, gallery: Modality::Ir, shots, repeats, seed },
            Protocol { query: Modality::Ir, gallery: Modality::Vis, shots, repeats, seed },
        ]
    }
}

/// Rank-1/10/20 and mAP of one evaluation, as fractions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

impl Metrics {
    fn as_array(&self) -> [f64; 4] {
        [self.rank1, self.rank10, self.rank20, self.map]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self { rank1: a[0], rank10: a[1], rank20: a[2], map: a[3] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub protocol: String,
    pub repeats: Vec<Metrics>,
    pub mean: Metrics,
    /// Population standard deviation over repeats.
    pub std: Metrics,
}

impl RetrievalReport {
    pub fn from_repeats(protocol: String, repeats: Vec<Metrics>) -> Self {
        let n = repeats.len().max(1) as f64;
        let mut mean = [0.0; 4];
        for r in &repeats {
            for (m, v) in mean.iter_mut().zip(r.as_array()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 4];
        for r in &repeats {
            for ((s, v), m) in var.iter_mut().zip(r.as_array()).zip(mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Self {
            protocol,
            repeats,
            mean: Metrics::from_array(mean),
            std: Metrics::from_array(var.map(f64::sqrt)),
        }
    }
}

pub const CSV_HEADER: &str = "protocol,repeat,rank1,rank10,rank20,mAP";

/// One row per repeat plus a `mean` row per report, values in percent.
pub fn reports_to_csv(reports: &[RetrievalReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    let row = |s: &mut String, p: &str, r: &str, m: &Metrics| {
        let _ = writeln!(
            s,
            "{p},{r},{:.4},{:.4},{:.4},{:.4}",
            100.0 * m.rank1,
            100.0 * m.rank10,
            100.0 * m.rank20,
            100.0 * m.map
        );
    };
    for rep in reports {
        for (i, m) in rep.repeats.iter().enumerate() {
            row(&mut s, &rep.protocol, &i.to_string(), m);
        }
        row(&mut s, &rep.protocol, "mean", &rep.mean);
    }
    s
}

/// Negative cosine distances between normalized query and gallery rows.
fn neg_cosine(emb: &Tensor, q: &[usize], gal: &[usize]) -> Vec<f64> {
    let d = emb.shape()[1];
    let row = |i: usize| &emb.data()[i * d..(i + 1) * d];
    let mut out = Vec::with_capacity(q.len() * gal.len());
    for &qi in q {
        let a = row(qi);
        for &gi in gal {
            out.push(-a.iter().zip(row(gi)).map(|(x, y)| x * y).sum::<f64>());
        }
    }
    out
}

/// Evaluates precomputed embeddings (`[data.len(), d]`, normalized inside).
pub fn evaluate_embeddings(emb: &Tensor, data: &Dataset, protocol: &Protocol) -> Result<RetrievalReport> {
    if emb.ndim() != 2 || emb.shape()[0] != data.len() {
        return Err(Error::Eval("embedding rows do not match the dataset".into()));
    }
    if protocol.shots == 0 || protocol.repeats == 0 || protocol.query == protocol.gallery {
        return Err(Error::Eval("protocol needs shots, repeats and two distinct modalities".into()));
    }
    let emb = l2_normalize_rows(emb);
    let index = data.index();
    let pick = |m: Modality| -> Vec<usize> {
        index
            .values()
            .flat_map(|(v, i)| if m == Modality::Vis { v.clone() } else { i.clone() })
            .collect()
    };
    let query = pick(protocol.query);
    if query.is_empty() {
        return Err(Error::Eval(format!("no {} query images", protocol.query)));
    }
    let query_ids: Vec<u32> = query.iter().map(|&i| data.sample(i).identity).collect();
    let mut repeats = Vec::with_capacity(protocol.repeats);
    for r in 0..protocol.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[protocol.seed, r as u64]));
        let mut gallery = Vec::new();
        for (v, i) in index.values() {
            let pool = if protocol.gallery == Modality::Vis { v } else { i };
            gallery.extend(pool.choose_multiple(&mut rng, protocol.shots.min(pool.len())).copied());
        }
        let gallery_ids: Vec<u32> = gallery.iter().map(|&i| data.sample(i).identity).collect();
        let (cmc, map) = compute_cmc_map(&neg_cosine(&emb, &query, &gallery), &query_ids, &gallery_ids, 20)?;
        let at = |k: usize| cmc[(k - 1).min(cmc.len() - 1)];
        repeats.push(Metrics { rank1: at(1), rank10: at(10), rank20: at(20), map });
    }
    Ok(RetrievalReport::from_repeats(protocol.name(), repeats))
}

pub fn evaluate(net: &Network, data: &Dataset, protocol: &Protocol) -> Result<RetrievalReport> {
    evaluate_embeddings(&embed_dataset(net, data)?, data, protocol)
}
