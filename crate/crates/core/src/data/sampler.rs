use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Modality, Result};
use crate::tensor::Tensor;

/// One P x K two-modality training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub images: Tensor,
    pub identities: Vec<u32>,
    pub modality: Vec<Modality>,
    /// Dataset indices, in batch order.
    pub indices: Vec<usize>,
}

/// Draws `p` distinct identities and, for each, `k` distinct images of each
/// modality. Batch layout per identity: `k` visible then `k` infrared rows.
/// With `flip`, each image is mirrored with probability 1/2.
pub fn sample_pk_batch(data: &Dataset, p: usize, k: usize, flip: bool, rng: &mut ChaCha8Rng) -> Result<ModalityBatch> {
    let index = data.index();
    let ids: Vec<u32> = index.keys().copied().collect();
    check(&index, p, k)?;
    let chosen: Vec<u32> = ids.choose_multiple(rng, p).copied().collect();
    build(data, &index, &chosen, k, flip, rng)
}

/// Covers the identities once in shuffled order, `floor(n / p)` batches.
pub fn epoch_batches(data: &Dataset, p: usize, k: usize, flip: bool, rng: &mut ChaCha8Rng) -> Result<Vec<ModalityBatch>> {
    let index = data.index();
    check(&index, p, k)?;
    let mut ids: Vec<u32> = index.keys().copied().collect();
    ids.shuffle(rng);
    ids.chunks_exact(p).map(|c| build(data, &index, c, k, flip, rng)).collect()
}

type Index = std::collections::BTreeMap<u32, (Vec<usize>, Vec<usize>)>;

fn check(index: &Index, p: usize, k: usize) -> Result<()> {
    if p == 0 || k == 0 {
        return Err(Error::Sampler("P and K must be positive".into()));
    }
    if index.len() < p {
        return Err(Error::Sampler(format!("{} identities, need P = {p}", index.len())));
    }
    for (id, (v, i)) in index {
        if v.len() < k || i.len() < k {
            return Err(Error::Sampler(format!(
                "identity {id} has {}/{} vis/ir images, need K = {k} of each",
                v.len(),
                i.len()
            )));
        }
    }
    Ok(())
}

fn build(data: &Dataset, index: &Index, ids: &[u32], k: usize, flip: bool, rng: &mut ChaCha8Rng) -> Result<ModalityBatch> {
    let mut indices = Vec::with_capacity(ids.len() * 2 * k);
    let mut identities = Vec::with_capacity(indices.capacity());
    let mut modality = Vec::with_capacity(indices.capacity());
    for id in ids {
        let (v, i) = &index[id];
        for (pool, m) in [(v, Modality::Vis), (i, Modality::Ir)] {
            for &s in pool.choose_multiple(rng, k) {
                indices.push(s);
                identities.push(*id);
                modality.push(m);
            }
        }
    }
    let flips: Vec<bool> = if flip {
        (0..indices.len()).map(|_| rng.gen_bool(0.5)).collect()
    } else {
        Vec::new()
    };
    Ok(ModalityBatch {
        images: data.batch(&indices, &flips)?,
        identities,
        modality,
        indices,
    })
}
