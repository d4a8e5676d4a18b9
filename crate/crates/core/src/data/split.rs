use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Identity-disjoint split into `(train, val)` with `round(ratio * n)`
/// training identities chosen by a seeded shuffle. Both sides must be
/// non-empty.
pub fn split_identities(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut ids = data.identities();
    let n = ids.len();
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} is outside (0, 1)")));
    }
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Split(format!(
            "ratio {ratio} over {n} identities leaves an empty side ({n_train} train)"
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val) = ids.split_at(n_train);
    Ok((data.subset(train), data.subset(val)))
}

/// Deterministic disjoint split: the last `test` identities (sorted order)
/// form the test set.
pub fn holdout_identities(data: &Dataset, test: usize) -> Result<(Dataset, Dataset)> {
    let ids = data.identities();
    if test == 0 || test >= ids.len() {
        return Err(Error::Split(format!("cannot hold out {test} of {} identities", ids.len())));
    }
    let (train, held) = ids.split_at(ids.len() - test);
    Ok((data.subset(train), data.subset(held)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    fn data(ids: usize) -> Dataset {
        generate_dataset(&SynthConfig {
            identities: ids,
            images_per_modality: 2,
            resolution: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = data(10);
        let (a, b) = split_identities(&d, 0.8, 3).unwrap();
        let (ia, ib) = (a.identities(), b.identities());
        assert_eq!((ia.len(), ib.len()), (8, 2));
        assert!(ia.iter().all(|i| !ib.contains(i)));
        assert_eq!(split_identities(&d, 0.8, 3).unwrap().1, b);
    }

    #[test]
    fn degenerate_ratios_fail() {
        let d = data(10);
        assert!(matches!(split_identities(&d, 0.999, 0), Err(Error::Split(_))));
        assert!(split_identities(&d, 0.0, 0).is_err());
        assert!(split_identities(&d, 1.5, 0).is_err());
        assert!(split_identities(&d, f64::NAN, 0).is_err());
    }

    #[test]
    fn holdout_takes_last_identities() {
        let d = data(5);
        let (tr, te) = holdout_identities(&d, 2).unwrap();
        assert_eq!(te.identities(), d.identities()[3..].to_vec());
        assert_eq!(tr.identities().len(), 3);
        assert!(holdout_identities(&d, 5).is_err());
    }
}
