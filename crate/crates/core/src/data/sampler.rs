use rand::seq::SliceRandom;
use rand::Rng;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Record indices of one PK batch, identity-grouped: `P` runs of `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub indices: Vec<usize>,
    pub identities: Vec<usize>,
}

/// One epoch of identity-balanced batches.
///
/// Identities are shuffled and consumed `P` at a time, so every identity
/// appears at least once per epoch; the final short group is topped up with
/// identities drawn from the rest of the epoch's order. Identities with
/// fewer than `K` images are sampled with replacement.
pub fn pk_sample(
    manifest: &DatasetManifest,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BatchIndices>> {
    if manifest.split != Split::Train {
        return Err(Error::InvalidArgument(format!(
            "PK sampling needs a train split, got {}",
            manifest.split
        )));
    }
    if p == 0 || k == 0 {
        return Err(Error::InvalidArgument("P and K must be positive".into()));
    }
    let groups = manifest.indices_by_identity();
    let available: Vec<usize> = (0..groups.len()).filter(|&j| !groups[j].is_empty()).collect();
    if p > available.len() {
        return Err(Error::InvalidArgument(format!(
            "P={p} exceeds the {} identities in the manifest",
            available.len()
        )));
    }

    let mut order = available.clone();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(p) {
        let mut ids = chunk.to_vec();
        if ids.len() < p {
            let mut rest: Vec<usize> = order.iter().copied().filter(|j| !ids.contains(j)).collect();
            rest.shuffle(rng);
            ids.extend(rest.into_iter().take(p - ids.len()));
        }
        let mut indices = Vec::with_capacity(p * k);
        let mut identities = Vec::with_capacity(p * k);
        for &id in &ids {
            let pool = &groups[id];
            if pool.len() >= k {
                let mut pick = pool.clone();
                pick.shuffle(rng);
                indices.extend_from_slice(&pick[..k]);
            } else {
                for _ in 0..k {
                    indices.push(pool[rng.random_range(0..pool.len())]);
                }
            }
            identities.extend(std::iter::repeat_n(id, k));
        }
        batches.push(BatchIndices { indices, identities });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;
    use std::path::PathBuf;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (id, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(ImageRecord {
                    image_path: PathBuf::from(format!("{id}_{i}.png")),
                    identity: id,
                    camera: i % 2,
                    domain: "a".into(),
                });
            }
        }
        DatasetManifest {
            records,
            split: Split::Train,
            num_identities: counts.len(),
            root: PathBuf::new(),
        }
    }

    #[test]
    fn default_pk_gives_batches_of_64() {
        let m = manifest(&[8; 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = pk_sample(&m, 16, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.indices.len() == 64));
    }

    #[test]
    fn minimal_batch_has_distinct_identities() {
        let m = manifest(&[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = pk_sample(&m, 2, 1, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        let mut ids = batches[0].identities.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn small_identities_are_sampled_with_replacement() {
        let m = manifest(&[2, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = &pk_sample(&m, 2, 4, &mut rng).unwrap()[0];
        let small: Vec<usize> = b
            .indices
            .iter()
            .zip(&b.identities)
            .filter(|(_, &id)| id == 0)
            .map(|(&i, _)| i)
            .collect();
        assert_eq!(small.len(), 4);
        assert!(small.iter().all(|&i| i < 2));
    }

    #[test]
    fn too_many_identities_requested() {
        let m = manifest(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pk_sample(&m, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn thousand_batches_have_exactly_k_per_identity() {
        let m = manifest(&[1, 2, 3, 5, 8, 13, 4, 4, 2, 7, 6, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = 0;
        while seen < 1000 {
            for b in pk_sample(&m, 5, 3, &mut rng).unwrap() {
                let mut counts: HashMap<usize, usize> = HashMap::new();
                for (&idx, &id) in b.indices.iter().zip(&b.identities) {
                    assert_eq!(m.records[idx].identity, id);
                    *counts.entry(id).or_default() += 1;
                }
                assert_eq!(counts.len(), 5);
                assert!(counts.values().all(|&c| c == 3));
                seen += 1;
            }
        }
    }

    #[test]
    fn epoch_covers_every_identity_and_is_seed_determined() {
        let m = manifest(&[4; 10]);
        let run = |seed| pk_sample(&m, 4, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(9);
        assert_eq!(a, run(9));
        assert_ne!(a, run(10));
        let mut covered: Vec<usize> = a.iter().flat_map(|b| b.identities.clone()).collect();
        covered.sort();
        covered.dedup();
        assert_eq!(covered.len(), 10);
    }
}
