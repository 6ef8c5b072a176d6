use rand::seq::SliceRandom;

use super::Dataset;
use crate::rng::stream_rng;

/// Seeded shuffle of `0..n` cut into halves of sizes floor(n/2) and ceil(n/2).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0x5B11));
    let adversary = order.split_off(n / 2);
    (order, adversary)
}

/// Splits a dataset into disjoint owner and adversary halves.
pub fn split_owner_adversary(dataset: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let (owner, adversary) = split_indices(dataset.len(), seed);
    (dataset.select(&owner), dataset.select(&adversary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::Shape3;
    use std::collections::BTreeSet;

    #[test]
    fn ten_splits_five_five_disjoint() {
        let (a, b) = split_indices(10, 7);
        assert_eq!((a.len(), b.len()), (5, 5));
        let sa: BTreeSet<_> = a.iter().collect();
        assert!(b.iter().all(|i| !sa.contains(i)));
        let all: BTreeSet<_> = a.iter().chain(&b).copied().collect();
        assert_eq!(all, (0..10).collect());
    }

    #[test]
    fn odd_count_gives_floor_and_ceil() {
        let (a, b) = split_indices(11, 1);
        assert_eq!((a.len(), b.len()), (5, 6));
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(split_indices(100, 3), split_indices(100, 3));
        assert_ne!(split_indices(100, 3), split_indices(100, 4));
    }

    #[test]
    fn halves_partition_the_examples() {
        let ds = synthetic_dataset(2, 40, 4, Shape3::new(6, 6, 1)).unwrap();
        let (owner, adversary) = split_owner_adversary(&ds, 9);
        let key = |d: &Dataset, i: usize| {
            (
                d.labels()[i],
                d.image(i).iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            )
        };
        let mut original: Vec<_> = (0..ds.len()).map(|i| key(&ds, i)).collect();
        let mut union: Vec<_> = (0..owner.len())
            .map(|i| key(&owner, i))
            .chain((0..adversary.len()).map(|i| key(&adversary, i)))
            .collect();
        original.sort();
        union.sort();
        assert_eq!(original, union);
    }
}
