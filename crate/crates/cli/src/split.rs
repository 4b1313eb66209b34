//! Deterministic 90/10 train/held-out split keyed by record index.

use rand::RngCore;
use sfgs_core::rng::CounterRng;

const SPLIT_PURPOSE: u64 = 0x5917;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

pub fn record_hash(seed: u64, index: u64) -> u64 {
    CounterRng::derived(seed, index, SPLIT_PURPOSE).next_u64()
}

/// The `⌈count / 10⌉` records with the smallest hash are held out. Both
/// index lists are ascending.
pub fn split(count: usize, seed: u64) -> Split {
    let mut keyed: Vec<(u64, usize)> = (0..count).map(|i| (record_hash(seed, i as u64), i)).collect();
    keyed.sort_unstable();
    let held = count.div_ceil(10);
    let mut heldout: Vec<usize> = keyed[..held].iter().map(|&(_, i)| i).collect();
    let mut train: Vec<usize> = keyed[held..].iter().map(|&(_, i)| i).collect();
    heldout.sort_unstable();
    train.sort_unstable();
    Split { train, heldout }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_disjointness() {
        let s = split(5000, 3);
        assert_eq!(s.heldout.len(), 500);
        assert_eq!(s.train.len(), 4500);
        let mut all: Vec<usize> = s.train.iter().chain(&s.heldout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..5000).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        assert_eq!(split(200, 1), split(200, 1));
        assert_ne!(split(200, 1).heldout, split(200, 2).heldout);
    }
}
