use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainConfig;
use crate::datamodel::Dataset;
use crate::error::{Error, Result};

/// Indices into `Dataset::labeled` and `Dataset::unlabeled`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Walks a shuffled permutation of a pool, reshuffling after each full
/// pass. Pools smaller than one batch quota are sampled with replacement.
#[derive(Clone, Debug)]
struct PoolCursor {
    order: Vec<usize>,
    pos: usize,
    with_replacement: bool,
}

impl PoolCursor {
    fn new(n: usize, quota: usize) -> Self {
        PoolCursor {
            order: (0..n).collect(),
            pos: n,
            with_replacement: n < quota,
        }
    }

    fn take(&mut self, k: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
        let n = self.order.len();
        for _ in 0..k {
            if self.with_replacement {
                out.push(rng.random_range(0..n));
                continue;
            }
            if self.pos == n {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// Stateful batch sampler with a fixed labeled quota per batch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: PoolCursor,
    unlabeled: Option<PoolCursor>,
    n_labeled: usize,
    n_unlabeled: usize,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.labeled.is_empty() {
            return Err(Error::Config("training requires at least one labeled slice".into()));
        }
        let (n_labeled, n_unlabeled) = if dataset.unlabeled.is_empty() {
            if !config.weights.is_supervised() {
                return Err(Error::Config(
                    "unlabeled pool is empty but consistency or entropy weights are non-zero"
                        .into(),
                ));
            }
            (config.batch_size, 0)
        } else {
            (config.labeled_per_batch, config.batch_size - config.labeled_per_batch)
        };
        if dataset.labeled.len() < n_labeled {
            log::warn!(
                "labeled pool ({}) smaller than the per-batch quota ({}); sampling with replacement",
                dataset.labeled.len(),
                n_labeled
            );
        }
        Ok(BatchSampler {
            labeled: PoolCursor::new(dataset.labeled.len(), n_labeled),
            unlabeled: (n_unlabeled > 0)
                .then(|| PoolCursor::new(dataset.unlabeled.len(), n_unlabeled)),
            n_labeled,
            n_unlabeled,
        })
    }

    pub fn quotas(&self) -> (usize, usize) {
        (self.n_labeled, self.n_unlabeled)
    }

    pub fn sample(&mut self, rng: &mut impl Rng) -> Batch {
        let mut batch = Batch {
            labeled: Vec::with_capacity(self.n_labeled),
            unlabeled: Vec::with_capacity(self.n_unlabeled),
        };
        self.labeled.take(self.n_labeled, rng, &mut batch.labeled);
        if let Some(u) = &mut self.unlabeled {
            u.take(self.n_unlabeled, rng, &mut batch.unlabeled);
        }
        batch
    }
}

/// One batch from a fresh sampler.
pub fn sample_batch(dataset: &Dataset, config: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    Ok(BatchSampler::new(dataset, config)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Label, Slice, Split};
    use crate::grid::Grid;
    use crate::losses::LossWeights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n_l: usize, n_u: usize) -> Dataset {
        let s = |i: usize| Slice::new(Grid::filled(2, 2, 0.0), format!("s{}", i / 10), i % 10);
        Dataset {
            labeled: (0..n_l).map(|i| (s(i), Label::D)).collect(),
            unlabeled: (0..n_u).map(|i| s(1000 + i)).collect(),
            split: Split::Train,
        }
    }

    fn config(batch: usize, labeled: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            labeled_per_batch: labeled,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn quota_contract() {
        let d = dataset(100, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sampler = BatchSampler::new(&d, &config(64, 16)).unwrap();
        for _ in 0..50 {
            let b = sampler.sample(&mut rng);
            assert_eq!(b.labeled.len(), 16);
            assert_eq!(b.unlabeled.len(), 48);
        }
    }

    #[test]
    fn each_pass_visits_every_slice_once() {
        let d = dataset(32, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sampler = BatchSampler::new(&d, &config(64, 16)).unwrap();
        let mut seen = [0; 32];
        for _ in 0..2 {
            for i in sampler.sample(&mut rng).labeled {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn supervised_all_labeled_batch() {
        let d = dataset(100, 0);
        let cfg = TrainConfig {
            weights: LossWeights::supervised(),
            ..config(64, 16)
        };
        let b = sample_batch(&d, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (64, 0));
        assert!(sample_batch(&d, &config(64, 16), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn small_pool_samples_with_replacement() {
        let d = dataset(5, 100);
        let b = sample_batch(&d, &config(64, 16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.labeled.len(), 16);
        assert!(b.labeled.iter().all(|&i| i < 5));
    }

    #[test]
    fn deterministic_sequence() {
        let d = dataset(50, 200);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut s = BatchSampler::new(&d, &config(32, 8)).unwrap();
            (0..20).map(|_| s.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
