//! Batch augmentation fanned out over a rayon pool.

use ecacl_core::augment::{sample_rng, AugKind, BatchAugmenter, Image, Pipeline};
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{Error, Result};

/// Augments samples on `workers` threads. Each sample draws from its own
/// derived generator, so the output does not depend on the worker count.
pub struct ParallelAugmenter {
    pool: ThreadPool,
}

impl ParallelAugmenter {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("augmentation needs at least one worker".into()));
        }
        let pool = ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start augmentation workers: {e}")))?;
        Ok(Self { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl BatchAugmenter for ParallelAugmenter {
    fn augment(
        &self,
        images: &[&Image],
        kind: &AugKind,
        run_seed: u64,
        step: u64,
        pipeline: Pipeline,
    ) -> Vec<Image> {
        self.pool.install(|| {
            images
                .par_iter()
                .enumerate()
                .map(|(i, img)| {
                    let mut rng = sample_rng(run_seed, step, i as u64, pipeline);
                    kind.apply(img, &mut rng)
                })
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecacl_core::augment::{SequentialAugmenter, StrongAugSpec, WeakAugSpec};
    use ecacl_core::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn worker_count_does_not_change_output() {
        let ds = generate_synthetic(&SyntheticSpec {
            per_class: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let imgs: Vec<&Image> = ds.images().iter().collect();
        let one = ParallelAugmenter::new(1).unwrap();
        let four = ParallelAugmenter::new(4).unwrap();
        for kind in [
            AugKind::Strong(StrongAugSpec::default()),
            AugKind::Weak(WeakAugSpec::default()),
        ] {
            let a = one.augment(&imgs, &kind, 3, 17, Pipeline::StrongUnlabeled);
            let b = four.augment(&imgs, &kind, 3, 17, Pipeline::StrongUnlabeled);
            let c = SequentialAugmenter.augment(&imgs, &kind, 3, 17, Pipeline::StrongUnlabeled);
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn zero_workers_is_rejected() {
        assert!(ParallelAugmenter::new(0).is_err());
    }
}
