use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, DatasetManifest, Split};

struct DomainQueue {
    domain: usize,
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    reshuffles: usize,
}

/// Stateful domain-even sampler: every batch holds `batch_size / |domains|`
/// rows of each domain. Each domain walks a shuffled permutation of its rows
/// and reshuffles once it runs out.
pub struct BatchComposer {
    per_domain: usize,
    batch_size: usize,
    queues: Vec<DomainQueue>,
}

impl BatchComposer {
    pub fn new(manifest: &DatasetManifest, domains: &[usize], batch_size: usize, split: Split) -> Result<Self, DataError> {
        if domains.is_empty() || batch_size == 0 || batch_size % domains.len() != 0 {
            return Err(DataError::Config(format!(
                "batch size {batch_size} is not divisible by the {} seen domains",
                domains.len()
            )));
        }
        let queues = domains
            .iter()
            .map(|&d| {
                let pool = manifest.select(split, &[d]);
                if pool.is_empty() {
                    return Err(DataError::Config(format!("domain {d} has no {} rows", split.as_str())));
                }
                Ok(DomainQueue { domain: d, pool, order: Vec::new(), pos: 0, reshuffles: 0 })
            })
            .collect::<Result<_, _>>()?;
        Ok(BatchComposer { per_domain: batch_size / domains.len(), batch_size, queues })
    }

    pub fn per_domain(&self) -> usize {
        self.per_domain
    }

    /// Batches in one pass over the pooled rows.
    pub fn batches_per_epoch(&self) -> usize {
        let total: usize = self.queues.iter().map(|q| q.pool.len()).sum();
        (total / self.batch_size).max(1)
    }

    /// How often each domain has been reshuffled, in domain order.
    pub fn reshuffles(&self) -> Vec<(usize, usize)> {
        self.queues.iter().map(|q| (q.domain, q.reshuffles)).collect()
    }

    /// Manifest row indices of the next batch, in shuffled order.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for q in &mut self.queues {
            for _ in 0..self.per_domain {
                if q.pos == q.order.len() {
                    if !q.order.is_empty() {
                        q.reshuffles += 1;
                    }
                    q.order = q.pool.clone();
                    q.order.shuffle(rng);
                    q.pos = 0;
                }
                batch.push(q.order[q.pos]);
                q.pos += 1;
            }
        }
        batch.shuffle(rng);
        batch
    }
}

/// One domain-even training batch drawn from a fresh composer.
pub fn compose_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    batch_size: usize,
    seen_domains: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    Ok(BatchComposer::new(manifest, seen_domains, batch_size, Split::Train)?.next_batch(rng))
}
