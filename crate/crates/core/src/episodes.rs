//! Meta-train task sampling and fixed meta-test suites.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_task, ColdnessConfig, Task, UserLog};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeMode {
    Uniform,
    Empirical,
}

/// Distribution of meta-train support sizes over `{1..τ}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSizeDist {
    pub mode: SizeMode,
    pub tau: usize,
    /// `weights[i - 1] = P(|S| = i)`
    pub weights: Vec<f64>,
}

impl SupportSizeDist {
    pub fn uniform(tau: usize) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(Self {
            mode: SizeMode::Uniform,
            tau,
            weights: vec![1.0 / tau as f64; tau],
        })
    }

    /// Frequencies of `|D_u| = i` among users with `|D_u| ≤ τ`.
    pub fn empirical(log_lengths: impl IntoIterator<Item = usize>, tau: usize) -> Result<Self> {
        let mut counts = vec![0usize; tau];
        for len in log_lengths {
            if (1..=tau).contains(&len) {
                counts[len - 1] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDataset(format!(
                "no cold users with at most {tau} interactions for the empirical size distribution"
            )));
        }
        Ok(Self {
            mode: SizeMode::Empirical,
            tau,
            weights: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.mode {
            SizeMode::Uniform => rng.gen_range(1..=self.tau),
            SizeMode::Empirical => {
                let w = WeightedIndex::new(&self.weights).expect("validated weights");
                w.sample(rng) + 1
            }
        }
    }
}

/// A task together with the index of the log it was cut from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedTask {
    pub log: usize,
    pub task: Task,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub tasks: Vec<IndexedTask>,
    pub epoch: usize,
    pub batch_index: usize,
}

fn eligible(logs: &[UserLog]) -> Vec<usize> {
    (0..logs.len()).filter(|&i| logs[i].len() >= 2).collect()
}

fn train_task<R: Rng + ?Sized>(log: &UserLog, dist: &SupportSizeDist, rng: &mut R) -> Result<Task> {
    let s = dist.sample(rng).min(log.len() - 1);
    make_task(log, s, log.has_timestamps(), rng)
}

/// Draws `batch_size` distinct users with `|D_u| ≥ 2` and one task each.
pub fn sample_train_batch<R: Rng + ?Sized>(
    logs: &[UserLog],
    dist: &SupportSizeDist,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpisodeBatch> {
    let pool = eligible(logs);
    if pool.is_empty() {
        return Err(Error::EmptyDataset("no training user has two or more instances".into()));
    }
    if batch_size > pool.len() {
        return Err(Error::Config(format!(
            "batch of {batch_size} tasks exceeds {} eligible users",
            pool.len()
        )));
    }
    let picks = sample(rng, pool.len(), batch_size).into_vec();
    let tasks = picks
        .into_iter()
        .map(|p| {
            let log = pool[p];
            Ok(IndexedTask {
                log,
                task: train_task(&logs[log], dist, rng)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EpisodeBatch {
        tasks,
        epoch: 0,
        batch_index: 0,
    })
}

/// One pass over every eligible user in random order, resampling each
/// user's support/query split.
pub fn epoch_batches<R: Rng + ?Sized>(
    logs: &[UserLog],
    dist: &SupportSizeDist,
    batch_size: usize,
    epoch: usize,
    rng: &mut R,
) -> Result<Vec<EpisodeBatch>> {
    let mut pool = eligible(logs);
    if pool.is_empty() {
        return Err(Error::EmptyDataset("no training user has two or more instances".into()));
    }
    pool.shuffle(rng);
    pool.chunks(batch_size.max(1))
        .enumerate()
        .map(|(batch_index, chunk)| {
            let tasks = chunk
                .iter()
                .map(|&log| {
                    Ok(IndexedTask {
                        log,
                        task: train_task(&logs[log], dist, rng)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(EpisodeBatch {
                tasks,
                epoch,
                batch_index,
            })
        })
        .collect()
}

/// Tasks for every evaluated support size, one per eligible user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestSuite {
    pub coldness: ColdnessConfig,
    pub tasks: BTreeMap<usize, Vec<IndexedTask>>,
    /// Users skipped per size because `|D_u| ≤ s`.
    pub excluded: BTreeMap<usize, usize>,
}

/// Builds the fixed evaluation tasks: the first `s` instances by time, or a
/// seeded random `s` for untimed logs; all remaining instances are queries.
pub fn build_meta_test(logs: &[UserLog], config: &ColdnessConfig, seed: u64) -> Result<MetaTestSuite> {
    config.validate()?;
    let mut tasks = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for &s in &config.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut list = Vec::new();
        let mut skipped = 0;
        for (i, log) in logs.iter().enumerate() {
            if log.len() <= s {
                skipped += 1;
                continue;
            }
            list.push(IndexedTask {
                log: i,
                task: make_task(log, s, log.has_timestamps(), &mut rng)?,
            });
        }
        tasks.insert(s, list);
        excluded.insert(s, skipped);
    }
    Ok(MetaTestSuite {
        coldness: config.clone(),
        tasks,
        excluded,
    })
}

#[derive(Serialize)]
struct IndexEntry<'a> {
    user: &'a str,
    size: usize,
    support: &'a [usize],
    query: &'a [usize],
}

impl MetaTestSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }

    /// Audit index: one entry per task with support/query positions.
    pub fn write_index(&self, path: &Path) -> Result<()> {
        let entries: Vec<IndexEntry<'_>> = self
            .tasks
            .iter()
            .flat_map(|(&size, list)| {
                list.iter().map(move |t| IndexEntry {
                    user: &t.task.user_id,
                    size,
                    support: &t.task.support,
                    query: &t.task.query,
                })
            })
            .collect();
        let json = serde_json::to_vec_pretty(&entries).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;

    fn logs(lens: &[usize], timed: bool) -> Vec<UserLog> {
        lens.iter()
            .enumerate()
            .map(|(u, &n)| {
                UserLog::new(
                    format!("u{u}"),
                    (0..n)
                        .map(|i| Instance::new(vec![0], (i % 2) as u8, timed.then_some((n - i) as i64)))
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_sizes_in_range() {
        let d = SupportSizeDist::uniform(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!((1..=30).contains(&d.sample(&mut rng)));
        }
        assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let d = SupportSizeDist::uniform(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut counts = [0usize; 30];
        for _ in 0..n {
            counts[d.sample(&mut rng) - 1] += 1;
        }
        let p = 1.0 / 30.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma + 1.0, "{counts:?}");
        }
    }

    #[test]
    fn empirical_weights() {
        let d = SupportSizeDist::empirical([1, 2, 2, 3, 40], 3).unwrap();
        assert_eq!(d.weights, vec![0.25, 0.5, 0.25]);
        assert!(SupportSizeDist::empirical([50], 3).is_err());
    }

    #[test]
    fn short_log_is_clamped() {
        let l = logs(&[2], false);
        let d = SupportSizeDist::uniform(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = sample_train_batch(&l, &d, 1, &mut rng).unwrap();
            assert_eq!(b.tasks[0].task.support.len(), 1);
            assert_eq!(b.tasks[0].task.query.len(), 1);
        }
    }

    #[test]
    fn batch_users_are_distinct_and_valid() {
        let l = logs(&[5, 9, 1, 30, 12, 7], true);
        let d = SupportSizeDist::uniform(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_train_batch(&l, &d, 5, &mut rng).unwrap();
        let mut users: Vec<_> = b.tasks.iter().map(|t| t.log).collect();
        users.sort();
        users.dedup();
        assert_eq!(users.len(), 5);
        assert!(!users.contains(&2), "single-instance user is ineligible");
        for t in &b.tasks {
            t.task.validate(&l[t.log]).unwrap();
        }
        assert!(sample_train_batch(&l, &d, 6, &mut rng).is_err());
        assert!(matches!(
            sample_train_batch(&logs(&[1, 1], false), &d, 1, &mut rng),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn epochs_resample_splits() {
        let l = logs(&[40, 40, 40, 40], false);
        let d = SupportSizeDist::uniform(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e1 = epoch_batches(&l, &d, 2, 0, &mut rng).unwrap();
        let e2 = epoch_batches(&l, &d, 2, 1, &mut rng).unwrap();
        let flat = |e: &[EpisodeBatch]| {
            let mut v: Vec<_> = e.iter().flat_map(|b| b.tasks.clone()).collect();
            v.sort_by_key(|t| t.log);
            v
        };
        assert_eq!(e1.len(), 2);
        assert_ne!(flat(&e1), flat(&e2));
    }

    #[test]
    fn meta_test_boundaries() {
        let l = logs(&[25], true);
        let suite = build_meta_test(&l, &ColdnessConfig::movielens(), 0).unwrap();
        assert!(suite.tasks[&30].is_empty());
        assert_eq!(suite.excluded[&30], 1);
        let t = &suite.tasks[&10][0].task;
        assert_eq!((t.support.len(), t.query.len()), (10, 15));
        t.validate(&l[0]).unwrap();
    }

    #[test]
    fn meta_test_is_deterministic() {
        let l = logs(&[35, 50, 31], false);
        let a = build_meta_test(&l, &ColdnessConfig::movielens(), 4).unwrap();
        let b = build_meta_test(&l, &ColdnessConfig::movielens(), 4).unwrap();
        assert_eq!(a, b);
        let c = build_meta_test(&l, &ColdnessConfig::movielens(), 5).unwrap();
        assert_ne!(a, c);
    }
}
