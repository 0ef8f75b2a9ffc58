//! In-memory model of CTR instances, feature spaces, per-user logs and
//! meta-learning tasks.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index reserved in every field for tokens missing from the vocabulary.
pub const OOV_INDEX: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    /// Includes the OOV slot.
    pub vocab_size: usize,
}

/// Field schema plus per-field token vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpace {
    fields: Vec<FieldDescriptor>,
    /// `tokens[f][i - 1]` is the token with index `i` in field `f`.
    tokens: Vec<Vec<String>>,
    lookup: Vec<HashMap<String, u32>>,
}

impl FeatureSpace {
    /// Builds vocabularies from token rows. Indices are assigned in sorted
    /// token order starting at 1; index 0 is the OOV bucket.
    pub fn build<'a, I>(field_names: &[String], rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut seen: Vec<std::collections::BTreeSet<&'a str>> =
            vec![Default::default(); field_names.len()];
        for row in rows {
            for (f, tok) in row.iter().enumerate() {
                seen[f].insert(tok.as_str());
            }
        }
        let tokens = seen
            .into_iter()
            .map(|s| s.into_iter().map(str::to_string).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        Self::from_tokens(field_names, tokens)
    }

    /// Rebuilds a feature space from per-field token lists (index `i + 1`
    /// for `tokens[f][i]`).
    pub fn from_tokens(field_names: &[String], tokens: Vec<Vec<String>>) -> Self {
        let fields = field_names
            .iter()
            .zip(&tokens)
            .map(|(name, toks)| FieldDescriptor {
                name: name.clone(),
                vocab_size: toks.len() + 1,
            })
            .collect();
        let lookup = tokens
            .iter()
            .map(|toks| {
                toks.iter()
                    .enumerate()
                    .map(|(i, t)| (t.clone(), i as u32 + 1))
                    .collect()
            })
            .collect();
        Self {
            fields,
            tokens,
            lookup,
        }
    }

    pub fn fields(&self) -> &[FieldDescriptor] {
        &self.fields
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn tokens(&self, field: usize) -> &[String] {
        &self.tokens[field]
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size).collect()
    }

    /// Sum of vocabulary sizes including one OOV slot per field.
    pub fn total_features(&self) -> usize {
        self.fields.iter().map(|f| f.vocab_size).sum()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>> {
        if tokens.len() != self.fields.len() {
            return Err(Error::InvalidData(format!(
                "expected {} fields, got {}",
                self.fields.len(),
                tokens.len()
            )));
        }
        Ok(tokens
            .iter()
            .zip(&self.lookup)
            .map(|(t, map)| map.get(t.as_ref()).copied().unwrap_or(OOV_INDEX))
            .collect())
    }

    /// Inverse of [`encode`](Self::encode); OOV decodes to `None`.
    pub fn decode(&self, indices: &[u32]) -> Vec<Option<&str>> {
        indices
            .iter()
            .zip(&self.tokens)
            .map(|(&i, toks)| {
                if i == OOV_INDEX {
                    None
                } else {
                    toks.get(i as usize - 1).map(String::as_str)
                }
            })
            .collect()
    }

    pub fn encode_decoded(&self, decoded: &[Option<&str>]) -> Vec<u32> {
        decoded
            .iter()
            .zip(&self.lookup)
            .map(|(t, map)| t.and_then(|t| map.get(t).copied()).unwrap_or(OOV_INDEX))
            .collect()
    }
}

/// One labelled CTR record.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instance {
    pub fields: Vec<u32>,
    pub label: u8,
    pub timestamp: Option<i64>,
}

impl Instance {
    pub fn new(fields: Vec<u32>, label: u8, timestamp: Option<i64>) -> Self {
        debug_assert!(label <= 1);
        Self {
            fields,
            label,
            timestamp,
        }
    }

    #[inline]
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }

    pub fn check(&self, space: &FeatureSpace) -> Result<()> {
        if self.fields.len() != space.num_fields() {
            return Err(Error::InvalidData(format!(
                "instance has {} fields, feature space has {}",
                self.fields.len(),
                space.num_fields()
            )));
        }
        for (f, (&i, desc)) in self.fields.iter().zip(space.fields()).enumerate() {
            if i as usize >= desc.vocab_size {
                return Err(Error::InvalidData(format!(
                    "field {f} ({}) index {i} outside vocabulary of {}",
                    desc.name, desc.vocab_size
                )));
            }
        }
        if self.label > 1 {
            return Err(Error::InvalidData(format!("label {} is not binary", self.label)));
        }
        Ok(())
    }
}

/// All observed instances of one user. Timestamped logs are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserLog {
    pub user_id: String,
    instances: Vec<Instance>,
}

impl UserLog {
    /// Stable-sorts by timestamp when every instance carries one. A mix of
    /// timestamped and untimed instances is rejected.
    pub fn new(user_id: impl Into<String>, mut instances: Vec<Instance>) -> Result<Self> {
        let user_id = user_id.into();
        let timed = instances.iter().filter(|i| i.timestamp.is_some()).count();
        if timed != 0 && timed != instances.len() {
            return Err(Error::InvalidData(format!(
                "user {user_id}: {timed} of {} instances carry timestamps",
                instances.len()
            )));
        }
        if timed != 0 {
            instances.sort_by_key(|i| i.timestamp);
        }
        Ok(Self { user_id, instances })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn has_timestamps(&self) -> bool {
        self.instances.first().is_some_and(|i| i.timestamp.is_some())
    }
}

/// Partitions a log into (positives, negatives), preserving order.
pub fn split_by_label(log: &UserLog) -> (Vec<&Instance>, Vec<&Instance>) {
    log.instances().iter().partition(|i| i.label == 1)
}

/// A support/query split of one user's log, stored as positions into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub user_id: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Task {
    pub fn support_instances<'a>(&self, log: &'a UserLog) -> Vec<&'a Instance> {
        self.support.iter().map(|&i| &log.instances[i]).collect()
    }

    pub fn query_instances<'a>(&self, log: &'a UserLog) -> Vec<&'a Instance> {
        self.query.iter().map(|&i| &log.instances[i]).collect()
    }

    /// Checks disjointness, non-empty support, and time ordering.
    pub fn validate(&self, log: &UserLog) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidData(format!("task for {}: {msg}", self.user_id)));
        if self.support.is_empty() {
            return bad("empty support".into());
        }
        let mut seen = vec![false; log.len()];
        for &i in self.support.iter().chain(&self.query) {
            if i >= log.len() {
                return bad(format!("position {i} outside log of {}", log.len()));
            }
            if seen[i] {
                return bad(format!("position {i} used twice"));
            }
            seen[i] = true;
        }
        if log.has_timestamps() {
            let last_support = self
                .support
                .iter()
                .filter_map(|&i| log.instances[i].timestamp)
                .max();
            let first_query = self
                .query
                .iter()
                .filter_map(|&i| log.instances[i].timestamp)
                .min();
            if let (Some(s), Some(q)) = (last_support, first_query) {
                if s > q {
                    return bad(format!("support time {s} after query time {q}"));
                }
            }
        }
        Ok(())
    }
}

/// Builds a task with `support_size` support instances; the rest is query.
///
/// With `time_ordered` the support is the log prefix (the log is
/// time-sorted); otherwise it is a uniform draw without replacement.
pub fn make_task<R: Rng + ?Sized>(
    log: &UserLog,
    support_size: usize,
    time_ordered: bool,
    rng: &mut R,
) -> Result<Task> {
    let n = log.len();
    if support_size == 0 || support_size >= n {
        return Err(Error::InsufficientHistory {
            user: log.user_id.clone(),
            requested: support_size,
            available: n,
        });
    }
    let (support, query) = if time_ordered {
        ((0..support_size).collect(), (support_size..n).collect())
    } else {
        let mut chosen = sample(rng, n, support_size).into_vec();
        chosen.sort_unstable();
        let mut is_support = vec![false; n];
        for &i in &chosen {
            is_support[i] = true;
        }
        let query = (0..n).filter(|&i| !is_support[i]).collect();
        (chosen, query)
    };
    Ok(Task {
        user_id: log.user_id.clone(),
        support,
        query,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn label(self) -> &'static str {
        match self {
            Stage::I => "Cold Start-I",
            Stage::II => "Cold Start-II",
            Stage::III => "Cold Start-III",
        }
    }
}

/// Cold-user threshold and the three evaluation stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdnessConfig {
    pub tau: usize,
    /// Evaluated support sizes, ascending.
    pub sizes: Vec<usize>,
    pub stage_bounds: [RangeInclusive<usize>; 3],
}

impl ColdnessConfig {
    /// Splits `sizes` into three equal consecutive stages.
    pub fn equal_stages(tau: usize, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 3 || !sizes.len().is_multiple_of(3) {
            return Err(Error::Config(format!(
                "{} evaluation sizes cannot be divided into three equal stages",
                sizes.len()
            )));
        }
        let mut sizes = sizes;
        sizes.sort_unstable();
        sizes.dedup();
        let third = sizes.len() / 3;
        let bounds = [
            sizes[0]..=sizes[third - 1],
            sizes[third]..=sizes[2 * third - 1],
            sizes[2 * third]..=sizes[3 * third - 1],
        ];
        let cfg = Self {
            tau,
            sizes,
            stage_bounds: bounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `|S| ∈ {1..τ}` in three equal stages (τ divisible by 3).
    pub fn contiguous(tau: usize) -> Result<Self> {
        Self::equal_stages(tau, (1..=tau).collect())
    }

    /// `|S| ∈ {step, 2·step, …, τ}` in three equal stages.
    pub fn stepped(tau: usize, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::Config("size step must be positive".into()));
        }
        Self::equal_stages(tau, (1..=tau / step).map(|k| k * step).collect())
    }

    pub fn movielens() -> Self {
        Self::contiguous(30).expect("static config")
    }

    pub fn taobao() -> Self {
        Self::stepped(150, 10).expect("static config")
    }

    pub fn validate(&self) -> Result<()> {
        for &s in &self.sizes {
            if s == 0 || s > self.tau {
                return Err(Error::Config(format!("support size {s} outside 1..={}", self.tau)));
            }
            let hits = self.stage_bounds.iter().filter(|r| r.contains(&s)).count();
            if hits != 1 {
                return Err(Error::Config(format!("support size {s} falls in {hits} stages")));
            }
        }
        for w in self.stage_bounds.windows(2) {
            if w[0].end() >= w[1].start() {
                return Err(Error::Config("cold-start stages overlap".into()));
            }
        }
        Ok(())
    }

    pub fn stage_of(&self, size: usize) -> Option<Stage> {
        Stage::ALL
            .into_iter()
            .zip(&self.stage_bounds)
            .find(|(_, r)| r.contains(&size))
            .map(|(s, _)| s)
    }
}
