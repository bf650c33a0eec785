//! Interaction ingestion, filtering, and train/validation/test splits.
//!
//! Input is plain text, one interaction per line, whitespace-separated:
//! `user item [rating] [timestamp]`. Loading applies the rating floor,
//! merges duplicate (user, item) pairs, runs iterative k-core filtering to a
//! fixpoint, and maps external ids to dense indices in sorted-id order so the
//! index space does not depend on file ordering.
//!
//! Splits are reproducible. The IID split shuffles each user's positives
//! with a per-user stream; the temporal split sorts globally by timestamp
//! with (user, item) as the tie break.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dataset is empty after filtering")]
    Empty,
    #[error("temporal split requires timestamps on every interaction; {count} lack one")]
    MissingTimestamps { count: usize },
    #[error("invalid split config: {0}")]
    Config(String),
    #[error("dataset has not been split yet")]
    NotSplit,
    #[error("split artifact line {line}: {reason}")]
    Artifact { line: usize, reason: String },
}

/// One parsed input line.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

impl RawInteraction {
    /// Parse `user item [rating] [timestamp]`.
    pub fn parse(line: &str, line_number: usize) -> Result<Self, DatasetError> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| DatasetError::Parse {
            line: line_number,
            reason,
        };
        if fields.len() < 2 || fields.len() > 4 {
            return Err(err(format!(
                "expected 2 to 4 whitespace-separated fields, got {}",
                fields.len()
            )));
        }
        let rating = match fields.get(2) {
            None => None,
            Some(s) => {
                let r: f64 = s
                    .parse()
                    .map_err(|_| err(format!("bad rating '{s}'")))?;
                if !r.is_finite() {
                    return Err(err(format!("non-finite rating '{s}'")));
                }
                Some(r)
            }
        };
        let timestamp = match fields.get(3) {
            None => None,
            Some(s) => {
                let t: i64 = s
                    .parse()
                    .map_err(|_| err(format!("bad timestamp '{s}'")))?;
                if t < 0 {
                    return Err(err(format!("negative timestamp '{s}'")));
                }
                Some(t)
            }
        };
        Ok(Self {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Iid,
    Temporal,
}

/// Filtering and split parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub train_fraction: f64,
    pub validation_fraction_of_train: f64,
    pub min_rating: Option<f64>,
    pub core: u32,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Iid,
            train_fraction: 0.8,
            validation_fraction_of_train: 0.1,
            min_rating: Some(3.0),
            core: 5,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DatasetError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.validation_fraction_of_train > 0.0 && self.validation_fraction_of_train < 1.0) {
            return Err(DatasetError::Config(format!(
                "validation_fraction_of_train must lie in (0, 1), got {}",
                self.validation_fraction_of_train
            )));
        }
        Ok(())
    }
}

/// Load and split bookkeeping, echoed into the serialized artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub mode: Option<SplitMode>,
    pub seed: u64,
    pub raw_interactions: usize,
    pub dropped_by_rating: usize,
    pub duplicates_merged: usize,
    pub kcore_removed: usize,
    pub dropped_single_positive_users: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Interaction {
    user: u32,
    item: u32,
    timestamp: Option<i64>,
}

/// Immutable interaction store with dense indices and per-user positive
/// lists for each split. Safe to share across threads once built.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    train: Vec<Vec<u32>>,
    validation: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
    /// Post-filter records, kept until a split consumes them.
    interactions: Vec<Interaction>,
    metadata: SplitMetadata,
}

impl InteractionDataset {
    /// Read, filter, and index a raw interaction file. The result holds all
    /// surviving positives in the train lists until a split is applied.
    pub fn load(path: &Path, config: &SplitConfig) -> Result<Self, DatasetError> {
        let file = File::open(path)?;
        Self::load_reader(BufReader::new(file), config)
    }

    pub fn load_reader<R: BufRead>(reader: R, config: &SplitConfig) -> Result<Self, DatasetError> {
        config.validate()?;
        let mut records = Vec::new();
        let mut raw_count = 0usize;
        let mut dropped_by_rating = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            raw_count += 1;
            let rec = RawInteraction::parse(&line, idx + 1)?;
            if let (Some(min), Some(r)) = (config.min_rating, rec.rating) {
                if r < min {
                    dropped_by_rating += 1;
                    continue;
                }
            }
            records.push(rec);
        }

        // Merge duplicate (user, item) pairs, keeping the earliest timestamp.
        let before_dedup = records.len();
        let mut merged: HashMap<(String, String), RawInteraction> = HashMap::new();
        for rec in records {
            let key = (rec.user.clone(), rec.item.clone());
            match merged.get_mut(&key) {
                None => {
                    merged.insert(key, rec);
                }
                Some(kept) => {
                    let new_ts = rec.timestamp.unwrap_or(i64::MAX);
                    let old_ts = kept.timestamp.unwrap_or(i64::MAX);
                    if new_ts < old_ts {
                        *kept = rec;
                    }
                }
            }
        }
        let mut records: Vec<RawInteraction> = merged.into_values().collect();
        let duplicates_merged = before_dedup - records.len();

        // Iterative k-core: drop users and items below the degree floor
        // until nothing changes.
        let before_kcore = records.len();
        if config.core > 0 {
            loop {
                let mut user_deg: HashMap<String, u32> = HashMap::new();
                let mut item_deg: HashMap<String, u32> = HashMap::new();
                for r in &records {
                    *user_deg.entry(r.user.clone()).or_default() += 1;
                    *item_deg.entry(r.item.clone()).or_default() += 1;
                }
                let before = records.len();
                records.retain(|r| {
                    user_deg[&r.user] >= config.core && item_deg[&r.item] >= config.core
                });
                if records.len() == before {
                    break;
                }
            }
        }
        let kcore_removed = before_kcore - records.len();

        if records.is_empty() {
            return Err(DatasetError::Empty);
        }

        // Dense indices in sorted external-id order.
        let mut user_ids: Vec<String> = records.iter().map(|r| r.user.clone()).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<String> = records.iter().map(|r| r.item.clone()).collect();
        item_ids.sort_unstable();
        item_ids.dedup();
        let user_index: HashMap<&str, u32> = user_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let item_index: HashMap<&str, u32> = item_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();

        let mut interactions: Vec<Interaction> = records
            .iter()
            .map(|r| Interaction {
                user: user_index[r.user.as_str()],
                item: item_index[r.item.as_str()],
                timestamp: r.timestamp,
            })
            .collect();
        interactions.sort_unstable_by_key(|r| (r.user, r.item));

        let mut train = vec![Vec::new(); user_ids.len()];
        for r in &interactions {
            train[r.user as usize].push(r.item);
        }

        Ok(Self {
            user_ids,
            item_ids,
            validation: vec![Vec::new(); train.len()],
            test: vec![Vec::new(); train.len()],
            train,
            interactions,
            metadata: SplitMetadata {
                mode: None,
                seed: config.seed,
                raw_interactions: raw_count,
                dropped_by_rating,
                duplicates_merged,
                kcore_removed,
                dropped_single_positive_users: 0,
            },
        })
    }

    /// Build a dataset directly from dense per-user train lists. Fixture
    /// constructor for tests and synthetic instances.
    pub fn from_dense_lists(
        num_items: usize,
        train: Vec<Vec<u32>>,
        validation: Vec<Vec<u32>>,
        test: Vec<Vec<u32>>,
        mode: SplitMode,
    ) -> Self {
        let num_users = train.len();
        assert_eq!(validation.len(), num_users);
        assert_eq!(test.len(), num_users);
        let sort = |mut lists: Vec<Vec<u32>>| {
            for l in &mut lists {
                l.sort_unstable();
                l.dedup();
            }
            lists
        };
        Self {
            user_ids: (0..num_users).map(|u| format!("u{u}")).collect(),
            item_ids: (0..num_items).map(|i| format!("i{i}")).collect(),
            train: sort(train),
            validation: sort(validation),
            test: sort(test),
            interactions: Vec::new(),
            metadata: SplitMetadata {
                mode: Some(mode),
                ..SplitMetadata::default()
            },
        }
    }

    /// Per-user IID split: shuffled positives go 80/20 into a train pool and
    /// test, then the pool splits 90/10 into train and validation. Counts
    /// floor toward the held-out side, the remainder stays in train. Users
    /// with fewer than two positives are dropped and counted.
    pub fn split_iid(mut self, config: &SplitConfig) -> Result<Self, DatasetError> {
        config.validate()?;
        for user in 0..self.user_ids.len() {
            let positives = std::mem::take(&mut self.train[user]);
            if positives.len() < 2 {
                if !positives.is_empty() {
                    self.metadata.dropped_single_positive_users += 1;
                }
                continue;
            }
            let mut shuffled = positives;
            let mut r = rng::stream(config.seed, &[rng::label::SPLIT_USER, user as u64]);
            shuffled.shuffle(&mut r);

            let n = shuffled.len();
            let n_test = floor_count(n as f64 * (1.0 - config.train_fraction));
            let pool = n - n_test;
            let n_val = floor_count(pool as f64 * config.validation_fraction_of_train);
            let n_train = pool - n_val;

            let mut train: Vec<u32> = shuffled[..n_train].to_vec();
            let mut val: Vec<u32> = shuffled[n_train..pool].to_vec();
            let mut test: Vec<u32> = shuffled[pool..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            self.train[user] = train;
            self.validation[user] = val;
            self.test[user] = test;
        }
        self.interactions = Vec::new();
        self.metadata.mode = Some(SplitMode::Iid);
        self.metadata.seed = config.seed;
        Ok(self)
    }

    /// Global temporal split: the earliest 80% of interactions form the
    /// train pool and the latest 20% the test set; a seeded random 10% of
    /// the pool becomes validation. Timestamp ties break by (user, item).
    pub fn split_temporal(mut self, config: &SplitConfig) -> Result<Self, DatasetError> {
        config.validate()?;
        let missing = self
            .interactions
            .iter()
            .filter(|r| r.timestamp.is_none())
            .count();
        if missing > 0 {
            return Err(DatasetError::MissingTimestamps { count: missing });
        }
        let mut records = std::mem::take(&mut self.interactions);
        records.sort_unstable_by_key(|r| (r.timestamp.unwrap(), r.user, r.item));

        let n = records.len();
        let n_test = floor_count(n as f64 * (1.0 - config.train_fraction));
        let pool_len = n - n_test;

        let mut pool_slots: Vec<usize> = (0..pool_len).collect();
        let mut r = rng::stream(config.seed, &[rng::label::SPLIT_TEMPORAL]);
        pool_slots.shuffle(&mut r);
        let n_val = floor_count(pool_len as f64 * config.validation_fraction_of_train);
        let mut is_val = vec![false; pool_len];
        for &slot in &pool_slots[..n_val] {
            is_val[slot] = true;
        }

        let num_users = self.user_ids.len();
        self.train = vec![Vec::new(); num_users];
        self.validation = vec![Vec::new(); num_users];
        self.test = vec![Vec::new(); num_users];
        for (idx, rec) in records.iter().enumerate() {
            let bucket = if idx >= pool_len {
                &mut self.test
            } else if is_val[idx] {
                &mut self.validation
            } else {
                &mut self.train
            };
            bucket[rec.user as usize].push(rec.item);
        }
        for lists in [&mut self.train, &mut self.validation, &mut self.test] {
            for l in lists.iter_mut() {
                l.sort_unstable();
            }
        }
        self.metadata.mode = Some(SplitMode::Temporal);
        self.metadata.seed = config.seed;
        Ok(self)
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, u: u32) -> &str {
        &self.user_ids[u as usize]
    }

    pub fn item_id(&self, i: u32) -> &str {
        &self.item_ids[i as usize]
    }

    pub fn train_positives(&self, u: u32) -> &[u32] {
        &self.train[u as usize]
    }

    pub fn validation_positives(&self, u: u32) -> &[u32] {
        &self.validation[u as usize]
    }

    pub fn test_positives(&self, u: u32) -> &[u32] {
        &self.test[u as usize]
    }

    pub fn is_train_positive(&self, u: u32, i: u32) -> bool {
        self.train[u as usize].binary_search(&i).is_ok()
    }

    pub fn mode(&self) -> Option<SplitMode> {
        self.metadata.mode
    }

    pub fn metadata(&self) -> &SplitMetadata {
        &self.metadata
    }

    pub fn is_split(&self) -> bool {
        self.metadata.mode.is_some()
    }

    /// (train, validation, test) interaction counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let sum = |lists: &InnerLists| lists.iter().map(Vec::len).sum();
        (sum(&self.train), sum(&self.validation), sum(&self.test))
    }

    /// Serialize a split dataset to the versioned line format.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        if !self.is_split() {
            return Err(DatasetError::NotSplit);
        }
        writeln!(w, "{ARTIFACT_HEADER}")?;
        let meta = serde_json::to_string(&self.metadata).expect("metadata serializes");
        writeln!(w, "meta {meta}")?;
        writeln!(w, "users {}", self.user_ids.len())?;
        writeln!(w, "items {}", self.item_ids.len())?;
        for id in &self.user_ids {
            writeln!(w, "u {id}")?;
        }
        for id in &self.item_ids {
            writeln!(w, "i {id}")?;
        }
        for (tag, lists) in [("t", &self.train), ("v", &self.validation), ("e", &self.test)] {
            for (user, items) in lists.iter().enumerate() {
                if items.is_empty() {
                    continue;
                }
                write!(w, "{tag} {user}")?;
                for item in items {
                    write!(w, " {item}")?;
                }
                writeln!(w)?;
            }
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn load_split(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, DatasetError> {
        let mut lines = reader.lines().enumerate();
        let artifact_err = |line: usize, reason: &str| DatasetError::Artifact {
            line: line + 1,
            reason: reason.to_string(),
        };

        let mut next = || -> Result<(usize, String), DatasetError> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(DatasetError::Io(e)),
                None => Err(DatasetError::Artifact {
                    line: 0,
                    reason: "unexpected end of file".into(),
                }),
            }
        };

        let (n, header) = next()?;
        if header != ARTIFACT_HEADER {
            return Err(artifact_err(n, "missing version header"));
        }
        let (n, meta_line) = next()?;
        let metadata: SplitMetadata = meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| artifact_err(n, "expected meta line"))
            .and_then(|json| {
                serde_json::from_str(json).map_err(|e| artifact_err(n, &format!("bad meta: {e}")))
            })?;
        let parse_count = |line: &str, tag: &str, n: usize| -> Result<usize, DatasetError> {
            line.strip_prefix(tag)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| artifact_err(n, &format!("expected '{tag}<count>'")))
        };
        let (n, line) = next()?;
        let num_users = parse_count(&line, "users ", n)?;
        let (n, line) = next()?;
        let num_items = parse_count(&line, "items ", n)?;

        let mut user_ids = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let (n, line) = next()?;
            user_ids.push(
                line.strip_prefix("u ")
                    .ok_or_else(|| artifact_err(n, "expected user id line"))?
                    .to_string(),
            );
        }
        let mut item_ids = Vec::with_capacity(num_items);
        for _ in 0..num_items {
            let (n, line) = next()?;
            item_ids.push(
                line.strip_prefix("i ")
                    .ok_or_else(|| artifact_err(n, "expected item id line"))?
                    .to_string(),
            );
        }

        let mut train = vec![Vec::new(); num_users];
        let mut validation = vec![Vec::new(); num_users];
        let mut test = vec![Vec::new(); num_users];
        loop {
            let (n, line) = next()?;
            if line == "end" {
                break;
            }
            let mut fields = line.split_whitespace();
            let tag = fields.next().ok_or_else(|| artifact_err(n, "empty line"))?;
            let lists = match tag {
                "t" => &mut train,
                "v" => &mut validation,
                "e" => &mut test,
                other => return Err(artifact_err(n, &format!("unknown tag '{other}'"))),
            };
            let user: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .filter(|&u| u < num_users)
                .ok_or_else(|| artifact_err(n, "bad user index"))?;
            for f in fields {
                let item: u32 = f
                    .parse()
                    .ok()
                    .filter(|&i| (i as usize) < num_items)
                    .ok_or_else(|| artifact_err(n, "bad item index"))?;
                lists[user].push(item);
            }
        }

        Ok(Self {
            user_ids,
            item_ids,
            train,
            validation,
            test,
            interactions: Vec::new(),
            metadata,
        })
    }
}

type InnerLists = Vec<Vec<u32>>;

const ARTIFACT_HEADER: &str = "talos.split.v1";

/// Floor with a tolerance for representation error, so that a nominal
/// `10 * 0.2` counts as 2 and not 1.
fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}
