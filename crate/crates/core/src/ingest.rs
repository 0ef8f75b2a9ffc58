//! Raw dataset parsing, item filtering, user splits, and the binary bundle.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSpace, Instance, UserLog};
use crate::error::{Error, Result};

/// Model fields of MovieLens-1M; the user ID is kept as the task key only.
pub const MOVIELENS_FIELDS: [&str; 6] = ["age", "gender", "occupation", "movie", "genre", "year"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Movielens,
    Tabular,
}

/// One parsed record: user key, one token per model field, binary label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub user: String,
    pub tokens: Vec<String>,
    pub label: u8,
    pub timestamp: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub format: SourceFormat,
    pub field_names: Vec<String>,
    /// Field holding the item identifier, used by the cold-item filter.
    pub item_field: usize,
    pub records: Vec<RawRecord>,
}

impl RawDataset {
    pub fn num_users(&self) -> usize {
        self.records.iter().map(|r| r.user.as_str()).collect::<std::collections::HashSet<_>>().len()
    }

    pub fn num_items(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.tokens[self.item_field].as_str())
            .collect::<std::collections::HashSet<_>>()
            .len()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    // MovieLens-1M ships Latin-1 titles
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s.lines().map(str::to_string).collect(),
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect::<String>().lines().map(str::to_string).collect(),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn split_colons<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != n {
        return Err(parse_err(path, line_no, format!("expected {n} `::`-separated fields, found {}", parts.len())));
    }
    Ok(parts)
}

/// Release year from a title such as `Toy Story (1995)`.
pub fn title_year(title: &str) -> Option<&str> {
    let t = title.trim_end();
    let inner = t.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    let year = &inner[open + 1..];
    (year.len() == 4 && year.bytes().all(|b| b.is_ascii_digit())).then_some(year)
}

/// Reads `ratings.dat`, `users.dat` and `movies.dat` from `dir`; label is 1
/// iff the rating is at least `threshold`.
pub fn parse_movielens(dir: &Path, threshold: f64) -> Result<RawDataset> {
    let users_path = dir.join("users.dat");
    let mut users = HashMap::new();
    for (i, line) in read_lines(&users_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p = split_colons(&users_path, i + 1, line, 5)?;
        users.insert(p[0].to_string(), [p[2].to_string(), p[1].to_string(), p[3].to_string()]);
    }
    let movies_path = dir.join("movies.dat");
    let mut movies = HashMap::new();
    for (i, line) in read_lines(&movies_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p = split_colons(&movies_path, i + 1, line, 3)?;
        let genre = p[2].split('|').next().unwrap_or("").to_string();
        let year = title_year(p[1]).unwrap_or("unknown").to_string();
        movies.insert(p[0].to_string(), [genre, year]);
    }
    let ratings_path = dir.join("ratings.dat");
    let mut records = Vec::new();
    for (i, line) in read_lines(&ratings_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p = split_colons(&ratings_path, i + 1, line, 4)?;
        let rating: f64 = p[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(&ratings_path, i + 1, format!("bad rating `{}`", p[2])))?;
        let ts: i64 = p[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(&ratings_path, i + 1, format!("bad timestamp `{}`", p[3])))?;
        let u = users
            .get(p[0])
            .ok_or_else(|| parse_err(&ratings_path, i + 1, format!("unknown user {}", p[0])))?;
        let m = movies
            .get(p[1])
            .ok_or_else(|| parse_err(&ratings_path, i + 1, format!("unknown movie {}", p[1])))?;
        records.push(RawRecord {
            user: p[0].to_string(),
            tokens: vec![
                u[0].clone(),
                u[1].clone(),
                u[2].clone(),
                p[1].to_string(),
                m[0].clone(),
                m[1].clone(),
            ],
            label: u8::from(rating >= threshold),
            timestamp: Some(ts),
        });
    }
    Ok(RawDataset {
        format: SourceFormat::Movielens,
        field_names: MOVIELENS_FIELDS.iter().map(|s| s.to_string()).collect(),
        item_field: 3,
        records,
    })
}

/// Column roles of a delimited file with a header row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularSchema {
    pub delimiter: char,
    pub user_column: String,
    pub item_column: String,
    pub label_column: String,
    pub timestamp_column: Option<String>,
    /// Model fields; empty means every column except user, label and
    /// timestamp, in file order.
    pub feature_columns: Vec<String>,
}

impl Default for TabularSchema {
    fn default() -> Self {
        Self {
            delimiter: ',',
            user_column: "user".into(),
            item_column: "item".into(),
            label_column: "label".into(),
            timestamp_column: None,
            feature_columns: Vec::new(),
        }
    }
}

/// Parses a pre-labelled delimited file. Positive label values map to 1,
/// everything else to 0.
pub fn parse_tabular(path: &Path, schema: &TabularSchema) -> Result<RawDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header row"))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<String> = header.split(schema.delimiter).map(|c| c.trim().to_string()).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not in header of {}", path.display())))
    };
    let user = find(&schema.user_column)?;
    let label = find(&schema.label_column)?;
    let ts = schema.timestamp_column.as_deref().map(find).transpose()?;
    let features: Vec<usize> = if schema.feature_columns.is_empty() {
        (0..cols.len()).filter(|&c| c != user && c != label && Some(c) != ts).collect()
    } else {
        schema.feature_columns.iter().map(|c| find(c)).collect::<Result<_>>()?
    };
    let item_col = find(&schema.item_column)?;
    let item_field = features
        .iter()
        .position(|&c| c == item_col)
        .ok_or_else(|| Error::Config(format!("item column `{}` is not a feature column", schema.item_column)))?;

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
        if vals.len() != cols.len() {
            return Err(parse_err(path, line_no, format!("expected {} columns, found {}", cols.len(), vals.len())));
        }
        let y: f64 = vals[label]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad label `{}`", vals[label])))?;
        let timestamp = ts
            .map(|c| {
                vals[c]
                    .parse::<i64>()
                    .map_err(|_| parse_err(path, line_no, format!("bad timestamp `{}`", vals[c])))
            })
            .transpose()?;
        records.push(RawRecord {
            user: vals[user].to_string(),
            tokens: features.iter().map(|&c| vals[c].to_string()).collect(),
            label: u8::from(y > 0.0),
            timestamp,
        });
    }
    Ok(RawDataset {
        format: SourceFormat::Tabular,
        field_names: features.iter().map(|&c| cols[c].clone()).collect(),
        item_field,
        records,
    })
}

/// Drops every record whose item occurs fewer than `min_count` times,
/// counted once over the unfiltered data.
pub fn filter_cold_items(raw: RawDataset, min_count: usize) -> RawDataset {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &raw.records {
        *counts.entry(r.tokens[raw.item_field].as_str()).or_default() += 1;
    }
    let keep: Vec<bool> = raw
        .records
        .iter()
        .map(|r| counts[r.tokens[raw.item_field].as_str()] >= min_count)
        .collect();
    let records = raw
        .records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();
    RawDataset { records, ..raw }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Validation),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split tag {t}"))),
        }
    }
}

/// User → split.
pub type SplitAssignment = BTreeMap<String, Split>;

/// Seeded user-disjoint split with largest-remainder rounding of `ratio`.
pub fn split_users(users: &[String], ratio: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if users.len() < 10 {
        return Err(Error::Config(format!("{} users are too few to split (need 10)", users.len())));
    }
    if ratio.iter().any(|&r| r.is_nan() || r <= 0.0 || !r.is_finite()) {
        return Err(Error::Config(format!("split ratio {ratio:?} must be positive")));
    }
    let mut sorted: Vec<&String> = users.iter().collect();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let total: f64 = ratio.iter().sum();
    let exact: Vec<f64> = ratio.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..3).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in rest.iter().cycle().take(n - counts.iter().sum::<usize>()) {
        counts[i] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut out = SplitAssignment::new();
    for (i, u) in sorted.into_iter().enumerate() {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Validation
        } else {
            Split::Test
        };
        out.insert(u.clone(), split);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub users: usize,
    pub instances: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub users_raw: usize,
    pub items_raw: usize,
    pub instances_raw: usize,
    pub users: usize,
    pub items: usize,
    pub instances: usize,
    pub sparsity: f64,
    pub features: usize,
    pub vocab_sizes: Vec<usize>,
    pub train: SplitCounts,
    pub validation: SplitCounts,
    pub test: SplitCounts,
}

/// Preprocessing parameters and resulting counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: SourceFormat,
    pub field_names: Vec<String>,
    pub binarization_threshold: Option<f64>,
    pub min_item_interactions: usize,
    pub split_ratio: [f64; 3],
    pub seed: u64,
    pub counts: Option<DatasetCounts>,
}

/// Encoded logs of the three user splits over a training-only vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: FeatureSpace,
    pub train: Vec<UserLog>,
    pub validation: Vec<UserLog>,
    pub test: Vec<UserLog>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[UserLog] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn split_counts(logs: &[UserLog]) -> SplitCounts {
    SplitCounts {
        users: logs.len(),
        instances: logs.iter().map(UserLog::len).sum(),
        positives: logs.iter().flat_map(|l| l.instances()).filter(|x| x.label == 1).count(),
    }
}

/// Filters cold items, splits users, builds the vocabulary from training
/// users, and encodes every log.
pub fn build_dataset(raw: RawDataset, mut manifest: DatasetManifest) -> Result<Dataset> {
    let (users_raw, items_raw, instances_raw) = (raw.num_users(), raw.num_items(), raw.records.len());
    let raw = filter_cold_items(raw, manifest.min_item_interactions);
    if raw.records.is_empty() {
        return Err(Error::EmptyDataset("no records survive the cold-item filter".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<&RawRecord>> = BTreeMap::new();
    for r in &raw.records {
        by_user.entry(r.user.as_str()).or_default().push(r);
    }
    let users: Vec<String> = by_user.keys().map(|u| u.to_string()).collect();
    let assignment = split_users(&users, manifest.split_ratio, manifest.seed)?;
    let train_rows: Vec<&[String]> = by_user
        .iter()
        .filter(|(u, _)| assignment[**u] == Split::Train)
        .flat_map(|(_, rs)| rs.iter().map(|r| r.tokens.as_slice()))
        .collect();
    let space = FeatureSpace::build(&raw.field_names, train_rows);
    let mut splits: BTreeMap<Split, Vec<UserLog>> = BTreeMap::new();
    for (user, rs) in &by_user {
        let instances = rs
            .iter()
            .map(|r| Ok(Instance::new(space.encode(&r.tokens)?, r.label, r.timestamp)))
            .collect::<Result<Vec<_>>>()?;
        splits
            .entry(assignment[*user])
            .or_default()
            .push(UserLog::new(*user, instances)?);
    }
    let mut take = |s| splits.remove(&s).unwrap_or_default();
    let (train, validation, test) = (take(Split::Train), take(Split::Validation), take(Split::Test));
    let items = raw.num_items();
    let instances = raw.records.len();
    manifest.field_names = raw.field_names.clone();
    manifest.format = raw.format;
    manifest.counts = Some(DatasetCounts {
        users_raw,
        items_raw,
        instances_raw,
        users: users.len(),
        items,
        instances,
        sparsity: 1.0 - instances as f64 / (users.len() as f64 * items as f64),
        features: space.total_features(),
        vocab_sizes: space.vocab_sizes(),
        train: split_counts(&train),
        validation: split_counts(&validation),
        test: split_counts(&test),
    });
    Ok(Dataset {
        space,
        train,
        validation,
        test,
        manifest,
    })
}

const BUNDLE_MAGIC: &[u8; 8] = b"RESUSDS\0";
const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    manifest: DatasetManifest,
    field_names: Vec<String>,
    tokens: Vec<Vec<String>>,
}

/// Writes the dataset bundle and, next to it, `<path>.manifest.json`.
pub fn write_bundle(path: &Path, ds: &Dataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = BundleHeader {
        manifest: ds.manifest.clone(),
        field_names: ds.space.fields().iter().map(|f| f.name.clone()).collect(),
        tokens: (0..ds.space.num_fields()).map(|f| ds.space.tokens(f).to_vec()).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(BUNDLE_MAGIC).map_err(io)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        for log in ds.split(split) {
            w.write_all(&[1, split.tag()]).map_err(io)?;
            w.write_all(&(log.user_id.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(log.user_id.as_bytes()).map_err(io)?;
            w.write_all(&(log.len() as u32).to_le_bytes()).map_err(io)?;
            for x in log.instances() {
                w.write_all(&[x.label, u8::from(x.timestamp.is_some())]).map_err(io)?;
                w.write_all(&x.timestamp.unwrap_or(0).to_le_bytes()).map_err(io)?;
                for &f in &x.fields {
                    w.write_all(&f.to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.write_all(&[0]).map_err(io)?;
    w.flush().map_err(io)?;
    let manifest_path = manifest_path(path);
    let json = serde_json::to_vec_pretty(&ds.manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn manifest_path(bundle: &Path) -> std::path::PathBuf {
    let mut name = bundle.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    bundle.with_file_name(name)
}

pub fn read_bundle(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let mut buf8 = [0u8; 8];
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf8).map_err(|_| fmt("truncated header"))?;
    if &buf8 != BUNDLE_MAGIC {
        return Err(fmt("not a dataset bundle"));
    }
    r.read_exact(&mut buf4).map_err(|_| fmt("truncated header"))?;
    let version = u32::from_le_bytes(buf4);
    if version != BUNDLE_VERSION {
        return Err(fmt(&format!("unsupported bundle version {version}")));
    }
    r.read_exact(&mut buf8).map_err(|_| fmt("truncated header"))?;
    let mut header = vec![0u8; u64::from_le_bytes(buf8) as usize];
    r.read_exact(&mut header).map_err(|_| fmt("truncated header"))?;
    let header: BundleHeader = serde_json::from_slice(&header).map_err(|e| fmt(&e.to_string()))?;
    let space = FeatureSpace::from_tokens(&header.field_names, header.tokens);
    let f = space.num_fields();
    let mut splits: BTreeMap<Split, Vec<UserLog>> = BTreeMap::new();
    loop {
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag[..1]).map_err(|_| fmt("truncated user block"))?;
        if tag[0] == 0 {
            break;
        }
        r.read_exact(&mut tag[1..]).map_err(|_| fmt("truncated user block"))?;
        let split = Split::from_tag(tag[1])?;
        r.read_exact(&mut buf4).map_err(|_| fmt("truncated user block"))?;
        let mut user = vec![0u8; u32::from_le_bytes(buf4) as usize];
        r.read_exact(&mut user).map_err(|_| fmt("truncated user block"))?;
        let user = String::from_utf8(user).map_err(|_| fmt("user id is not UTF-8"))?;
        r.read_exact(&mut buf4).map_err(|_| fmt("truncated user block"))?;
        let n = u32::from_le_bytes(buf4) as usize;
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let mut lt = [0u8; 2];
            r.read_exact(&mut lt).map_err(|_| fmt("truncated instance"))?;
            r.read_exact(&mut buf8).map_err(|_| fmt("truncated instance"))?;
            let ts = (lt[1] == 1).then(|| i64::from_le_bytes(buf8));
            let mut fields = Vec::with_capacity(f);
            for _ in 0..f {
                r.read_exact(&mut buf4).map_err(|_| fmt("truncated instance"))?;
                fields.push(u32::from_le_bytes(buf4));
            }
            let x = Instance::new(fields, lt[0], ts);
            x.check(&space)?;
            instances.push(x);
        }
        splits.entry(split).or_default().push(UserLog::new(user, instances)?);
    }
    let mut take = |s| splits.remove(&s).unwrap_or_default();
    Ok(Dataset {
        space,
        train: take(Split::Train),
        validation: take(Split::Validation),
        test: take(Split::Test),
        manifest: header.manifest,
    })
}
