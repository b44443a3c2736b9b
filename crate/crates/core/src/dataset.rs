//! Interaction ingestion, the feedback partition rule, and train/test splits.
//!
//! Raw logs are `(user, item, feedback[, timestamp])` lines. After
//! deduplication every (user, item) pair is assigned to exactly one of the
//! fascinated (I&F) or unfascinated (I&U) edge sets by a [`PartitionRule`],
//! and each set is split per user into train and test edges.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense `(user, item)` edge.
pub type Edge = (u32, u32);

/// One raw log record.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub feedback: f64,
    pub timestamp: Option<i64>,
}

/// Field separator of an interaction file.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Tab,
    Comma,
    /// Any run of ASCII whitespace.
    Whitespace,
    /// Arbitrary literal separator such as `::`.
    Literal(String),
}

impl Delimiter {
    fn split<'a>(&'a self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Literal(sep) => line.split(sep.as_str()).map(str::trim).collect(),
        }
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tab" | "\t" | "\\t" => Delimiter::Tab,
            "comma" | "," => Delimiter::Comma,
            "whitespace" | "space" | " " => Delimiter::Whitespace,
            "" => return Err(Error::InvalidArgument("empty delimiter".into())),
            other => Delimiter::Literal(other.to_string()),
        })
    }
}

/// Reads an interaction file. `#` lines and blank lines are skipped.
pub fn load_interactions(path: &Path, delimiter: &Delimiter) -> Result<Vec<Interaction>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_interactions(BufReader::new(file), delimiter)
}

pub fn parse_interactions<R: BufRead>(reader: R, delimiter: &Delimiter) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = delimiter.split(trimmed);
        if fields.len() < 3 {
            return Err(Error::Malformed {
                line: lineno,
                message: format!("expected at least 3 fields, found {}", fields.len()),
            });
        }
        let feedback = fields[2]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::BadFeedback {
                line: lineno,
                value: fields[2].to_string(),
            })?;
        let timestamp = match fields.get(3) {
            Some(raw) if !raw.is_empty() => Some(raw.parse::<i64>().map_err(|_| Error::Malformed {
                line: lineno,
                message: format!("unparseable timestamp {raw:?}"),
            })?),
            _ => None,
        };
        out.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            feedback,
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::NoInteractions);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    RatingThreshold,
    CompletionThreshold,
    DwellThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Geq,
    Gt,
}

/// Total rule mapping a feedback value to I&F (`true`) or I&U (`false`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRule {
    pub kind: FeedbackKind,
    pub threshold: f64,
    pub fascinated_if: Comparison,
}

impl PartitionRule {
    /// Ratings at or above `threshold` are fascinated.
    pub fn rating(threshold: f64) -> Self {
        Self { kind: FeedbackKind::RatingThreshold, threshold, fascinated_if: Comparison::Geq }
    }

    /// Completion rates strictly above `threshold` are fascinated.
    pub fn completion(threshold: f64) -> Self {
        Self { kind: FeedbackKind::CompletionThreshold, threshold, fascinated_if: Comparison::Gt }
    }

    /// Dwell times strictly above `threshold` seconds are fascinated.
    pub fn dwell(threshold: f64) -> Self {
        Self { kind: FeedbackKind::DwellThreshold, threshold, fascinated_if: Comparison::Gt }
    }

    pub fn is_fascinated(&self, feedback: f64) -> bool {
        match self.fascinated_if {
            Comparison::Geq => feedback >= self.threshold,
            Comparison::Gt => feedback > self.threshold,
        }
    }
}

impl fmt::Display for PartitionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FeedbackKind::RatingThreshold => "rating_threshold",
            FeedbackKind::CompletionThreshold => "completion_threshold",
            FeedbackKind::DwellThreshold => "dwell_threshold",
        };
        let op = match self.fascinated_if {
            Comparison::Geq => ">=",
            Comparison::Gt => ">",
        };
        write!(f, "{kind}{op}{}", self.threshold)
    }
}

/// Bijection between external identifiers and dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<String>,
    dense: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, id: &str) -> u32 {
        if let Some(&idx) = self.dense.get(id) {
            return idx;
        }
        let idx = self.external.len() as u32;
        self.external.push(id.to_string());
        self.dense.insert(id.to_string(), idx);
        idx
    }

    pub fn dense(&self, id: &str) -> Option<u32> {
        self.dense.get(id).copied()
    }

    pub fn external(&self, idx: u32) -> Option<&str> {
        self.external.get(idx as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.external.iter().map(String::as_str)
    }

    /// Keeps only indices with `keep[idx]`, preserving order. Returns the new
    /// map and the old→new index table.
    fn retain(&self, keep: &[bool]) -> (IdMap, Vec<Option<u32>>) {
        let mut map = IdMap::new();
        let remap = self
            .external
            .iter()
            .zip(keep)
            .map(|(id, &k)| k.then(|| map.get_or_insert(id)))
            .collect();
        (map, remap)
    }
}

impl FromIterator<String> for IdMap {
    fn from_iter<T: IntoIterator<Item = String>>(iter: T) -> Self {
        let mut map = IdMap::new();
        for id in iter {
            map.get_or_insert(&id);
        }
        map
    }
}

/// Deduplicated interactions split into the two feedback classes.
#[derive(Clone, Debug)]
pub struct PartitionedInteractions {
    pub users: IdMap,
    pub items: IdMap,
    pub if_edges: Vec<Edge>,
    pub iu_edges: Vec<Edge>,
    pub rule: PartitionRule,
    pub raw_count: usize,
}

impl PartitionedInteractions {
    pub fn dedup_count(&self) -> usize {
        self.if_edges.len() + self.iu_edges.len()
    }
}

/// Deduplicates `(user, item)` pairs (latest timestamp wins, otherwise the
/// last occurrence) and routes each surviving pair through `rule`.
///
/// Dense ids follow first appearance in the input; edge lists are sorted.
pub fn partition_by_feedback(interactions: &[Interaction], rule: &PartitionRule) -> PartitionedInteractions {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut latest: HashMap<Edge, (Option<i64>, f64)> = HashMap::with_capacity(interactions.len());
    for rec in interactions {
        let key = (users.get_or_insert(&rec.user), items.get_or_insert(&rec.item));
        latest
            .entry(key)
            .and_modify(|slot| {
                let replace = match (slot.0, rec.timestamp) {
                    (Some(old), Some(new)) => new >= old,
                    _ => true,
                };
                if replace {
                    *slot = (rec.timestamp, rec.feedback);
                }
            })
            .or_insert((rec.timestamp, rec.feedback));
    }
    let mut if_edges = Vec::new();
    let mut iu_edges = Vec::new();
    for (edge, (_, feedback)) in latest {
        if rule.is_fascinated(feedback) {
            if_edges.push(edge);
        } else {
            iu_edges.push(edge);
        }
    }
    if_edges.sort_unstable();
    iu_edges.sort_unstable();
    PartitionedInteractions {
        users,
        items,
        if_edges,
        iu_edges,
        rule: *rule,
        raw_count: interactions.len(),
    }
}

/// Per-user random holdout. For a user with `n` edges, `round(n * fraction)`
/// edges are held out, capped so at least one edge is kept.
///
/// Returns `(kept, held)`, both sorted.
pub fn holdout_per_user(edges: &[Edge], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<Edge>, Vec<Edge>) {
    let mut by_user: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(u, i) in edges {
        by_user.entry(u).or_default().push(i);
    }
    let mut kept = Vec::with_capacity(edges.len());
    let mut held = Vec::new();
    for (u, mut items) in by_user {
        items.sort_unstable();
        items.shuffle(rng);
        let n = items.len();
        let n_held = ((n as f64 * fraction).round() as usize).min(n - 1);
        held.extend(items[..n_held].iter().map(|&i| (u, i)));
        kept.extend(items[n_held..].iter().map(|&i| (u, i)));
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

/// Dense, split dataset consumed by training and evaluation.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub users: IdMap,
    pub items: IdMap,
    pub train_if: Vec<Edge>,
    pub train_iu: Vec<Edge>,
    pub test_if: Vec<Edge>,
    pub test_iu: Vec<Edge>,
    pub provenance: SplitProvenance,
}

/// How a dataset was produced; recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub rule: String,
    pub ratio: f64,
    pub seed: u64,
    pub raw_interactions: usize,
    pub deduplicated_interactions: usize,
}

const IF_STREAM: u64 = 0x4946_5f53_504c_4954;
const IU_STREAM: u64 = 0x4955_5f53_504c_4954;

/// Per-user stratified split applied independently to each feedback class.
///
/// Users or items left without any train edge are dropped together with
/// their test edges.
pub fn split_train_test(parts: &PartitionedInteractions, ratio: f64, seed: u64) -> Result<InteractionDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    if parts.if_edges.is_empty() {
        return Err(Error::InvalidArgument("no fascinated interactions to split".into()));
    }
    let test_fraction = 1.0 - ratio;
    let (train_if, test_if) =
        holdout_per_user(&parts.if_edges, test_fraction, &mut ChaCha8Rng::seed_from_u64(seed ^ IF_STREAM));
    let (train_iu, test_iu) =
        holdout_per_user(&parts.iu_edges, test_fraction, &mut ChaCha8Rng::seed_from_u64(seed ^ IU_STREAM));

    let mut user_seen = vec![false; parts.users.len()];
    let mut item_seen = vec![false; parts.items.len()];
    for &(u, i) in train_if.iter().chain(&train_iu) {
        user_seen[u as usize] = true;
        item_seen[i as usize] = true;
    }
    let (users, user_remap) = parts.users.retain(&user_seen);
    let (items, item_remap) = parts.items.retain(&item_seen);
    let remap = |edges: Vec<Edge>, what: &str| -> Vec<Edge> {
        let before = edges.len();
        let out: Vec<Edge> = edges
            .into_iter()
            .filter_map(|(u, i)| Some((user_remap[u as usize]?, item_remap[i as usize]?)))
            .collect();
        if out.len() < before {
            log::warn!("dropped {} {what} edges whose user or item has no training signal", before - out.len());
        }
        out
    };
    let train_if = remap(train_if, "train I&F");
    let train_iu = remap(train_iu, "train I&U");
    let test_if = remap(test_if, "test I&F");
    let test_iu = remap(test_iu, "test I&U");

    Ok(InteractionDataset {
        num_users: users.len(),
        num_items: items.len(),
        users,
        items,
        train_if,
        train_iu,
        test_if,
        test_iu,
        provenance: SplitProvenance {
            rule: parts.rule.to_string(),
            ratio,
            seed,
            raw_interactions: parts.raw_count,
            deduplicated_interactions: parts.dedup_count(),
        },
    })
}

/// Reproducibility record written next to a partitioned dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_users: usize,
    pub num_items: usize,
    pub train_if: usize,
    pub train_iu: usize,
    pub test_if: usize,
    pub test_iu: usize,
    pub provenance: SplitProvenance,
    pub hash: String,
}

const EDGE_FILES: [&str; 4] = ["train_if.tsv", "train_iu.tsv", "test_if.tsv", "test_iu.tsv"];

impl InteractionDataset {
    /// SHA-256 over the id maps and all four edge lists.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_users as u64).to_le_bytes());
        h.update((self.num_items as u64).to_le_bytes());
        for map in [&self.users, &self.items] {
            for id in map.iter() {
                h.update((id.len() as u64).to_le_bytes());
                h.update(id.as_bytes());
            }
        }
        for edges in [&self.train_if, &self.train_iu, &self.test_if, &self.test_iu] {
            h.update((edges.len() as u64).to_le_bytes());
            for &(u, i) in edges.iter() {
                h.update(u.to_le_bytes());
                h.update(i.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            num_users: self.num_users,
            num_items: self.num_items,
            train_if: self.train_if.len(),
            train_iu: self.train_iu.len(),
            test_if: self.test_if.len(),
            test_iu: self.test_iu.len(),
            provenance: self.provenance.clone(),
            hash: self.content_hash(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Writes id maps, the four edge lists (external ids) and `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        for (name, map) in [("users.txt", &self.users), ("items.txt", &self.items)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            for id in map.iter() {
                writeln!(w, "{id}")?;
            }
            w.flush()?;
        }
        let lists = [&self.train_if, &self.train_iu, &self.test_if, &self.test_iu];
        for (name, edges) in EDGE_FILES.iter().zip(lists) {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            for &(u, i) in edges.iter() {
                writeln!(w, "{}\t{}", self.users.external(u).unwrap(), self.items.external(i).unwrap())?;
            }
            w.flush()?;
        }
        let manifest = self.manifest();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Inverse of [`write_dir`](Self::write_dir). Fails when the recomputed
    /// hash disagrees with the manifest.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path),
                _ => Error::Io(e),
            })
        };
        let manifest: DatasetManifest = serde_json::from_str(&read("manifest.json")?)?;
        let users: IdMap = read("users.txt")?.lines().map(str::to_string).collect();
        let items: IdMap = read("items.txt")?.lines().map(str::to_string).collect();
        let mut lists: Vec<Vec<Edge>> = Vec::with_capacity(4);
        for name in EDGE_FILES {
            let mut edges = Vec::new();
            for (idx, line) in read(name)?.lines().enumerate() {
                let mut parts = line.split('\t');
                let (Some(u), Some(i)) = (parts.next(), parts.next()) else {
                    return Err(Error::Malformed { line: idx + 1, message: format!("{name}: expected user<TAB>item") });
                };
                let u = users.dense(u).ok_or_else(|| Error::OutOfRange(format!("{name}: unknown user {u:?}")))?;
                let i = items.dense(i).ok_or_else(|| Error::OutOfRange(format!("{name}: unknown item {i:?}")))?;
                edges.push((u, i));
            }
            lists.push(edges);
        }
        let mut lists = lists.into_iter();
        let ds = InteractionDataset {
            num_users: users.len(),
            num_items: items.len(),
            users,
            items,
            train_if: lists.next().unwrap(),
            train_iu: lists.next().unwrap(),
            test_if: lists.next().unwrap(),
            test_iu: lists.next().unwrap(),
            provenance: manifest.provenance.clone(),
        };
        let found = ds.content_hash();
        if found != manifest.hash {
            return Err(Error::HashMismatch { expected: manifest.hash, found });
        }
        Ok(ds)
    }
}

/// Sorted item lists per user, CSR style.
#[derive(Clone, Debug)]
pub struct UserItems {
    offsets: Vec<usize>,
    items: Vec<u32>,
}

impl UserItems {
    pub fn from_edges<'a, I>(num_users: usize, edges: I) -> Self
    where
        I: IntoIterator<Item = &'a Edge>,
    {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); num_users];
        for &(u, i) in edges {
            lists[u as usize].push(i);
        }
        let mut offsets = Vec::with_capacity(num_users + 1);
        let mut items = Vec::new();
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            items.extend(l);
            offsets.push(items.len());
        }
        Self { offsets, items }
    }

    pub fn num_users(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn items_of(&self, user: usize) -> &[u32] {
        &self.items[self.offsets[user]..self.offsets[user + 1]]
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.items_of(user).binary_search(&item).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Vec<Interaction>> {
        parse_interactions(Cursor::new(text), &Delimiter::Whitespace)
    }

    #[test]
    fn three_line_file() {
        let recs = parse("u1 i1 5\nu1 i2 3\nu2 i1 4\n").unwrap();
        assert_eq!(recs.len(), 3);
        let parts = partition_by_feedback(&recs, &PartitionRule::rating(4.0));
        assert_eq!(parts.users.len(), 2);
        assert_eq!(parts.items.len(), 2);
    }

    #[test]
    fn empty_and_comment_only_inputs() {
        assert!(matches!(parse(""), Err(Error::NoInteractions)));
        assert!(matches!(parse("# header\n\n"), Err(Error::NoInteractions)));
    }

    #[test]
    fn error_kinds_carry_line_numbers() {
        match parse("u1 i1 5\nu2 i2 oops\n") {
            Err(Error::BadFeedback { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse("# c\nu1 i1\n") {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("u1 i1 NaN\n"), Err(Error::BadFeedback { .. })));
        let missing = load_interactions(Path::new("/definitely/not/here.tsv"), &Delimiter::Tab);
        assert!(matches!(missing, Err(Error::MissingFile(_))));
    }

    #[test]
    fn delimiters() {
        let recs = parse_interactions(Cursor::new("1::10::4::978300760\n"), &"::".parse().unwrap()).unwrap();
        assert_eq!(recs[0].timestamp, Some(978300760));
        let recs = parse_interactions(Cursor::new("a,b,0.5\n"), &Delimiter::Comma).unwrap();
        assert_eq!(recs[0].feedback, 0.5);
        let recs = parse_interactions(Cursor::new("a\tb\t2\t\n"), &Delimiter::Tab).unwrap();
        assert_eq!(recs[0].timestamp, None);
    }

    #[test]
    fn partition_thresholds() {
        let rating = PartitionRule::rating(4.0);
        assert!(rating.is_fascinated(5.0));
        assert!(rating.is_fascinated(4.0));
        assert!(!rating.is_fascinated(3.0));
        let completion = PartitionRule::completion(0.5);
        assert!(!completion.is_fascinated(0.5));
        assert!(completion.is_fascinated(0.51));
        assert_eq!(rating.to_string(), "rating_threshold>=4");
    }

    #[test]
    fn duplicates_keep_latest_timestamp_or_last_occurrence() {
        let recs = parse("u i 5 20\nu i 1 10\nv j 1\nv j 5\n").unwrap();
        let parts = partition_by_feedback(&recs, &PartitionRule::rating(4.0));
        assert_eq!(parts.dedup_count(), 2);
        // (u,i): timestamp 20 wins with rating 5; (v,j): last occurrence rating 5.
        assert_eq!(parts.if_edges.len(), 2);
        assert!(parts.iu_edges.is_empty());
    }

    fn one_user(n: u32) -> PartitionedInteractions {
        let recs: Vec<Interaction> = (0..n)
            .map(|i| Interaction { user: "u".into(), item: format!("i{i}"), feedback: 5.0, timestamp: None })
            .collect();
        partition_by_feedback(&recs, &PartitionRule::rating(4.0))
    }

    #[test]
    fn ten_edges_split_eight_two() {
        let edges: Vec<Edge> = (0..10).map(|i| (0, i)).collect();
        let (train, test) = holdout_per_user(&edges, 1.0 - 0.8, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn single_edge_stays_in_train() {
        let ds = split_train_test(&one_user(1), 0.8, 7).unwrap();
        assert_eq!(ds.train_if.len(), 1);
        assert!(ds.test_if.is_empty());
    }

    #[test]
    fn split_rejects_bad_ratio() {
        assert!(split_train_test(&one_user(3), 1.0, 0).is_err());
        assert!(split_train_test(&one_user(3), 0.0, 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let recs: Vec<Interaction> = (0..200)
            .map(|k| Interaction {
                user: format!("u{}", k % 7),
                item: format!("i{}", (k * 13) % 41),
                feedback: (k % 5 + 1) as f64,
                timestamp: None,
            })
            .collect();
        let parts = partition_by_feedback(&recs, &PartitionRule::rating(4.0));
        let a = split_train_test(&parts, 0.8, 11).unwrap();
        let b = split_train_test(&parts, 0.8, 11).unwrap();
        assert_eq!(a.train_if, b.train_if);
        assert_eq!(a.test_iu, b.test_iu);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn items_only_in_test_are_dropped() {
        // Each of u's items appears once; the held-out item has no other edge.
        let ds = split_train_test(&one_user(10), 0.8, 3).unwrap();
        assert_eq!(ds.num_items, 8);
        assert!(ds.test_if.is_empty());
        let train_items: HashSet<u32> = ds.train_if.iter().map(|e| e.1).collect();
        assert_eq!(train_items.len(), 8);
    }

    #[test]
    fn dataset_dir_round_trip() {
        let recs = parse("a x 5\na y 2\nb x 4\nb z 1\nc y 5\nc z 5\na z 4\n").unwrap();
        let parts = partition_by_feedback(&recs, &PartitionRule::rating(4.0));
        let ds = split_train_test(&parts, 0.8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.write_dir(dir.path()).unwrap();
        let back = InteractionDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.content_hash(), manifest.hash);
        assert_eq!(back.train_if, ds.train_if);

        std::fs::write(dir.path().join("train_iu.tsv"), "a\tx\n").unwrap();
        assert!(matches!(InteractionDataset::read_dir(dir.path()), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn user_items_lookup() {
        let ui = UserItems::from_edges(3, &[(0, 4), (0, 1), (2, 3), (0, 1)]);
        assert_eq!(ui.items_of(0), &[1, 4]);
        assert!(ui.items_of(1).is_empty());
        assert!(ui.contains(2, 3));
        assert!(!ui.contains(2, 4));
    }
}
