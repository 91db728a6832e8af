//! Rating ingestion and preprocessing.
//!
//! Raw files hold one `<user> <item> <score>` observation per line. IDs are
//! arbitrary strings and get re-indexed densely in order of first
//! appearance; the [`IdMap`] keeps the mapping so splits can be written back
//! out with their original IDs and read again into the same index space.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Kind of feedback a dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    /// Graded relevance levels (e.g. 1–5 stars) on a subset of pairs.
    Explicit,
    /// Binary engagement; every stored entry is a 1, absence means 0.
    Implicit,
}

impl fmt::Display for Feedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feedback::Explicit => f.write_str("explicit"),
            Feedback::Implicit => f.write_str("implicit"),
        }
    }
}

/// One observed `(user, item, score)` triple in dense index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub score: u32,
}

/// Sparse observed ratings with `n` users and `m` items.
///
/// Entries are kept sorted by `(user, item)` with a row index, so a user's
/// observations are a contiguous slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingsDataset {
    n: usize,
    m: usize,
    mode: Feedback,
    entries: Vec<Rating>,
    row_ptr: Vec<usize>,
}

impl RatingsDataset {
    /// Builds a dataset, checking bounds, uniqueness of `(user, item)` and
    /// (for implicit data) that every score is 1.
    pub fn new(n: usize, m: usize, mode: Feedback, mut entries: Vec<Rating>) -> Result<Self> {
        entries.sort_unstable();
        for w in entries.windows(2) {
            if w[0].user == w[1].user && w[0].item == w[1].item {
                return Err(Error::invalid(format!(
                    "duplicate observation (user {}, item {})",
                    w[0].user, w[0].item
                )));
            }
        }
        for e in &entries {
            if e.user >= n || e.item >= m {
                return Err(Error::invalid(format!(
                    "entry (user {}, item {}) outside {n}x{m}",
                    e.user, e.item
                )));
            }
            if mode == Feedback::Implicit && e.score != 1 {
                return Err(Error::invalid(format!(
                    "implicit entry (user {}, item {}) has score {}",
                    e.user, e.item, e.score
                )));
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for e in &entries {
            row_ptr[e.user + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n,
            m,
            mode,
            entries,
            row_ptr,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> Feedback {
        self.mode
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Observations of `user`, sorted by item.
    pub fn user_entries(&self, user: usize) -> &[Rating] {
        &self.entries[self.row_ptr[user]..self.row_ptr[user + 1]]
    }

    /// Number of users with at least one observation.
    pub fn active_users(&self) -> usize {
        (0..self.n)
            .filter(|&i| self.row_ptr[i + 1] > self.row_ptr[i])
            .count()
    }

    /// Score of `(user, item)` if observed.
    pub fn score(&self, user: usize, item: usize) -> Option<u32> {
        let row = self.user_entries(user);
        row.binary_search_by_key(&item, |e| e.item)
            .ok()
            .map(|p| row[p].score)
    }
}

/// Field separator for rating files.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Delimiter {
    /// Comma if the first data line has one, else tab, else whitespace.
    #[default]
    Auto,
    Comma,
    Tab,
    Whitespace,
    /// Any other literal separator, e.g. `::` for MovieLens `ratings.dat`.
    Literal(String),
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => Delimiter::Auto,
            "comma" | "," => Delimiter::Comma,
            "tab" | "\t" | "\\t" => Delimiter::Tab,
            "whitespace" | "space" | " " => Delimiter::Whitespace,
            "" => return Err(Error::invalid("empty delimiter")),
            other => Delimiter::Literal(other.to_string()),
        })
    }
}

impl Delimiter {
    fn resolve(&self, sample: &str) -> Delimiter {
        match self {
            Delimiter::Auto if sample.contains(',') => Delimiter::Comma,
            Delimiter::Auto if sample.contains('\t') => Delimiter::Tab,
            Delimiter::Auto => Delimiter::Whitespace,
            other => other.clone(),
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Literal(s) => line.split(s.as_str()).map(str::trim).collect(),
            Delimiter::Whitespace | Delimiter::Auto => line.split_whitespace().collect(),
        }
    }

    fn separator(&self) -> &str {
        match self {
            Delimiter::Comma => ",",
            Delimiter::Tab => "\t",
            Delimiter::Whitespace | Delimiter::Auto => " ",
            Delimiter::Literal(s) => s,
        }
    }
}

/// Bijection between original string IDs and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IdMapJson {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&i) = index.get(id) {
        return i;
    }
    let i = names.len();
    names.push(id.to_string());
    index.insert(id.to_string(), i);
    i
}

fn dense_names(map: BTreeMap<String, usize>, what: &str) -> Result<Vec<String>> {
    let mut names = vec![None; map.len()];
    for (id, idx) in map {
        match names.get_mut(idx) {
            Some(slot @ None) => *slot = Some(id),
            _ => {
                return Err(Error::invalid(format!(
                    "{what} index {idx} is out of range or repeated in id map"
                )))
            }
        }
    }
    Ok(names.into_iter().map(Option::unwrap).collect())
}

impl IdMap {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_id(&self, index: usize) -> &str {
        &self.users[index]
    }

    pub fn item_id(&self, index: usize) -> &str {
        &self.items[index]
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = IdMapJson {
            users: self.user_index.iter().map(|(k, &v)| (k.clone(), v)).collect(),
            items: self.item_index.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: IdMapJson = serde_json::from_str(s)?;
        let users = dense_names(doc.users, "user")?;
        let items = dense_names(doc.items, "item")?;
        let user_index = users.iter().cloned().zip(0..).collect();
        let item_index = items.iter().cloned().zip(0..).collect();
        Ok(Self {
            users,
            items,
            user_index,
            item_index,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn parse_score(field: &str, line: usize) -> Result<u32> {
    if let Ok(v) = field.parse::<u32>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => {
            Ok(v as u32)
        }
        _ => Err(Error::Parse {
            line,
            message: format!("score {field:?} is not a non-negative integer"),
        }),
    }
}

/// How IDs are resolved while reading a file.
enum Ids<'a> {
    Intern(&'a mut IdMap),
    Fixed(&'a IdMap),
}

fn read_ratings(
    reader: impl BufRead,
    delimiter: &Delimiter,
    mut ids: Ids<'_>,
) -> Result<(Vec<Rating>, Delimiter)> {
    let mut resolved: Option<Delimiter> = None;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let delim = resolved.get_or_insert_with(|| delimiter.resolve(trimmed));
        let fields = delim.split(trimmed);
        // Trailing columns (timestamps and the like) are ignored.
        if fields.len() < 3 || fields[..3].iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected <user>{0}<item>{0}<score>", delim.separator()),
            });
        }
        let score = parse_score(fields[2], lineno)?;
        let (user, item) = match &mut ids {
            Ids::Intern(map) => {
                let map = &mut **map;
                (
                    intern(&mut map.users, &mut map.user_index, fields[0]),
                    intern(&mut map.items, &mut map.item_index, fields[1]),
                )
            }
            Ids::Fixed(map) => {
                let user = map.user_index(fields[0]).ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("user {:?} is not in the id map", fields[0]),
                })?;
                let item = map.item_index(fields[1]).ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("item {:?} is not in the id map", fields[1]),
                })?;
                (user, item)
            }
        };
        if !seen.insert((user, item)) {
            return Err(Error::DuplicateObservation {
                line: lineno,
                user: fields[0].to_string(),
                item: fields[1].to_string(),
            });
        }
        entries.push(Rating { user, item, score });
    }
    let resolved = resolved.unwrap_or_else(|| delimiter.resolve(""));
    Ok((entries, resolved))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a rating file, densely re-indexing its IDs.
///
/// The result is always explicit; use [`binarize`] for implicit data.
/// Returns the dataset, the ID map and the delimiter actually used.
pub fn load_ratings(path: &Path, delimiter: &Delimiter) -> Result<(RatingsDataset, IdMap, Delimiter)> {
    parse_ratings(open(path)?, delimiter)
}

/// [`load_ratings`] over any reader.
pub fn parse_ratings(
    reader: impl BufRead,
    delimiter: &Delimiter,
) -> Result<(RatingsDataset, IdMap, Delimiter)> {
    let mut ids = IdMap::default();
    let (entries, resolved) = read_ratings(reader, delimiter, Ids::Intern(&mut ids))?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ds = RatingsDataset::new(ids.n_users(), ids.n_items(), Feedback::Explicit, entries)?;
    Ok((ds, ids, resolved))
}

/// Reads a rating file into an existing index space.
///
/// Used for split files written by [`write_ratings`]; every ID must already
/// be present in `ids`. An empty file yields an empty dataset.
pub fn load_ratings_with_ids(
    path: &Path,
    delimiter: &Delimiter,
    ids: &IdMap,
    mode: Feedback,
) -> Result<RatingsDataset> {
    let (entries, _) = read_ratings(open(path)?, delimiter, Ids::Fixed(ids))?;
    RatingsDataset::new(ids.n_users(), ids.n_items(), mode, entries)
}

/// Writes `ds` with original IDs, one observation per line.
pub fn write_ratings(path: &Path, ds: &RatingsDataset, ids: &IdMap, delimiter: &Delimiter) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let sep = delimiter.separator();
    for e in ds.entries() {
        writeln!(
            w,
            "{}{sep}{}{sep}{}",
            ids.user_id(e.user),
            ids.item_id(e.item),
            e.score
        )
        .map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps entries scoring at least `threshold` as 1's and drops the rest.
pub fn binarize(ds: &RatingsDataset, threshold: u32) -> Result<RatingsDataset> {
    if ds.mode() != Feedback::Explicit {
        return Err(Error::invalid("binarize expects an explicit dataset"));
    }
    let entries = ds
        .entries()
        .iter()
        .filter(|e| e.score >= threshold)
        .map(|e| Rating { score: 1, ..*e })
        .collect();
    RatingsDataset::new(ds.n(), ds.m(), Feedback::Implicit, entries)
}

/// Per-user train/test split protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub min_ratings_per_user: usize,
    pub train_per_user: usize,
    /// Scores at or above this become implicit 1's; `None` keeps the data explicit.
    #[serde(default)]
    pub implicit_threshold: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_user >= self.min_ratings_per_user {
            return Err(Error::invalid(format!(
                "train_per_user ({}) must be below min_ratings_per_user ({})",
                self.train_per_user, self.min_ratings_per_user
            )));
        }
        Ok(())
    }
}

/// Output of [`split_train_test`].
#[derive(Debug, Clone)]
pub struct Split {
    pub train: RatingsDataset,
    pub test: RatingsDataset,
    /// Users that had observations but fewer than the minimum.
    pub dropped_users: usize,
}

/// Applies the split protocol: optional binarization, then the per-user
/// minimum filter, then `train_per_user` entries per surviving user drawn
/// uniformly without replacement into train; the rest goes to test.
///
/// Both outputs keep the input's `n × m` index space. Each user's draw
/// comes from its own substream of `spec.seed`.
pub fn split_train_test(ds: &RatingsDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let binarized;
    let source = match spec.implicit_threshold {
        Some(t) if ds.mode() == Feedback::Explicit => {
            binarized = binarize(ds, t)?;
            &binarized
        }
        _ => ds,
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut dropped_users = 0;
    let mut kept_users = 0;
    for user in 0..source.n() {
        let row = source.user_entries(user);
        if row.is_empty() {
            continue;
        }
        if row.len() < spec.min_ratings_per_user {
            dropped_users += 1;
            continue;
        }
        kept_users += 1;
        let mut rng = substream(spec.seed, Stream::DataSplit, user as u64, 0);
        let mut in_train = vec![false; row.len()];
        for p in index::sample(&mut rng, row.len(), spec.train_per_user) {
            in_train[p] = true;
        }
        for (e, t) in row.iter().zip(in_train) {
            if t {
                train.push(*e);
            } else {
                test.push(*e);
            }
        }
    }
    if kept_users == 0 {
        return Err(Error::EmptySplit {
            min_ratings: spec.min_ratings_per_user,
        });
    }
    Ok(Split {
        train: RatingsDataset::new(source.n(), source.m(), source.mode(), train)?,
        test: RatingsDataset::new(source.n(), source.m(), source.mode(), test)?,
        dropped_users,
    })
}
