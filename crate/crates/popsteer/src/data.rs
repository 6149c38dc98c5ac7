//! Interaction logs: ingestion, k-core filtering, the leave-one-out split,
//! and the head/tail popularity partition.
//!
//! All functions here are pure over immutable inputs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// One (user, item) event. Indices are dense positions into the owning
/// log's id tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

/// Column layout of a delimited interaction file.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    /// Field separator; may be multi-character (e.g. `::`).
    pub separator: String,
    pub user_col: usize,
    pub item_col: usize,
    pub time_col: usize,
}

impl ColumnSpec {
    pub fn tsv() -> Self {
        Self {
            separator: "\t".into(),
            user_col: 0,
            item_col: 1,
            time_col: 2,
        }
    }

    pub fn csv() -> Self {
        Self {
            separator: ",".into(),
            ..Self::tsv()
        }
    }

    /// MovieLens `ratings.dat` layout: `user::item::rating::timestamp`.
    pub fn movielens() -> Self {
        Self {
            separator: "::".into(),
            user_col: 0,
            item_col: 1,
            time_col: 3,
        }
    }
}

/// An interaction log with dense user/item indexing.
///
/// Dense indices are assigned in first-seen order and are contiguous
/// `0..n_users` / `0..n_items`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, u32>,
    item_index: HashMap<String, u32>,
}

impl InteractionLog {
    /// Builds a log from raw (user, item, timestamp) triples, assigning
    /// dense indices in first-seen order.
    pub fn from_triples<I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, i64)>,
    {
        let mut log = InteractionLog {
            interactions: Vec::new(),
            user_ids: Vec::new(),
            item_ids: Vec::new(),
            user_index: HashMap::new(),
            item_index: HashMap::new(),
        };
        for (user, item, timestamp) in triples {
            let u = intern(&mut log.user_index, &mut log.user_ids, user);
            let i = intern(&mut log.item_index, &mut log.item_ids, item);
            log.interactions.push(Interaction {
                user: u,
                item: i,
                timestamp,
            });
        }
        if log.interactions.is_empty() {
            return Err(Error::EmptyFile);
        }
        Ok(log)
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_id(&self, u: u32) -> &str {
        &self.user_ids[u as usize]
    }

    pub fn item_id(&self, i: u32) -> &str {
        &self.item_ids[i as usize]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Fraction of the user×item grid that carries at least one event.
    pub fn density(&self) -> f64 {
        let cells = self.n_users() as f64 * self.n_items() as f64;
        if cells == 0.0 {
            return 0.0;
        }
        self.n_interactions() as f64 / cells
    }
}

fn intern(index: &mut HashMap<String, u32>, ids: &mut Vec<String>, id: String) -> u32 {
    if let Some(&v) = index.get(&id) {
        return v;
    }
    let v = ids.len() as u32;
    ids.push(id.clone());
    index.insert(id, v);
    v
}

/// Reads a delimited interaction file. Blank lines are skipped; any other
/// unparseable line aborts with its 1-based line number.
pub fn load_interactions(path: &Path, format: &ColumnSpec) -> Result<InteractionLog> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let needed = format.user_col.max(format.item_col).max(format.time_col) + 1;

    let mut triples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.separator.as_str()).collect();
        if fields.len() < needed {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: format!("expected at least {needed} fields, found {}", fields.len()),
            });
        }
        let user = fields[format.user_col].trim();
        let item = fields[format.item_col].trim();
        let ts_raw = fields[format.time_col].trim();
        if user.is_empty() || item.is_empty() {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: "empty identifier".into(),
            });
        }
        let timestamp: i64 = ts_raw.parse().map_err(|_| Error::MalformedRecord {
            line: lineno,
            reason: format!("non-numeric timestamp {ts_raw:?}"),
        })?;
        if timestamp < 0 {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: "negative timestamp".into(),
            });
        }
        triples.push((user.to_string(), item.to_string(), timestamp));
    }
    InteractionLog::from_triples(triples)
}

/// Iteratively removes users with fewer than `user_min` interactions and
/// items with fewer than `item_min` until both constraints hold, then
/// re-densifies indices (first-seen order over surviving interactions).
pub fn k_core_filter(
    log: &InteractionLog,
    user_min: usize,
    item_min: usize,
) -> Result<InteractionLog> {
    if user_min < 1 || item_min < 1 {
        return Err(Error::InvalidConfig(
            "k-core thresholds must be at least 1".into(),
        ));
    }
    let mut alive_user = vec![true; log.n_users()];
    let mut alive_item = vec![true; log.n_items()];

    loop {
        let mut user_count = vec![0usize; log.n_users()];
        let mut item_count = vec![0usize; log.n_items()];
        for it in &log.interactions {
            if alive_user[it.user as usize] && alive_item[it.item as usize] {
                user_count[it.user as usize] += 1;
                item_count[it.item as usize] += 1;
            }
        }
        let mut changed = false;
        for (u, alive) in alive_user.iter_mut().enumerate() {
            if *alive && user_count[u] < user_min {
                *alive = false;
                changed = true;
            }
        }
        for (i, alive) in alive_item.iter_mut().enumerate() {
            if *alive && item_count[i] < item_min {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let triples: Vec<(String, String, i64)> = log
        .interactions
        .iter()
        .filter(|it| alive_user[it.user as usize] && alive_item[it.item as usize])
        .map(|it| {
            (
                log.user_id(it.user).to_string(),
                log.item_id(it.item).to_string(),
                it.timestamp,
            )
        })
        .collect();
    if triples.is_empty() {
        return Err(Error::EmptyResult);
    }
    InteractionLog::from_triples(triples)
}

/// One user's chronological split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    /// Dense user index in the source log.
    pub user: u32,
    /// Chronological training items (oldest first).
    pub train: Vec<u32>,
    /// Second most recent item.
    pub val: u32,
    /// Most recent item.
    pub test: u32,
}

/// Leave-one-out split over a log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub n_items: usize,
    /// Users excluded for having fewer than 3 interactions.
    pub dropped_users: usize,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_train_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }
}

/// Holds out each user's most recent item for test and second most recent
/// for validation. Timestamp ties keep input order (stable sort). Users
/// with fewer than 3 interactions are dropped and counted.
pub fn leave_one_out_split(log: &InteractionLog) -> SplitDataset {
    let mut per_user: Vec<Vec<(i64, u32)>> = vec![Vec::new(); log.n_users()];
    for it in log.interactions() {
        per_user[it.user as usize].push((it.timestamp, it.item));
    }

    let mut users = Vec::new();
    let mut dropped = 0usize;
    for (u, mut events) in per_user.into_iter().enumerate() {
        if events.len() < 3 {
            if !events.is_empty() {
                dropped += 1;
            }
            continue;
        }
        events.sort_by_key(|&(ts, _)| ts);
        let (_, test) = events.pop().unwrap();
        let (_, val) = events.pop().unwrap();
        let train: Vec<u32> = events.into_iter().map(|(_, i)| i).collect();
        users.push(UserSplit {
            user: u as u32,
            train,
            val,
            test,
        });
    }
    SplitDataset {
        users,
        n_items: log.n_items(),
        dropped_users: dropped,
    }
}

/// Popularity side of an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Head,
    Mid,
    Tail,
}

/// Head/tail item sets by training interaction count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopularityPartition {
    /// Head item indices, most popular first.
    pub head: Vec<u32>,
    /// Tail item indices, in the global popularity ordering.
    pub tail: Vec<u32>,
    /// Per-item training interaction count.
    pub counts: Vec<u64>,
    side_of: Vec<Side>,
}

impl PopularityPartition {
    /// Assembles a partition from explicit head/tail sets.
    pub fn new(head: Vec<u32>, tail: Vec<u32>, counts: Vec<u64>) -> Self {
        let mut side_of = vec![Side::Mid; counts.len()];
        for &i in &head {
            side_of[i as usize] = Side::Head;
        }
        for &i in &tail {
            side_of[i as usize] = Side::Tail;
        }
        Self {
            head,
            tail,
            counts,
            side_of,
        }
    }

    pub fn side(&self, item: u32) -> Side {
        self.side_of[item as usize]
    }

    pub fn is_head(&self, item: u32) -> bool {
        matches!(self.side_of[item as usize], Side::Head)
    }

    pub fn is_tail(&self, item: u32) -> bool {
        matches!(self.side_of[item as usize], Side::Tail)
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }
}

/// Sorts items by training count (descending, ties by ascending index) and
/// takes the top `ceil(head_frac·m)` as head, bottom `ceil(tail_frac·m)`
/// as tail. Counts come from training interactions only.
pub fn popularity_partition(
    train: &SplitDataset,
    head_frac: f64,
    tail_frac: f64,
) -> Result<PopularityPartition> {
    if !(head_frac > 0.0 && tail_frac > 0.0 && head_frac + tail_frac <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "head/tail fractions must be positive and sum to at most 1 (got {head_frac}, {tail_frac})"
        )));
    }
    let m = train.n_items;
    let mut counts = vec![0u64; m];
    for u in &train.users {
        for &i in &u.train {
            counts[i as usize] += 1;
        }
    }

    let mut order: Vec<u32> = (0..m as u32).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));

    let n_head = (head_frac * m as f64).ceil() as usize;
    let n_tail = (tail_frac * m as f64).ceil() as usize;
    let head: Vec<u32> = order[..n_head].to_vec();
    let tail: Vec<u32> = order[m - n_tail..].to_vec();

    let mut side_of = vec![Side::Mid; m];
    for &i in &head {
        side_of[i as usize] = Side::Head;
    }
    for &i in &tail {
        side_of[i as usize] = Side::Tail;
    }
    Ok(PopularityPartition {
        head,
        tail,
        counts,
        side_of,
    })
}

// ── Prepared-dataset artifact ───────────────────────────────────────────────

/// Everything downstream stages need: the split, the partition, and the
/// original identifier tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub split: SplitDataset,
    pub partition: PopularityPartition,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl PreparedDataset {
    pub fn n_items(&self) -> usize {
        self.split.n_items
    }
}

const PREPARED_MAGIC: &[u8; 4] = b"PSDS";
const PREPARED_VERSION: u32 = 1;

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string(r: &mut impl Read, kind: &'static str) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::CorruptFile {
        kind,
        reason: "invalid utf-8 string".into(),
    })
}

pub fn save_prepared(path: &Path, ds: &PreparedDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PREPARED_MAGIC)?;
    w.write_u32::<LittleEndian>(PREPARED_VERSION)?;

    w.write_u32::<LittleEndian>(ds.user_ids.len() as u32)?;
    for s in &ds.user_ids {
        write_string(&mut w, s)?;
    }
    w.write_u32::<LittleEndian>(ds.item_ids.len() as u32)?;
    for s in &ds.item_ids {
        write_string(&mut w, s)?;
    }

    w.write_u32::<LittleEndian>(ds.split.users.len() as u32)?;
    w.write_u64::<LittleEndian>(ds.split.dropped_users as u64)?;
    for u in &ds.split.users {
        w.write_u32::<LittleEndian>(u.user)?;
        w.write_u32::<LittleEndian>(u.train.len() as u32)?;
        for &i in &u.train {
            w.write_u32::<LittleEndian>(i)?;
        }
        w.write_u32::<LittleEndian>(u.val)?;
        w.write_u32::<LittleEndian>(u.test)?;
    }

    w.write_u32::<LittleEndian>(ds.partition.head.len() as u32)?;
    for &i in &ds.partition.head {
        w.write_u32::<LittleEndian>(i)?;
    }
    w.write_u32::<LittleEndian>(ds.partition.tail.len() as u32)?;
    for &i in &ds.partition.tail {
        w.write_u32::<LittleEndian>(i)?;
    }
    for &c in &ds.partition.counts {
        w.write_u64::<LittleEndian>(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_prepared(path: &Path) -> Result<PreparedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PREPARED_MAGIC {
        return Err(Error::CorruptFile {
            kind: "prepared dataset",
            reason: "bad magic".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != PREPARED_VERSION {
        return Err(Error::BadFileVersion {
            kind: "prepared dataset",
            got: version,
            expected: PREPARED_VERSION,
        });
    }

    let n_users = r.read_u32::<LittleEndian>()? as usize;
    let mut user_ids = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        user_ids.push(read_string(&mut r, "prepared dataset")?);
    }
    let n_items = r.read_u32::<LittleEndian>()? as usize;
    let mut item_ids = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        item_ids.push(read_string(&mut r, "prepared dataset")?);
    }

    let n_split = r.read_u32::<LittleEndian>()? as usize;
    let dropped_users = r.read_u64::<LittleEndian>()? as usize;
    let mut users = Vec::with_capacity(n_split);
    for _ in 0..n_split {
        let user = r.read_u32::<LittleEndian>()?;
        let tlen = r.read_u32::<LittleEndian>()? as usize;
        let mut train = Vec::with_capacity(tlen);
        for _ in 0..tlen {
            train.push(r.read_u32::<LittleEndian>()?);
        }
        let val = r.read_u32::<LittleEndian>()?;
        let test = r.read_u32::<LittleEndian>()?;
        users.push(UserSplit {
            user,
            train,
            val,
            test,
        });
    }
    let split = SplitDataset {
        users,
        n_items,
        dropped_users,
    };

    let n_head = r.read_u32::<LittleEndian>()? as usize;
    let mut head = Vec::with_capacity(n_head);
    for _ in 0..n_head {
        head.push(r.read_u32::<LittleEndian>()?);
    }
    let n_tail = r.read_u32::<LittleEndian>()? as usize;
    let mut tail = Vec::with_capacity(n_tail);
    for _ in 0..n_tail {
        tail.push(r.read_u32::<LittleEndian>()?);
    }
    let mut counts = vec![0u64; n_items];
    for c in counts.iter_mut() {
        *c = r.read_u64::<LittleEndian>()?;
    }
    let mut side_of = vec![Side::Mid; n_items];
    for &i in &head {
        side_of[i as usize] = Side::Head;
    }
    for &i in &tail {
        side_of[i as usize] = Side::Tail;
    }
    Ok(PreparedDataset {
        split,
        partition: PopularityPartition {
            head,
            tail,
            counts,
            side_of,
        },
        user_ids,
        item_ids,
    })
}
