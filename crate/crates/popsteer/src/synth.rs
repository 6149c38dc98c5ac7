//! Extreme-preference synthetic profiles: item sequences drawn uniformly
//! with replacement from either the head or the tail item set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::data::PopularityPartition;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileSide {
    Pop,
    Unpop,
}

impl ProfileSide {
    pub fn label(self) -> &'static str {
        match self {
            ProfileSide::Pop => "pop",
            ProfileSide::Unpop => "unpop",
        }
    }

    /// The side's item set within a partition.
    pub fn items(self, partition: &PopularityPartition) -> &[u32] {
        match self {
            ProfileSide::Pop => &partition.head,
            ProfileSide::Unpop => &partition.tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProfiles {
    pub side: ProfileSide,
    pub seq_len: usize,
    pub seed: u64,
    pub sequences: Vec<Vec<u32>>,
}

/// One profile as a pure function of (seed, index); the basis for both
/// streaming consumption and materialized dumps.
pub fn profile_at(items: &[u32], seq_len: usize, seed: u64, index: u64) -> Vec<u32> {
    let mut rng = SeedTree::new(seed).rng_at("synthetic_profile", index);
    (0..seq_len)
        .map(|_| items[rng.gen_range(0..items.len())])
        .collect()
}

/// Materializes `n_prime` profiles of length `seq_len` from the side's
/// item set.
pub fn generate_profiles(
    partition: &PopularityPartition,
    side: ProfileSide,
    n_prime: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SyntheticProfiles> {
    let items = side.items(partition);
    if items.is_empty() {
        return Err(Error::EmptyItemSet { side: side.label() });
    }
    if seq_len == 0 {
        return Err(Error::InvalidConfig("profile length must be >= 1".into()));
    }
    let sequences = (0..n_prime)
        .map(|i| profile_at(items, seq_len, seed, i as u64))
        .collect();
    Ok(SyntheticProfiles {
        side,
        seq_len,
        seed,
        sequences,
    })
}

/// Dump format: a header row (`side=<pop|unpop>\tM=<len>\tseed=<seed>`),
/// then one space-separated sequence per line.
pub fn dump_profiles(path: &Path, profiles: &SyntheticProfiles) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "side={}\tM={}\tseed={}",
        profiles.side.label(),
        profiles.seq_len,
        profiles.seed
    )?;
    for seq in &profiles.sequences {
        let line: Vec<String> = seq.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_profiles(path: &Path) -> Result<SyntheticProfiles> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or(Error::EmptyFile)??;
    let mut side = None;
    let mut seq_len = None;
    let mut seed = None;
    for field in header.split('\t') {
        match field.split_once('=') {
            Some(("side", "pop")) => side = Some(ProfileSide::Pop),
            Some(("side", "unpop")) => side = Some(ProfileSide::Unpop),
            Some(("M", v)) => seq_len = v.parse().ok(),
            Some(("seed", v)) => seed = v.parse().ok(),
            _ => {}
        }
    }
    let (side, seq_len, seed) = match (side, seq_len, seed) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::CorruptFile {
                kind: "profile dump",
                reason: "bad header".into(),
            })
        }
    };
    let mut sequences = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: std::result::Result<Vec<u32>, _> =
            line.split_whitespace().map(|t| t.parse()).collect();
        sequences.push(seq.map_err(|_| Error::MalformedRecord {
            line: lineno + 2,
            reason: "non-numeric item index".into(),
        })?);
    }
    Ok(SyntheticProfiles {
        side,
        seq_len,
        seed,
        sequences,
    })
}
