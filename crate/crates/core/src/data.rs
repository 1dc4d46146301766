//! Interaction logs, next-item samples, chronological splits and negative
//! sampling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Events with contiguous internal ids. `user_ids[u]` / `item_ids[i]` give
/// the raw id behind internal id `u` / `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub interactions: Vec<Interaction>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl InteractionDataset {
    /// Re-indexes raw `(user, item, timestamp)` rows. Internal ids follow
    /// ascending raw id; row order is preserved.
    pub fn from_raw(rows: &[(u64, u64, i64)]) -> Self {
        let mut users: Vec<u64> = rows.iter().map(|r| r.0).collect();
        let mut items: Vec<u64> = rows.iter().map(|r| r.1).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        let user_index: BTreeMap<u64, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_index: BTreeMap<u64, usize> = items.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let interactions = rows
            .iter()
            .map(|&(u, i, t)| Interaction {
                user: user_index[&u],
                item: item_index[&i],
                timestamp: t,
            })
            .collect();
        Self {
            interactions,
            user_ids: users,
            item_ids: items,
        }
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Writes the events back out with raw ids.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# user_id\titem_id\ttimestamp")?;
        for e in &self.interactions {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.user_ids[e.user], self.item_ids[e.item], e.timestamp
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `users.map` and `items.map` (`internal<TAB>raw`) into `dir`.
    pub fn write_id_maps(&self, dir: &Path) -> Result<()> {
        for (name, ids) in [("users.map", &self.user_ids), ("items.map", &self.item_ids)] {
            let mut out = BufWriter::new(File::create(dir.join(name))?);
            for (i, raw) in ids.iter().enumerate() {
                writeln!(out, "{i}\t{raw}")?;
            }
            out.flush()?;
        }
        Ok(())
    }
}

pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), &path.display().to_string())
}

/// Parses whitespace-separated `user_id item_id timestamp` rows. Blank lines
/// and lines starting with `#` are skipped. Duplicate rows are kept.
pub fn parse_interactions<R: BufRead>(input: R, source_name: &str) -> Result<InteractionDataset> {
    let mut rows = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |detail: String| CoreError::Parse {
            source_name: source_name.to_string(),
            line: no + 1,
            detail,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", fields.len())));
        }
        let user = fields[0]
            .parse::<u64>()
            .map_err(|_| err(format!("bad user id `{}`", fields[0])))?;
        let item = fields[1]
            .parse::<u64>()
            .map_err(|_| err(format!("bad item id `{}`", fields[1])))?;
        let ts = fields[2]
            .parse::<i64>()
            .map_err(|_| err(format!("bad timestamp `{}`", fields[2])))?;
        rows.push((user, item, ts));
    }
    if rows.is_empty() {
        return Err(CoreError::Empty(source_name.to_string()));
    }
    Ok(InteractionDataset::from_raw(&rows))
}

/// One next-item prediction case: `prefix` → `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceSample {
    /// Position in the output of [`build_sequences`]; teacher artifacts key on it.
    pub index: usize,
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
    pub target_timestamp: i64,
}

/// One sample per history position t ≥ 2, prefix truncated to the most
/// recent `max_len` items. Users are visited in internal-id order; each
/// history is stably sorted by timestamp so ties keep input order.
pub fn build_sequences(dataset: &InteractionDataset, max_len: usize) -> Result<Vec<SequenceSample>> {
    if max_len == 0 {
        return Err(CoreError::invalid("max_len must be at least 1"));
    }
    let mut histories: Vec<Vec<(i64, usize)>> = vec![Vec::new(); dataset.user_count()];
    for e in &dataset.interactions {
        histories[e.user].push((e.timestamp, e.item));
    }
    let mut out = Vec::new();
    for (user, mut events) in histories.into_iter().enumerate() {
        events.sort_by_key(|e| e.0);
        for t in 1..events.len() {
            let start = t.saturating_sub(max_len);
            out.push(SequenceSample {
                index: out.len(),
                user,
                prefix: events[start..t].iter().map(|e| e.1).collect(),
                target: events[t].1,
                target_timestamp: events[t].0,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitBundle {
    pub train: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    pub item_count: usize,
    pub user_count: usize,
}

/// Global chronological split. Samples are stably sorted by target
/// timestamp and cut at `floor(n·c)` for the cumulative ratios `c`.
pub fn chronological_split(
    mut samples: Vec<SequenceSample>,
    ratios: [u32; 3],
    item_count: usize,
    user_count: usize,
) -> Result<SplitBundle> {
    if samples.len() < 10 {
        return Err(CoreError::invalid(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(CoreError::invalid("split ratios sum to zero"));
    }
    samples.sort_by_key(|s| s.target_timestamp);
    let n = samples.len() as u64;
    let a = (n * ratios[0] as u64 / total) as usize;
    let b = (n * (ratios[0] + ratios[1]) as u64 / total) as usize;
    let test = samples.split_off(b);
    let validation = samples.split_off(a);
    Ok(SplitBundle {
        train: samples,
        validation,
        test,
        item_count,
        user_count,
    })
}

/// Draws `n` items uniformly from `0..item_count`, redrawing any draw equal
/// to `target`. Draws are independent, so the list may repeat items.
pub fn sample_negatives(target: usize, item_count: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if item_count < 2 {
        return Err(CoreError::invalid(format!(
            "catalog of {item_count} items has no negatives"
        )));
    }
    let mut rng = seed::rng(seed, &[seed::NEGATIVES]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let j = rng.random_range(0..item_count);
        if j != target {
            out.push(j);
        }
    }
    Ok(out)
}
