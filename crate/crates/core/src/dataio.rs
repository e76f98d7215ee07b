//! Interaction logs, padded user sequences, leave-one-out splits and the
//! synthetic popularity-biased corpus generator.
//!
//! Item ids inside a [`UserSequence`] are *tokens*: the dense item index
//! shifted by one so that token [`PAD`] (0) is reserved for padding.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved padding token.
pub const PAD: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: usize,
    pub item_id: usize,
    pub timestamp: i64,
}

impl Interaction {
    /// Item token (dense id shifted past the pad slot).
    pub fn token(&self) -> usize {
        self.item_id + 1
    }
}

/// Raw external ids in dense-index order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub id_map: IdMap,
}

impl InteractionLog {
    pub fn user_count(&self) -> usize {
        self.id_map.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.id_map.items.len()
    }

    /// Build a log from already-dense ids; raw ids are their decimal strings.
    pub fn from_dense(interactions: Vec<Interaction>) -> Self {
        let users = interactions.iter().map(|i| i.user_id + 1).max().unwrap_or(0);
        let items = interactions.iter().map(|i| i.item_id + 1).max().unwrap_or(0);
        InteractionLog {
            interactions,
            id_map: IdMap {
                users: (0..users).map(|u| u.to_string()).collect(),
                items: (0..items).map(|i| i.to_string()).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Tsv,
}

/// Parse a `user\titem\ttimestamp` file. Ids are re-indexed densely in order
/// of first appearance.
pub fn ingest(path: &Path, format: InputFormat) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        InputFormat::Tsv => parse_tsv(&text),
    }
}

pub fn parse_tsv(text: &str) -> Result<InteractionLog> {
    let mut users: BTreeMap<String, usize> = BTreeMap::new();
    let mut items: BTreeMap<String, usize> = BTreeMap::new();
    let mut id_map = IdMap::default();
    let mut interactions = Vec::new();

    for (idx, raw_line) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        let timestamp: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid timestamp {:?}", fields[2]),
        })?;
        let user_id = *users.entry(user.to_string()).or_insert_with(|| {
            id_map.users.push(user.to_string());
            id_map.users.len() - 1
        });
        let item_id = *items.entry(item.to_string()).or_insert_with(|| {
            id_map.items.push(item.to_string());
            id_map.items.len() - 1
        });
        interactions.push(Interaction {
            user_id,
            item_id,
            timestamp,
        });
    }

    if interactions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(InteractionLog {
        interactions,
        id_map,
    })
}

/// Write a log back out in the same TSV format, using raw ids.
pub fn write_tsv(log: &InteractionLog, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for it in &log.interactions {
        writeln!(
            out,
            "{}\t{}\t{}",
            log.id_map.users[it.user_id], log.id_map.items[it.item_id], it.timestamp
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: usize,
    /// Item tokens in temporal order, no padding.
    pub items: Vec<usize>,
    /// Left-aligned: items first, then [`PAD`] up to `t_max`.
    pub padded: Vec<usize>,
    pub true_length: usize,
}

impl UserSequence {
    pub fn new(user_id: usize, items: Vec<usize>, t_max: usize) -> Self {
        let mut padded = items.clone();
        padded.resize(t_max, PAD);
        UserSequence {
            user_id,
            true_length: items.len(),
            items,
            padded,
        }
    }
}

/// Group by user, sort by (timestamp, item id) and keep the most recent
/// `t_max` items. Output is ordered by user id.
pub fn build_sequences(interactions: &[Interaction], t_max: usize) -> Result<Vec<UserSequence>> {
    if t_max < 2 {
        return Err(Error::InvalidArgument(format!("t_max must be >= 2, got {t_max}")));
    }
    let mut per_user: BTreeMap<usize, Vec<(i64, usize)>> = BTreeMap::new();
    for it in interactions {
        per_user
            .entry(it.user_id)
            .or_default()
            .push((it.timestamp, it.item_id));
    }
    Ok(per_user
        .into_iter()
        .map(|(user_id, mut events)| {
            // stable: duplicates keep input order
            events.sort_by_key(|&(t, item)| (t, item));
            let start = events.len().saturating_sub(t_max);
            let items = events[start..].iter().map(|&(_, item)| item + 1).collect();
            UserSequence::new(user_id, items, t_max)
        })
        .collect())
}

/// A (history, held-out target) pair for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: usize,
    pub history: Vec<usize>,
    pub target: usize,
    /// Length of the user's full (truncated) sequence.
    pub total_interactions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub user_id: usize,
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped_users: Vec<usize>,
    pub reasons: BTreeMap<String, usize>,
}

pub const MIN_SEQUENCE_LENGTH: usize = 3;
const REASON_TOO_SHORT: &str = "fewer_than_min_interactions";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train_sequences: Vec<TrainSequence>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Number of real items |V| (tokens 1..=catalog_size).
    pub catalog_size: usize,
    pub user_count: usize,
    pub t_max: usize,
    pub drop_report: DropReport,
}

impl SplitDataset {
    /// Training-history interaction count per item token (index 0 = pad).
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.catalog_size + 1];
        for seq in &self.train_sequences {
            for &item in &seq.items {
                counts[item] += 1;
            }
        }
        counts
    }
}

/// Leave-one-out split: last item is the test target, the penultimate the
/// validation target, the remainder the training history.
pub fn leave_one_out(
    sequences: &[UserSequence],
    catalog_size: usize,
    min_length: usize,
) -> SplitDataset {
    let min_length = min_length.max(MIN_SEQUENCE_LENGTH);
    let mut split = SplitDataset {
        train_sequences: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        catalog_size,
        user_count: 0,
        t_max: sequences.first().map_or(0, |s| s.padded.len()),
        drop_report: DropReport::default(),
    };
    for seq in sequences {
        let n = seq.items.len();
        if n < min_length {
            split.drop_report.dropped_users.push(seq.user_id);
            *split
                .drop_report
                .reasons
                .entry(REASON_TOO_SHORT.to_string())
                .or_default() += 1;
            continue;
        }
        split.user_count += 1;
        split.train_sequences.push(TrainSequence {
            user_id: seq.user_id,
            items: seq.items[..n - 2].to_vec(),
        });
        split.valid.push(Example {
            user_id: seq.user_id,
            history: seq.items[..n - 2].to_vec(),
            target: seq.items[n - 2],
            total_interactions: n,
        });
        split.test.push(Example {
            user_id: seq.user_id,
            history: seq.items[..n - 1].to_vec(),
            target: seq.items[n - 1],
            total_interactions: n,
        });
    }
    split
}

/// Ingest-to-split in one call.
pub fn prepare(log: &InteractionLog, t_max: usize, min_length: usize) -> Result<SplitDataset> {
    let sequences = build_sequences(&log.interactions, t_max)?;
    Ok(leave_one_out(&sequences, log.item_count(), min_length))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub user_count: usize,
    pub item_count: usize,
    pub mean_length: usize,
    /// Probability that a step is popularity-driven.
    pub conformity_fraction: f64,
    /// Zipf exponent of the popularity distribution.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.user_count == 0 || self.item_count == 0 || self.mean_length == 0 {
            return Err(Error::InvalidArgument("synthetic counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conformity_fraction) {
            return Err(Error::InvalidArgument("conformity_fraction must lie in [0,1]".into()));
        }
        if !(self.popularity_exponent > 0.0) {
            return Err(Error::InvalidArgument("popularity_exponent must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Driver {
    Interest,
    Conformity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLog {
    pub log: InteractionLog,
    /// Ground-truth driver of each interaction, aligned with `log.interactions`.
    pub labels: Vec<Driver>,
    /// Dense item ids in decreasing popularity order (rank 1 first).
    pub popularity_order: Vec<usize>,
}

const CLUSTER_SIZE: usize = 20;
const WALK_STAY: f64 = 0.7;

/// Generate a corpus in which each step is either a Zipf popularity draw
/// (probability `conformity_fraction`) or a short walk through the user's
/// home interest cluster.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticLog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_items = spec.item_count;

    let mut popularity_order: Vec<usize> = (0..n_items).collect();
    popularity_order.shuffle(&mut rng);
    let mut cluster_layout: Vec<usize> = (0..n_items).collect();
    cluster_layout.shuffle(&mut rng);
    let cluster_size = CLUSTER_SIZE.min(n_items);
    let clusters: Vec<&[usize]> = cluster_layout.chunks(cluster_size).collect();

    let zipf = Zipf::new(n_items as f64, spec.popularity_exponent)
        .map_err(|e| Error::InvalidArgument(format!("zipf: {e}")))?;
    let mean_extra = spec.mean_length.saturating_sub(MIN_SEQUENCE_LENGTH) as f64;
    let max_len = (spec.mean_length * 4).max(MIN_SEQUENCE_LENGTH);

    let mut interactions = Vec::new();
    let mut labels = Vec::new();
    for user_id in 0..spec.user_count {
        let home = clusters[rng.random_range(0..clusters.len())];
        let mut cursor = rng.random_range(0..home.len());
        // geometric tail on top of the minimum length
        let mut len = MIN_SEQUENCE_LENGTH;
        if mean_extra > 0.0 {
            let stop = 1.0 / (mean_extra + 1.0);
            while len < max_len && rng.random::<f64>() >= stop {
                len += 1;
            }
        }
        for step in 0..len {
            let (item, driver) = if rng.random::<f64>() < spec.conformity_fraction {
                let rank = zipf.sample(&mut rng) as usize;
                (popularity_order[rank.clamp(1, n_items) - 1], Driver::Conformity)
            } else {
                if step > 0 {
                    let mut jump = 1;
                    while rng.random::<f64>() >= WALK_STAY && jump < home.len() {
                        jump += 1;
                    }
                    cursor = (cursor + jump) % home.len();
                }
                (home[cursor], Driver::Interest)
            };
            interactions.push(Interaction {
                user_id,
                item_id: item,
                timestamp: step as i64,
            });
            labels.push(driver);
        }
    }

    // raw ids are the generator's own integers
    let log = InteractionLog {
        interactions,
        id_map: IdMap {
            users: (0..spec.user_count).map(|u| u.to_string()).collect(),
            items: (0..n_items).map(|i| i.to_string()).collect(),
        },
    };
    Ok(SyntheticLog {
        log,
        labels,
        popularity_order,
    })
}

impl SyntheticLog {
    /// Write the interactions TSV plus a sibling `<path>.labels.tsv`
    /// (`user\ttimestamp\tdriver`).
    pub fn write(&self, path: &Path) -> Result<()> {
        write_tsv(&self.log, path)?;
        let label_path = path.with_extension("labels.tsv");
        let file = fs::File::create(&label_path).map_err(|e| Error::io(&label_path, e))?;
        let mut out = BufWriter::new(file);
        for (it, label) in self.log.interactions.iter().zip(&self.labels) {
            let tag = match label {
                Driver::Interest => "interest",
                Driver::Conformity => "conformity",
            };
            writeln!(out, "{}\t{}\t{}", it.user_id, it.timestamp, tag)
                .map_err(|e| Error::io(&label_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&label_path, e))
    }
}
