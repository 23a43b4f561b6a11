use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fmt17, sample_user, GroupModel, UserRatings};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Ordered `(item, rating)` pairs observed for one user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionHistory {
    pairs: Vec<(usize, f64)>,
}

impl InteractionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(usize, f64)>) -> Self {
        Self { pairs }
    }

    pub fn push(&mut self, item: usize, rating: f64) {
        self.pairs.push((item, rating));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, f64)] {
        &self.pairs
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    pub fn ratings(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.1)
    }

    /// First `t` pairs.
    pub fn prefix(&self, t: usize) -> InteractionHistory {
        Self {
            pairs: self.pairs[..t.min(self.pairs.len())].to_vec(),
        }
    }
}

/// Uniform-length random interaction sequences with their hidden groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub seq_len: usize,
    pub n_items: usize,
    pub sequences: Vec<InteractionHistory>,
    /// Kept for probing and diagnostics; never shown to the model.
    pub group_labels: Vec<usize>,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// CSV with columns `sequence,group,position,item,rating`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# n_items={} seq_len={}", self.n_items, self.seq_len)?;
        writeln!(w, "sequence,group,position,item,rating")?;
        for (s, (seq, g)) in self.sequences.iter().zip(&self.group_labels).enumerate() {
            for (pos, &(item, rating)) in seq.pairs().iter().enumerate() {
                writeln!(w, "{},{},{},{},{}", s, g, pos, item, fmt17(rating))?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let name = path.display().to_string();
        let perr = |line: usize, msg: String| Error::Parse {
            path: name.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty dataset file".into()))?;
        let mut n_items = None;
        let mut seq_len = None;
        for kv in header.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("n_items", v)) => n_items = v.parse().ok(),
                Some(("seq_len", v)) => seq_len = v.parse().ok(),
                _ => {}
            }
        }
        let (n_items, seq_len) = match (n_items, seq_len) {
            (Some(n), Some(s)) => (n, s),
            _ => return Err(perr(1, "missing n_items/seq_len header".into())),
        };
        lines.next();
        let mut sequences: Vec<InteractionHistory> = Vec::new();
        let mut group_labels = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(perr(lineno, format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<usize>().map_err(|e| perr(lineno, e.to_string()));
            let (s, g, pos, item) = (num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?);
            let rating: f64 = f[4].trim().parse().map_err(|e| perr(lineno, format!("{e}")))?;
            if s == sequences.len() {
                sequences.push(InteractionHistory::new());
                group_labels.push(g);
            }
            if s + 1 != sequences.len() || pos != sequences[s].len() || item >= n_items {
                return Err(perr(lineno, "out-of-order or out-of-range record".into()));
            }
            sequences[s].push(item, rating);
        }
        if sequences.iter().any(|q| q.len() != seq_len) {
            return Err(perr(1, "sequence length differs from header".into()));
        }
        Ok(Self {
            seq_len,
            n_items,
            sequences,
            group_labels,
        })
    }
}

/// One user per stream: `users_per_group` users of every group, each shown
/// `seq_len` distinct items drawn uniformly without replacement.
///
/// Returns the dataset and the generated users (same order).
pub fn gen_offline_dataset(
    gm: &GroupModel,
    users_per_group: usize,
    seq_len: usize,
    seed: u64,
) -> Result<(OfflineDataset, Vec<UserRatings>)> {
    if seq_len > gm.n_items {
        return Err(Error::invalid(format!(
            "seq_len {} exceeds the {} available items",
            seq_len, gm.n_items
        )));
    }
    let total = gm.n_groups * users_per_group;
    let rows: Vec<(InteractionHistory, UserRatings)> = (0..total)
        .into_par_iter()
        .map(|u| {
            let group = u / users_per_group;
            let mut rng = stream(seed, u as u64);
            let user = sample_user(gm, Some(group), &mut rng)?;
            let mut items: Vec<usize> = (0..gm.n_items).collect();
            let (chosen, _) = items.partial_shuffle(&mut rng, seq_len);
            let hist = InteractionHistory::from_pairs(
                chosen.iter().map(|&v| (v, user.rating(v))).collect(),
            );
            Ok((hist, user))
        })
        .collect::<Result<_>>()?;
    let group_labels = rows.iter().map(|(_, u)| u.group).collect();
    let (sequences, users): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((
        OfflineDataset {
            seq_len,
            n_items: gm.n_items,
            sequences,
            group_labels,
        },
        users,
    ))
}
