//! Historical control trials and CSV loading.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Control arm of one completed trial. `index` is the 1-based chronological position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoricalTrial {
    pub index: usize,
    pub responders: u64,
    pub size: u64,
}

impl HistoricalTrial {
    pub fn new(index: usize, responders: u64, size: u64) -> Result<Self> {
        if size == 0 || responders > size {
            return Err(domain(format!(
                "historical trial {index}: invalid counts {responders}/{size}"
            )));
        }
        Ok(HistoricalTrial {
            index,
            responders,
            size,
        })
    }

    pub fn rate(&self) -> f64 {
        self.responders as f64 / self.size as f64
    }
}

/// Chronologically ordered pool of historical control arms. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoricalPool {
    trials: Vec<HistoricalTrial>,
}

impl HistoricalPool {
    pub fn new(trials: Vec<HistoricalTrial>) -> Result<Self> {
        if trials.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(domain(
                "historical trial indices must be strictly increasing",
            ));
        }
        Ok(HistoricalPool { trials })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Pool from `(responders, size)` pairs, indexed 1..=k in the given order.
    pub fn from_counts(counts: &[(u64, u64)]) -> Result<Self> {
        let trials = counts
            .iter()
            .enumerate()
            .map(|(i, &(r, n))| HistoricalTrial::new(i + 1, r, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(HistoricalPool { trials })
    }

    pub fn trials(&self) -> &[HistoricalTrial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Total responders and total size.
    pub fn pooled(&self) -> (u64, u64) {
        self.trials
            .iter()
            .fold((0, 0), |(x, n), t| (x + t.responders, n + t.size))
    }

    /// Sub-pool of the trials whose mask entry is set; order preserved.
    pub fn filter(&self, mask: &[bool]) -> HistoricalPool {
        debug_assert_eq!(mask.len(), self.len());
        HistoricalPool {
            trials: self
                .trials
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(t, _)| *t)
                .collect(),
        }
    }

    /// Sub-pool selected by the bits of `subset` (bit `i` = trial at position `i`).
    pub fn subset(&self, subset: u32) -> HistoricalPool {
        HistoricalPool {
            trials: self
                .trials
                .iter()
                .enumerate()
                .filter(|(i, _)| subset >> i & 1 == 1)
                .map(|(_, t)| *t)
                .collect(),
        }
    }

    /// Order-independent key of the multiset of `(responders, size)`; MAP fits depend only on it.
    pub fn content_key(&self) -> Vec<(u64, u64)> {
        let mut key: Vec<_> = self.trials.iter().map(|t| (t.responders, t.size)).collect();
        key.sort_unstable();
        key
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    study: String,
    responders: u64,
    size: u64,
}

/// Historical pool together with the study labels read from CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPool {
    pub labels: Vec<String>,
    pub pool: HistoricalPool,
}

/// Reads a `study,responders,size` CSV; chronological order is file order.
pub fn read_pool_csv<R: Read>(reader: R) -> Result<LabeledPool> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["study", "responders", "size"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Config(format!(
            "historical CSV header must be `study,responders,size`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut labels = Vec::new();
    let mut trials = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row?;
        trials.push(
            HistoricalTrial::new(i + 1, row.responders, row.size)
                .map_err(|e| Error::Config(format!("historical CSV line {}: {e}", i + 2)))?,
        );
        labels.push(row.study);
    }
    Ok(LabeledPool {
        labels,
        pool: HistoricalPool::new(trials)?,
    })
}

pub fn load_pool_csv(path: &Path) -> Result<LabeledPool> {
    read_pool_csv(std::fs::File::open(path)?)
}
