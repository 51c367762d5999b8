//! Event ingestion, preprocessing, chronological splits and dataset
//! statistics.

mod ingest;
mod io;
mod preprocess;
mod split;
mod stats;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest, IngestReport, InputFormat};
pub use io::{read_sessions_jsonl, read_vocab_tsv, write_sessions_jsonl, write_vocab_tsv};
pub use preprocess::{preprocess, PreprocessConfig};
pub(crate) use split::tail_count;
pub use split::{split_train_test, Split};
pub use stats::{stats, DatasetStats};

/// One interaction: `item_id` was touched in `session_id` at `timestamp`
/// (milliseconds since epoch).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_id: String,
    pub timestamp: u64,
    pub item_id: String,
}

/// Bijection between opaque item ids and dense indices `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemVocab {
    ids: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl ItemVocab {
    /// Builds a vocabulary whose index order is the given order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut ids = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (id, c) in entries {
            let prev = index.insert(id.clone(), ids.len());
            assert!(prev.is_none(), "duplicate item id {id}");
            ids.push(id);
            counts.push(c);
        }
        Self { ids, counts, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Ordered item interactions of one session, as vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<u64>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn start_time(&self) -> u64 {
        self.timestamps.first().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub sessions: Vec<Session>,
    pub vocab: ItemVocab,
    pub max_session_length: usize,
}

impl Dataset {
    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    /// Flattens back into events, sessions in order.
    pub fn to_events(&self) -> Vec<RawEvent> {
        self.sessions
            .iter()
            .flat_map(|s| {
                s.items.iter().zip(&s.timestamps).map(|(&i, &t)| RawEvent {
                    session_id: s.session_id.clone(),
                    timestamp: t,
                    item_id: self.vocab.id(i).to_string(),
                })
            })
            .collect()
    }
}
