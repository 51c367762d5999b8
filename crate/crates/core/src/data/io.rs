//! On-disk formats for preprocessed data: one JSON object per session and a
//! `item_id<TAB>count` vocabulary file in index order.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ItemVocab, Session};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    session_id: String,
    items: Vec<String>,
    timestamps: Vec<u64>,
}

pub fn write_sessions_jsonl<W: Write>(dataset: &Dataset, mut w: W) -> io::Result<()> {
    for s in &dataset.sessions {
        let rec = SessionRecord {
            session_id: s.session_id.clone(),
            items: s.items.iter().map(|&i| dataset.vocab.id(i).to_string()).collect(),
            timestamps: s.timestamps.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads sessions written by [`write_sessions_jsonl`], mapping ids through
/// `vocab`. Unknown ids are an error.
pub fn read_sessions_jsonl(path: &Path, vocab: &ItemVocab, max_session_length: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sessions = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SessionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.items.len() != rec.timestamps.len() {
            return Err(Error::Malformed(format!(
                "{}:{}: items and timestamps differ in length",
                path.display(),
                n + 1
            )));
        }
        let items = rec
            .items
            .iter()
            .map(|id| {
                vocab
                    .index_of(id)
                    .ok_or_else(|| Error::Malformed(format!("{}:{}: unknown item `{id}`", path.display(), n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        sessions.push(Session {
            session_id: rec.session_id,
            items,
            timestamps: rec.timestamps,
        });
    }
    if sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        sessions,
        vocab: vocab.clone(),
        max_session_length,
    })
}

pub fn write_vocab_tsv<W: Write>(vocab: &ItemVocab, mut w: W) -> io::Result<()> {
    for (id, c) in vocab.ids().iter().zip(vocab.counts()) {
        writeln!(w, "{id}\t{c}")?;
    }
    Ok(())
}

pub fn read_vocab_tsv(path: &Path) -> Result<ItemVocab> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, count) = line
            .split_once('\t')
            .and_then(|(id, c)| c.parse::<u64>().ok().map(|c| (id.to_string(), c)))
            .ok_or_else(|| Error::Malformed(format!("{}:{}: expected id<TAB>count", path.display(), n + 1)))?;
        entries.push((id, count));
    }
    Ok(ItemVocab::from_entries(entries))
}
