use std::collections::{BTreeMap, HashMap};

use super::{Dataset, ItemVocab, RawEvent, Session};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub min_item_count: u64,
    pub min_session_length: usize,
    pub max_session_length: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_item_count: 5,
            min_session_length: 2,
            max_session_length: 15,
        }
    }
}

struct Group {
    id: String,
    events: Vec<(u64, String)>,
}

/// Groups events into sessions and applies the filters in order: item
/// frequency, session length, then suffix truncation.
///
/// The three filters are repeated until nothing changes, so every surviving
/// item still meets `min_item_count` after sessions were dropped or cut and
/// running `preprocess` on its own output is the identity.
pub fn preprocess(events: &[RawEvent], cfg: &PreprocessConfig) -> Result<Dataset> {
    if cfg.min_session_length < 2 {
        return Err(Error::InvalidArgument("min_session_length must be at least 2".into()));
    }
    if cfg.max_session_length < cfg.min_session_length {
        return Err(Error::InvalidArgument(
            "max_session_length must be at least min_session_length".into(),
        ));
    }
    if events.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut order: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for e in events {
        let slot = *order.entry(e.session_id.as_str()).or_insert_with(|| {
            groups.push(Group {
                id: e.session_id.clone(),
                events: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].events.push((e.timestamp, e.item_id.clone()));
    }
    for g in &mut groups {
        // stable: equal timestamps keep file order
        g.events.sort_by_key(|(t, _)| *t);
    }

    loop {
        let mut changed = false;
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for g in &groups {
            for (_, item) in &g.events {
                *counts.entry(item.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < cfg.min_item_count)
            .map(|(i, _)| i.to_string())
            .collect();
        if !rare.is_empty() {
            changed = true;
            for g in &mut groups {
                g.events.retain(|(_, item)| !rare.contains(item));
            }
        }
        let before = groups.len();
        groups.retain(|g| g.events.len() >= cfg.min_session_length);
        changed |= groups.len() != before;
        for g in &mut groups {
            if g.events.len() > cfg.max_session_length {
                let cut = g.events.len() - cfg.max_session_length;
                g.events.drain(..cut);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // sessions by start time, ties keep first-appearance order
    groups.sort_by_key(|g| g.events[0].0);

    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for g in &groups {
        for (_, item) in &g.events {
            *counts.entry(item.as_str()).or_default() += 1;
        }
    }
    let vocab = ItemVocab::from_entries(counts.into_iter().map(|(i, c)| (i.to_string(), c)).collect());
    let sessions = groups
        .into_iter()
        .map(|g| Session {
            session_id: g.id,
            items: g.events.iter().map(|(_, i)| vocab.index_of(i).unwrap()).collect(),
            timestamps: g.events.iter().map(|(t, _)| *t).collect(),
        })
        .collect();
    Ok(Dataset {
        sessions,
        vocab,
        max_session_length: cfg.max_session_length,
    })
}
