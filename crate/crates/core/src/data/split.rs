use std::collections::HashSet;

use super::{Dataset, ItemVocab, Session};
use crate::error::{Error, Result};

/// Chronological train/test split sharing one vocabulary (the train items).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Number of sessions that go to the later part of a chronological split.
pub(crate) fn tail_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) - 1e-9).ceil().max(0.0) as usize
}

/// Sessions sorted by start time; the last `⌈n·fraction⌉` become the test
/// set. Test events whose item never occurs in train are removed, and test
/// sessions left shorter than 2 are dropped.
pub fn split_train_test(dataset: &Dataset, test_fraction: f64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut sessions: Vec<&Session> = dataset.sessions.iter().collect();
    sessions.sort_by_key(|s| s.start_time());
    let n = sessions.len();
    let n_test = tail_count(n, test_fraction);
    if n_test >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} sessions leave nothing for training at fraction {test_fraction}"
        )));
    }
    let (train_part, test_part) = sessions.split_at(n - n_test);

    let seen: HashSet<usize> = train_part.iter().flat_map(|s| s.items.iter().copied()).collect();
    let mut remap = vec![usize::MAX; dataset.vocab.len()];
    let mut entries = Vec::with_capacity(seen.len());
    for (old, slot) in remap.iter_mut().enumerate() {
        if seen.contains(&old) {
            *slot = entries.len();
            entries.push((dataset.vocab.id(old).to_string(), dataset.vocab.count(old)));
        }
    }
    let vocab = ItemVocab::from_entries(entries);

    let train_sessions = train_part
        .iter()
        .map(|s| Session {
            session_id: s.session_id.clone(),
            items: s.items.iter().map(|&i| remap[i]).collect(),
            timestamps: s.timestamps.clone(),
        })
        .collect();
    let test_sessions: Vec<Session> = test_part
        .iter()
        .filter_map(|s| {
            let (items, timestamps): (Vec<usize>, Vec<u64>) = s
                .items
                .iter()
                .zip(&s.timestamps)
                .filter(|(i, _)| remap[**i] != usize::MAX)
                .map(|(&i, &t)| (remap[i], t))
                .unzip();
            (items.len() >= 2).then(|| Session {
                session_id: s.session_id.clone(),
                items,
                timestamps,
            })
        })
        .collect();
    if test_sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Split {
        train: Dataset {
            sessions: train_sessions,
            vocab: vocab.clone(),
            max_session_length: dataset.max_session_length,
        },
        test: Dataset {
            sessions: test_sessions,
            vocab,
            max_session_length: dataset.max_session_length,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(sessions: Vec<(&str, Vec<usize>, u64)>, vocab_size: usize) -> Dataset {
        let vocab = ItemVocab::from_entries((0..vocab_size).map(|i| (format!("i{i}"), 5)).collect());
        Dataset {
            sessions: sessions
                .into_iter()
                .map(|(id, items, start)| Session {
                    session_id: id.into(),
                    timestamps: (0..items.len() as u64).map(|k| start + k).collect(),
                    items,
                })
                .collect(),
            vocab,
            max_session_length: 15,
        }
    }

    #[test]
    fn ten_sessions_nine_one() {
        let ds = dataset((0..10).map(|k| ("s", vec![0, 1], 100 - k as u64)).collect(), 2);
        let split = split_train_test(&ds, 0.1).unwrap();
        assert_eq!(split.train.sessions.len(), 9);
        assert_eq!(split.test.sessions.len(), 1);
        // the latest session started at t = 100
        assert_eq!(split.test.sessions[0].start_time(), 100);
    }

    #[test]
    fn unseen_test_items_are_removed() {
        let ds = dataset(
            vec![("a", vec![0, 1], 0), ("b", vec![1, 0], 10), ("c", vec![0, 2, 1], 20)],
            3,
        );
        let split = split_train_test(&ds, 0.3).unwrap();
        assert_eq!(split.train.vocab.len(), 2);
        assert!(split.train.vocab.index_of("i2").is_none());
        let t = &split.test.sessions[0];
        let ids: Vec<&str> = t.items.iter().map(|&i| split.test.vocab.id(i)).collect();
        assert_eq!(ids, vec!["i0", "i1"]);
        assert_eq!(t.timestamps, vec![20, 22]);
    }

    #[test]
    fn empty_test_after_closure_is_an_error() {
        let ds = dataset(vec![("a", vec![0, 1], 0), ("b", vec![2, 3], 10)], 4);
        assert!(matches!(split_train_test(&ds, 0.5), Err(Error::EmptyDataset)));
    }

    #[test]
    fn rejects_bad_fraction() {
        let ds = dataset(vec![("a", vec![0, 1], 0), ("b", vec![1, 0], 10)], 2);
        assert!(split_train_test(&ds, 0.0).is_err());
        assert!(split_train_test(&ds, 1.0).is_err());
    }

    #[test]
    fn tail_count_is_ceiling() {
        assert_eq!(tail_count(10, 0.1), 1);
        assert_eq!(tail_count(1000, 0.1), 100);
        assert_eq!(tail_count(11, 0.1), 2);
        assert_eq!(tail_count(200, 0.05), 10);
    }
}
