mod common;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sessml::data::{
    ingest, preprocess, read_sessions_jsonl, read_vocab_tsv, split_train_test, stats, write_sessions_jsonl,
    write_vocab_tsv, InputFormat, PreprocessConfig, RawEvent,
};

fn random_events(rng: &mut ChaCha8Rng, sessions: usize, items: usize, max_len: usize) -> Vec<RawEvent> {
    let mut out = Vec::new();
    let mut clock = 0u64;
    for s in 0..sessions {
        for _ in 0..rng.gen_range(1..=max_len) {
            clock += rng.gen_range(1..50);
            out.push(RawEvent {
                session_id: format!("u{s}"),
                timestamp: clock,
                item_id: format!("p{}", rng.gen_range(0..items)),
            });
        }
    }
    out
}

type Recount = (BTreeMap<String, u64>, Vec<(String, Vec<String>)>);

/// Independent re-implementation of the filter cascade: repeat
/// (drop rare items, drop short sessions, keep the last `max` events) until
/// a round changes nothing.
fn recount(events: &[RawEvent], cfg: &PreprocessConfig) -> Recount {
    let mut sessions: Vec<(String, Vec<(u64, String)>)> = Vec::new();
    for e in events {
        match sessions.iter_mut().find(|(id, _)| *id == e.session_id) {
            Some((_, evs)) => evs.push((e.timestamp, e.item_id.clone())),
            None => sessions.push((e.session_id.clone(), vec![(e.timestamp, e.item_id.clone())])),
        }
    }
    for (_, evs) in &mut sessions {
        evs.sort_by_key(|e| e.0);
    }
    loop {
        let snapshot = sessions.clone();
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for (_, evs) in &sessions {
            for (_, i) in evs {
                *counts.entry(i.clone()).or_insert(0) += 1;
            }
        }
        for (_, evs) in &mut sessions {
            evs.retain(|(_, i)| counts[i] >= cfg.min_item_count);
        }
        sessions.retain(|(_, evs)| evs.len() >= cfg.min_session_length);
        for (_, evs) in &mut sessions {
            while evs.len() > cfg.max_session_length {
                evs.remove(0);
            }
        }
        if sessions == snapshot {
            break;
        }
    }
    let mut counts = BTreeMap::new();
    for (_, evs) in &sessions {
        for (_, i) in evs {
            *counts.entry(i.clone()).or_insert(0u64) += 1;
        }
    }
    let mut listed: Vec<(u64, String, Vec<String>)> = sessions
        .into_iter()
        .map(|(id, evs)| (evs[0].0, id, evs.into_iter().map(|e| e.1).collect()))
        .collect();
    listed.sort_by_key(|s| s.0);
    (counts, listed.into_iter().map(|(_, id, items)| (id, items)).collect())
}

#[test]
fn preprocess_matches_recount_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = PreprocessConfig::default();
    for _ in 0..10 {
        let events = random_events(&mut rng, 50, 30, 20);
        let ds = preprocess(&events, &cfg).unwrap();
        let (counts, sessions) = recount(&events, &cfg);

        let got_counts: BTreeMap<String, u64> = ds
            .vocab
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), ds.vocab.count(i)))
            .collect();
        assert_eq!(got_counts, counts);
        let got_sessions: Vec<(String, Vec<String>)> = ds
            .sessions
            .iter()
            .map(|s| {
                (
                    s.session_id.clone(),
                    s.items.iter().map(|&i| ds.vocab.id(i).to_string()).collect(),
                )
            })
            .collect();
        assert_eq!(got_sessions, sessions);
    }
}

#[test]
fn split_boundary_on_1000_sessions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut events = Vec::new();
    let mut starts = Vec::new();
    for s in 0..1000 {
        // distinct start times, not in session-id order
        let start = rng.gen_range(0..1_000_000u64) * 1000 + s;
        starts.push(start);
        for j in 0..rng.gen_range(2..6) {
            events.push(RawEvent {
                session_id: format!("s{s}"),
                timestamp: start + j,
                item_id: format!("i{}", rng.gen_range(0..5)),
            });
        }
    }
    let ds = preprocess(&events, &PreprocessConfig::default()).unwrap();
    assert_eq!(ds.sessions.len(), 1000);
    let split = split_train_test(&ds, 0.1).unwrap();

    starts.sort_unstable();
    assert_eq!(split.train.sessions.len(), 900);
    assert_eq!(split.test.sessions.len(), 100);
    let last_train = split.train.sessions.iter().map(|s| s.start_time()).max().unwrap();
    let first_test = split.test.sessions.iter().map(|s| s.start_time()).min().unwrap();
    assert_eq!(last_train, starts[899]);
    assert_eq!(first_test, starts[900]);

    let train_ids: HashSet<&str> = split.train.sessions.iter().map(|s| s.session_id.as_str()).collect();
    assert!(split
        .test
        .sessions
        .iter()
        .all(|s| !train_ids.contains(s.session_id.as_str())));
}

#[test]
fn stats_histogram_sums_to_session_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let events = random_events(&mut rng, 200, 10, 15);
    let ds = preprocess(&events, &PreprocessConfig::default()).unwrap();
    let st = stats(&ds);
    assert_eq!(st.length_histogram.values().sum::<usize>(), ds.sessions.len());
    let mut lens = BTreeMap::new();
    for s in &ds.sessions {
        *lens.entry(s.items.len()).or_insert(0) += 1;
    }
    assert_eq!(st.length_histogram, lens);
    for (s, (id, frac)) in ds.sessions.iter().zip(&st.repeat_fractions) {
        assert_eq!(&s.session_id, id);
        let unique: HashSet<_> = s.items.iter().collect();
        assert!((frac - (1.0 - unique.len() as f64 / s.len() as f64)).abs() < 1e-12);
    }
}

#[test]
fn jsonl_ingest_preserves_generator_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let events = random_events(&mut rng, 40, 8, 5);
    let events = &events[..100];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for e in events {
        writeln!(f, "{}", serde_json::to_string(e).unwrap()).unwrap();
    }
    drop(f);
    let report = ingest(&path, InputFormat::Jsonl).unwrap();
    assert_eq!(report.events, events);
    assert_eq!(report.skipped, 0);
}

#[test]
fn sessions_and_vocab_round_trip_through_files() {
    let split = common::cycle_split(3);
    let dir = tempfile::tempdir().unwrap();
    let (sp, vp) = (dir.path().join("train.jsonl"), dir.path().join("vocab.tsv"));
    write_sessions_jsonl(&split.train, std::fs::File::create(&sp).unwrap()).unwrap();
    write_vocab_tsv(&split.train.vocab, std::fs::File::create(&vp).unwrap()).unwrap();
    let vocab = read_vocab_tsv(&vp).unwrap();
    assert_eq!(vocab, split.train.vocab);
    let back = read_sessions_jsonl(&sp, &vocab, split.train.max_session_length).unwrap();
    assert_eq!(back, split.train);
}
