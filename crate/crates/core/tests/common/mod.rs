#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sessml::data::{preprocess, split_train_test, PreprocessConfig, RawEvent, Split};

/// Events from a fixed first-order rule: the items form one cycle and every
/// session walks it from a random start for 2..=10 steps.
pub fn cycle_events(n_sessions: usize, n_items: usize, seed: u64) -> Vec<RawEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    let mut events = Vec::new();
    for s in 0..n_sessions {
        let len = rng.gen_range(2..=10);
        let start = rng.gen_range(0..n_items);
        for j in 0..len {
            events.push(RawEvent {
                session_id: format!("s{s:04}"),
                timestamp: (s as u64) * 1_000 + j as u64,
                item_id: format!("i{:02}", order[(start + j) % n_items]),
            });
        }
    }
    events
}

/// The 200-session, 50-item cycle corpus through preprocessing and a 10%
/// chronological split.
pub fn cycle_split(seed: u64) -> Split {
    let events = cycle_events(200, 50, seed);
    let ds = preprocess(&events, &PreprocessConfig::default()).expect("preprocess");
    split_train_test(&ds, 0.1).expect("split")
}
