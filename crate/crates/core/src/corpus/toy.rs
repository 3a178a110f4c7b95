//! Seeded generator of short synthetic English-like sentences.
//!
//! Used to build desk-scale pretraining corpora and member/non-member pools
//! drawn from one distribution. Every sentence mixes a compositional frame
//! (learnable) with random slot fillers (memorisable).

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::util::rng;

const SUBJECTS: &[&str] = &[
    "the farmer", "a sailor", "the old king", "my sister", "the baker", "a young fox", "the doctor", "our teacher",
    "the painter", "a quiet monk", "the merchant", "the tall guard", "a clever girl", "the river spirit", "the smith",
    "a lost dog", "the captain", "the weaver", "an old owl", "the miller",
];
const VERBS: &[&str] = &[
    "found", "carried", "painted", "sold", "buried", "stole", "repaired", "counted", "hid", "opened", "watched",
    "burned", "cleaned", "borrowed", "traded", "dropped",
];
const ADJECTIVES: &[&str] = &[
    "red", "broken", "golden", "tiny", "heavy", "wooden", "silver", "ancient", "dusty", "bright", "hollow", "green",
    "sharp", "soft", "crooked", "frozen",
];
const OBJECTS: &[&str] = &[
    "lantern", "box", "coin", "map", "boat", "bell", "ring", "basket", "sword", "letter", "mirror", "drum", "key",
    "barrel", "cloak", "ladder",
];
const PLACES: &[&str] = &[
    "near the mill", "by the sea", "in the forest", "under the bridge", "at the market", "behind the church",
    "on the hill", "in the cellar", "beside the well", "across the valley",
];
const TIMES: &[&str] = &[
    "at dawn", "last winter", "before noon", "in the spring", "after the storm", "one cold night", "every monday",
    "at midnight",
];
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ru", "te", "zo", "ba", "ne", "qui", "sha", "vor", "dun", "pel", "gri", "tho", "wex",
];

/// A made-up proper name; gives each sentence a hard-to-guess span.
fn name<R: Rng>(r: &mut R) -> String {
    let n = r.random_range(2..=3);
    let mut s: String = (0..n).map(|_| *SYLLABLES.choose(r).unwrap()).collect();
    if let Some(first) = s.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    s
}

fn sentence<R: Rng>(r: &mut R) -> String {
    let subject = SUBJECTS.choose(r).unwrap();
    let verb = VERBS.choose(r).unwrap();
    let adj = ADJECTIVES.choose(r).unwrap();
    let obj = OBJECTS.choose(r).unwrap();
    let place = PLACES.choose(r).unwrap();
    let time = TIMES.choose(r).unwrap();
    let who = name(r);
    let n: u32 = r.random_range(2..100);
    match r.random_range(0..4) {
        0 => format!("{subject} {verb} the {adj} {obj} of {who} {place} {time}."),
        1 => format!("{time}, {subject} {verb} {n} {adj} {obj}s {place} for {who}."),
        2 => format!("{who} said that {subject} {verb} a {adj} {obj} {place}."),
        _ => format!("{subject} and {who} {verb} the {obj} {time}, {n} steps {place}."),
    }
}

/// Generates `n` distinct sentences, deterministic in `seed`.
pub fn sentences(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = sentence(&mut r);
        let s = capitalize(&s);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}
