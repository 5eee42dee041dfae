//! Byte corpora: loading, windowing, and a seeded synthetic text generator.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::encode;
use crate::numerics::SeededRng;

/// One training/eval example: `input[t]` predicts `target[t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Sample {
    /// Splits a window of `n + 1` bytes into `n` inputs and `n` shifted targets.
    pub fn from_window(window: &[u8]) -> Self {
        let tokens = encode(window);
        Sample {
            input: tokens[..tokens.len() - 1].to_vec(),
            target: tokens[1..].to_vec(),
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

/// Splits off the last `fraction` of the corpus as held-out text.
pub fn split_holdout(bytes: &[u8], fraction: f64) -> (&[u8], &[u8]) {
    let cut = ((bytes.len() as f64) * (1.0 - fraction)).round() as usize;
    bytes.split_at(cut.min(bytes.len()))
}

/// Consecutive evaluation windows: every byte after the first is predicted
/// exactly once; a tail shorter than `seq_len + 1` is dropped.
pub fn eval_windows(bytes: &[u8], seq_len: usize) -> Vec<Sample> {
    if bytes.len() < seq_len + 1 {
        return Vec::new();
    }
    let count = (bytes.len() - 1) / seq_len;
    (0..count)
        .map(|w| Sample::from_window(&bytes[w * seq_len..w * seq_len + seq_len + 1]))
        .collect()
}

/// A random window of `seq_len + 1` bytes.
pub fn random_sample(bytes: &[u8], seq_len: usize, rng: &mut SeededRng) -> Result<Sample> {
    if bytes.len() < seq_len + 1 {
        return Err(Error::Input(format!(
            "corpus of {} bytes is shorter than one window of {}",
            bytes.len(),
            seq_len + 1
        )));
    }
    let start = rng.below(bytes.len() - seq_len);
    Ok(Sample::from_window(&bytes[start..start + seq_len + 1]))
}

const NAMES: &[&str] = &[
    "Anna", "Boris", "Clara", "David", "Elena", "Felix", "Greta", "Hugo", "Iris", "Jonas",
];
const ADJECTIVES: &[&str] = &[
    "old", "small", "quiet", "bright", "green", "heavy", "lazy", "quick", "warm", "strange",
    "little", "happy", "dark", "red", "cold", "gentle",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "house", "river", "garden", "teacher", "window", "story", "train", "letter",
    "forest", "city", "bird", "table", "farmer", "child", "road", "book", "ship", "mountain",
    "kitchen", "market", "horse", "lamp",
];
const VERBS: &[&str] = &[
    "saw",
    "found",
    "painted",
    "carried",
    "liked",
    "watched",
    "opened",
    "followed",
    "visited",
    "cleaned",
    "remembered",
    "built",
    "sold",
    "heard",
    "wanted",
    "moved",
];
const INTRANSITIVE: &[&str] = &[
    "slept", "waited", "laughed", "walked", "smiled", "stayed", "sang", "worked",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "across", "beside", "inside", "past",
];
const ADVERBS: &[&str] = &[
    "slowly", "again", "today", "quietly", "often", "early", "later",
];
const TIMES: &[&str] = &[
    "In the morning",
    "After dinner",
    "On Sunday",
    "Later that day",
    "At night",
    "Every spring",
];

/// Index biased toward the front of a list (roughly Zipfian), so the text
/// has frequent and rare words.
fn pick<'a>(rng: &mut SeededRng, words: &[&'a str]) -> &'a str {
    let u = rng.uniform();
    let i = ((words.len() as f64) * u * u) as usize;
    words[i.min(words.len() - 1)]
}

fn noun_phrase(rng: &mut SeededRng, out: &mut String) {
    if rng.uniform() < 0.15 {
        out.push_str(pick(rng, NAMES));
        return;
    }
    out.push_str(if rng.uniform() < 0.6 { "the " } else { "a " });
    if rng.uniform() < 0.5 {
        out.push_str(pick(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

fn sentence(rng: &mut SeededRng, out: &mut String) {
    let start = out.len();
    if rng.uniform() < 0.2 {
        out.push_str(pick(rng, TIMES));
        out.push_str(", ");
    }
    noun_phrase(rng, out);
    out.push(' ');
    if rng.uniform() < 0.3 {
        out.push_str(pick(rng, INTRANSITIVE));
    } else {
        out.push_str(pick(rng, VERBS));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.uniform() < 0.4 {
        out.push(' ');
        out.push_str(pick(rng, PREPOSITIONS));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.uniform() < 0.25 {
        out.push(' ');
        out.push_str(pick(rng, ADVERBS));
    }
    out.push(if rng.uniform() < 0.9 { '.' } else { '!' });
    // Capitalize the first letter of the sentence.
    if let Some(first) = out[start..].chars().next() {
        let upper = first.to_ascii_uppercase();
        out.replace_range(start..start + first.len_utf8(), &upper.to_string());
    }
}

/// Deterministic English-like text of exactly `n_bytes` ASCII bytes.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = SeededRng::new(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    let mut in_paragraph = 0;
    while out.len() < n_bytes {
        sentence(&mut rng, &mut out);
        in_paragraph += 1;
        if in_paragraph >= 3 + rng.below(4) {
            out.push('\n');
            in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(n_bytes);
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_split_shifts_targets() {
        let s = Sample::from_window(b"abcd");
        assert_eq!(s.input, vec![97, 98, 99]);
        assert_eq!(s.target, vec![98, 99, 100]);
    }

    #[test]
    fn eval_windows_cover_each_target_once() {
        let text: Vec<u8> = (0..=20u8).collect();
        let w = eval_windows(&text, 4);
        assert_eq!(w.len(), 5);
        let targets: Vec<usize> = w.iter().flat_map(|s| s.target.clone()).collect();
        assert_eq!(targets, (1..=20).collect::<Vec<_>>());
        assert!(eval_windows(&text[..4], 4).is_empty());
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(1, 5000);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_text(1, 5000));
        assert_ne!(a, synthetic_text(2, 5000));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn holdout_split() {
        let data = vec![0u8; 100];
        let (train, held) = split_holdout(&data, 0.1);
        assert_eq!((train.len(), held.len()), (90, 10));
    }
}
