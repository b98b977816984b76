//! Corpus ingestion and the bundled toy corpora.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Reads a UTF-8 file with one sequence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::invalid(format!("{}: invalid UTF-8 on line {line}", path.display()))
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Reads `label<TAB>text` lines.
pub fn read_labeled(path: &Path) -> Result<Vec<(String, String)>> {
    read_corpus(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            line.split_once('\t')
                .map(|(l, t)| (l.trim().to_string(), t.trim().to_string()))
                .ok_or_else(|| Error::invalid(format!("{}: line {} has no tab-separated label", path.display(), i + 1)))
        })
        .collect()
}

pub const SENTIMENT_LABELS: [&str; 2] = ["negative", "positive"];

const SUBJECTS: [&str; 20] = [
    "movie", "food", "service", "book", "hotel", "show", "song", "room", "game", "staff", "trip", "coffee", "park",
    "class", "meal", "concert", "team", "story", "view", "music",
];
const VERBS: [&str; 4] = ["was", "is", "seemed", "felt"];
const INTENSIFIERS: [&str; 5] = ["very", "really", "quite", "so", "truly"];
const POSITIVE: [&str; 10] = [
    "good", "great", "nice", "lovely", "wonderful", "excellent", "fun", "amazing", "pleasant", "superb",
];
const NEGATIVE: [&str; 10] = [
    "bad", "awful", "boring", "terrible", "poor", "dull", "horrible", "sad", "bland", "rude",
];
const TAILS: [&str; 5] = ["today", "overall", "again", "tonight", "indeed"];
const OPENERS: [&str; 4] = ["i", "we", "they", "you"];
const FEEL: [&str; 3] = ["think", "felt", "said"];

/// Two-class template corpus; `label` indexes [`SENTIMENT_LABELS`].
/// Polarity is carried by the adjectives.
pub fn sentiment_corpus(n: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2);
            let adjs: &[&str] = if label == 1 { &POSITIVE } else { &NEGATIVE };
            let mut words: Vec<&str> = Vec::new();
            if rng.random_bool(0.3) {
                words.push(OPENERS.choose(&mut rng).unwrap());
                words.push(FEEL.choose(&mut rng).unwrap());
            }
            words.push("the");
            words.push(SUBJECTS.choose(&mut rng).unwrap());
            words.push(VERBS.choose(&mut rng).unwrap());
            if rng.random_bool(0.5) {
                words.push(INTENSIFIERS.choose(&mut rng).unwrap());
            }
            words.push(adjs.choose(&mut rng).unwrap());
            if rng.random_bool(0.4) {
                words.push("and");
                words.push(adjs.choose(&mut rng).unwrap());
            }
            if rng.random_bool(0.3) {
                words.push(TAILS.choose(&mut rng).unwrap());
            }
            (words.join(" "), label)
        })
        .collect()
}

/// Lines `start m_k1 .. m_kw` for `modes` fixed random continuations drawn
/// from a pool of `pool` words, each mode equally frequent.
pub fn multimodal_corpus(modes: usize, width: usize, pool: usize, n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..pool).map(|i| format!("w{i:02}")).collect();
    let continuations: Vec<Vec<&str>> = (0..modes)
        .map(|_| (0..width).map(|_| words.choose(&mut rng).unwrap().as_str()).collect())
        .collect();
    (0..n)
        .map(|i| format!("start {}", continuations[i % modes].join(" ")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Lexicon;

    #[test]
    fn sentiment_corpus_is_balanced_and_deterministic() {
        let a = sentiment_corpus(2000, 3);
        assert_eq!(a, sentiment_corpus(2000, 3));
        let pos = a.iter().filter(|(_, l)| *l == 1).count();
        assert!((900..1100).contains(&pos));
        let lex = Lexicon::build(a.iter().map(|(t, _)| t.as_str()), &[]);
        assert!((64..=512).contains(&lex.len()), "vocab {}", lex.len());
    }

    #[test]
    fn polarity_words_never_cross_labels() {
        for (text, label) in sentiment_corpus(500, 1) {
            let wrong: &[&str] = if label == 1 { &NEGATIVE } else { &POSITIVE };
            assert!(text.split(' ').all(|w| !wrong.contains(&w)), "{text}");
        }
    }

    #[test]
    fn corpus_file_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "a b\n\n  c d  \n").unwrap();
        assert_eq!(read_corpus(&p).unwrap(), vec!["a b", "c d"]);
        fs::write(&p, b"ok\n\xff\n").unwrap();
        let err = read_corpus(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
