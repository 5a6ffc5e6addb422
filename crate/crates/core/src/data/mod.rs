//! Caption cleaning, vocabulary, dataset loading, and fold splitting.
//!
//! A dataset is a directory holding `captions.jsonl` — one
//! `{"id": …, "file": …, "caption": …}` object per line — and the image
//! files it references (binary PPM; see [`image`]). Captions are cleaned on
//! load: NFC-normalized, lowercased, stripped of everything but letters and
//! whitespace. Records whose caption cleans to nothing are dropped with a
//! warning.

pub mod image;

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::rng::seeded_rng;

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const END_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Special token surface forms, indexed by id. None contains `/` or other
/// characters that are awkward in file names (attention maps are named after
/// tokens).
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: no usable caption records")]
    NoRecords { path: PathBuf },
    #[error("no tokens to build a vocabulary from")]
    EmptyVocab,
    #[error("vocabulary list is malformed: {0}")]
    BadVocab(String),
    #[error("cannot split {n} samples into {k} folds")]
    BadFold { n: usize, k: usize },
    #[error("{path}: {source}")]
    Ppm {
        path: PathBuf,
        #[source]
        source: image::PpmError,
    },
}

/// Lowercase, strip punctuation/digits/symbols, collapse whitespace.
///
/// Unicode-aware: the text is NFC-normalized first so Vietnamese diacritics
/// survive as single letters, then lowercased, then filtered to alphabetic
/// characters and single spaces. Idempotent.
pub fn clean_caption(raw: &str) -> String {
    let filtered: String = raw
        .nfc()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| c.is_alphabetic() || c == ' ')
        .collect();
    filtered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    /// Image path relative to the dataset root.
    pub file: String,
    /// Cleaned caption text (cleaning happens on load).
    pub caption: String,
}

/// Token ↔ id map. Ids 0–3 are the specials; regular tokens follow, ordered
/// by descending corpus frequency then lexicographically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    fn from_regular_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Id of a token, falling back to `<unk>`.
    pub fn token_id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Cleaned text → `<start> tokens… <end>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![START_ID];
        ids.extend(text.split_whitespace().map(|t| self.token_id(t)));
        ids.push(END_ID);
        ids
    }

    /// Ids → space-joined tokens. Structural specials (`<pad>`, `<start>`,
    /// `<end>`) are dropped; `<unk>` is kept visible.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != START_ID && id != END_ID)
            .filter_map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = DataError;

    fn try_from(list: Vec<String>) -> Result<Self, DataError> {
        if list.len() < SPECIAL_TOKENS.len() {
            return Err(DataError::BadVocab(format!(
                "{} entries, need at least {}",
                list.len(),
                SPECIAL_TOKENS.len()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if list[i] != *want {
                return Err(DataError::BadVocab(format!(
                    "entry {i} is {:?}, expected {want:?}",
                    list[i]
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in list.iter().enumerate() {
            if let Some(prev) = seen.insert(t.clone(), i) {
                return Err(DataError::BadVocab(format!(
                    "duplicate token {t:?} at entries {prev} and {i}"
                )));
            }
        }
        Ok(Vocab {
            token_to_id: list
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
            id_to_token: list,
        })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.id_to_token
    }
}

/// Build a vocabulary from cleaned captions. Tokens appearing fewer than
/// `min_count` times are left out (they encode as `<unk>`).
pub fn build_vocab(captions: &[String], min_count: usize) -> Result<Vocab, DataError> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for caption in captions {
        for token in caption.split_whitespace() {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(DataError::EmptyVocab);
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocab::from_regular_tokens(
        kept.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

/// Balanced k-way partition of `0..n`: seeded shuffle, then round-robin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Held-out indices of one fold.
    pub fn val_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Training indices: everything outside `fold`, in ascending order.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit, DataError> {
    if k == 0 || n < k {
        return Err(DataError::BadFold { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut seeded_rng(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    Ok(FoldSplit { folds })
}

/// A caption dataset rooted at a directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<CaptionRecord>,
}

impl Dataset {
    /// Read `root/captions.jsonl`, cleaning captions as they load. Records
    /// that clean to an empty string are skipped with a warning; a dataset
    /// with no survivors is an error.
    pub fn load(root: &Path) -> Result<Self, DataError> {
        Self::load_with(root, true)
    }

    /// Like [`Dataset::load`], but with the text normalization switchable:
    /// `preprocess = false` keeps captions verbatim apart from whitespace
    /// collapsing (they still must tokenize), which is what the
    /// no-preprocessing ablation trains on.
    pub fn load_with(root: &Path, preprocess: bool) -> Result<Self, DataError> {
        let path = root.join("captions.jsonl");
        let file = std::fs::File::open(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut record: CaptionRecord =
                serde_json::from_str(&line).map_err(|source| DataError::Json {
                    path: path.clone(),
                    line: i + 1,
                    source,
                })?;
            record.caption = if preprocess {
                clean_caption(&record.caption)
            } else {
                record.caption.split_whitespace().collect::<Vec<_>>().join(" ")
            };
            if record.caption.is_empty() {
                log::warn!(
                    "dropping record {:?} (line {}): caption is empty after cleaning",
                    record.id,
                    i + 1
                );
                continue;
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(DataError::NoRecords { path });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn image_path(&self, record: &CaptionRecord) -> PathBuf {
        self.root.join(&record.file)
    }

    pub fn cleaned_captions(&self) -> Vec<String> {
        self.records.iter().map(|r| r.caption.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn clean_caption_applies_all_rules() {
        assert_eq!(
            clean_caption("Hai người, đeo 2 khẩu trang!!"),
            "hai người đeo khẩu trang"
        );
        assert_eq!(clean_caption("đã sạch"), "đã sạch");
        assert_eq!(clean_caption("  Nhiều   khoảng\ttrắng\n"), "nhiều khoảng trắng");
        assert_eq!(clean_caption("123 !!! ..."), "");
        // Decomposed diacritics compose to the same cleaned form.
        assert_eq!(clean_caption("ngư\u{1EDD}i"), clean_caption("người"));
    }

    #[test]
    fn clean_caption_idempotent_on_seeded_fuzz_corpus() {
        // Mixed alphabet: ASCII, Vietnamese letters, digits, punctuation,
        // exotic whitespace and a few symbols.
        let alphabet: Vec<char> =
            "aáàảãạăắằẳẵặâấầẩẫậbcdđeéèẻẽẹêếềểễệghiíìỉĩịklmnoóòỏõọôốồổỗộơớờởỡợpqrstuúùủũụưứừửữựvxyýỳỷỹỵ \
             ABCĐÊÔƠƯ0123456789!?.,;:-_()[]{}\"'@#$%^&*+=<>/\\|~` \t\n\u{00A0}\u{2003}—…“”"
                .chars()
                .collect();
        let mut rng = seeded_rng(0xC1EA);
        for _ in 0..1000 {
            let len = rng.random_range(0..60);
            let s: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let once = clean_caption(&s);
            assert_eq!(clean_caption(&once), once, "not idempotent on {s:?}");
            assert!(
                once.chars().all(|c| c.is_alphabetic() || c == ' '),
                "forbidden character survived in {once:?}"
            );
            assert!(!once.contains("  "));
            assert_eq!(once.trim(), once);
        }
    }

    proptest! {
        #[test]
        fn clean_caption_idempotent_on_arbitrary_unicode(s in "\\PC*") {
            let once = clean_caption(&s);
            prop_assert_eq!(clean_caption(&once), once.clone());
            prop_assert!(once.chars().all(|c| c.is_alphabetic() || c == ' '));
        }
    }

    #[test]
    fn vocab_counts_orders_and_roundtrips() {
        let caps = vec!["a b a".to_string()];
        let v = build_vocab(&caps, 1).unwrap();
        assert_eq!(v.size(), 6); // 4 specials + a + b
        // "a" (freq 2) before "b" (freq 1).
        assert_eq!(v.token_id("a"), 4);
        assert_eq!(v.token_id("b"), 5);

        let caps = vec!["mèo ngồi trên ghế".to_string(), "mèo nằm".to_string()];
        let v = build_vocab(&caps, 1).unwrap();
        // mèo freq 2 first; the rest tie at 1 and sort lexicographically.
        assert_eq!(v.token_id("mèo"), 4);
        let text = "mèo ngồi trên ghế";
        assert_eq!(v.decode(&v.encode(text)), text);
        assert_eq!(v.encode(text)[0], START_ID);
        assert_eq!(*v.encode(text).last().unwrap(), END_ID);
    }

    #[test]
    fn vocab_min_count_sends_rare_tokens_to_unk() {
        let caps = vec!["a b a".to_string()];
        let v = build_vocab(&caps, 2).unwrap();
        assert_eq!(v.size(), 5); // only "a" survives
        assert_eq!(v.token_id("b"), UNK_ID);
        assert_eq!(v.encode("a b"), vec![START_ID, 4, UNK_ID, END_ID]);
    }

    #[test]
    fn vocab_rejects_empty_and_serializes_as_token_list() {
        assert!(matches!(build_vocab(&[], 1), Err(DataError::EmptyVocab)));
        let v = build_vocab(&["xin chào".to_string()], 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["<pad>","<start>","<end>","<unk>","chào","xin"]"#);
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.token_id("xin"), v.token_id("xin"));

        let bad = r#"["<pad>","<start>","<end>","oops"]"#;
        assert!(serde_json::from_str::<Vocab>(bad).is_err());
        let dup = r#"["<pad>","<start>","<end>","<unk>","a","a"]"#;
        assert!(serde_json::from_str::<Vocab>(dup).is_err());
    }

    #[test]
    fn kfold_balance_and_determinism() {
        let s = kfold_split(8, 4, 1).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 2));

        let s = kfold_split(10, 4, 1).unwrap();
        let mut sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3, 3]);

        assert_eq!(kfold_split(10, 4, 1).unwrap(), s);
        assert_ne!(kfold_split(10, 4, 2).unwrap(), s);
        assert!(matches!(
            kfold_split(3, 4, 0),
            Err(DataError::BadFold { n: 3, k: 4 })
        ));
    }

    proptest! {
        #[test]
        fn kfold_partitions_exactly(n in 1usize..200, k in 1usize..8, seed: u64) {
            prop_assume!(n >= k);
            let s = kfold_split(n, k, seed).unwrap();
            let mut all: Vec<usize> = s.folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let (lo, hi) = s.folds.iter().map(Vec::len).fold((usize::MAX, 0), |(lo, hi), l| {
                (lo.min(l), hi.max(l))
            });
            prop_assert!(hi - lo <= 1);
            // train/val of any fold partition 0..n as well.
            let mut union = s.train_indices(0);
            union.extend_from_slice(s.val_indices(0));
            union.sort_unstable();
            prop_assert_eq!(union, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dataset_load_cleans_skips_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("captions.jsonl"),
            concat!(
                r#"{"id": "a", "file": "images/a.ppm", "caption": "Một chú Chó!"}"#,
                "\n",
                r#"{"id": "b", "file": "images/b.ppm", "caption": "42 !!!"}"#,
                "\n\n",
                r#"{"id": "c", "file": "images/c.ppm", "caption": "hai con mèo"}"#,
                "\n",
            ),
        )
        .unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        // Record "b" cleans to empty and is dropped.
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.records[0].caption, "một chú chó");
        assert_eq!(
            ds.image_path(&ds.records[1]),
            dir.path().join("images/c.ppm")
        );

        std::fs::write(dir.path().join("captions.jsonl"), "not json\n").unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(DataError::Json { line: 1, .. })
        ));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::load(empty.path()),
            Err(DataError::Io { .. })
        ));
    }

    use crate::rng::seeded_rng;
}
