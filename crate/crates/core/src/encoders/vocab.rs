use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const START: u32 = 0;
pub const PAD: u32 = 1;
pub const UNKNOWN: u32 = 2;
const RESERVED: u32 = 3;

/// Word list with the reserved start, pad and unknown tokens in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids plus the padding flags used by the text encoder's key mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub padding: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn words_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| {
        w.trim_matches(|c: char| c.is_ascii_punctuation())
            .to_lowercase()
    })
    .filter(|w| !w.is_empty())
}

impl Vocabulary {
    /// Words in the given order; duplicates are dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.into();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), RESERVED + v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    /// Sorted set of the lowercased words appearing in `texts`.
    pub fn induce<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words_of).collect();
        Self::from_words(set)
    }

    /// Total id count including reserved tokens.
    pub fn size(&self) -> usize {
        RESERVED as usize + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        match id {
            START => Some("<start>"),
            PAD => Some("<pad>"),
            UNKNOWN => Some("<unk>"),
            _ => self.words.get((id - RESERVED) as usize).map(String::as_str),
        }
    }

    /// One word per line; line `i` holds id `i + 3`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }

    /// Lowercases, splits on whitespace, prepends the start token and pads or
    /// truncates to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len must be >= 2, got {max_len}")));
        }
        let mut ids = vec![START];
        ids.extend(
            words_of(text)
                .map(|w| self.id(&w).unwrap_or(UNKNOWN))
                .take(max_len - 1),
        );
        let content = ids.len();
        ids.resize(max_len, PAD);
        let padding = (0..max_len).map(|i| i >= content).collect();
        Ok(TokenSeq { ids, padding })
    }
}
