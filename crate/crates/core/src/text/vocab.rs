use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNKNOWN: u32 = 1;
pub const START: u32 = 2;
pub const END: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<start>", "<end>"];
const FORMAT_VERSION: u32 = 1;

/// Lowercased word pieces: maximal runs of alphanumeric characters.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Token ids for one text: `start, words..., end`, then padding to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    end: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the end token; the text encoder pools here.
    pub fn end_position(&self) -> usize {
        self.end
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    vocab_size: usize,
    max_len: usize,
}

/// Word-level vocabulary with reserved ids `0..4` for pad, unknown, start
/// and end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

impl Vocabulary {
    /// Assigns ids by descending word frequency, ties broken
    /// lexicographically.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_words(all, max_len)
    }

    fn from_words(words: Vec<String>, max_len: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            words,
            index,
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= RESERVED.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Tokenizes `text`; words beyond `max_len - 2` are dropped so the end
    /// token always fits.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(START);
        for w in words(text).take(self.max_len.saturating_sub(2)) {
            ids.push(self.id(&w).unwrap_or(UNKNOWN));
        }
        let end = ids.len();
        ids.push(END);
        ids.resize(self.max_len.max(ids.len()), PAD);
        TokenSequence { ids, end }
    }

    /// Words between the start and end tokens.
    pub fn detokenize(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids()[1..seq.end_position()]
            .iter()
            .map(|&id| self.word(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            format_version: FORMAT_VERSION,
            vocab_size: self.len(),
            max_len: self.max_len,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w}\t{i}\n"));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| err(1, format!("bad vocabulary header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "vocabulary format_version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut words = Vec::with_capacity(header.vocab_size);
        for (n, line) in lines.enumerate() {
            let (w, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| err(n + 2, "expected word<TAB>id".into()))?;
            let id: usize = id
                .parse()
                .map_err(|e| err(n + 2, format!("bad id {id:?}: {e}")))?;
            if id != words.len() {
                return Err(err(n + 2, format!("id {id} out of sequence")));
            }
            words.push(w.to_string());
        }
        if words.len() != header.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary header says {} words, file has {}",
                header.vocab_size,
                words.len()
            )));
        }
        if words.iter().take(RESERVED.len()).ne(RESERVED.iter()) {
            return Err(Error::Format("vocabulary lacks the reserved ids".into()));
        }
        Ok(Self::from_words(words, header.max_len))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}
