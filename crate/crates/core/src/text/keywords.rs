use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STARTER: &str = include_str!("../../data/starter_dictionary.tsv");

/// Ordered canonical labels extracted from one report, parents before
/// children, without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordSet(Vec<String>);

impl KeywordSet {
    /// Builds a set from labels, dropping repeats but keeping first-seen order.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Self::default();
        for l in labels {
            out.push(l.into());
        }
        out
    }

    fn push(&mut self, label: String) {
        if !self.0.contains(&label) {
            self.0.push(label);
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|l| l == label)
    }

    /// Text form fed to the text encoder: labels joined by `", "`.
    pub fn render(&self) -> String {
        self.0.join(", ")
    }
}

impl fmt::Display for KeywordSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Clone, Debug)]
pub enum Pattern {
    Literal(String),
    Regex(String),
}

impl Pattern {
    fn source(&self) -> String {
        match self {
            Pattern::Literal(s) => s.clone(),
            Pattern::Regex(s) => format!("re:{s}"),
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    pattern: Pattern,
    matcher: Regex,
    keywords: Vec<String>,
}

/// Maps report phrases to hierarchical canonical labels.
///
/// Each entry pairs a literal phrase or regular expression with an ordered
/// label list such as `["DR", "mild DR"]`. A label's predecessor in a list is
/// its parent, and a child must always appear together with its parent.
#[derive(Clone, Debug, Default)]
pub struct KeywordDictionary {
    entries: Vec<Entry>,
    parents: HashMap<String, String>,
}

impl KeywordDictionary {
    /// Validates and compiles `(pattern, labels)` entries.
    pub fn new(entries: Vec<(Pattern, Vec<String>)>) -> Result<Self> {
        let mut compiled = Vec::with_capacity(entries.len());
        for (i, (pattern, keywords)) in entries.into_iter().enumerate() {
            let source = match &pattern {
                Pattern::Literal(s) => regex::escape(s),
                Pattern::Regex(s) => s.clone(),
            };
            if source.is_empty() {
                return Err(Error::Validation(format!("dictionary entry {i} has an empty pattern")));
            }
            let matcher = RegexBuilder::new(&source)
                .case_insensitive(true)
                .build()
                .map_err(|e| {
                    Error::Validation(format!(
                        "dictionary entry {i} ({}): invalid regular expression: {e}",
                        pattern.source()
                    ))
                })?;
            if keywords.is_empty() || keywords.iter().any(|k| k.trim().is_empty()) {
                return Err(Error::Validation(format!(
                    "dictionary entry {i} ({}) has an empty keyword",
                    pattern.source()
                )));
            }
            for (a, k) in keywords.iter().enumerate() {
                if keywords[..a].contains(k) {
                    return Err(Error::Validation(format!(
                        "dictionary entry {i} repeats keyword {k:?}"
                    )));
                }
            }
            compiled.push(Entry {
                pattern,
                matcher,
                keywords,
            });
        }
        let parents = hierarchy(&compiled)?;
        Ok(Self {
            entries: compiled,
            parents,
        })
    }

    /// Dictionary covering the synthetic disease classes and common DR phrasing.
    pub fn starter() -> Self {
        Self::parse(STARTER, Path::new("<starter dictionary>")).expect("starter dictionary is valid")
    }

    /// Parses `pattern<TAB>kw1|kw2|...` lines; `#` starts a comment line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let (pattern, kws) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected pattern<TAB>keywords".into()))?;
            let pattern = match pattern.strip_prefix("re:") {
                Some(re) => Pattern::Regex(re.to_string()),
                None => Pattern::Literal(pattern.to_string()),
            };
            let keywords: Vec<String> = kws.split('|').map(|k| k.trim().to_string()).collect();
            entries.push((pattern, keywords));
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.pattern.source());
            out.push('\t');
            out.push_str(&e.keywords.join("|"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parent of a label, when the label is a child in the hierarchy.
    pub fn parent(&self, label: &str) -> Option<&str> {
        self.parents.get(label).map(String::as_str)
    }

    /// Whether `label` is produced by some entry.
    pub fn knows(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.keywords.iter().any(|k| k == label))
    }

    /// Matches every entry against `report` (case-insensitively) and returns
    /// the union of the matched label lists, ordered by where each entry
    /// first matches in the text.
    pub fn extract(&self, report: &str) -> KeywordSet {
        let mut hits: Vec<(usize, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.matcher.find(report).map(|m| (m.start(), i)))
            .collect();
        hits.sort_unstable();
        let mut out = KeywordSet::default();
        for (_, i) in hits {
            for k in &self.entries[i].keywords {
                out.push(k.clone());
            }
        }
        out
    }
}

/// Derives the child -> parent map and rejects inconsistent hierarchies.
fn hierarchy(entries: &[Entry]) -> Result<HashMap<String, String>> {
    let mut parents: HashMap<String, String> = HashMap::new();
    for e in entries {
        for w in e.keywords.windows(2) {
            let (parent, child) = (&w[0], &w[1]);
            match parents.get(child) {
                Some(p) if p != parent => {
                    return Err(Error::Validation(format!(
                        "keyword {child:?} has conflicting parents {p:?} and {parent:?}"
                    )))
                }
                _ => {
                    parents.insert(child.clone(), parent.clone());
                }
            }
        }
    }
    for e in entries {
        for k in &e.keywords {
            let mut cur = k;
            let mut depth = 0;
            while let Some(p) = parents.get(cur) {
                if !e.keywords.contains(p) {
                    return Err(Error::Validation(format!(
                        "entry {} lists {k:?} without its ancestor {p:?}",
                        e.pattern.source()
                    )));
                }
                cur = p;
                depth += 1;
                if depth > parents.len() {
                    return Err(Error::Validation(format!("keyword hierarchy cycle at {k:?}")));
                }
            }
        }
    }
    Ok(parents)
}

/// Extracts hierarchical keywords from report text.
pub fn extract_keywords(report: &str, dict: &KeywordDictionary) -> KeywordSet {
    dict.extract(report)
}
