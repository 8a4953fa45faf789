//! Bibliographic records, binary featurization, and the temporal split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One citation of an ambiguous name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub name_ref: String,
    pub year: i32,
    #[serde(default)]
    pub coauthors: Vec<String>,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub venue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<String>,
}

impl RawRecord {
    /// Checks the fields every record must carry.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty `id`".into());
        }
        if self.year <= 0 {
            return Err(format!("`year` must be positive, got {}", self.year));
        }
        if self.name_ref.trim().is_empty() {
            return Err("empty `name_ref`".into());
        }
        Ok(())
    }
}

/// Parses one JSON object per line. Blank lines are skipped.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        rec.validate()
            .map_err(|message| Error::Parse { line: lineno, message })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[RawRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Coauthor,
    TitleWord,
    Venue,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureKind::Coauthor => "coauthor",
            FeatureKind::TitleWord => "title",
            FeatureKind::Venue => "venue",
        };
        f.write_str(s)
    }
}

fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../data/stopwords_en.txt")
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_name(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Title words: lowercase alphanumeric runs with numbers, punctuation and
/// stop words removed.
pub fn title_tokens(title: &str) -> BTreeSet<String> {
    let stop = stopwords();
    title
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .filter(|t| !t.chars().any(|c| c.is_numeric()))
        .filter(|t| !stop.contains(t))
        .map(str::to_owned)
        .collect()
}

/// All normalized `(kind, token)` pairs present in a record.
pub fn record_tokens(record: &RawRecord) -> BTreeSet<(FeatureKind, String)> {
    let own = normalize_name(&record.name_ref);
    let mut out = BTreeSet::new();
    for c in &record.coauthors {
        let c = normalize_name(c);
        if !c.is_empty() && c != own {
            out.insert((FeatureKind::Coauthor, c));
        }
    }
    for w in title_tokens(&record.title) {
        out.insert((FeatureKind::TitleWord, w));
    }
    let venue = normalize_name(&record.venue);
    if !venue.is_empty() {
        out.insert((FeatureKind::Venue, venue));
    }
    out
}

/// Immutable token → column mapping built from training records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVocabulary {
    tokens: Vec<(FeatureKind, String)>,
    index: HashMap<(FeatureKind, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    kind: FeatureKind,
    token: String,
    index: usize,
}

impl FeatureVocabulary {
    /// Coauthors, then title words, then venues; lexicographic within each kind.
    pub fn build(train: &[RawRecord]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from zero records"));
        }
        let all: BTreeSet<(FeatureKind, String)> = train.iter().flat_map(record_tokens).collect();
        Ok(Self::from_tokens(all.into_iter().collect()))
    }

    fn from_tokens(tokens: Vec<(FeatureKind, String)>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[(FeatureKind, String)] {
        &self.tokens
    }

    pub fn position(&self, kind: FeatureKind, token: &str) -> Option<usize> {
        self.index.get(&(kind, token.to_owned())).copied()
    }

    /// Sets one bit per vocabulary token present in the record; unknown
    /// tokens are dropped.
    pub fn featurize(&self, record: &RawRecord) -> BinaryFeatureVector {
        let mut bits: Vec<usize> = record_tokens(record)
            .iter()
            .filter_map(|t| self.index.get(t).copied())
            .collect();
        bits.sort_unstable();
        BinaryFeatureVector { dim: self.len(), bits }
    }

    /// One `{kind, token, index}` JSON object per line.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (kind, token)) in self.tokens.iter().enumerate() {
            let e = VocabEntry {
                kind: *kind,
                token: token.clone(),
                index: i,
            };
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: VocabEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if e.index != tokens.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected index {}, found {}", tokens.len(), e.index),
                });
            }
            if !seen.insert((e.kind, e.token.clone())) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {}:{}", e.kind, e.token),
                });
            }
            tokens.push((e.kind, e.token));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Sparse binary vector: the sorted positions of set bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryFeatureVector {
    pub dim: usize,
    pub bits: Vec<usize>,
}

impl BinaryFeatureVector {
    pub fn count_ones(&self) -> usize {
        self.bits.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &b in &self.bits {
            v[b] = 1.0;
        }
        v
    }
}

/// Records partitioned by year into an initial training set and a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSplit {
    pub train: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
    /// Last training year; records with `year > t0` are streamed.
    pub t0: Option<i32>,
}

impl StreamSplit {
    /// True when one side of the split is empty.
    pub fn is_degenerate(&self) -> bool {
        self.train.is_empty() || self.test.is_empty()
    }
}

/// Moves the most recent `years` calendar years into the stream.
///
/// Both sides are ordered by year, ties keeping input order.
pub fn temporal_split(records: &[RawRecord], years: u32) -> Result<StreamSplit> {
    if years == 0 {
        return Err(Error::invalid("T0 must be at least one year"));
    }
    let Some(ymax) = records.iter().map(|r| r.year).max() else {
        return Ok(StreamSplit {
            train: Vec::new(),
            test: Vec::new(),
            t0: None,
        });
    };
    let t0 = i64::from(ymax) - i64::from(years);
    let mut sorted: Vec<&RawRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.year);
    let (train, test): (Vec<&RawRecord>, Vec<&RawRecord>) = sorted.into_iter().partition(|r| i64::from(r.year) <= t0);
    let split = StreamSplit {
        train: train.into_iter().cloned().collect(),
        test: test.into_iter().cloned().collect(),
        t0: i32::try_from(t0).ok(),
    };
    if split.is_degenerate() {
        log::warn!(
            "temporal split with T0={years} left {} training and {} stream records",
            split.train.len(),
            split.test.len()
        );
    }
    Ok(split)
}
