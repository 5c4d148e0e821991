//! Annotated sentences, vocabularies and decoder supervision sequences.
//!
//! Datasets are JSON Lines, one sentence per line:
//!
//! ```text
//! {"tokens": ["I", "love", "Windows", "7"], "pos": ["PRP", "VBP", "NNP", "CD"], "triplets": [[2, 3, "POS"]]}
//! ```
//!
//! An optional `"id"` string is carried through and used in error messages.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentiment expressed toward an aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Positive,
    #[serde(rename = "NEG")]
    Negative,
    #[serde(rename = "NEU")]
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Polarity::Positive => "POS",
            Polarity::Negative => "NEG",
            Polarity::Neutral => "NEU",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// An aspect span `[start, end]` (inclusive) with its polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize, Polarity)", into = "(usize, usize, Polarity)")]
pub struct Triplet {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

impl Triplet {
    pub fn new(start: usize, end: usize, polarity: Polarity) -> Self {
        Triplet { start, end, polarity }
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn overlaps(&self, other: &Triplet) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl From<(usize, usize, Polarity)> for Triplet {
    fn from((start, end, polarity): (usize, usize, Polarity)) -> Self {
        Triplet { start, end, polarity }
    }
}

impl From<Triplet> for (usize, usize, Polarity) {
    fn from(t: Triplet) -> Self {
        (t.start, t.end, t.polarity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    surface: String,
    pos: String,
    chars: Vec<char>,
}

impl Token {
    pub fn new(surface: impl Into<String>, pos: impl Into<String>) -> Result<Self> {
        let surface = surface.into();
        if surface.is_empty() {
            return Err(Error::InvalidExample {
                id: "<token>".into(),
                reason: "empty token".into(),
            });
        }
        let chars = surface.chars().collect();
        Ok(Token {
            surface,
            pos: pos.into(),
            chars,
        })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn pos(&self) -> &str {
        &self.pos
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

/// A tokenized, POS-tagged sentence with its gold triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedExample {
    pub id: Option<String>,
    tokens: Vec<Token>,
    triplets: Vec<Triplet>,
}

impl AnnotatedExample {
    /// Validates spans against the sentence and rejects overlapping gold
    /// aspects, which the decoder's coverage mask cannot represent.
    pub fn new(id: Option<String>, tokens: Vec<Token>, triplets: Vec<Triplet>) -> Result<Self> {
        let label = id.clone().unwrap_or_else(|| "<unnamed>".into());
        let invalid = |reason: String| Error::InvalidExample {
            id: label.clone(),
            reason,
        };
        if tokens.is_empty() {
            return Err(invalid("sentence has no tokens".into()));
        }
        let n = tokens.len();
        for t in &triplets {
            if t.end < t.start {
                return Err(invalid(format!("triplet ({}, {}): end before start", t.start, t.end)));
            }
            if t.end >= n {
                return Err(invalid(format!(
                    "triplet ({}, {}): end index out of range for {} tokens",
                    t.start, t.end, n
                )));
            }
        }
        for (i, a) in triplets.iter().enumerate() {
            for b in &triplets[i + 1..] {
                if a.overlaps(b) {
                    return Err(invalid(format!(
                        "overlapping aspects ({}, {}) and ({}, {})",
                        a.start, a.end, b.start, b.end
                    )));
                }
            }
        }
        Ok(AnnotatedExample { id, tokens, triplets })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Same sentence with a different triplet set.
    pub fn with_triplets(&self, triplets: Vec<Triplet>) -> Result<Self> {
        AnnotatedExample::new(self.id.clone(), self.tokens.clone(), triplets)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    pos: Vec<String>,
    triplets: Option<Vec<Triplet>>,
}

fn parse_record(line: &str, lineno: usize, require_triplets: bool) -> Result<AnnotatedExample> {
    let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    let id = record.id.or_else(|| Some(format!("line {lineno}")));
    let label = id.clone().unwrap_or_default();
    if record.tokens.len() != record.pos.len() {
        return Err(Error::InvalidExample {
            id: label,
            reason: format!("{} tokens but {} POS tags", record.tokens.len(), record.pos.len()),
        });
    }
    let triplets = match record.triplets {
        Some(t) => t,
        None if require_triplets => {
            return Err(Error::Parse {
                line: lineno,
                message: "missing field `triplets`".into(),
            })
        }
        None => Vec::new(),
    };
    let tokens = record
        .tokens
        .into_iter()
        .zip(record.pos)
        .map(|(w, p)| Token::new(w, p))
        .collect::<Result<Vec<_>>>()
        .map_err(|_| Error::InvalidExample {
            id: label.clone(),
            reason: "empty token".into(),
        })?;
    AnnotatedExample::new(id, tokens, triplets)
}

/// Reads annotated examples from JSON Lines. Blank lines are skipped.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<AnnotatedExample>> {
    read_records(reader, true)
}

/// Like [`read_dataset`] but the `triplets` field may be absent (prediction input).
pub fn read_sentences<R: BufRead>(reader: R) -> Result<Vec<AnnotatedExample>> {
    read_records(reader, false)
}

fn read_records<R: BufRead>(reader: R, require_triplets: bool) -> Result<Vec<AnnotatedExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, lineno, require_triplets)?);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AnnotatedExample>> {
    read_dataset(open(path.as_ref())?)
}

pub fn load_sentences(path: impl AsRef<Path>) -> Result<Vec<AnnotatedExample>> {
    read_sentences(open(path.as_ref())?)
}

/// Serializes one example as a JSON object (no trailing newline).
pub fn example_to_json(example: &AnnotatedExample) -> String {
    let record = Record {
        id: example.id.clone().filter(|id| !id.starts_with("line ")),
        tokens: example.tokens.iter().map(|t| t.surface.clone()).collect(),
        pos: example.tokens.iter().map(|t| t.pos.clone()).collect(),
        triplets: Some(example.triplets.clone()),
    };
    serde_json::to_string(&record).expect("records always serialize")
}

pub fn write_dataset<W: Write>(mut writer: W, examples: &[AnnotatedExample]) -> std::io::Result<()> {
    for ex in examples {
        writeln!(writer, "{}", example_to_json(ex))?;
    }
    Ok(())
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Dense string-to-id map with `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Index {
    items: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Default for Index {
    fn default() -> Self {
        Index::from(vec!["<pad>".to_string(), "<unk>".to_string()])
    }
}

impl From<Vec<String>> for Index {
    fn from(items: Vec<String>) -> Self {
        let lookup = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Index { items, lookup }
    }
}

impl From<Index> for Vec<String> {
    fn from(index: Index) -> Self {
        index.items
    }
}

impl Index {
    fn insert(&mut self, item: &str) -> usize {
        if let Some(&id) = self.lookup.get(item) {
            return id;
        }
        let id = self.items.len();
        self.items.push(item.to_string());
        self.lookup.insert(item.to_string(), id);
        id
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.lookup.get(item).copied().filter(|&id| id > UNK)
    }

    pub fn id_or_unk(&self, item: &str) -> usize {
        self.get(item).unwrap_or(UNK)
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

/// Word, character and POS-tag indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Index,
    pub chars: Index,
    pub pos: Index,
}

/// Vocabulary ids of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedSentence {
    pub words: Vec<usize>,
    pub pos: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl IndexedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Vocabulary {
    /// Word lookup: exact form, then lowercased form, then UNK.
    pub fn word_id(&self, surface: &str) -> usize {
        self.words
            .get(surface)
            .or_else(|| self.words.get(&surface.to_lowercase()))
            .unwrap_or(UNK)
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.chars.id_or_unk(c.encode_utf8(&mut buf))
    }

    pub fn pos_id(&self, tag: &str) -> usize {
        self.pos.id_or_unk(tag)
    }

    pub fn index(&self, tokens: &[Token]) -> IndexedSentence {
        IndexedSentence {
            words: tokens.iter().map(|t| self.word_id(&t.surface)).collect(),
            pos: tokens.iter().map(|t| self.pos_id(&t.pos)).collect(),
            chars: tokens
                .iter()
                .map(|t| t.chars.iter().map(|&c| self.char_id(c)).collect())
                .collect(),
        }
    }
}

/// Builds indices in first-occurrence order. Words seen fewer than
/// `min_word_freq` times are left out and therefore map to UNK.
pub fn build_vocabulary(examples: &[AnnotatedExample], min_word_freq: usize) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if min_word_freq == 0 {
        return Err(Error::config("min_word_freq", "must be at least 1"));
    }
    let mut order = Vec::new();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut chars = Index::default();
    let mut pos = Index::default();
    for token in examples.iter().flat_map(|e| e.tokens.iter()) {
        let count = freq.entry(&token.surface).or_insert(0);
        if *count == 0 {
            order.push(token.surface.as_str());
        }
        *count += 1;
        for &c in &token.chars {
            let mut buf = [0u8; 4];
            chars.insert(c.encode_utf8(&mut buf));
        }
        pos.insert(&token.pos);
    }
    let mut words = Index::default();
    for w in order {
        if freq[w] >= min_word_freq {
            words.insert(w);
        }
    }
    Ok(Vocabulary { words, chars, pos })
}

/// One decoder output: a token position, a polarity, or the NA terminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecodeArgument {
    Position(usize),
    Polarity(Polarity),
    Na,
}

impl fmt::Display for DecodeArgument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeArgument::Position(i) => write!(f, "{i}"),
            DecodeArgument::Polarity(p) => write!(f, "{p}"),
            DecodeArgument::Na => f.write_str("NA"),
        }
    }
}

/// Gold triplets flattened as `(s1, e1, r1, ..., sK, eK, rK, NA)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetSequence(Vec<DecodeArgument>);

impl TargetSequence {
    pub fn new(arguments: Vec<DecodeArgument>) -> Self {
        TargetSequence(arguments)
    }

    pub fn arguments(&self) -> &[DecodeArgument] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Orders gold triplets by ascending start and expands them for teacher forcing.
pub fn linearize_targets(example: &AnnotatedExample) -> TargetSequence {
    let mut triplets = example.triplets.clone();
    triplets.sort_by_key(|t| (t.start, t.end));
    let mut args = Vec::with_capacity(3 * triplets.len() + 1);
    for t in triplets {
        args.push(DecodeArgument::Position(t.start));
        args.push(DecodeArgument::Position(t.end));
        args.push(DecodeArgument::Polarity(t.polarity));
    }
    args.push(DecodeArgument::Na);
    TargetSequence(args)
}
