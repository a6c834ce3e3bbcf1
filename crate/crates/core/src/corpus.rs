//! Document model, line-delimited shard I/O, script statistics and token counting.
//!
//! A shard is UTF-8 text with one JSON record per line. Records carry the fixed
//! fields `id`, `text`, `source`, `lang`, `meta` and `token_count`; any other
//! top-level field is kept in [`Document::extra`] and written back unchanged.
//! Files ending in `.gz` are transparently (de)compressed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;
use unicode_script::{Script, UnicodeScript};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("shard not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("unknown tokenizer {0:?}")]
    UnknownTokenizer(String),
    #[error("invalid language tag {0:?}")]
    InvalidLang(String),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Language tag carried by every document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Th,
    En,
    #[default]
    Other,
}

impl Lang {
    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Th => "th",
            Lang::En => "en",
            Lang::Other => "other",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Lang {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "th" => Ok(Lang::Th),
            "en" => Ok(Lang::En),
            "other" => Ok(Lang::Other),
            _ => Err(CorpusError::InvalidLang(s.to_string())),
        }
    }
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub lang: Lang,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u64>,
    /// Unknown top-level fields, preserved on round-trip.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Document {
    /// Builds a document, NFC-normalizing the text.
    pub fn new(id: impl Into<String>, text: &str, source: impl Into<String>, lang: Lang) -> Self {
        Document {
            id: id.into(),
            text: nfc(text),
            source: source.into(),
            lang,
            meta: BTreeMap::new(),
            token_count: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    /// Returns a copy with `text` replaced; `token_count` is cleared since it no longer applies.
    pub fn with_text(&self, text: String) -> Self {
        Document {
            text,
            token_count: None,
            ..self.clone()
        }
    }

    /// Fills `token_count` under `spec`.
    pub fn count_with(&mut self, spec: &TokenizerSpec) -> Result<u64, CorpusError> {
        let n = count_tokens(&self.text, spec)? as u64;
        self.token_count = Some(n);
        Ok(n)
    }

    /// Serialized shard line (without trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("document serialization is infallible")
    }
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, CorpusError> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            CorpusError::MissingFile(path.to_path_buf())
        } else {
            CorpusError::io(path, e)
        }
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(flate2::read::GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Streaming shard reader. Yields one item per non-blank line, in file order;
/// malformed lines become `Err(CorpusError::Record)` carrying the 1-based line number
/// and iteration continues.
pub struct ShardReader {
    path: PathBuf,
    inner: Box<dyn BufRead>,
    line: usize,
    buf: Vec<u8>,
    seen: HashSet<String>,
}

impl ShardReader {
    fn record_err(&self, message: impl Into<String>) -> CorpusError {
        CorpusError::Record {
            path: self.path.clone(),
            line: self.line,
            message: message.into(),
        }
    }
}

impl Iterator for ShardReader {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(CorpusError::io(&self.path, e))),
            }
            self.line += 1;
            let raw = match std::str::from_utf8(&self.buf) {
                Ok(s) => s,
                Err(e) => return Some(Err(self.record_err(format!("invalid UTF-8: {e}")))),
            };
            let raw = raw.trim_end_matches(['\n', '\r']);
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: Result<Document, _> = serde_json::from_str(raw);
            return Some(match parsed {
                Ok(mut doc) => {
                    if doc.id.is_empty() {
                        Err(self.record_err("empty id"))
                    } else if !self.seen.insert(doc.id.clone()) {
                        Err(self.record_err(format!("duplicate id {:?}", doc.id)))
                    } else {
                        doc.text = nfc(&doc.text);
                        Ok(doc)
                    }
                }
                Err(e) => Err(self.record_err(format!("schema violation: {e}"))),
            });
        }
    }
}

/// Opens a shard for streaming. Fails only if the file cannot be opened.
pub fn read_shard(path: impl AsRef<Path>) -> Result<ShardReader, CorpusError> {
    let path = path.as_ref();
    Ok(ShardReader {
        path: path.to_path_buf(),
        inner: open_reader(path)?,
        line: 0,
        buf: Vec::new(),
        seen: HashSet::new(),
    })
}

/// Reads every document of every shard, failing on the first malformed record.
pub fn read_all<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Document>, CorpusError> {
    let mut out = Vec::new();
    for p in paths {
        for doc in read_shard(p)? {
            out.push(doc?);
        }
    }
    Ok(out)
}

/// Writes documents to `path`, returning the number written.
///
/// Output goes to a sibling temp file that is renamed into place on success, so a
/// duplicate id leaves no partial shard behind.
pub fn write_shard<'a, I>(docs: I, path: impl AsRef<Path>) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let path = path.as_ref();
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.partial", ext.to_string_lossy()),
        None => "partial".to_string(),
    });
    let result = write_to(docs, &tmp, path.extension().is_some_and(|e| e == "gz"));
    match result {
        Ok(n) => {
            std::fs::rename(&tmp, path).map_err(|e| CorpusError::io(path, e))?;
            Ok(n)
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_to<'a, I>(docs: I, path: &Path, gzip: bool) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w: Box<dyn Write> = if gzip {
        Box::new(BufWriter::new(flate2::write::GzEncoder::new(
            file,
            flate2::Compression::default(),
        )))
    } else {
        Box::new(BufWriter::new(file))
    };
    let mut seen = HashSet::new();
    let mut n = 0;
    for doc in docs {
        if !seen.insert(doc.id.as_str()) {
            return Err(CorpusError::DuplicateId(doc.id.clone()));
        }
        w.write_all(doc.to_line().as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| CorpusError::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))?;
    Ok(n)
}

/// Serializes documents exactly as [`write_shard`] would, without touching disk.
pub fn shard_bytes(docs: &[Document]) -> Vec<u8> {
    let mut out = Vec::new();
    for d in docs {
        out.extend_from_slice(d.to_line().as_bytes());
        out.push(b'\n');
    }
    out
}

/// Reads a whole file, used for checksumming outputs.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CorpusError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CorpusError::io(path, e))?;
    Ok(buf)
}

/// Per-script character counts. Categories partition the string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharStats {
    pub thai: usize,
    pub latin: usize,
    pub digit: usize,
    pub punct: usize,
    pub whitespace: usize,
    pub other_letter: usize,
    pub total: usize,
}

impl CharStats {
    pub fn letters(&self) -> usize {
        self.thai + self.latin + self.other_letter
    }

    pub fn non_whitespace(&self) -> usize {
        self.total - self.whitespace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharClass {
    Thai,
    Latin,
    Digit,
    Punct,
    Whitespace,
    OtherLetter,
}

pub fn is_thai(c: char) -> bool {
    ('\u{0E00}'..='\u{0E7F}').contains(&c)
}

/// Classification order: Thai block, whitespace, decimal digit, Latin letter,
/// punctuation or symbol, and everything else (other scripts, marks, controls).
pub fn classify_char(c: char) -> CharClass {
    use GeneralCategory::*;
    if is_thai(c) {
        return CharClass::Thai;
    }
    if c.is_whitespace() {
        return CharClass::Whitespace;
    }
    let cat = get_general_category(c);
    if cat == DecimalNumber {
        return CharClass::Digit;
    }
    if c.is_alphabetic() && c.script() == Script::Latin {
        return CharClass::Latin;
    }
    match cat {
        ConnectorPunctuation | DashPunctuation | OpenPunctuation | ClosePunctuation
        | InitialPunctuation | FinalPunctuation | OtherPunctuation | MathSymbol
        | CurrencySymbol | ModifierSymbol | OtherSymbol => CharClass::Punct,
        _ => CharClass::OtherLetter,
    }
}

pub fn char_stats(text: &str) -> CharStats {
    let mut s = CharStats::default();
    for c in text.chars() {
        match classify_char(c) {
            CharClass::Thai => s.thai += 1,
            CharClass::Latin => s.latin += 1,
            CharClass::Digit => s.digit += 1,
            CharClass::Punct => s.punct += 1,
            CharClass::Whitespace => s.whitespace += 1,
            CharClass::OtherLetter => s.other_letter += 1,
        }
        s.total += 1;
    }
    s
}

/// Names a token counter. Built-ins are `whitespace`, `char` and `thai-aware`;
/// `external:<id>` resolves through [`register_external_tokenizer`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub name: String,
    #[serde(default = "default_version")]
    pub version: String,
}

fn default_version() -> String {
    "1".to_string()
}

impl TokenizerSpec {
    pub fn new(name: impl Into<String>) -> Self {
        TokenizerSpec {
            name: name.into(),
            version: default_version(),
        }
    }

    pub fn whitespace() -> Self {
        Self::new("whitespace")
    }

    pub fn char() -> Self {
        Self::new("char")
    }

    pub fn thai_aware() -> Self {
        Self::new("thai-aware")
    }

    /// Checks the name resolves to a counter.
    pub fn validate(&self) -> Result<(), CorpusError> {
        count_tokens("", self).map(|_| ())
    }
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self::thai_aware()
    }
}

impl FromStr for TokenizerSpec {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spec = TokenizerSpec::new(s);
        spec.validate()?;
        Ok(spec)
    }
}

pub type ExternalCounter = Arc<dyn Fn(&str) -> usize + Send + Sync>;

fn external_registry() -> &'static RwLock<HashMap<String, ExternalCounter>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, ExternalCounter>>> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

/// Registers a counter reachable as `external:<id>`. The function must be pure.
pub fn register_external_tokenizer(id: &str, counter: ExternalCounter) {
    external_registry()
        .write()
        .expect("tokenizer registry poisoned")
        .insert(id.to_string(), counter);
}

pub fn count_tokens(text: &str, spec: &TokenizerSpec) -> Result<usize, CorpusError> {
    match spec.name.as_str() {
        "whitespace" => Ok(text.split_whitespace().count()),
        "char" => Ok(text.chars().count()),
        "thai-aware" => Ok(thai_aware_count(text)),
        name => {
            let id = name
                .strip_prefix("external:")
                .ok_or_else(|| CorpusError::UnknownTokenizer(name.to_string()))?;
            let reg = external_registry().read().expect("tokenizer registry poisoned");
            let counter = reg
                .get(id)
                .ok_or_else(|| CorpusError::UnknownTokenizer(name.to_string()))?;
            Ok(counter(text))
        }
    }
}

/// Each Thai character is one token; maximal runs of other non-whitespace
/// characters are one token each.
fn thai_aware_count(text: &str) -> usize {
    let mut n = 0;
    let mut in_run = false;
    for c in text.chars() {
        if is_thai(c) {
            n += 1;
            in_run = false;
        } else if c.is_whitespace() {
            in_run = false;
        } else if !in_run {
            n += 1;
            in_run = true;
        }
    }
    n
}
