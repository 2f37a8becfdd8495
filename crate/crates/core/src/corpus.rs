//! CoNLL-style corpus ingestion, the IOB codec, vocabularies, splitting, and
//! chunk-length statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Label carried by spans covering a single outside token.
pub const OUTSIDE: &str = "O";

/// Column layout of a corpus file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `word POS tag` (CoNLL-2000 text chunking).
    Chunking3Col,
    /// `word tag` (slot filling).
    Slot2Col,
}

impl Format {
    fn columns(self) -> usize {
        match self {
            Format::Chunking3Col => 3,
            Format::Slot2Col => 2,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunking3col" => Ok(Format::Chunking3Col),
            "slot2col" => Ok(Format::Slot2Col),
            other => Err(Error::Config(format!(
                "unknown format {other:?} (expected chunking3col or slot2col)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Chunking3Col => "chunking3col",
            Format::Slot2Col => "slot2col",
        })
    }
}

/// One IOB tag. Labels are empty only for segmentation-only tags (`B`, `I`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O,
    B(String),
    I(String),
}

impl Tag {
    /// Parse a tag as it appears in a corpus file: `O`, `B-X` or `I-X` with nonempty `X`.
    pub fn parse(s: &str) -> std::result::Result<Tag, String> {
        if s == "O" {
            return Ok(Tag::O);
        }
        let Some((prefix, label)) = s.split_once('-') else {
            return Err(format!("malformed tag {s:?}"));
        };
        if label.is_empty() {
            return Err(format!("tag {s:?} has an empty label"));
        }
        match prefix {
            "B" => Ok(Tag::B(label.to_string())),
            "I" => Ok(Tag::I(label.to_string())),
            _ => Err(format!("malformed tag {s:?}")),
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Tag::O => None,
            Tag::B(l) | Tag::I(l) => Some(l),
        }
    }

    /// Drop the content label, keeping only the `I`/`O`/`B` prefix.
    pub fn strip(&self) -> Tag {
        match self {
            Tag::O => Tag::O,
            Tag::B(_) => Tag::B(String::new()),
            Tag::I(_) => Tag::I(String::new()),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(l) if l.is_empty() => f.write_str("B"),
            Tag::I(l) if l.is_empty() => f.write_str("I"),
            Tag::B(l) => write!(f, "B-{l}"),
            Tag::I(l) => write!(f, "I-{l}"),
        }
    }
}

/// A tokenized sentence with gold tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    /// POS column of 3-column files, kept only so output files mirror the input.
    pub pos: Option<Vec<String>>,
}

impl Sentence {
    pub fn new(id: usize, tokens: Vec<String>, tags: Vec<Tag>) -> Self {
        Sentence {
            id,
            tokens,
            tags,
            pos: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold spans after repair, O tokens included as length-1 spans.
    pub fn gold_spans(&self) -> Vec<ChunkSpan> {
        iob_to_chunks(&repair_iob(&self.tags)).expect("repaired tags always decode")
    }
}

/// A contiguous labeled span `[begin, begin + length)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkSpan {
    pub begin: usize,
    pub length: usize,
    pub label: String,
}

impl ChunkSpan {
    pub fn new(begin: usize, length: usize, label: impl Into<String>) -> Self {
        ChunkSpan {
            begin,
            length,
            label: label.into(),
        }
    }

    pub fn end(&self) -> usize {
        self.begin + self.length
    }

    pub fn is_outside(&self) -> bool {
        self.label == OUTSIDE
    }
}

/// Parse a blank-line separated corpus.
pub fn parse_conll(text: &str, format: Format) -> Result<Vec<Sentence>> {
    let cols = format.columns();
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut pos = Vec::new();

    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, pos: &mut Vec<String>, out: &mut Vec<Sentence>| {
        if tokens.is_empty() {
            return;
        }
        let id = out.len();
        let mut s = Sentence::new(id, std::mem::take(tokens), std::mem::take(tags));
        if format == Format::Chunking3Col {
            s.pos = Some(std::mem::take(pos));
        }
        out.push(s);
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut tokens, &mut tags, &mut pos, &mut out);
            continue;
        }
        if fields.len() != cols {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {cols} fields for {format}, found {}", fields.len()),
            });
        }
        let tag = Tag::parse(fields[cols - 1]).map_err(|message| Error::Parse { line: lineno, message })?;
        tokens.push(fields[0].to_string());
        if cols == 3 {
            pos.push(fields[1].to_string());
        }
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, &mut pos, &mut out);
    Ok(out)
}

/// Render sentences in the given format, with `tags` replacing the gold column when supplied.
pub fn write_conll(sentences: &[Sentence], tags: Option<&[Vec<Tag>]>, format: Format) -> String {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        let row_tags = tags.map(|t| &t[k]).unwrap_or(&s.tags);
        for (i, tok) in s.tokens.iter().enumerate() {
            out.push_str(tok);
            if format == Format::Chunking3Col {
                out.push(' ');
                out.push_str(s.pos.as_ref().map(|p| p[i].as_str()).unwrap_or("_"));
            }
            out.push(' ');
            out.push_str(&row_tags[i].to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Turn every `I-X` that cannot continue a chunk into `B-X`.
///
/// An `I-X` continues a chunk only when the previous tag is `B-X` or `I-X`.
pub fn repair_iob(tags: &[Tag]) -> Vec<Tag> {
    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    for tag in tags {
        let fixed = match tag {
            Tag::I(label) => {
                let continues = matches!(out.last(), Some(Tag::B(p) | Tag::I(p)) if p == label);
                if continues {
                    tag.clone()
                } else {
                    Tag::B(label.clone())
                }
            }
            other => other.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Decode repaired tags into spans that tile the sentence.
pub fn iob_to_chunks(tags: &[Tag]) -> Result<Vec<ChunkSpan>> {
    let mut spans: Vec<ChunkSpan> = Vec::new();
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => spans.push(ChunkSpan::new(i, 1, OUTSIDE)),
            Tag::B(label) => spans.push(ChunkSpan::new(i, 1, label.clone())),
            Tag::I(label) => {
                let prev_ok = i > 0 && matches!(&tags[i - 1], Tag::B(p) | Tag::I(p) if p == label);
                match spans.last_mut() {
                    Some(last) if prev_ok => last.length += 1,
                    _ => {
                        return Err(Error::State(format!(
                            "tag {tag} at position {i} does not continue a chunk; repair the sequence first"
                        )))
                    }
                }
            }
        }
    }
    Ok(spans)
}

/// Encode spans that tile `[0, len)` as IOB tags.
pub fn chunks_to_iob(spans: &[ChunkSpan], len: usize) -> Result<Vec<Tag>> {
    let mut tags = Vec::with_capacity(len);
    for span in spans {
        if span.begin != tags.len() {
            let index = tags.len().min(span.begin);
            let message = if span.begin > tags.len() { "gap before span" } else { "overlapping span" };
            return Err(Error::Tiling {
                index,
                message: message.into(),
            });
        }
        if span.length == 0 {
            return Err(Error::Tiling {
                index: span.begin,
                message: "empty span".into(),
            });
        }
        if span.end() > len {
            return Err(Error::Tiling {
                index: len,
                message: "span runs past the sentence end".into(),
            });
        }
        if span.is_outside() {
            tags.extend(std::iter::repeat_n(Tag::O, span.length));
        } else {
            tags.push(Tag::B(span.label.clone()));
            tags.extend(std::iter::repeat_n(Tag::I(span.label.clone()), span.length - 1));
        }
    }
    if tags.len() != len {
        return Err(Error::Tiling {
            index: tags.len(),
            message: "spans stop before the sentence end".into(),
        });
    }
    Ok(tags)
}

/// Split labeled spans longer than `max_len` into consecutive pieces of at most `max_len`.
pub fn split_long_spans(spans: &[ChunkSpan], max_len: usize) -> (Vec<ChunkSpan>, usize) {
    let mut out = Vec::with_capacity(spans.len());
    let mut split = 0;
    for s in spans {
        if s.length <= max_len {
            out.push(s.clone());
            continue;
        }
        split += 1;
        let mut b = s.begin;
        while b < s.end() {
            let l = max_len.min(s.end() - b);
            out.push(ChunkSpan::new(b, l, s.label.clone()));
            b += l;
        }
    }
    (out, split)
}

/// Deterministic shuffled split. The training side gets `n - floor(n * fraction)` sentences.
pub fn split_train_valid(sentences: &[Sentence], fraction: f64, seed: u64) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain("split_train_valid", format!("fraction {fraction} not in (0, 1)")));
    }
    let n = sentences.len();
    if n == 0 {
        return Err(Error::domain("split_train_valid", "no sentences to split"));
    }
    // tolerate representation error such as 10 * 0.1 = 0.9999...
    let n_valid = ((n as f64) * fraction + 1e-9).floor() as usize;
    let n_train = n - n_valid;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| sentences[i].clone()).collect();
    let valid = order[n_train..].iter().map(|&i| sentences[i].clone()).collect();
    Ok((train, valid))
}

/// Chunk-length buckets used in statistics and per-length scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LengthBucket {
    One,
    Two,
    ThreePlus,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::One, LengthBucket::Two, LengthBucket::ThreePlus];

    pub fn of(length: usize) -> Self {
        match length {
            0 | 1 => LengthBucket::One,
            2 => LengthBucket::Two,
            _ => LengthBucket::ThreePlus,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LengthBucket::One => "1",
            LengthBucket::Two => "2",
            LengthBucket::ThreePlus => ">=3",
        }
    }
}

/// Counts of labeled gold chunks per length bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LengthHistogram {
    pub counts: [usize; 3],
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Bucket share in percent; zero for an empty histogram.
    pub fn percent(&self, bucket: LengthBucket) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            100.0 * self.counts[bucket.index()] as f64 / total as f64
        }
    }

    /// Rows shaped like `1 10275 (77.7%)`.
    pub fn table(&self) -> String {
        let mut out = String::from("length\tcount (share)\n");
        for b in LengthBucket::ALL {
            out.push_str(&format!("{}\t{} ({:.1}%)\n", b.name(), self.counts[b.index()], self.percent(b)));
        }
        out
    }
}

/// Histogram of labeled chunk lengths; O spans are ignored.
pub fn chunk_length_histogram(sentences: &[Sentence]) -> LengthHistogram {
    let mut h = LengthHistogram::default();
    for s in sentences {
        for span in s.gold_spans() {
            if !span.is_outside() {
                h.counts[LengthBucket::of(span.length).index()] += 1;
            }
        }
    }
    h
}

/// Normalization for word-embedding lookup: lowercase, digits collapsed.
pub fn normalize_word(token: &str) -> String {
    token
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_digit() { '0' } else { c })
        .collect()
}

/// Normalization for the character CNN: case kept, digits collapsed.
pub fn normalize_chars(token: &str) -> Vec<char> {
    token.chars().map(|c| if c.is_ascii_digit() { '0' } else { c }).collect()
}

/// Index over a closed set of symbols with reserved padding and OOV slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Index {
    symbols: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Index {
    pub const PAD: usize = 0;
    pub const OOV: usize = 1;
    const RESERVED: [&'static str; 2] = ["<pad>", "<unk>"];

    pub fn from_symbols<I: IntoIterator<Item = String>>(symbols: I) -> Self {
        let mut all: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        let mut lookup = HashMap::new();
        for s in symbols {
            if lookup.contains_key(&s) || Self::RESERVED.contains(&s.as_str()) {
                continue;
            }
            lookup.insert(s.clone(), all.len());
            all.push(s);
        }
        Index { symbols: all, lookup }
    }

    pub fn get(&self, s: &str) -> usize {
        self.lookup.get(s).copied().unwrap_or(Self::OOV)
    }

    pub fn contains(&self, s: &str) -> bool {
        self.lookup.contains_key(s)
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    /// Number of rows including the reserved ones.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved symbols in index order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols[Self::RESERVED.len()..]
    }
}

/// Words, characters, chunk labels, and IOB tags seen in the training data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub words: Index,
    pub chars: Index,
    /// Chunk labels, sorted, `O` excluded.
    pub labels: Vec<String>,
    /// `O` followed by `B-X`, `I-X` for every label.
    pub tags: Vec<Tag>,
}

impl Vocab {
    /// Build from training sentences. `min_count` drops rarer words to OOV.
    pub fn build(train: &[Sentence], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut chars: Vec<String> = Vec::new();
        let mut seen_chars = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for s in train {
            for tok in &s.tokens {
                let w = normalize_word(tok);
                let c = counts.entry(w.clone()).or_insert(0);
                if *c == 0 {
                    order.push(w);
                }
                *c += 1;
                for ch in normalize_chars(tok) {
                    if seen_chars.insert(ch) {
                        chars.push(ch.to_string());
                    }
                }
            }
            for span in s.gold_spans() {
                if !span.is_outside() {
                    labels.insert(span.label);
                }
            }
        }
        let words = order.into_iter().filter(|w| counts[w] >= min_count.max(1));
        Self::from_parts(Index::from_symbols(words), Index::from_symbols(chars), labels.into_iter().collect())
    }

    pub fn from_parts(words: Index, chars: Index, labels: Vec<String>) -> Self {
        let mut tags = vec![Tag::O];
        for l in &labels {
            tags.push(Tag::B(l.clone()));
            tags.push(Tag::I(l.clone()));
        }
        Vocab {
            words,
            chars,
            labels,
            tags,
        }
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.words.get(&normalize_word(token))
    }

    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        let ids: Vec<usize> = normalize_chars(token)
            .into_iter()
            .map(|c| self.chars.get(c.encode_utf8(&mut [0; 4])))
            .collect();
        if ids.is_empty() {
            vec![Index::OOV]
        } else {
            ids
        }
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn tag_id(&self, tag: &Tag) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    /// Label count with `O` counted as a label.
    pub fn label_count_with_outside(&self) -> usize {
        self.labels.len() + 1
    }

    /// Number of `B-`/`I-` prefixed tags.
    pub fn prefixed_tag_count(&self) -> usize {
        self.tags.len() - 1
    }

    /// Stable content hash of one vocabulary section.
    pub fn section_hash(items: &[String]) -> String {
        let mut h = Sha256::new();
        for s in items {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Build a vocabulary from training sentences.
pub fn build_vocab(train: &[Sentence], min_count: usize) -> Result<Vocab> {
    if train.is_empty() {
        return Err(Error::domain("build_vocab", "empty training set"));
    }
    Ok(Vocab::build(train, min_count))
}
