//! Wordpiece vocabulary induction (frequency-based pair merging over word
//! counts) and segmentation with the explicit space-symbol convention:
//! words are segmented independently, word boundaries become the space
//! piece, and every grapheme is a singleton piece so segmentation never
//! fails on in-inventory text.

use crate::error::{Error, Result};
use crate::units::{grapheme_inventory, is_inventory_char};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

/// Rendered form of the space piece in vocab files and transcripts.
pub const SPACE_PIECE: &str = "<space>";

/// word -> count map. Words contain only non-space inventory graphemes.
#[derive(Debug, Clone, Default)]
pub struct WordCounts {
    counts: BTreeMap<String, u64>,
}

impl WordCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: &str, count: u64) -> Result<()> {
        if count == 0 {
            return Err(Error::Invalid(format!("zero count for word {word:?}")));
        }
        if word.is_empty() {
            return Err(Error::Invalid("empty word".into()));
        }
        for c in word.chars() {
            if c == ' ' || !is_inventory_char(c) {
                return Err(Error::Invalid(format!(
                    "word {word:?} contains out-of-inventory character {c:?}"
                )));
            }
        }
        *self.counts.entry(word.to_string()).or_insert(0) += count;
        Ok(())
    }

    /// Accumulates counts from whitespace-separated running text.
    pub fn add_text(&mut self, text: &str) -> Result<()> {
        for word in text.split_whitespace() {
            self.add(word, 1)?;
        }
        Ok(())
    }

    /// Parses a counts file: one `word<TAB>count` (or `word count`) per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut counts = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields
                .next()
                .ok_or_else(|| Error::Format(format!("counts line {}: empty", lineno + 1)))?;
            let count: u64 = match fields.next() {
                Some(c) => c.parse().map_err(|_| {
                    Error::Format(format!("counts line {}: bad count {c:?}", lineno + 1))
                })?,
                None => 1,
            };
            counts.add(word, count)?;
        }
        Ok(counts)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(w, &c)| (w.as_str(), c))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Induced sub-word inventory. Index = label index. The space piece and
/// every single grapheme are always present.
#[derive(Debug, Clone)]
pub struct WordpieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    space_index: usize,
    /// Merge history, in induction order.
    merges: Vec<(String, String)>,
    counts_hash: String,
}

impl WordpieceVocab {
    /// Smallest legal vocabulary: all graphemes plus the space piece.
    pub fn floor_size() -> usize {
        grapheme_inventory().len()
    }

    pub fn from_pieces(pieces: Vec<String>, merges: Vec<(String, String)>, counts_hash: String) -> Result<Self> {
        let mut index = HashMap::new();
        let mut space_index = None;
        for (i, p) in pieces.iter().enumerate() {
            if p == SPACE_PIECE {
                if space_index.is_some() {
                    return Err(Error::Invalid("space piece present twice".into()));
                }
                space_index = Some(i);
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate piece {p:?}")));
            }
        }
        let space_index =
            space_index.ok_or_else(|| Error::Invalid("space piece missing".into()))?;
        for c in grapheme_inventory() {
            if c != ' ' && !index.contains_key(&c.to_string()) {
                return Err(Error::Invalid(format!(
                    "grapheme {c:?} missing from vocabulary (coverage requires all singletons)"
                )));
            }
        }
        Ok(Self {
            pieces,
            index,
            space_index,
            merges,
            counts_hash,
        })
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn space_index(&self) -> usize {
        self.space_index
    }

    pub fn piece(&self, index: usize) -> &str {
        &self.pieces[index]
    }

    pub fn piece_index(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Merge history in training order, useful for inspecting a vocabulary.
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// SHA-256 of the piece list; used to gate embedding transfer.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in &self.pieces {
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    /// Vocab file: `#`-prefixed header, then one piece per line; the line
    /// number among piece lines is the label index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "# wordpiece vocabulary").unwrap();
        writeln!(out, "# size: {}", self.size()).unwrap();
        writeln!(out, "# counts_hash: {}", self.counts_hash).unwrap();
        for p in &self.pieces {
            writeln!(out, "{p}").unwrap();
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut counts_hash = String::new();
        let mut pieces = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(h) = rest.trim().strip_prefix("counts_hash:") {
                    counts_hash = h.trim().to_string();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            pieces.push(line.to_string());
        }
        Self::from_pieces(pieces, Vec::new(), counts_hash)
    }
}

/// Induces a vocabulary of exactly `target_size` pieces by iterative
/// most-frequent pair merging over within-word grapheme sequences.
/// Deterministic: ties break lexicographically on the merged pair.
pub fn train_vocab(counts: &WordCounts, target_size: usize) -> Result<WordpieceVocab> {
    let floor = WordpieceVocab::floor_size();
    if target_size < floor {
        return Err(Error::Invalid(format!(
            "target size {target_size} below the floor of {floor} (graphemes + space)"
        )));
    }
    if counts.is_empty() {
        return Err(Error::Invalid("empty word counts".into()));
    }

    // Singletons first: space piece, then the non-space graphemes.
    let mut pieces: Vec<String> = vec![SPACE_PIECE.to_string()];
    pieces.extend(
        grapheme_inventory()
            .into_iter()
            .filter(|&c| c != ' ')
            .map(|c| c.to_string()),
    );

    // Working corpus: each word as a sequence of current pieces.
    let mut words: Vec<(Vec<String>, u64)> = counts
        .iter()
        .map(|(w, c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
        .collect();

    let mut merges = Vec::new();
    while pieces.len() < target_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // Highest count wins; BTreeMap order makes the lexicographically
        // smallest pair win ties.
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(pair, _)| pair.clone());
        let Some((left, right)) = best else {
            break; // every word is a single piece already
        };
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        // Two different merges can yield the same string (a+bc vs ab+c);
        // keep the piece list duplicate-free.
        if !pieces.contains(&merged) {
            pieces.push(merged.clone());
        }
        merges.push((left, right));
    }

    let counts_hash = {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (w, c) in counts.iter() {
            hasher.update(w.as_bytes());
            hasher.update(c.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    };
    WordpieceVocab::from_pieces(pieces, merges, counts_hash)
}

/// Segments one sentence: words split on single spaces, each word greedily
/// segmented longest-match-first, boundaries rendered as the space piece.
pub fn segment_sentence(sentence: &str, vocab: &WordpieceVocab) -> Result<Vec<usize>> {
    for (pos, c) in sentence.char_indices() {
        if !is_inventory_char(c) {
            return Err(Error::Invalid(format!(
                "out-of-inventory character {c:?} at byte {pos}"
            )));
        }
    }
    if sentence.starts_with(' ') || sentence.ends_with(' ') || sentence.contains("  ") {
        return Err(Error::Invalid(
            "sentence must use single spaces between words, none leading or trailing".into(),
        ));
    }
    let mut out = Vec::new();
    for (w, word) in sentence.split(' ').enumerate() {
        if w > 0 {
            out.push(vocab.space_index());
        }
        segment_word(word, vocab, &mut out);
    }
    Ok(out)
}

fn segment_word(word: &str, vocab: &WordpieceVocab, out: &mut Vec<usize>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        for end in (start + 1..=chars.len()).rev() {
            let candidate: String = chars[start..end].iter().collect();
            if let Some(idx) = vocab.piece_index(&candidate) {
                matched = Some((idx, end));
                break;
            }
        }
        // Single graphemes are always present, so a match always exists.
        let (idx, end) = matched.expect("grapheme fallback");
        out.push(idx);
        start = end;
    }
}

/// Inverse of segmentation on its image: pieces concatenated, the space
/// piece rendered as a single space.
pub fn detokenize(pieces: &[usize], vocab: &WordpieceVocab) -> String {
    let mut out = String::new();
    for &p in pieces {
        if p == vocab.space_index() {
            out.push(' ');
        } else {
            out.push_str(vocab.piece(p));
        }
    }
    out
}

/// Display rendering: each piece wrapped in angle brackets.
pub fn render_pieces(pieces: &[usize], vocab: &WordpieceVocab) -> String {
    pieces
        .iter()
        .map(|&p| {
            if p == vocab.space_index() {
                SPACE_PIECE.to_string()
            } else {
                format!("<{}>", vocab.piece(p))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}
