//! Byte-pair-encoding word pieces with `@@`-prefixed continuation pieces.
//!
//! Text is lowercased and split on whitespace. Each word starts as its
//! characters, the first bare and the rest prefixed with `@@`, so "hanna"
//! may end up as `han @@na`. Merges are learned most-frequent-first with
//! ties broken by lexicographic pair order, and applied in learned order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["<blank>", "<sos>", "<eos>", "<unk>"];
pub const CONTINUATION: &str = "@@";
const MODEL_HEADER: &str = "CBA-BPE v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Word pieces with their vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub pieces: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the word each piece belongs to.
    pub fn word_index(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.pieces.len());
        let mut w = 0usize;
        for (i, p) in self.pieces.iter().enumerate() {
            if i > 0 && !is_continuation(p) {
                w += 1;
            }
            out.push(w);
        }
        out
    }
}

pub fn is_continuation(piece: &str) -> bool {
    piece.starts_with(CONTINUATION)
}

/// Lowercases and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

fn join_pair(left: &str, right: &str) -> String {
    let mut s = String::with_capacity(left.len() + right.len());
    s.push_str(left);
    s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
    s
}

impl BpeModel {
    /// Learns merges from `corpus` lines.
    ///
    /// The merge budget is `target_vocab_size` minus the reserved ids minus the
    /// number of distinct characters; continuation variants of single
    /// characters do not count against it. Merging also stops once the most
    /// frequent pair occurs fewer than `min_pair_frequency` times.
    pub fn train<S: AsRef<str>>(
        corpus: &[S],
        target_vocab_size: usize,
        min_pair_frequency: usize,
    ) -> Result<Self> {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in normalize_words(line.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::InvalidArgument("bpe_train: empty corpus".into()));
        }

        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .iter()
            .map(|(w, &c)| (initial_symbols(w), c))
            .collect();

        let mut chars: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        // Every observed character is usable both word-initially and as a continuation.
        let mut base: Vec<String> = chars
            .iter()
            .flat_map(|c| [c.to_string(), format!("{CONTINUATION}{c}")])
            .collect();
        base.sort();

        let budget = target_vocab_size.saturating_sub(RESERVED.len() + chars.len());
        let min_freq = min_pair_frequency.max(1);
        let mut merges = Vec::new();
        while merges.len() < budget {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
            let Some((best, best_count)) = counts
                .iter()
                .fold(None, |acc: Option<((&str, &str), usize)>, (&p, &c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                })
            else {
                break;
            };
            if best_count < min_freq {
                break;
            }
            let pair = (best.0.to_string(), best.1.to_string());
            for (syms, _) in words.iter_mut() {
                merge_in_place(syms, &pair.0, &pair.1);
            }
            merges.push(pair);
        }

        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(base);
        for (l, r) in &merges {
            let joined = join_pair(l, r);
            if !pieces.contains(&joined) {
                pieces.push(joined);
            }
        }
        Ok(Self::from_parts(merges, pieces))
    }

    fn from_parts(merges: Vec<(String, String)>, pieces: Vec<String>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let ids = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self {
            merges,
            ranks,
            pieces,
            ids,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.ids.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    fn encode_word(&self, word: &str, out: &mut TokenSequence) {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_in_place(&mut syms, l, r);
        }
        for s in syms {
            match self.ids.get(&s) {
                Some(&id) => {
                    out.ids.push(id);
                    out.pieces.push(s);
                }
                None => {
                    out.ids.push(UNK_ID);
                    out.pieces.push(RESERVED[UNK_ID].to_string());
                }
            }
        }
    }

    /// Splits text into word pieces; unknown symbols map to the unk id.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut out = TokenSequence::default();
        for w in normalize_words(text) {
            self.encode_word(&w, &mut out);
        }
        out
    }

    /// Joins pieces back into text, attaching `@@` pieces to their predecessor.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut text = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let piece = self.piece(id).ok_or_else(|| {
                Error::InvalidArgument(format!("token id {id} outside vocabulary of {}", self.vocab_size()))
            })?;
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if i > 0 => text.push_str(rest),
                _ => {
                    if i > 0 {
                        text.push(' ');
                    }
                    text.push_str(piece);
                }
            }
        }
        Ok(text)
    }

    /// Writes the model file: header, one `left<TAB>right` per merge, then `#VOCAB`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{MODEL_HEADER}").unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l}\t{r}").unwrap();
        }
        writeln!(s, "#VOCAB").unwrap();
        for (i, p) in self.pieces.iter().enumerate() {
            writeln!(s, "{p}\t{i}").unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MODEL_HEADER) {
            return Err(Error::format(path, format!("missing `{MODEL_HEADER}` header")));
        }
        let mut merges = Vec::new();
        let mut pieces = Vec::new();
        let mut in_vocab = false;
        for (n, line) in lines.enumerate() {
            if line == "#VOCAB" {
                in_vocab = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected a tab", n + 2)))?;
            if in_vocab {
                let id: usize = b
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {}: bad id `{b}`", n + 2)))?;
                if id != pieces.len() {
                    return Err(Error::format(path, format!("line {}: ids must be dense", n + 2)));
                }
                pieces.push(a.to_string());
            } else {
                merges.push((a.to_string(), b.to_string()));
            }
        }
        if pieces.len() < RESERVED.len() || pieces[..RESERVED.len()] != RESERVED {
            return Err(Error::format(path, "vocabulary must start with the reserved pieces"));
        }
        Ok(Self::from_parts(merges, pieces))
    }
}

fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            let joined = join_pair(&syms[i], &syms[i + 1]);
            syms[i] = joined;
            syms.remove(i + 1);
        }
        i += 1;
    }
}
