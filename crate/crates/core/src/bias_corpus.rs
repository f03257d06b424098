//! Bias lists and bias labels for training batches.
//!
//! A batch's references are split in two: those with gazetteer entities
//! contribute the entities, the rest contribute randomly sampled word
//! n-grams. Short lists are topped up with single-word distractors drawn
//! from outside the most frequent words. Each reference then gets one bias
//! label per word piece: the list index of the phrase the piece belongs to,
//! or 0 for no-bias.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{normalize_words, BpeModel, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityClass {
    Per,
    Loc,
    Org,
    Other,
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityClass::Per => "PER",
            EntityClass::Loc => "LOC",
            EntityClass::Org => "ORG",
            EntityClass::Other => "OTHER",
        })
    }
}

impl FromStr for EntityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PER" => Ok(EntityClass::Per),
            "LOC" => Ok(EntityClass::Loc),
            "ORG" => Ok(EntityClass::Org),
            "OTHER" => Ok(EntityClass::Other),
            _ => Err(Error::InvalidArgument(format!("unknown entity class `{s}`"))),
        }
    }
}

/// Known entity surface forms, matched case-insensitively on word boundaries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gazetteer {
    entries: BTreeMap<Vec<String>, EntityClass>,
    max_words: usize,
}

/// An entity occurrence: word span `[words.start, words.end)` of the text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntitySpan {
    pub words: Range<usize>,
    pub class: EntityClass,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, class: EntityClass) -> Result<()> {
        let words = normalize_words(surface);
        if words.is_empty() {
            return Err(Error::InvalidArgument("empty gazetteer entry".into()));
        }
        self.max_words = self.max_words.max(words.len());
        self.entries.insert(words, class);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (String, EntityClass)> + '_ {
        self.entries.iter().map(|(w, c)| (w.join(" "), *c))
    }

    /// Longest-match, left-to-right, non-overlapping entity spans.
    pub fn annotate(&self, text: &str) -> Vec<EntitySpan> {
        let words = normalize_words(text);
        let mut spans = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let longest = (1..=self.max_words.min(words.len() - i))
                .rev()
                .find_map(|n| self.entries.get(&words[i..i + n]).map(|c| (n, *c)));
            match longest {
                Some((n, class)) => {
                    spans.push(EntitySpan {
                        words: i..i + n,
                        class,
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        spans
    }

    /// Reads `surface form<TAB>CLASS` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut g = Self::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (form, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected form<TAB>CLASS", n + 1)))?;
            let class = class
                .trim()
                .parse()
                .map_err(|e: Error| Error::format(path, format!("line {}: {e}", n + 1)))?;
            g.insert(form, class)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.entries().map(|(f, c)| format!("{f}\t{c}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Annotates `text` with gazetteer entities.
pub fn annotate_entities(text: &str, gazetteer: &Gazetteer) -> Vec<EntitySpan> {
    gazetteer.annotate(text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasSamplingConfig {
    /// Maximum number of n-grams drawn from one reference.
    pub n_phrases_max: usize,
    /// Maximum words per drawn n-gram.
    pub n_order_max: usize,
    /// Lists shorter than this are topped up with distractors.
    pub distractor_floor: usize,
    /// Fraction of most frequent words never used as distractors.
    pub top_frequency_exclusion: f64,
}

impl Default for BiasSamplingConfig {
    fn default() -> Self {
        Self {
            n_phrases_max: 2,
            n_order_max: 3,
            distractor_floor: 20,
            top_frequency_exclusion: 0.2,
        }
    }
}

impl BiasSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phrases_max < 1 || self.n_order_max < 1 {
            return Err(Error::Config("n_phrases_max and n_order_max must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.top_frequency_exclusion) {
            return Err(Error::Config(format!(
                "top_frequency_exclusion {} outside [0,1)",
                self.top_frequency_exclusion
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhraseOrigin {
    Entity,
    Ngram,
    Distractor,
    /// Loaded from a file for decoding.
    External,
}

/// Bias phrases indexed from 1; index 0 is the implicit no-bias slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BiasList {
    phrases: Vec<String>,
    origins: Vec<PhraseOrigin>,
    index: HashMap<String, usize>,
}

impl BiasList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a list from phrases, dropping duplicates after normalization.
    pub fn from_phrases<S: AsRef<str>>(phrases: &[S]) -> Self {
        let mut list = Self::new();
        for p in phrases {
            list.insert(p.as_ref(), PhraseOrigin::External);
        }
        list
    }

    /// Inserts a phrase (whitespace-normalized, lowercased) and returns its
    /// index; an existing phrase keeps its index. Empty phrases return `None`.
    pub fn insert(&mut self, phrase: &str, origin: PhraseOrigin) -> Option<usize> {
        let norm = normalize_words(phrase).join(" ");
        if norm.is_empty() {
            return None;
        }
        if let Some(&i) = self.index.get(&norm) {
            return Some(i);
        }
        self.phrases.push(norm.clone());
        self.origins.push(origin);
        let i = self.phrases.len();
        self.index.insert(norm, i);
        Some(i)
    }

    /// Number of phrases, excluding the no-bias slot.
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Phrase at a 1-based index.
    pub fn phrase(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.phrases.get(i)).map(String::as_str)
    }

    pub fn origin(&self, index: usize) -> Option<PhraseOrigin> {
        index.checked_sub(1).and_then(|i| self.origins.get(i)).copied()
    }

    pub fn index_of(&self, phrase: &str) -> Option<usize> {
        self.index.get(&normalize_words(phrase).join(" ")).copied()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Reads one phrase per line; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        Ok(Self::from_phrases(&lines))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.phrases.iter().map(|p| format!("{p}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Word counts over the training transcripts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrequencyTable {
    /// Sorted by descending count, then ascending word.
    ranked: Vec<(String, u64)>,
}

impl FrequencyTable {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in texts {
            for w in normalize_words(t.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self { ranked }
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn ranked(&self) -> &[(String, u64)] {
        &self.ranked
    }

    /// Number of words in the excluded top band: `ceil(fraction * len)`.
    pub fn top_band_size(&self, fraction: f64) -> usize {
        ((self.ranked.len() as f64) * fraction).ceil() as usize
    }

    /// Words in the top `fraction` of the frequency ranking.
    pub fn top_band(&self, fraction: f64) -> HashSet<&str> {
        self.ranked[..self.top_band_size(fraction).min(self.ranked.len())]
            .iter()
            .map(|(w, _)| w.as_str())
            .collect()
    }

    /// Reads `word<TAB>count` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (w, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected word<TAB>count", n + 1)))?;
            let c: u64 = c
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad count `{c}`", n + 1)))?;
            counts.push((w.to_string(), c));
        }
        Ok(Self::from_counts(counts))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.ranked.iter().map(|(w, c)| format!("{w}\t{c}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Draws `k ~ U{1..n_phrases_max}` non-overlapping word n-grams with
/// `n ~ U{1..n_order_max}`, clipped to what still fits in the reference.
pub fn sample_ngrams<R: Rng>(
    reference_words: &[String],
    cfg: &BiasSamplingConfig,
    rng: &mut R,
) -> Vec<Vec<String>> {
    let len = reference_words.len();
    if len == 0 {
        return Vec::new();
    }
    let k = rng.gen_range(1..=cfg.n_phrases_max);
    let mut taken = vec![false; len];
    let mut spans: Vec<Range<usize>> = Vec::with_capacity(k);
    for _ in 0..k {
        let drawn = rng.gen_range(1..=cfg.n_order_max).min(len);
        let mut chosen = None;
        for n in (1..=drawn).rev() {
            let starts: Vec<usize> = (0..=len - n)
                .filter(|&s| taken[s..s + n].iter().all(|t| !t))
                .collect();
            if !starts.is_empty() {
                let s = starts[rng.gen_range(0..starts.len())];
                chosen = Some(s..s + n);
                break;
            }
        }
        let Some(span) = chosen else { break };
        taken[span.clone()].iter_mut().for_each(|t| *t = true);
        spans.push(span);
    }
    spans.sort_by_key(|s| s.start);
    spans
        .into_iter()
        .map(|s| reference_words[s].to_vec())
        .collect()
}

/// A batch bias list and, per reference, the list indices assigned to it.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchBias {
    pub list: BiasList,
    pub assignments: Vec<Vec<usize>>,
}

/// Builds the bias list for one training batch.
///
/// Distractors are single words from the frequency table outside its top
/// `top_frequency_exclusion` band; words already in the batch references or
/// the list are skipped so a distractor never labels audio it appears in.
pub fn build_batch_bias_list<S: AsRef<str>, R: Rng>(
    batch_references: &[S],
    gazetteer: &Gazetteer,
    cfg: &BiasSamplingConfig,
    frequency: &FrequencyTable,
    rng: &mut R,
) -> Result<BatchBias> {
    if batch_references.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut list = BiasList::new();
    let mut assignments = Vec::with_capacity(batch_references.len());
    for r in batch_references {
        let text = r.as_ref();
        let words = normalize_words(text);
        let entities = gazetteer.annotate(text);
        let mut assigned = Vec::new();
        if entities.is_empty() {
            for ngram in sample_ngrams(&words, cfg, rng) {
                if let Some(i) = list.insert(&ngram.join(" "), PhraseOrigin::Ngram) {
                    assigned.push(i);
                }
            }
        } else {
            for e in entities {
                if let Some(i) = list.insert(&words[e.words].join(" "), PhraseOrigin::Entity) {
                    assigned.push(i);
                }
            }
        }
        assigned.dedup();
        assignments.push(assigned);
    }

    if list.len() < cfg.distractor_floor {
        let needed = cfg.distractor_floor - list.len();
        let excluded = frequency.top_band(cfg.top_frequency_exclusion);
        let in_batch: HashSet<String> = batch_references
            .iter()
            .flat_map(|r| normalize_words(r.as_ref()))
            .collect();
        let mut pool: Vec<&str> = frequency
            .ranked()
            .iter()
            .map(|(w, _)| w.as_str())
            .filter(|w| !excluded.contains(w) && !in_batch.contains(*w) && list.index_of(w).is_none())
            .collect();
        if pool.len() < needed {
            return Err(Error::Config(format!(
                "frequency table offers {} distractor words, {needed} needed",
                pool.len()
            )));
        }
        let (picked, _) = pool.partial_shuffle(rng, needed);
        for w in picked.iter() {
            list.insert(w, PhraseOrigin::Distractor);
        }
    }
    Ok(BatchBias { list, assignments })
}

/// One bias label per word piece of a reference (0 = no-bias).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BiasLabelSequence(pub Vec<usize>);

impl BiasLabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Labels each word piece of `reference` with the index of the assigned
/// phrase it belongs to.
///
/// All occurrences of each assigned phrase are labeled. Overlapping
/// occurrences go to the longer phrase first, then the leftmost.
pub fn make_bias_labels(
    reference: &TokenSequence,
    assigned: &[usize],
    list: &BiasList,
) -> Result<BiasLabelSequence> {
    let word_of_piece = reference.word_index();
    let num_words = word_of_piece.last().map_or(0, |w| w + 1);
    let words = reference_words(reference, num_words);

    let mut phrases: Vec<(usize, Vec<String>)> = Vec::with_capacity(assigned.len());
    for &idx in assigned {
        let phrase = list
            .phrase(idx)
            .ok_or_else(|| Error::Contract(format!("bias index {idx} not in list of {}", list.len())))?;
        phrases.push((idx, normalize_words(phrase)));
    }
    phrases.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut word_label = vec![0usize; num_words];
    for (idx, pw) in &phrases {
        let n = pw.len();
        let mut found = false;
        let mut s = 0;
        while n <= num_words && s + n <= num_words {
            if words[s..s + n] == pw[..] {
                found = true;
                if word_label[s..s + n].iter().all(|&l| l == 0) {
                    word_label[s..s + n].iter_mut().for_each(|l| *l = *idx);
                    s += n;
                    continue;
                }
            }
            s += 1;
        }
        if !found {
            return Err(Error::Contract(format!(
                "assigned phrase `{}` does not occur in the reference",
                pw.join(" ")
            )));
        }
    }
    Ok(BiasLabelSequence(
        word_of_piece.iter().map(|&w| word_label[w]).collect(),
    ))
}

/// Reassembles whole words from a piece sequence.
fn reference_words(seq: &TokenSequence, num_words: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(num_words);
    for p in &seq.pieces {
        match p.strip_prefix(crate::tokenizer::CONTINUATION) {
            Some(rest) if !words.is_empty() => {
                let last: &mut String = words.last_mut().unwrap();
                last.push_str(rest);
            }
            _ => words.push(p.clone()),
        }
    }
    words
}

/// Convenience wrapper that tokenizes `text` first.
pub fn labels_for_text(
    text: &str,
    assigned: &[usize],
    list: &BiasList,
    bpe: &BpeModel,
) -> Result<(TokenSequence, BiasLabelSequence)> {
    let seq = bpe.encode(text);
    let labels = make_bias_labels(&seq, assigned, list)?;
    Ok((seq, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        normalize_words(s)
    }

    fn seq(pieces: &[&str]) -> TokenSequence {
        TokenSequence {
            ids: (0..pieces.len()).map(|i| i + 4).collect(),
            pieces: pieces.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn annotate_examples() {
        let mut g = Gazetteer::new();
        g.insert("Hanna", EntityClass::Per).unwrap();
        assert_eq!(
            g.annotate("call hanna phone"),
            vec![EntitySpan {
                words: 1..2,
                class: EntityClass::Per
            }]
        );
        assert!(g.annotate("call mom").is_empty());

        let mut g = Gazetteer::new();
        g.insert("new york", EntityClass::Loc).unwrap();
        g.insert("york", EntityClass::Loc).unwrap();
        let spans = annotate_entities("new york", &g);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].words, 0..2);
    }

    #[test]
    fn one_word_reference_always_yields_itself() {
        let cfg = BiasSamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            assert_eq!(sample_ngrams(&words("solo"), &cfg, &mut rng), vec![words("solo")]);
        }
    }

    #[test]
    fn sampled_ngrams_respect_bounds_and_do_not_overlap() {
        let cfg = BiasSamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference = words("w1 w2 w3 w4 w5 w6 w7 w8 w9 w10");
        for _ in 0..500 {
            let got = sample_ngrams(&reference, &cfg, &mut rng);
            assert!((1..=2).contains(&got.len()));
            let mut used = HashSet::new();
            for p in &got {
                assert!((1..=3).contains(&p.len()));
                let start = reference.iter().position(|w| *w == p[0]).unwrap();
                assert_eq!(&reference[start..start + p.len()], &p[..]);
                for w in p {
                    assert!(used.insert(w.clone()), "overlap on {w}");
                }
            }
        }
    }

    #[test]
    fn phrase_count_is_uniform() {
        let cfg = BiasSamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reference = words("a b c d e f g h i j k l m n o p q r s t");
        let draws = 100_000;
        let ones = (0..draws)
            .filter(|_| sample_ngrams(&reference, &cfg, &mut rng).len() == 1)
            .count();
        let p1 = ones as f64 / draws as f64;
        assert!((p1 - 0.5).abs() <= 0.01, "{p1}");
    }

    #[test]
    fn labels_follow_word_piece_examples() {
        let mut list = BiasList::new();
        list.insert("hanna", PhraseOrigin::Entity);
        list.insert("shanghai", PhraseOrigin::Entity);
        let l = make_bias_labels(&seq(&["call", "han", "@@na", "phone"]), &[1], &list).unwrap();
        assert_eq!(l.0, vec![0, 1, 1, 0]);
        let l = make_bias_labels(
            &seq(&["i", "will", "go", "to", "shang", "@@hai"]),
            &[2],
            &list,
        )
        .unwrap();
        assert_eq!(l.0, vec![0, 0, 0, 0, 2, 2]);
        let l = make_bias_labels(&seq(&["call", "han", "@@na"]), &[], &list).unwrap();
        assert_eq!(l.0, vec![0, 0, 0]);
    }

    #[test]
    fn labels_prefer_longer_phrases_and_reject_absent_ones() {
        let mut list = BiasList::new();
        list.insert("york", PhraseOrigin::Ngram);
        list.insert("new york", PhraseOrigin::Entity);
        let l = make_bias_labels(&seq(&["to", "new", "york", "and", "york"]), &[1, 2], &list).unwrap();
        assert_eq!(l.0, vec![0, 2, 2, 0, 1]);
        let err = make_bias_labels(&seq(&["to", "boston"]), &[2], &list).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn frequency() -> FrequencyTable {
        let mut counts: Vec<(String, u64)> = (0..100).map(|i| (format!("w{i:03}"), 1000 - i as u64)).collect();
        counts.push(("the".into(), 5000));
        FrequencyTable::from_counts(counts)
    }

    #[test]
    fn distractors_fill_to_floor() {
        let mut g = Gazetteer::new();
        g.insert("hanna", EntityClass::Per).unwrap();
        let cfg = BiasSamplingConfig {
            distractor_floor: 200,
            ..Default::default()
        };
        let mut counts: Vec<(String, u64)> = (0..400).map(|i| (format!("d{i:03}"), 1)).collect();
        counts.push(("the".into(), 10));
        let freq = FrequencyTable::from_counts(counts);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // one entity ref + one ref whose single word gives one n-gram, plus a two-entity ref
        let mut g2 = g.clone();
        g2.insert("paris", EntityClass::Loc).unwrap();
        let out = build_batch_bias_list(&["call hanna", "hello", "hanna in paris"], &g2, &cfg, &freq, &mut rng).unwrap();
        let extracted = out.list.phrases().len()
            - (1..=out.list.len())
                .filter(|&i| out.list.origin(i) == Some(PhraseOrigin::Distractor))
                .count();
        assert_eq!(extracted, 3);
        assert_eq!(out.list.len(), 200);
        assert_eq!(out.assignments[0], vec![1]);
        assert_eq!(out.assignments[2], vec![1, 3]);

        let none = BiasSamplingConfig {
            distractor_floor: 0,
            ..Default::default()
        };
        let out = build_batch_bias_list(&["call hanna"], &g, &none, &freq, &mut rng).unwrap();
        assert_eq!(out.list.len(), 1);
    }

    #[test]
    fn distractors_avoid_top_band() {
        let g = Gazetteer::new();
        let cfg = BiasSamplingConfig::default();
        let freq = frequency();
        let top = freq.top_band(0.2);
        assert!(top.contains("the"));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let out = build_batch_bias_list(&["w001 w050 w099", "the w002"], &g, &cfg, &freq, &mut rng).unwrap();
            assert!(out.list.len() >= 20);
            for i in 1..=out.list.len() {
                if out.list.origin(i) == Some(PhraseOrigin::Distractor) {
                    assert!(!top.contains(out.list.phrase(i).unwrap()));
                }
            }
        }
    }

    #[test]
    fn too_small_frequency_table_is_config_error() {
        let freq = FrequencyTable::from_counts(vec![("a".to_string(), 3), ("b".to_string(), 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_batch_bias_list(&["a"], &Gazetteer::new(), &BiasSamplingConfig::default(), &freq, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bias_list_dedups_and_reserves_zero() {
        let list = BiasList::from_phrases(&["Hanna", "hanna ", "new  york"]);
        assert_eq!(list.len(), 2);
        assert_eq!(list.phrase(0), None);
        assert_eq!(list.phrase(2), Some("new york"));
    }

    #[test]
    fn file_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = Gazetteer::new();
        g.insert("new york", EntityClass::Loc).unwrap();
        g.insert("hanna", EntityClass::Per).unwrap();
        let p = dir.path().join("gaz.tsv");
        g.save(&p).unwrap();
        assert_eq!(Gazetteer::load(&p).unwrap(), g);

        let f = FrequencyTable::from_texts(&["a b a", "c a"]);
        let p = dir.path().join("freq.tsv");
        f.save(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a\t3\nb\t1\nc\t1\n");
        assert_eq!(FrequencyTable::load(&p).unwrap(), f);

        let l = BiasList::from_phrases(&["x y", "z"]);
        let p = dir.path().join("bias.txt");
        l.save(&p).unwrap();
        assert_eq!(BiasList::load(&p).unwrap(), l);

        std::fs::write(&p, "hanna\tNAME\n").unwrap();
        assert!(Gazetteer::load(&p).is_err());
    }
}
