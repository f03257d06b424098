//! Word error rate and bias-phrase recall.

use std::fmt;

use crate::error::{Error, Result};
use crate::tokenizer::normalize_words;

/// Levenshtein alignment counts for one reference/hypothesis pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words as f64
    }
}

/// Word-level edit counts with unit costs. Among minimal alignments,
/// substitutions are preferred, then deletions.
pub fn wer(reference: &str, hypothesis: &str) -> Result<EditCounts> {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty reference: WER undefined".into()));
    }
    Ok(align(&r, &h))
}

fn align(r: &[String], h: &[String]) -> EditCounts {
    // cost[i][j] with (S, I, D) carried along for the chosen path
    let (n, m) = (r.len(), h.len());
    let mut table = vec![vec![(0usize, 0usize, 0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        table[i][0] = (i, 0, 0, i);
    }
    for j in 1..=m {
        table[0][j] = (j, 0, j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (c, s, ins, del) = table[i - 1][j - 1];
            let diag = if r[i - 1] == h[j - 1] {
                (c, s, ins, del)
            } else {
                (c + 1, s + 1, ins, del)
            };
            let (c, s, ins, del) = table[i - 1][j];
            let up = (c + 1, s, ins, del + 1);
            let (c, s, ins, del) = table[i][j - 1];
            let left = (c + 1, s, ins + 1, del);
            let mut best = diag;
            if up.0 < best.0 {
                best = up;
            }
            if left.0 < best.0 {
                best = left;
            }
            table[i][j] = best;
        }
    }
    let (_, s, ins, del) = table[n][m];
    EditCounts {
        substitutions: s,
        insertions: ins,
        deletions: del,
        ref_words: n,
    }
}

fn occurrences(words: &[String], phrase: &[String]) -> usize {
    if phrase.is_empty() || phrase.len() > words.len() {
        return 0;
    }
    words.windows(phrase.len()).filter(|w| *w == phrase).count()
}

/// Phrase-occurrence counts for one utterance: each occurrence of an
/// assigned phrase in the reference counts once; it is recalled if the
/// hypothesis contains at least as many verbatim occurrences.
pub fn phrase_hits(reference: &str, hypothesis: &str, phrases: &[&str]) -> (usize, usize) {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    let mut hits = 0;
    let mut total = 0;
    for p in phrases {
        let pw = normalize_words(p);
        let in_ref = occurrences(&r, &pw);
        total += in_ref;
        hits += in_ref.min(occurrences(&h, &pw));
    }
    (hits, total)
}

/// One evaluated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem<'a> {
    pub reference: &'a str,
    pub hypothesis: &'a str,
    pub phrases: Vec<&'a str>,
}

/// Recall over all utterances; 0 when no reference contains a phrase.
pub fn phrase_recall(items: &[EvalItem<'_>]) -> f64 {
    let (hits, total) = items
        .iter()
        .map(|it| phrase_hits(it.reference, it.hypothesis, &it.phrases))
        .fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub wer: f64,
    pub counts: EditCounts,
    pub recall: f64,
    pub phrase_hits: usize,
    pub phrase_total: usize,
}

pub fn evaluate(items: &[EvalItem<'_>]) -> Result<EvalReport> {
    let mut counts = EditCounts::default();
    let (mut hits, mut total) = (0, 0);
    for it in items {
        counts.add(wer(it.reference, it.hypothesis)?);
        let (h, t) = phrase_hits(it.reference, it.hypothesis, &it.phrases);
        hits += h;
        total += t;
    }
    if counts.ref_words == 0 {
        return Err(Error::InvalidArgument("no reference words to score".into()));
    }
    Ok(EvalReport {
        wer: counts.wer(),
        counts,
        recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        phrase_hits: hits,
        phrase_total: total,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "WER\t{:.6}", self.wer)?;
        writeln!(f, "RECALL\t{:.6}", self.recall)?;
        writeln!(f, "SUBSTITUTIONS\t{}", self.counts.substitutions)?;
        writeln!(f, "INSERTIONS\t{}", self.counts.insertions)?;
        writeln!(f, "DELETIONS\t{}", self.counts.deletions)?;
        writeln!(f, "REF_WORDS\t{}", self.counts.ref_words)?;
        writeln!(f, "PHRASE_HITS\t{}", self.phrase_hits)?;
        write!(f, "PHRASE_TOTAL\t{}", self.phrase_total)
    }
}
