//! Synthetic speech-like corpus.
//!
//! Transcripts come from a seeded bigram grammar over invented common words,
//! with rare multi-syllable phrases (the bias targets) spliced in. Features
//! are per-word-piece template vectors repeated for a random duration plus
//! Gaussian noise, so both CTC alignment and attention have real work to do.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bias_corpus::{EntityClass, FrequencyTable, Gazetteer};
use crate::error::{Error, Result};
use crate::params::ByteReader;
use crate::tensor::Matrix;
use crate::tokenizer::BpeModel;

const CONSONANTS: &[char] = &['b', 'd', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const FEATURE_HEADER: &[u8] = b"CBA-FEAT v1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub d_feat: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_sigma: f64,
    /// Size of the consonant-vowel syllable inventory every word is built from.
    pub syllables: usize,
    /// Common words in the grammar, including the function words.
    pub vocab_words: usize,
    pub function_words: usize,
    pub rare_phrase_count: usize,
    pub rare_train_occurrences: usize,
    /// Extra invented phrases never used in any split, for false-trigger tests.
    pub distractor_phrase_count: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_general_test: usize,
    pub n_bias_test: usize,
    pub bpe_vocab_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            dur_min: 2,
            dur_max: 5,
            noise_sigma: 0.1,
            syllables: 20,
            vocab_words: 50,
            function_words: 10,
            rare_phrase_count: 30,
            rare_train_occurrences: 1,
            distractor_phrase_count: 60,
            min_sentence_words: 3,
            max_sentence_words: 6,
            n_train: 1500,
            n_dev: 60,
            n_general_test: 200,
            n_bias_test: 90,
            bpe_vocab_size: 90,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dur_min < 1 || self.dur_min > self.dur_max {
            return Err(Error::Config(format!(
                "durations must satisfy 1 <= dur_min ({}) <= dur_max ({})",
                self.dur_min, self.dur_max
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("d_feat must be >= 1".into()));
        }
        let max_syllables = CONSONANTS.len() * VOWELS.len();
        if self.syllables < 2 || self.syllables > max_syllables {
            return Err(Error::Config(format!("syllables must be in 2..={max_syllables}")));
        }
        if self.function_words > self.syllables {
            return Err(Error::Config("function_words cannot exceed the syllable inventory".into()));
        }
        if self.function_words >= self.vocab_words {
            return Err(Error::Config("function_words must be < vocab_words".into()));
        }
        if self.min_sentence_words < 1 || self.min_sentence_words > self.max_sentence_words {
            return Err(Error::Config("sentence length bounds are inconsistent".into()));
        }
        if self.rare_phrase_count * self.rare_train_occurrences > self.n_train {
            return Err(Error::Config("n_train too small for the rare-phrase occurrences".into()));
        }
        Ok(())
    }
}

/// A `T x d_feat` feature matrix for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix,
}

impl FeatureSequence {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::InvalidArgument("feature sequence needs at least one frame".into()));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidArgument("feature sequence has non-finite entries".into()));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// One template vector per vocabulary piece.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceTemplates {
    rows: Matrix,
}

impl PieceTemplates {
    /// Draws each template from `Uniform(-1, 1)^d_feat`, in vocabulary id order.
    pub fn draw<R: Rng>(vocab_size: usize, d_feat: usize, rng: &mut R) -> Self {
        let data = (0..vocab_size * d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            rows: Matrix::from_vec(vocab_size, d_feat, data).expect("sized"),
        }
    }

    pub fn from_matrix(rows: Matrix) -> Self {
        Self { rows }
    }

    pub fn template(&self, piece: usize) -> Option<&[f64]> {
        (piece < self.rows.rows()).then(|| self.rows.row(piece))
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Repeats each piece's template for `U{dur_min..dur_max}` frames and adds
/// i.i.d. `N(0, noise_sigma^2)` noise.
pub fn gen_utterance<R: Rng>(
    piece_ids: &[usize],
    templates: &PieceTemplates,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<FeatureSequence> {
    if piece_ids.is_empty() {
        return Err(Error::InvalidArgument("gen_utterance: empty piece list".into()));
    }
    let d = templates.dim();
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut data = Vec::new();
    let mut frames = 0;
    for &p in piece_ids {
        let tpl = templates
            .template(p)
            .ok_or_else(|| Error::InvalidArgument(format!("no template for piece id {p}")))?;
        let dur = rng.gen_range(cfg.dur_min..=cfg.dur_max);
        for _ in 0..dur {
            for &v in tpl {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(v + n);
            }
            frames += 1;
        }
    }
    FeatureSequence::new(Matrix::from_vec(frames, d, data)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

/// Transcripts and side tables; features are produced separately once a
/// tokenizer exists (see [`featurize`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Split,
    pub dev: Split,
    pub general_test: Split,
    pub bias_test: Split,
    pub gazetteer: Gazetteer,
    pub frequency: FrequencyTable,
    pub common_words: Vec<String>,
    pub function_words: Vec<String>,
    pub rare_phrases: Vec<String>,
    pub distractor_phrases: Vec<String>,
}

impl Corpus {
    pub fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.dev, &self.general_test, &self.bias_test]
    }
}

struct Grammar {
    words: Vec<String>,
    n_function: usize,
    successors: Vec<Vec<(usize, f64)>>,
}

impl Grammar {
    fn new(words: Vec<String>, n_function: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = words.len();
        let successors = (0..n)
            .map(|_| {
                let mut content: Vec<usize> = (n_function..n).collect();
                content.shuffle(rng);
                content
                    .into_iter()
                    .take(4)
                    .map(|w| (w, rng.gen_range(0.5..1.5)))
                    .collect()
            })
            .collect();
        Self {
            words,
            n_function,
            successors,
        }
    }

    fn sentence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.gen_range(0..self.words.len());
        out.push(self.words[cur].clone());
        while out.len() < len {
            cur = if rng.gen_bool(0.5) {
                rng.gen_range(0..self.n_function)
            } else {
                let succ = &self.successors[cur];
                let total: f64 = succ.iter().map(|s| s.1).sum();
                let mut x = rng.gen_range(0.0..total);
                let mut pick = succ[succ.len() - 1].0;
                for &(w, p) in succ {
                    if x < p {
                        pick = w;
                        break;
                    }
                    x -= p;
                }
                pick
            };
            out.push(self.words[cur].clone());
        }
        out
    }
}

fn syllable_inventory(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut all: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn invent_words(
    count: usize,
    syllables: std::ops::RangeInclusive<usize>,
    inventory: &[String],
    taken: &mut HashSet<String>,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(syllables.clone());
        let w: String = (0..n).map(|_| inventory[rng.gen_range(0..inventory.len())].as_str()).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates all splits and side tables from one seed.
pub fn gen_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = split_rng(seed, 0);
    let inventory = syllable_inventory(cfg.syllables, &mut rng);
    let mut taken = HashSet::new();
    let function_words = invent_words(cfg.function_words, 1..=1, &inventory, &mut taken, &mut rng);
    let content = invent_words(cfg.vocab_words - cfg.function_words, 2..=3, &inventory, &mut taken, &mut rng);
    let mut common_words = function_words.clone();
    common_words.extend(content);

    let mut make_phrases = |count: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..count)
            .map(|_| {
                let n_words = rng.gen_range(1..=2);
                invent_words(n_words, 2..=3, &inventory, &mut taken, rng).join(" ")
            })
            .collect()
    };
    let rare_phrases = make_phrases(cfg.rare_phrase_count, &mut rng);
    let distractor_phrases = make_phrases(cfg.distractor_phrase_count, &mut rng);

    let classes = [EntityClass::Per, EntityClass::Loc, EntityClass::Org, EntityClass::Other];
    let mut gazetteer = Gazetteer::new();
    for (i, p) in rare_phrases.iter().enumerate() {
        gazetteer.insert(p, classes[i % classes.len()])?;
    }

    let grammar = Grammar::new(common_words.clone(), cfg.function_words, &mut rng);
    let sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(cfg.min_sentence_words..=cfg.max_sentence_words);
        grammar.sentence(len, rng)
    };
    let splice = |mut words: Vec<String>, phrase: &str, rng: &mut ChaCha8Rng| {
        let at = rng.gen_range(0..=words.len());
        let tail = words.split_off(at);
        words.extend(phrase.split(' ').map(String::from));
        words.extend(tail);
        words.join(" ")
    };
    let make_split = |name: &str, texts: Vec<String>| Split {
        name: name.to_string(),
        utterances: texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Utterance {
                id: format!("{name}-{i:05}"),
                text,
            })
            .collect(),
    };

    let mut rng = split_rng(seed, 1);
    let mut train_texts: Vec<String> = Vec::with_capacity(cfg.n_train);
    for p in &rare_phrases {
        for _ in 0..cfg.rare_train_occurrences {
            let s = sentence(&mut rng);
            train_texts.push(splice(s, p, &mut rng));
        }
    }
    while train_texts.len() < cfg.n_train {
        train_texts.push(sentence(&mut rng).join(" "));
    }
    train_texts.shuffle(&mut rng);

    let mut rng = split_rng(seed, 2);
    let dev_texts = (0..cfg.n_dev).map(|_| sentence(&mut rng).join(" ")).collect();
    let mut rng = split_rng(seed, 3);
    let general_texts = (0..cfg.n_general_test).map(|_| sentence(&mut rng).join(" ")).collect();
    let mut rng = split_rng(seed, 4);
    let bias_texts = (0..cfg.n_bias_test)
        .map(|i| {
            let s = sentence(&mut rng);
            splice(s, &rare_phrases[i % rare_phrases.len().max(1)], &mut rng)
        })
        .collect();

    let frequency = FrequencyTable::from_texts(&train_texts);
    Ok(Corpus {
        train: make_split("train", train_texts),
        dev: make_split("dev", dev_texts),
        general_test: make_split("general_test", general_texts),
        bias_test: make_split("bias_test", bias_texts),
        gazetteer,
        frequency,
        common_words,
        function_words,
        rare_phrases,
        distractor_phrases,
    })
}

/// Features for every utterance of a split, in order.
pub fn featurize(
    split: &Split,
    bpe: &BpeModel,
    templates: &PieceTemplates,
    cfg: &SynthConfig,
    seed: u64,
    stream: u64,
) -> Result<Vec<(String, FeatureSequence)>> {
    let mut rng = split_rng(seed, 100 + stream);
    split
        .utterances
        .iter()
        .map(|u| {
            let ids = bpe.encode(&u.text).ids;
            gen_utterance(&ids, templates, cfg, &mut rng).map(|f| (u.id.clone(), f))
        })
        .collect()
}

/// Writes `id<TAB>text` lines.
pub fn write_transcripts(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let text: String = utterances.iter().map(|u| format!("{}\t{}\n", u.id, u.text)).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let (id, t) = l
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected id<TAB>text", n + 1)))?;
            Ok(Utterance {
                id: id.to_string(),
                text: t.to_string(),
            })
        })
        .collect()
}

/// Binary feature file: header `CBA-FEAT v1\n`, `u64` utterance count, then
/// per utterance `u32` id length, id bytes, `u64` T, `u64` d_feat and
/// row-major little-endian `f64` values.
pub fn write_features(path: &Path, items: &[(String, FeatureSequence)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_HEADER);
    buf.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for (id, f) in items {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(f.num_frames() as u64).to_le_bytes());
        buf.extend_from_slice(&(f.dim() as u64).to_le_bytes());
        for v in f.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<(String, FeatureSequence)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(FEATURE_HEADER.len())? != FEATURE_HEADER {
        return Err(Error::format(path, "missing CBA-FEAT v1 header"));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let id = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format(path, "utterance id is not UTF-8"))?;
        let t = r.u64()? as usize;
        let d = r.u64()? as usize;
        let data = (0..t * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let f = FeatureSequence::new(Matrix::from_vec(t, d, data)?)
            .map_err(|e| Error::format(path, format!("{id}: {e}")))?;
        out.push((id, f));
    }
    if !r.is_done() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(out)
}
