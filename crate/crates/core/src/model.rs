//! Encoder-decoder with a CTC head, an LSTM bias encoder and the bias
//! attention head.
//!
//! The encoder subsamples frames by stacking neighbours and projecting them,
//! then runs pre-norm transformer layers. The decoder is a pre-norm
//! transformer whose last layer exposes its source-attention output (the
//! query for bias attention) and its head-averaged attention weights over
//! encoder frames. Bias phrases are embedded by the final hidden state of an
//! LSTM over their word pieces; row 0 of the bias embeddings is a learned
//! no-bias vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::bias_corpus::BiasList;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::synth_data::FeatureSequence;
use crate::tensor::Matrix;
use crate::tokenizer::{BpeModel, SOS_ID};

/// Prefix shared by every bias-encoder and bias-attention parameter name.
pub const BIAS_PARAM_PREFIX: &str = "bias.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub d_feat: usize,
    pub vocab_size: usize,
    pub bias_lstm_hidden: usize,
    /// Frames stacked per encoder position.
    pub subsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            num_heads: 4,
            d_ff: 128,
            d_feat: 16,
            vocab_size: 512,
            bias_lstm_hidden: 64,
            subsample: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the reserved ids plus one piece".into()));
        }
        if self.subsample == 0 || self.d_feat == 0 || self.bias_lstm_hidden == 0 || self.d_ff == 0 {
            return Err(Error::Config("subsample, d_feat, d_ff and bias_lstm_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder length for `frames` input frames.
    pub fn encoded_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_att: Norm,
    att: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_att: Attention,
    norm_src: Norm,
    src_att: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct BiasParams {
    embedding: ParamId,
    lstm_wx: ParamId,
    lstm_wh: ParamId,
    lstm_b: ParamId,
    no_bias: ParamId,
    w_query: ParamId,
    w_key: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    ctc_out: Linear,
    embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Linear,
    bias: BiasParams,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, out: usize, bias: bool) -> Linear {
        let w = self.store.add_uniform(format!("{name}.w"), fan_in, out, fan_in, &mut self.rng);
        let b = bias.then(|| self.store.add_uniform(format!("{name}.b"), 1, out, fan_in, &mut self.rng));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Matrix::filled(1, d, 1.0)),
            beta: self.store.add(format!("{name}.beta"), Matrix::zeros(1, d)),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, true),
            // a key bias shifts every score in a row equally, so softmax ignores it
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, true),
            o: self.linear(&format!("{name}.o"), d, d, true),
        }
    }

    fn ff(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, d_ff, true),
            down: self.linear(&format!("{name}.down"), d_ff, d, true),
        }
    }
}

/// Encoded frames `h^x`, `T' x d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Matrix,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Next-token logits plus the last decoder layer's source-attention output
/// and head-averaged attention weights for the final prefix position.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    pub logits: Vec<f64>,
    pub context_vector: Vec<f64>,
    pub source_attention: Vec<f64>,
}

/// Bias phrase embeddings `h^z`; row 0 is the no-bias embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasEmbeddings {
    pub rows: Matrix,
}

impl BiasEmbeddings {
    /// Number of phrases, excluding the no-bias row.
    pub fn num_phrases(&self) -> usize {
        self.rows.rows() - 1
    }
}

/// Distribution over the no-bias slot and each phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasAttentionDist {
    pub probs: Vec<f64>,
}

/// Graph handles produced by a teacher-forced decoder pass.
pub struct DecoderVars {
    /// `L x V` pre-softmax logits.
    pub logits: Var,
    /// `L x d_model` last-layer source-attention outputs.
    pub context: Var,
    /// Per-head `L x T'` source-attention weights of the last layer.
    pub source_heads: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CbaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn sinusoid(rows: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, d);
    for pos in 0..rows {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m[(r, c)] = f64::NEG_INFINITY;
        }
    }
    m
}

impl CbaModel {
    /// Builds a freshly initialized model. Parameter registration order is
    /// fixed, so a seed fully determines the initial values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let hidden = config.bias_lstm_hidden;
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let input_proj = b.linear("enc.input", config.d_feat * config.subsample, d, true);
        let encoder = (0..config.num_encoder_layers)
            .map(|l| EncoderLayer {
                norm_att: b.norm(&format!("enc.{l}.norm_att"), d),
                att: b.attention(&format!("enc.{l}.att"), d),
                norm_ff: b.norm(&format!("enc.{l}.norm_ff"), d),
                ff: b.ff(&format!("enc.{l}.ff"), d, config.d_ff),
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let ctc_out = b.linear("ctc.out", d, config.vocab_size, true);
        let embedding = b
            .store
            .add_uniform("dec.embedding", config.vocab_size, d, 1, &mut b.rng);
        let decoder = (0..config.num_decoder_layers)
            .map(|l| DecoderLayer {
                norm_self: b.norm(&format!("dec.{l}.norm_self"), d),
                self_att: b.attention(&format!("dec.{l}.self_att"), d),
                norm_src: b.norm(&format!("dec.{l}.norm_src"), d),
                src_att: b.attention(&format!("dec.{l}.src_att"), d),
                norm_ff: b.norm(&format!("dec.{l}.norm_ff"), d),
                ff: b.ff(&format!("dec.{l}.ff"), d, config.d_ff),
            })
            .collect();
        let decoder_norm = b.norm("dec.norm", d);
        let output = b.linear("dec.output", d, config.vocab_size, true);

        let bias_embedding = b
            .store
            .add_uniform("bias.embedding", config.vocab_size, d, 1, &mut b.rng);
        let lstm_wx = b.store.add_uniform("bias.lstm.wx", d, 4 * hidden, d, &mut b.rng);
        let lstm_wh = b.store.add_uniform("bias.lstm.wh", hidden, 4 * hidden, hidden, &mut b.rng);
        let lstm_b = b.store.add_uniform("bias.lstm.b", 1, 4 * hidden, hidden, &mut b.rng);
        for v in &mut b.store.get_mut(lstm_b).value.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let no_bias = b.store.add_uniform("bias.no_bias", 1, hidden, hidden, &mut b.rng);
        let w_query = b.store.add_uniform("bias.w_query", d, d, d, &mut b.rng);
        let w_key = b.store.add_uniform("bias.w_key", hidden, d, hidden, &mut b.rng);

        let layout = Layout {
            input_proj,
            encoder,
            encoder_norm,
            ctc_out,
            embedding,
            decoder,
            decoder_norm,
            output,
            bias: BiasParams {
                embedding: bias_embedding,
                lstm_wx,
                lstm_wh,
                lstm_b,
                no_bias,
                w_query,
                w_key,
            },
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    pub fn is_bias_param(name: &str) -> bool {
        name.starts_with(BIAS_PARAM_PREFIX)
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        g.linear(x, l.w, l.b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    /// Multi-head attention; returns the projected output and per-head weights.
    fn attend(
        &self,
        g: &mut Graph,
        att: &Attention,
        query: Var,
        memory: Var,
        mask: Option<&Matrix>,
    ) -> Result<(Var, Vec<Var>)> {
        let heads = self.config.num_heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(g, query, &att.q)?;
        let k = self.linear(g, memory, &att.k)?;
        let v = self.linear(g, memory, &att.v)?;
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let w = g.scaled_dot(qh, kh, mask)?;
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.linear(g, cat, &att.o)?, weights))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff: &FeedForward) -> Result<Var> {
        let h = self.linear(g, x, &ff.up)?;
        let h = g.relu(h);
        self.linear(g, h, &ff.down)
    }

    /// Stacks `subsample` consecutive frames per encoder position, zero-padding the tail.
    fn stack_frames(&self, features: &FeatureSequence) -> Result<Matrix> {
        let (t, d) = features.frames.shape();
        if d != self.config.d_feat {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {d} does not match model d_feat {}",
                self.config.d_feat
            )));
        }
        let s = self.config.subsample;
        let t_out = self.config.encoded_len(t);
        let mut m = Matrix::zeros(t_out, d * s);
        for r in 0..t {
            let (row, slot) = (r / s, r % s);
            m.row_mut(row)[slot * d..(slot + 1) * d].copy_from_slice(features.frames.row(r));
        }
        Ok(m)
    }

    pub fn encode_graph(&self, g: &mut Graph, features: &FeatureSequence) -> Result<Var> {
        if features.num_frames() == 0 {
            return Err(Error::InvalidArgument("cannot encode zero frames".into()));
        }
        let stacked = self.stack_frames(features)?;
        let t_out = stacked.rows();
        let x = g.input(stacked);
        let x = self.linear(g, x, &self.layout.input_proj)?;
        let mut x = g.add_const(x, &sinusoid(t_out, self.config.d_model))?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, &layer.norm_att)?;
            let (a, _) = self.attend(g, &layer.att, h, h, None)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.norm_ff)?;
            let f = self.feed_forward(g, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, &self.layout.encoder_norm)
    }

    pub fn ctc_logits_graph(&self, g: &mut Graph, encoded: Var) -> Result<Var> {
        self.linear(g, encoded, &self.layout.ctc_out)
    }

    /// Teacher-forced decoder over `inputs` (starting with sos).
    pub fn decode_graph(&self, g: &mut Graph, encoded: Var, inputs: &[usize]) -> Result<DecoderVars> {
        if inputs.first() != Some(&SOS_ID) {
            return Err(Error::InvalidArgument("decoder prefix must start with sos".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(bad) = inputs.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let n = inputs.len();
        let table = g.param(self.layout.embedding);
        let x = g.gather_rows(table, inputs)?;
        let mut x = g.add_const(x, &sinusoid(n, self.config.d_model))?;
        let mask = causal_mask(n);
        let mut context = None;
        let mut source_heads = Vec::new();
        for layer in &self.layout.decoder {
            let h = self.norm(g, x, &layer.norm_self)?;
            let (a, _) = self.attend(g, &layer.self_att, h, h, Some(&mask))?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.norm_src)?;
            let (s, w) = self.attend(g, &layer.src_att, h, encoded, None)?;
            context = Some(s);
            source_heads = w;
            x = g.add(x, s)?;
            let h = self.norm(g, x, &layer.norm_ff)?;
            let f = self.feed_forward(g, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        let context = context.ok_or_else(|| Error::Config("decoder needs at least one layer".into()))?;
        let x = self.norm(g, x, &self.layout.decoder_norm)?;
        let logits = self.linear(g, x, &self.layout.output)?;
        Ok(DecoderVars {
            logits,
            context,
            source_heads,
        })
    }

    /// Final LSTM hidden state per phrase, stacked under the no-bias row.
    pub fn bias_encode_graph(&self, g: &mut Graph, phrases: &[Vec<usize>]) -> Result<Var> {
        let bp = &self.layout.bias;
        let no_bias = g.param(bp.no_bias);
        if phrases.is_empty() {
            return Ok(no_bias);
        }
        if let Some(i) = phrases.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("bias phrase {} has no word pieces", i + 1)));
        }
        let vocab = self.config.vocab_size;
        if let Some(bad) = phrases.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("piece id {bad} outside vocabulary of {vocab}")));
        }
        let hidden = self.config.bias_lstm_hidden;
        let table = g.param(bp.embedding);

        // Phrases of equal length run through the LSTM together, one row each.
        let mut lengths: Vec<usize> = phrases.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut finals = Vec::with_capacity(lengths.len());
        let mut order = Vec::with_capacity(phrases.len());
        for &len in &lengths {
            let members: Vec<usize> = (0..phrases.len()).filter(|&i| phrases[i].len() == len).collect();
            let rows = members.len();
            let mut h = g.input(Matrix::zeros(rows, hidden));
            let mut c = g.input(Matrix::zeros(rows, hidden));
            for step in 0..len {
                let ids: Vec<usize> = members.iter().map(|&i| phrases[i][step]).collect();
                let x = g.gather_rows(table, &ids)?;
                (h, c) = g.lstm_cell(x, h, c, bp.lstm_wx, bp.lstm_wh, bp.lstm_b)?;
            }
            finals.push(h);
            order.extend(members);
        }
        let mut parts = vec![no_bias];
        parts.extend(finals);
        let stacked = g.concat_rows(&parts)?;
        // stacked row 1 + k holds phrase order[k]; put phrase i at row i + 1
        let mut gather = vec![0usize; phrases.len() + 1];
        for (k, &i) in order.iter().enumerate() {
            gather[i + 1] = k + 1;
        }
        g.gather_rows(stacked, &gather)
    }

    /// Scaled dot-product scores `(W_q c)(W_k h^z)ᵀ / sqrt(d_model)`, one row per query.
    pub fn bias_scores_graph(&self, g: &mut Graph, context: Var, bias_embeddings: Var) -> Result<Var> {
        let bp = &self.layout.bias;
        let wq = g.param(bp.w_query);
        let wk = g.param(bp.w_key);
        let q = g.matmul(context, wq)?;
        let k = g.matmul(bias_embeddings, wk)?;
        let s = g.matmul_t(q, k)?;
        Ok(g.scale(s, 1.0 / (self.config.d_model as f64).sqrt()))
    }

    // Inference-side wrappers over plain matrices.

    pub fn encode(&self, features: &FeatureSequence) -> Result<EncoderOutput> {
        let mut g = Graph::new(&self.params);
        let e = self.encode_graph(&mut g, features)?;
        Ok(EncoderOutput {
            states: g.value(e).clone(),
        })
    }

    pub fn ctc_logits(&self, encoded: &EncoderOutput) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let e = g.input(encoded.states.clone());
        let l = self.ctc_logits_graph(&mut g, e)?;
        Ok(g.value(l).clone())
    }

    pub fn decoder_step(&self, prefix: &[usize], encoded: &EncoderOutput) -> Result<DecoderStepOutput> {
        let mut g = Graph::new(&self.params);
        let e = g.input(encoded.states.clone());
        let out = self.decode_graph(&mut g, e, prefix)?;
        let last = prefix.len() - 1;
        let frames = encoded.len();
        let mut source_attention = vec![0.0; frames];
        for &h in &out.source_heads {
            for (acc, v) in source_attention.iter_mut().zip(g.value(h).row(last)) {
                *acc += v;
            }
        }
        let heads = out.source_heads.len() as f64;
        source_attention.iter_mut().for_each(|v| *v /= heads);
        Ok(DecoderStepOutput {
            logits: g.value(out.logits).row(last).to_vec(),
            context_vector: g.value(out.context).row(last).to_vec(),
            source_attention,
        })
    }

    /// Tokenizes each phrase and embeds it.
    pub fn bias_encode(&self, list: &BiasList, bpe: &BpeModel) -> Result<BiasEmbeddings> {
        let phrases = phrase_pieces(list, bpe)?;
        self.bias_encode_pieces(&phrases)
    }

    pub fn bias_encode_pieces(&self, phrases: &[Vec<usize>]) -> Result<BiasEmbeddings> {
        let mut g = Graph::new(&self.params);
        let v = self.bias_encode_graph(&mut g, phrases)?;
        Ok(BiasEmbeddings {
            rows: g.value(v).clone(),
        })
    }

    /// Bias attention distribution for one context vector.
    pub fn bias_attend(&self, context: &[f64], embeddings: &BiasEmbeddings) -> Result<BiasAttentionDist> {
        if context.len() != self.config.d_model {
            return Err(Error::InvalidArgument(format!(
                "context vector has {} entries, d_model is {}",
                context.len(),
                self.config.d_model
            )));
        }
        if embeddings.rows.cols() != self.config.bias_lstm_hidden {
            return Err(Error::InvalidArgument(format!(
                "bias embeddings have width {}, expected {}",
                embeddings.rows.cols(),
                self.config.bias_lstm_hidden
            )));
        }
        let mut g = Graph::new(&self.params);
        let c = g.input(Matrix::row_vector(context));
        let e = g.input(embeddings.rows.clone());
        let s = self.bias_scores_graph(&mut g, c, e)?;
        let p = g.softmax_rows(s);
        Ok(BiasAttentionDist {
            probs: g.value(p).data().to_vec(),
        })
    }
}

/// Word-piece ids of every phrase in list order.
pub fn phrase_pieces(list: &BiasList, bpe: &BpeModel) -> Result<Vec<Vec<usize>>> {
    list.phrases()
        .iter()
        .map(|p| {
            let ids = bpe.encode(p).ids;
            if ids.is_empty() {
                Err(Error::InvalidArgument(format!("bias phrase `{p}` tokenizes to nothing")))
            } else {
                Ok(ids)
            }
        })
        .collect()
}
