//! Baseline tagger and the three chunking models, with training and inference.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, sgd_step, learning_rate, FdOptions, FdReport, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{chunks_to_iob, iob_to_chunks, repair_iob, split_long_spans, ChunkSpan, Index, Sentence, Tag, Vocab, OUTSIDE};
use crate::error::{Error, Result};
use crate::eval::{chunk_f1, segment_f1, EvalReport};
use crate::layers::{argmax, bilstm_run, char_cnn_embed, cnnmax, BiLstm, CharCnn, Cnn, Dropout, Embedding, Init, Linear, Lstm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Model1,
    Model2,
    Model3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Model1, Variant::Model2, Variant::Model3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Model1 => "model1",
            Variant::Model2 => "model2",
            Variant::Model3 => "model3",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected baseline, model1, model2 or model3)")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture and optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub word_dim: usize,
    pub char_cnn: bool,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_window: usize,
    pub hidden_dim: usize,
    pub decoder_dim: usize,
    pub dropout: f64,
    pub context_window: usize,
    /// Chunk CNN filter count; 0 means the token width.
    pub chunk_filters: usize,
    pub chunk_window: usize,
    pub max_chunk_length: usize,
    pub pointer_dim: usize,
    pub length_dim: usize,
    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Model3,
            word_dim: 50,
            char_cnn: true,
            char_dim: 30,
            char_filters: 30,
            char_window: 3,
            hidden_dim: 100,
            decoder_dim: 200,
            dropout: 0.5,
            context_window: 3,
            chunk_filters: 0,
            chunk_window: 2,
            max_chunk_length: 10,
            pointer_dim: 100,
            length_dim: 10,
            lr0: 0.1,
            decay: 1e-5,
            epochs: 200,
            seed: 1,
            init_range: 0.08,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 20] = [
        "variant",
        "word_dim",
        "char_cnn",
        "char_dim",
        "char_filters",
        "char_window",
        "hidden_dim",
        "decoder_dim",
        "dropout",
        "context_window",
        "chunk_filters",
        "chunk_window",
        "max_chunk_length",
        "pointer_dim",
        "length_dim",
        "lr0",
        "decay",
        "epochs",
        "seed",
        "init_range",
    ];

    /// Small dimensions for tests and gradient checks.
    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            variant,
            word_dim: 4,
            char_cnn: true,
            char_dim: 3,
            char_filters: 3,
            char_window: 3,
            hidden_dim: 5,
            decoder_dim: 10,
            dropout: 0.0,
            context_window: 3,
            chunk_filters: 0,
            chunk_window: 2,
            max_chunk_length: 3,
            pointer_dim: 4,
            length_dim: 2,
            lr0: 0.1,
            decay: 0.0,
            epochs: 10,
            seed: 0,
            init_range: 1.0,
        }
    }

    /// Full token representation width: word embedding plus char CNN output.
    pub fn token_dim(&self) -> usize {
        self.word_dim + if self.char_cnn { self.char_filters } else { 0 }
    }

    pub fn chunk_filter_count(&self) -> usize {
        if self.chunk_filters == 0 {
            self.token_dim()
        } else {
            self.chunk_filters
        }
    }

    /// Width of the chunk feature concatenation `[Cx; Ch; Cw]`.
    pub fn chunk_feature_dim(&self) -> usize {
        self.chunk_filter_count() + 2 * self.hidden_dim + self.context_window * self.token_dim()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "word_dim" => self.word_dim = parse_value(key, value)?,
            "char_cnn" => self.char_cnn = parse_value(key, value)?,
            "char_dim" => self.char_dim = parse_value(key, value)?,
            "char_filters" => self.char_filters = parse_value(key, value)?,
            "char_window" => self.char_window = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "decoder_dim" => self.decoder_dim = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "context_window" => self.context_window = parse_value(key, value)?,
            "chunk_filters" => self.chunk_filters = parse_value(key, value)?,
            "chunk_window" => self.chunk_window = parse_value(key, value)?,
            "max_chunk_length" => self.max_chunk_length = parse_value(key, value)?,
            "pointer_dim" => self.pointer_dim = parse_value(key, value)?,
            "length_dim" => self.length_dim = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "decay" => self.decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "init_range" => self.init_range = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.variant.to_string(),
            self.word_dim.to_string(),
            self.char_cnn.to_string(),
            self.char_dim.to_string(),
            self.char_filters.to_string(),
            self.char_window.to_string(),
            self.hidden_dim.to_string(),
            self.decoder_dim.to_string(),
            self.dropout.to_string(),
            self.context_window.to_string(),
            self.chunk_filters.to_string(),
            self.chunk_window.to_string(),
            self.max_chunk_length.to_string(),
            self.pointer_dim.to_string(),
            self.length_dim.to_string(),
            self.lr0.to_string(),
            self.decay.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.init_range.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
            ("decoder_dim", self.decoder_dim),
            ("context_window", self.context_window),
            ("chunk_window", self.chunk_window),
            ("max_chunk_length", self.max_chunk_length),
            ("pointer_dim", self.pointer_dim),
            ("length_dim", self.length_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("`{k}` must be positive"));
            }
        }
        if self.char_cnn && (self.char_dim == 0 || self.char_filters == 0 || self.char_window == 0) {
            return bad("char CNN sizes must be positive".into());
        }
        if self.decoder_dim != 2 * self.hidden_dim {
            return bad(format!(
                "decoder_dim {} must be twice hidden_dim {}",
                self.decoder_dim, self.hidden_dim
            ));
        }
        if self.context_window.is_multiple_of(2) {
            return bad(format!("context_window {} must be odd", self.context_window));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad("lr0 must be positive and decay non-negative".into());
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return bad("init_range must be non-negative".into());
        }
        Ok(())
    }
}

/// Chunk CNN, decoder LSTM and label head shared by Models II and III.
#[derive(Clone, Debug)]
pub struct ChunkDecoder {
    pub cnn: Cnn,
    pub lstm: Lstm,
    pub labels: Linear,
}

/// Pointer scorer over chunk ending positions.
#[derive(Clone, Debug)]
pub struct Pointer {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub v1: ParamId,
    pub v2: ParamId,
    /// Row `k - 1` embeds candidate length `k`.
    pub lengths: Embedding,
}

#[derive(Clone, Debug)]
pub enum Heads {
    Baseline { tags: Linear },
    Model1 { seg: Linear, labels: Linear },
    Model2 { seg: Linear, decoder: ChunkDecoder },
    Model3 { decoder: ChunkDecoder, pointer: Pointer },
}

/// Token ids for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Input {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl Input {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Training targets derived from gold tags.
#[derive(Clone, Debug)]
pub struct Gold {
    pub tags: Vec<Tag>,
    pub spans: Vec<ChunkSpan>,
    /// How many spans were split to respect the maximum chunk length.
    pub split: usize,
}

/// Encoder outputs for one sentence.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Token representations before dropout.
    pub x: Vec<Var>,
    /// Bi-LSTM states after output dropout.
    pub h: Vec<Var>,
    /// `[forward last; backward first]`, the decoder's initial hidden state.
    pub init: Var,
    /// Representation used for positions outside the sentence.
    pub pad: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub seg: Option<Var>,
    pub label: Option<Var>,
}

/// One greedy pointer decision.
#[derive(Clone, Debug, PartialEq)]
pub struct PointerStep {
    pub begin: usize,
    /// Inclusive end positions considered.
    pub candidates: Vec<usize>,
    pub probs: Vec<f64>,
    pub end: usize,
    pub label: String,
    pub label_probs: Vec<f64>,
}

/// Output classes of the segmentation head.
pub const SEG_CLASSES: [&str; 3] = ["O", "B", "I"];

fn seg_class(tag: &Tag) -> usize {
    match tag {
        Tag::O => 0,
        Tag::B(_) => 1,
        Tag::I(_) => 2,
    }
}

fn seg_tag(class: usize) -> Tag {
    match class {
        0 => Tag::O,
        1 => Tag::B(String::new()),
        _ => Tag::I(String::new()),
    }
}

fn mean(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let s = tape.sum_n(xs)?;
    Ok(tape.scale(s, 1.0 / xs.len() as f64))
}

/// Unweighted sum of the segmentation and labeling losses.
pub fn joint_loss(tape: &mut Tape, seg: Var, label: Var) -> Result<Var> {
    if !tape.shape(seg).is_empty() || !tape.shape(label).is_empty() {
        return Err(Error::dim("joint_loss", "both losses must be scalars"));
    }
    tape.add(seg, label)
}

/// Pointer distribution over chunk ends for a chunk starting at `begin`.
///
/// `proj[i]` must hold `W1 h_i + W2 x_i`. Candidates are `begin..min(begin + l_m, T)`.
pub fn pointer_scores(
    tape: &mut Tape,
    store: &ParamStore,
    pointer: &Pointer,
    enc: &Encoded,
    proj: &[Var],
    state: Var,
    begin: usize,
    max_len: usize,
) -> Result<(Vec<usize>, Var)> {
    let t = enc.x.len();
    if begin >= t {
        return Err(Error::State(format!("pointer begin {begin} at or past sentence end {t}")));
    }
    if max_len == 0 {
        return Err(Error::domain("pointer_scores", "maximum chunk length must be positive"));
    }
    let w3 = tape.param(store, pointer.w3);
    let w4 = tape.param(store, pointer.w4);
    let v1 = tape.param(store, pointer.v1);
    let v2 = tape.param(store, pointer.v2);
    let a = tape.matmul(w3, enc.x[begin])?;
    let b = tape.matmul(w4, state)?;
    let query = tape.add(a, b)?;
    let candidates: Vec<usize> = (begin..t.min(begin + max_len)).collect();
    let mut scores = Vec::with_capacity(candidates.len());
    for &i in &candidates {
        let z = tape.add(proj[i], query)?;
        let z = tape.tanh(z);
        let s = tape.dot(v1, z)?;
        let le = pointer.lengths.lookup(tape, store, i - begin)?;
        let l = tape.dot(v2, le)?;
        scores.push(tape.add(s, l)?);
    }
    let logits = tape.concat(&scores)?;
    Ok((candidates, tape.softmax(logits)?))
}

/// Parameter layout of one model plus its vocabulary.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub words: Embedding,
    pub chars: Option<CharCnn>,
    pub encoder: BiLstm,
    pub heads: Heads,
}

struct Model3Run {
    spans: Vec<ChunkSpan>,
    steps: Vec<PointerStep>,
    seg: Vec<Var>,
    label: Vec<Var>,
}

impl Network {
    /// Register all parameters in `store`.
    pub fn build(config: &ModelConfig, vocab: &Vocab, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if vocab.labels.is_empty() {
            return Err(Error::domain("build", "training data has no chunk labels"));
        }
        let mut init = Init {
            rng,
            range: config.init_range,
        };
        let c = config;
        let words = Embedding::new(store, "word_emb", vocab.words.len(), c.word_dim, Index::OOV, &mut init)?;
        let chars = if c.char_cnn {
            let table = Embedding::new(store, "char_emb", vocab.chars.len(), c.char_dim, Index::OOV, &mut init)?;
            let cnn = Cnn::new(store, "char_cnn", c.char_dim, c.char_filters, c.char_window, &mut init)?;
            Some(CharCnn { chars: table, cnn })
        } else {
            None
        };
        let d = c.token_dim();
        let encoder = BiLstm::new(store, "encoder", d, c.hidden_dim, &mut init)?;
        let enc_out = encoder.output_dim();
        let n_labels = vocab.labels.len();
        let decoder = |store: &mut ParamStore, init: &mut Init| -> Result<ChunkDecoder> {
            Ok(ChunkDecoder {
                cnn: Cnn::new(store, "chunk_cnn", d, c.chunk_filter_count(), c.chunk_window, init)?,
                lstm: Lstm::new(store, "decoder", c.chunk_feature_dim(), c.decoder_dim, init)?,
                labels: Linear::new(store, "label_head", c.decoder_dim, n_labels + 1, init)?,
            })
        };
        let heads = match c.variant {
            Variant::Baseline => Heads::Baseline {
                tags: Linear::new(store, "tag_head", enc_out, vocab.tags.len(), &mut init)?,
            },
            Variant::Model1 => Heads::Model1 {
                seg: Linear::new(store, "seg_head", enc_out, SEG_CLASSES.len(), &mut init)?,
                labels: Linear::new(store, "label_head", enc_out, n_labels, &mut init)?,
            },
            Variant::Model2 => {
                let seg = Linear::new(store, "seg_head", enc_out, SEG_CLASSES.len(), &mut init)?;
                Heads::Model2 {
                    seg,
                    decoder: decoder(store, &mut init)?,
                }
            }
            Variant::Model3 => {
                let decoder = decoder(store, &mut init)?;
                let p = c.pointer_dim;
                let mut add = |name: &str, shape: Vec<usize>, init: &mut Init| store.add_trainable(name, init.uniform(shape)?);
                let w1 = add("pointer.W1", vec![p, enc_out], &mut init)?;
                let w2 = add("pointer.W2", vec![p, d], &mut init)?;
                let w3 = add("pointer.W3", vec![p, d], &mut init)?;
                let w4 = add("pointer.W4", vec![p, c.decoder_dim], &mut init)?;
                let v1 = add("pointer.v1", vec![p], &mut init)?;
                let v2 = add("pointer.v2", vec![c.length_dim], &mut init)?;
                let lengths = Embedding::new(store, "pointer.LE", c.max_chunk_length, c.length_dim, 0, &mut init)?;
                Heads::Model3 {
                    decoder,
                    pointer: Pointer {
                        w1,
                        w2,
                        w3,
                        w4,
                        v1,
                        v2,
                        lengths,
                    },
                }
            }
        };
        Ok(Network {
            config: config.clone(),
            vocab: vocab.clone(),
            words,
            chars,
            encoder,
            heads,
        })
    }

    pub fn input(&self, tokens: &[String]) -> Input {
        Input {
            words: tokens.iter().map(|t| self.vocab.word_id(t)).collect(),
            chars: tokens.iter().map(|t| self.vocab.char_ids(t)).collect(),
        }
    }

    /// Repaired gold tags and spans; spans longer than the pointer window are split for Model III.
    pub fn gold(&self, sentence: &Sentence) -> Result<Gold> {
        let tags = repair_iob(&sentence.tags);
        let spans = iob_to_chunks(&tags)?;
        for s in &spans {
            if !s.is_outside() && self.vocab.label_id(&s.label).is_none() {
                return Err(Error::domain("gold", format!("sentence {}: label `{}` not in vocabulary", sentence.id, s.label)));
            }
        }
        let (spans, split) = if self.config.variant == Variant::Model3 {
            split_long_spans(&spans, self.config.max_chunk_length)
        } else {
            (spans, 0)
        };
        Ok(Gold { tags, spans, split })
    }

    fn class_label(&self, class: usize) -> String {
        if class == 0 {
            OUTSIDE.to_string()
        } else {
            self.vocab.labels[class - 1].clone()
        }
    }

    fn class_of(&self, span: &ChunkSpan) -> usize {
        if span.is_outside() {
            0
        } else {
            self.vocab.label_id(&span.label).map_or(0, |i| i + 1)
        }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: &Input, drop: &mut Dropout) -> Result<Encoded> {
        if input.is_empty() {
            return Err(Error::domain("encode", "empty sentence"));
        }
        let token = |tape: &mut Tape, word: usize, chars: Option<&[usize]>| -> Result<Var> {
            let w = self.words.lookup(tape, store, word)?;
            match &self.chars {
                None => Ok(w),
                Some(net) => {
                    let c = match chars {
                        Some(ids) => char_cnn_embed(tape, store, net, ids)?,
                        None => tape.zeros(net.output_dim())?,
                    };
                    tape.concat(&[w, c])
                }
            }
        };
        let x = input
            .words
            .iter()
            .zip(&input.chars)
            .map(|(&w, c)| token(tape, w, Some(c)))
            .collect::<Result<Vec<_>>>()?;
        let pad = token(tape, Index::PAD, None)?;
        let dropped = x.iter().map(|&v| drop.apply(tape, v)).collect::<Result<Vec<_>>>()?;
        let out = bilstm_run(tape, store, &self.encoder, &dropped)?;
        let h = out.states.iter().map(|&v| drop.apply(tape, v)).collect::<Result<Vec<_>>>()?;
        let init = tape.concat(&[out.forward_last, out.backward_first])?;
        Ok(Encoded { x, h, init, pad })
    }

    /// `[Cx; Ch; Cw]` for the span `[begin, begin + len)`.
    pub fn chunk_features(&self, tape: &mut Tape, store: &ParamStore, cnn: &Cnn, enc: &Encoded, begin: usize, len: usize) -> Result<Var> {
        let t = enc.x.len();
        if len == 0 || begin + len > t {
            return Err(Error::Index {
                op: "chunk_features",
                index: begin + len,
                len: t,
            });
        }
        let cx = cnnmax(tape, store, cnn, &enc.x[begin..begin + len])?;
        let ch = average(tape, &enc.h[begin..begin + len])?;
        let k = self.config.context_window / 2;
        let at = |i: isize| -> Var {
            if i >= 0 && (i as usize) < t {
                enc.x[i as usize]
            } else {
                enc.pad
            }
        };
        let (b, e) = (begin as isize, (begin + len - 1) as isize);
        let mut parts = vec![cx, ch];
        parts.extend((1..=k as isize).rev().map(|d| at(b - d)));
        parts.push(at(b));
        parts.extend((1..=k as isize).map(|d| at(e + d)));
        tape.concat(&parts)
    }

    fn seg_distributions(&self, tape: &mut Tape, store: &ParamStore, head: &Linear, enc: &Encoded) -> Result<Vec<Var>> {
        enc.h.iter().map(|&h| head.classify(tape, store, h)).collect()
    }

    fn seg_loss(&self, tape: &mut Tape, dists: &[Var], gold: &Gold) -> Result<Var> {
        let ce = dists
            .iter()
            .zip(&gold.tags)
            .map(|(&p, t)| tape.cross_entropy(p, seg_class(t)))
            .collect::<Result<Vec<_>>>()?;
        mean(tape, &ce)
    }

    fn predicted_segments(&self, tape: &Tape, dists: &[Var]) -> Result<Vec<ChunkSpan>> {
        let raw: Vec<Tag> = dists.iter().map(|&p| seg_tag(argmax(tape.value(p)))).collect();
        iob_to_chunks(&repair_iob(&raw))
    }

    /// Run the decoder over `spans`, returning label distributions.
    fn decode_spans(&self, tape: &mut Tape, store: &ParamStore, dec: &ChunkDecoder, enc: &Encoded, spans: &[ChunkSpan], drop: &mut Dropout) -> Result<Vec<Var>> {
        let mut h = enc.init;
        let mut c = tape.zeros(self.config.decoder_dim)?;
        let mut out = Vec::with_capacity(spans.len());
        for s in spans {
            let f = self.chunk_features(tape, store, &dec.cnn, enc, s.begin, s.length)?;
            let f = drop.apply(tape, f)?;
            (h, c) = dec.lstm.step(tape, store, f, h, c)?;
            let o = drop.apply(tape, h)?;
            out.push(dec.labels.classify(tape, store, o)?);
        }
        Ok(out)
    }

    fn run_model3(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        dec: &ChunkDecoder,
        pointer: &Pointer,
        enc: &Encoded,
        gold: Option<&Gold>,
        drop: &mut Dropout,
    ) -> Result<Model3Run> {
        let t = enc.x.len();
        let w1 = tape.param(store, pointer.w1);
        let w2 = tape.param(store, pointer.w2);
        let proj = (0..t)
            .map(|i| {
                let a = tape.matmul(w1, enc.h[i])?;
                let b = tape.matmul(w2, enc.x[i])?;
                tape.add(a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut run = Model3Run {
            spans: Vec::new(),
            steps: Vec::new(),
            seg: Vec::new(),
            label: Vec::new(),
        };
        let mut h = enc.init;
        let mut c = tape.zeros(self.config.decoder_dim)?;
        let mut b = 0;
        let mut j = 0;
        while b < t {
            let state = drop.apply(tape, h)?;
            let (candidates, probs) = pointer_scores(tape, store, pointer, enc, &proj, state, b, self.config.max_chunk_length)?;
            let end = match gold {
                Some(g) => {
                    let span = g.spans.get(j).ok_or_else(|| Error::State("gold spans end before the sentence".into()))?;
                    if span.begin != b {
                        return Err(Error::Tiling {
                            index: b,
                            message: "gold spans do not tile the sentence".into(),
                        });
                    }
                    let end = span.end() - 1;
                    run.seg.push(tape.cross_entropy(probs, end - b)?);
                    end
                }
                None => b + argmax(tape.value(probs)),
            };
            let f = self.chunk_features(tape, store, &dec.cnn, enc, b, end + 1 - b)?;
            let f = drop.apply(tape, f)?;
            (h, c) = dec.lstm.step(tape, store, f, h, c)?;
            let o = drop.apply(tape, h)?;
            let lp = dec.labels.classify(tape, store, o)?;
            let label = match gold {
                Some(g) => {
                    run.label.push(tape.cross_entropy(lp, self.class_of(&g.spans[j]))?);
                    g.spans[j].label.clone()
                }
                None => self.class_label(argmax(tape.value(lp))),
            };
            run.steps.push(PointerStep {
                begin: b,
                candidates,
                probs: tape.value(probs).to_vec(),
                end,
                label: label.clone(),
                label_probs: tape.value(lp).to_vec(),
            });
            run.spans.push(ChunkSpan::new(b, end + 1 - b, label));
            b = end + 1;
            j += 1;
        }
        Ok(run)
    }

    /// Teacher-forced training loss for one sentence.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, input: &Input, gold: &Gold, drop: &mut Dropout) -> Result<Losses> {
        if gold.tags.len() != input.len() {
            return Err(Error::Alignment {
                sentence: 0,
                message: format!("{} tokens but {} tags", input.len(), gold.tags.len()),
            });
        }
        let enc = self.encode(tape, store, input, drop)?;
        match &self.heads {
            Heads::Baseline { tags } => {
                let mut ce = Vec::with_capacity(input.len());
                for (&h, tag) in enc.h.iter().zip(&gold.tags) {
                    let p = tags.classify(tape, store, h)?;
                    let id = self
                        .vocab
                        .tag_id(tag)
                        .ok_or_else(|| Error::domain("loss", format!("tag {tag} not in vocabulary")))?;
                    ce.push(tape.cross_entropy(p, id)?);
                }
                let total = mean(tape, &ce)?;
                Ok(Losses {
                    total,
                    seg: None,
                    label: None,
                })
            }
            Heads::Model1 { seg, labels } => {
                let dists = self.seg_distributions(tape, store, seg, &enc)?;
                let seg_loss = self.seg_loss(tape, &dists, gold)?;
                let mut ce = Vec::new();
                for s in gold.spans.iter().filter(|s| !s.is_outside()) {
                    let ch = average(tape, &enc.h[s.begin..s.end()])?;
                    let p = labels.classify(tape, store, ch)?;
                    ce.push(tape.cross_entropy(p, self.class_of(s) - 1)?);
                }
                self.combine(tape, seg_loss, &ce)
            }
            Heads::Model2 { seg, decoder } => {
                let dists = self.seg_distributions(tape, store, seg, &enc)?;
                let seg_loss = self.seg_loss(tape, &dists, gold)?;
                let lps = self.decode_spans(tape, store, decoder, &enc, &gold.spans, drop)?;
                let ce = lps
                    .iter()
                    .zip(&gold.spans)
                    .map(|(&p, s)| tape.cross_entropy(p, self.class_of(s)))
                    .collect::<Result<Vec<_>>>()?;
                self.combine(tape, seg_loss, &ce)
            }
            Heads::Model3 { decoder, pointer } => {
                let run = self.run_model3(tape, store, decoder, pointer, &enc, Some(gold), drop)?;
                let seg_loss = mean(tape, &run.seg)?;
                self.combine(tape, seg_loss, &run.label)
            }
        }
    }

    fn combine(&self, tape: &mut Tape, seg: Var, label_ce: &[Var]) -> Result<Losses> {
        // an all-O sentence under Model I has no chunk to label
        let label = if label_ce.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            mean(tape, label_ce)?
        };
        Ok(Losses {
            total: joint_loss(tape, seg, label)?,
            seg: Some(seg),
            label: Some(label),
        })
    }

    /// Greedy inference. The returned spans tile the sentence.
    pub fn predict_spans(&self, store: &ParamStore, input: &Input) -> Result<Vec<ChunkSpan>> {
        let mut tape = Tape::new();
        let mut drop = Dropout::eval();
        let enc = self.encode(&mut tape, store, input, &mut drop)?;
        match &self.heads {
            Heads::Baseline { tags } => {
                let raw = enc
                    .h
                    .iter()
                    .map(|&h| {
                        let p = tags.classify(&mut tape, store, h)?;
                        Ok(self.vocab.tags[argmax(tape.value(p))].clone())
                    })
                    .collect::<Result<Vec<_>>>()?;
                iob_to_chunks(&repair_iob(&raw))
            }
            Heads::Model1 { seg, labels } => {
                let dists = self.seg_distributions(&mut tape, store, seg, &enc)?;
                let mut spans = self.predicted_segments(&tape, &dists)?;
                for s in spans.iter_mut().filter(|s| !s.is_outside()) {
                    let ch = average(&mut tape, &enc.h[s.begin..s.end()])?;
                    let p = labels.classify(&mut tape, store, ch)?;
                    s.label = self.vocab.labels[argmax(tape.value(p))].clone();
                }
                Ok(spans)
            }
            Heads::Model2 { seg, decoder } => {
                let dists = self.seg_distributions(&mut tape, store, seg, &enc)?;
                let mut spans = self.predicted_segments(&tape, &dists)?;
                let lps = self.decode_spans(&mut tape, store, decoder, &enc, &spans, &mut drop)?;
                for (s, p) in spans.iter_mut().zip(lps) {
                    s.label = self.class_label(argmax(tape.value(p)));
                }
                Ok(spans)
            }
            Heads::Model3 { decoder, pointer } => Ok(self.run_model3(&mut tape, store, decoder, pointer, &enc, None, &mut drop)?.spans),
        }
    }

    pub fn predict_tags(&self, store: &ParamStore, input: &Input) -> Result<Vec<Tag>> {
        let spans = self.predict_spans(store, input)?;
        chunks_to_iob(&spans, input.len())
    }

    /// Model III greedy decode with every pointer decision exposed.
    pub fn decode_trace(&self, store: &ParamStore, input: &Input) -> Result<Vec<PointerStep>> {
        let Heads::Model3 { decoder, pointer } = &self.heads else {
            return Err(Error::State(format!("{} has no pointer decoder", self.config.variant)));
        };
        let mut tape = Tape::new();
        let mut drop = Dropout::eval();
        let enc = self.encode(&mut tape, store, input, &mut drop)?;
        Ok(self.run_model3(&mut tape, store, decoder, pointer, &enc, None, &mut drop)?.steps)
    }
}

fn average(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let m = tape.stack_rows(rows)?;
    tape.average_rows(m)
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

/// Chunk and segment scores on one data set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub chunk: EvalReport,
    pub segment: EvalReport,
    pub predictions: Vec<Vec<Tag>>,
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: &ModelConfig, vocab: &Vocab) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Network::build(config, vocab, &mut store, &mut rng)?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn predict(&self, sentences: &[Sentence]) -> Result<Vec<Vec<Tag>>> {
        sentences
            .iter()
            .map(|s| self.net.predict_tags(&self.store, &self.net.input(&s.tokens)))
            .collect()
    }

    pub fn evaluate(&self, sentences: &[Sentence]) -> Result<Evaluation> {
        let predictions = self.predict(sentences)?;
        let gold: Vec<Vec<Tag>> = sentences.iter().map(|s| s.tags.clone()).collect();
        Ok(Evaluation {
            chunk: chunk_f1(&gold, &predictions)?,
            segment: segment_f1(&gold, &predictions)?,
            predictions,
        })
    }

    /// Teacher-forced loss value on one sentence with dropout off.
    pub fn sentence_loss(&self, sentence: &Sentence) -> Result<f64> {
        let mut tape = Tape::new();
        let input = self.net.input(&sentence.tokens);
        let gold = self.net.gold(sentence)?;
        let l = self.net.loss(&mut tape, &self.store, &input, &gold, &mut Dropout::eval())?;
        Ok(tape.scalar(l.total))
    }

    /// Finite-difference check of the whole teacher-forced loss on one sentence.
    pub fn gradcheck(&mut self, sentence: &Sentence, opts: &FdOptions) -> Result<FdReport> {
        let input = self.net.input(&sentence.tokens);
        let gold = self.net.gold(sentence)?;
        let net = &self.net;
        finite_diff_check(
            |store, tape| Ok(net.loss(tape, store, &input, &gold, &mut Dropout::eval())?.total),
            &mut self.store,
            opts,
        )
    }
}

/// A random labeled sentence over a small synthetic vocabulary, for gradient checks.
pub fn random_sentence(rng: &mut impl Rng, id: usize, len: usize, words: &[&str], labels: &[&str]) -> Sentence {
    let tokens: Vec<String> = (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
    let mut tags = Vec::with_capacity(len);
    for i in 0..len {
        let label = labels[rng.random_range(0..labels.len())].to_string();
        tags.push(match rng.random_range(0..3) {
            0 => Tag::O,
            1 if i > 0 => match &tags[i - 1] {
                Tag::B(l) | Tag::I(l) => Tag::I(l.clone()),
                Tag::O => Tag::B(label),
            },
            _ => Tag::B(label),
        });
    }
    Sentence::new(id, tokens, tags)
}

/// Randomly initialised toy model and one training sentence for `seed`.
pub fn gradcheck_instance(config: &ModelConfig, seed: u64, len: usize) -> Result<(Model, Sentence)> {
    const WORDS: [&str; 6] = ["the", "Cat", "sat", "on", "mat", "42"];
    const LABELS: [&str; 2] = ["NP", "VP"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentence = random_sentence(&mut rng, 0, len, &WORDS, &LABELS);
    // both labels must be in the vocabulary
    let vocab_src = vec![
        sentence.clone(),
        Sentence::new(1, vec!["on".into(), "mat".into()], vec![Tag::B("NP".into()), Tag::B("VP".into())]),
    ];
    let vocab = Vocab::build(&vocab_src, 1);
    let mut cfg = config.clone();
    cfg.seed = seed;
    if sentence.is_empty() {
        sentence = vocab_src[1].clone();
    }
    Ok((Model::new(&cfg, &vocab)?, sentence))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: f64,
    pub valid_segment_f1: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} train_loss {:.6} valid_f1 {:.2} valid_seg_f1 {:.2} lr {:.6e}",
            self.epoch, self.train_loss, self.valid_f1, self.valid_segment_f1, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    /// Parameter values from the best validation epoch.
    pub best: ParamStore,
}

/// Shuffled single-sentence SGD for `config.epochs` epochs.
///
/// `observe` sees every epoch line and may return `false` to stop early.
/// The model keeps the final parameters; the best ones are in the outcome.
pub fn train(model: &mut Model, train: &[Sentence], valid: &[Sentence], mut observe: impl FnMut(&EpochLog) -> bool) -> Result<TrainOutcome> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::domain("train", "training and validation sets must be non-empty"));
    }
    let cfg = model.net.config.clone();
    let data = train
        .iter()
        .map(|s| Ok((s.id, model.net.input(&s.tokens), model.net.gold(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let split: usize = data.iter().map(|d| d.2.split).sum();
    if split > 0 {
        log::warn!("split {split} gold chunks longer than {} tokens", cfg.max_chunk_length);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1b);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        best_epoch: 0,
        best_valid_f1: f64::NEG_INFINITY,
        best: model.store.clone(),
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (id, input, gold) = &data[k];
            let mut tape = Tape::new();
            let mut drop = Dropout::train(cfg.dropout, ChaCha8Rng::seed_from_u64(rng.random()));
            let losses = match model.net.loss(&mut tape, &model.store, input, gold, &mut drop) {
                Ok(l) => l,
                Err(Error::Domain { op: "softmax", .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        sentence: *id,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let value = tape.scalar(losses.total);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    sentence: *id,
                    loss: value,
                });
            }
            total += value;
            tape.backward(losses.total, &mut model.store)?;
            sgd_step(&mut model.store, cfg.lr0, cfg.decay)?;
        }
        let eval = model.evaluate(valid)?;
        let line = EpochLog {
            epoch,
            train_loss: total / data.len() as f64,
            valid_f1: eval.chunk.f1(),
            valid_segment_f1: eval.segment.f1(),
            lr: learning_rate(cfg.lr0, cfg.decay, model.store.step()),
        };
        log::info!("{line}");
        if line.valid_f1 > outcome.best_valid_f1 {
            outcome.best_valid_f1 = line.valid_f1;
            outcome.best_epoch = epoch;
            outcome.best = model.store.clone();
        }
        let go_on = observe(&line);
        outcome.log.push(line);
        if !go_on {
            break;
        }
    }
    Ok(outcome)
}
