//! Building blocks shared by the chunking models.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter initializer: uniform matrices, zero biases.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub range: f64,
}

impl Init<'_> {
    pub fn uniform(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let r = self.range;
        let values = (0..n)
            .map(|_| if r > 0.0 { self.rng.random_range(-r..r) } else { 0.0 })
            .collect();
        Tensor::new(shape, values)
    }
}

fn expect_len(tape: &Tape, op: &'static str, v: Var, n: usize) -> Result<()> {
    let got = tape.value(v).len();
    if tape.shape(v).len() != 1 || got != n {
        return Err(Error::dim(op, format!("expected a vector of width {n}, got {:?}", tape.shape(v))));
    }
    Ok(())
}

/// One LSTM direction. Gate order: input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
    pub input_dim: usize,
    pub hidden_dim: usize,
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];

impl Lstm {
    /// Forget-gate bias starts at 1.
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize, init: &mut Init) -> Result<Self> {
        let mut ids = |kind: &str, shape: &dyn Fn() -> Vec<usize>, init: &mut Init| -> Result<[ParamId; 4]> {
            let mut out = Vec::with_capacity(4);
            for g in GATES {
                let t = if kind == "b" {
                    let fill = if g == "f" { 1.0 } else { 0.0 };
                    Tensor::new(vec![hidden_dim], vec![fill; hidden_dim])?
                } else {
                    init.uniform(shape())?
                };
                out.push(store.add_trainable(format!("{prefix}.{kind}_{g}"), t)?);
            }
            Ok([out[0], out[1], out[2], out[3]])
        };
        let w = ids("W", &|| vec![hidden_dim, input_dim], init)?;
        let u = ids("U", &|| vec![hidden_dim, hidden_dim], init)?;
        let b = ids("b", &|| vec![hidden_dim], init)?;
        Ok(Lstm {
            w,
            u,
            b,
            input_dim,
            hidden_dim,
        })
    }

    /// One timestep: returns `(h_t, c_t)`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        expect_len(tape, "lstm_step", x, self.input_dim)?;
        expect_len(tape, "lstm_step", h_prev, self.hidden_dim)?;
        expect_len(tape, "lstm_step", c_prev, self.hidden_dim)?;
        let mut pre = [x; 4];
        for g in 0..4 {
            let w = tape.param(store, self.w[g]);
            let u = tape.param(store, self.u[g]);
            let b = tape.param(store, self.b[g]);
            let wx = tape.matmul(w, x)?;
            let uh = tape.matmul(u, h_prev)?;
            pre[g] = tape.sum_n(&[wx, uh, b])?;
        }
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let o = tape.sigmoid(pre[2]);
        let g = tape.tanh(pre[3]);
        let fc = tape.mul(f, c_prev)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// Run over a sequence from the given initial state, returning hidden states.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Result<Vec<Var>> {
        let mut h = tape.zeros(self.hidden_dim)?;
        let mut c = tape.zeros(self.hidden_dim)?;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            (h, c) = self.step(tape, store, x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

/// Per-token concatenated states plus the encoder summary pieces.
#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    pub states: Vec<Var>,
    /// Forward state after the last token.
    pub forward_last: Var,
    /// Backward state after reading back to the first token.
    pub backward_first: Var,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize, init: &mut Init) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::new(store, &format!("{prefix}.fwd"), input_dim, hidden_dim, init)?,
            bwd: Lstm::new(store, &format!("{prefix}.bwd"), input_dim, hidden_dim, init)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim + self.bwd.hidden_dim
    }
}

/// Run both directions from zero states and concatenate per timestep.
pub fn bilstm_run(tape: &mut Tape, store: &ParamStore, net: &BiLstm, xs: &[Var]) -> Result<BiLstmOutput> {
    if xs.is_empty() {
        return Err(Error::domain("bilstm_run", "empty sequence"));
    }
    if net.fwd.input_dim != net.bwd.input_dim {
        return Err(Error::dim("bilstm_run", "directions disagree on input width"));
    }
    let fwd = net.fwd.run(tape, store, xs)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let mut bwd = net.bwd.run(tape, store, &rev)?;
    bwd.reverse();
    let states = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(BiLstmOutput {
        states,
        forward_last: *fwd.last().unwrap(),
        backward_first: bwd[0],
    })
}

/// Lookup table with an OOV row; index 0 doubles as the padding row.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
    pub oov: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, oov: usize, init: &mut Init) -> Result<Self> {
        if oov >= rows {
            return Err(Error::Index {
                op: "embedding",
                index: oov,
                len: rows,
            });
        }
        let table = store.add_trainable(name, init.uniform(vec![rows, dim])?)?;
        Ok(Embedding { table, rows, dim, oov })
    }

    /// Out-of-range indices fall back to the OOV row.
    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, index: usize) -> Result<Var> {
        let row = if index < self.rows { index } else { self.oov };
        tape.param_row(store, self.table, row)
    }

    /// Overwrite rows with pretrained vectors; returns how many rows were set.
    pub fn load_vectors(&self, store: &mut ParamStore, vectors: &PretrainedVectors, row_of: impl Fn(&str) -> Option<usize>) -> Result<usize> {
        if vectors.dim != self.dim {
            return Err(Error::dim(
                "load_vectors",
                format!("pretrained width {} vs embedding width {}", vectors.dim, self.dim),
            ));
        }
        let dim = self.dim;
        let values = store.values_mut(self.table);
        let mut hits = 0;
        for (word, v) in &vectors.vectors {
            if let Some(r) = row_of(word) {
                values[r * dim..(r + 1) * dim].copy_from_slice(v);
                hits += 1;
            }
        }
        Ok(hits)
    }
}

/// External `word v1 v2 ... vd` embedding file contents.
#[derive(Clone, Debug, Default)]
pub struct PretrainedVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Parse a whitespace-separated embedding file. Width comes from the first line.
pub fn parse_pretrained(text: &str) -> Result<PretrainedVectors> {
    let mut out = PretrainedVectors::default();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad float: {e}"),
            })?;
        if out.dim == 0 {
            if values.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "no vector values".into(),
                });
            }
            out.dim = values.len();
        } else if values.len() != out.dim {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} values, found {}", out.dim, values.len()),
            });
        }
        out.vectors.insert(word.to_string(), values);
    }
    Ok(out)
}

/// Convolution with `filters` output channels over windows of `window` vectors.
#[derive(Clone, Debug)]
pub struct Cnn {
    pub filters: ParamId,
    pub bias: ParamId,
    pub window: usize,
    pub input_dim: usize,
    pub count: usize,
}

impl Cnn {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, count: usize, window: usize, init: &mut Init) -> Result<Self> {
        if window == 0 || count == 0 {
            return Err(Error::domain("cnn", "window and filter count must be positive"));
        }
        let filters = store.add_trainable(format!("{prefix}.filters"), init.uniform(vec![count, window * input_dim])?)?;
        let bias = store.add_trainable(format!("{prefix}.bias"), Tensor::zeros(vec![count])?)?;
        Ok(Cnn {
            filters,
            bias,
            window,
            input_dim,
            count,
        })
    }
}

/// Convolution, tanh, then max-over-time pooling. Sequences shorter than the
/// window are zero-padded on the right.
pub fn cnnmax(tape: &mut Tape, store: &ParamStore, cnn: &Cnn, xs: &[Var]) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::domain("cnnmax", "empty input"));
    }
    for &x in xs {
        expect_len(tape, "cnnmax", x, cnn.input_dim)?;
    }
    let mut seq = xs.to_vec();
    if seq.len() < cnn.window {
        let pad = tape.zeros(cnn.input_dim)?;
        seq.resize(cnn.window, pad);
    }
    let f = tape.param(store, cnn.filters);
    let b = tape.param(store, cnn.bias);
    let mut rows = Vec::with_capacity(seq.len() + 1 - cnn.window);
    for win in seq.windows(cnn.window) {
        let x = tape.concat(win)?;
        let y = tape.matmul(f, x)?;
        let y = tape.add(y, b)?;
        rows.push(tape.tanh(y));
    }
    let m = tape.stack_rows(&rows)?;
    tape.max_over_time(m)
}

/// Character embeddings fed through a CNN to produce one vector per word.
#[derive(Clone, Debug)]
pub struct CharCnn {
    pub chars: Embedding,
    pub cnn: Cnn,
}

impl CharCnn {
    pub fn output_dim(&self) -> usize {
        self.cnn.count
    }
}

/// Word vector from character ids; an empty id list is read as a single OOV character.
pub fn char_cnn_embed(tape: &mut Tape, store: &ParamStore, net: &CharCnn, char_ids: &[usize]) -> Result<Var> {
    let fallback = [net.chars.oov];
    let ids = if char_ids.is_empty() { &fallback[..] } else { char_ids };
    let xs = ids
        .iter()
        .map(|&c| net.chars.lookup(tape, store, c))
        .collect::<Result<Vec<_>>>()?;
    cnnmax(tape, store, &net.cnn, &xs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout. Eval mode and rate 0 return `x` itself.
pub fn dropout_apply(tape: &mut Tape, x: Var, rate: f64, mode: DropoutMode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain("dropout", format!("rate {rate} not in [0, 1)")));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mask(x, mask)
}

/// Dropout rate plus the randomness source for one forward pass.
pub struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => dropout_apply(tape, x, self.rate, DropoutMode::Train, rng),
            None => Ok(x),
        }
    }
}

/// Affine layer followed by softmax.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, output_dim: usize, init: &mut Init) -> Result<Self> {
        let w = store.add_trainable(format!("{prefix}.W"), init.uniform(vec![output_dim, input_dim])?)?;
        let b = store.add_trainable(format!("{prefix}.b"), Tensor::zeros(vec![output_dim])?)?;
        Ok(Linear {
            w,
            b,
            input_dim,
            output_dim,
        })
    }

    /// `softmax(W x + b)`.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        expect_len(tape, "classify", features, self.input_dim)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(w, features)?;
        let z = tape.add(z, b)?;
        tape.softmax(z)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
