//! Browser bindings. Every export returns a JSON string; failures come back as `{"error": ...}`.

use chunkforge::corpus::{build_vocab, iob_to_chunks, parse_conll, repair_iob, ChunkSpan, Format, Sentence, Tag};
use chunkforge::eval::{chunk_f1, parse_conlleval_input, segment_f1};
use chunkforge::models::{train, Model, ModelConfig, Variant};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const TOY20: &str = include_str!("../../core/data/toy20.txt");

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn span_json(s: &ChunkSpan, tokens: &[String]) -> Value {
    json!({
        "begin": s.begin,
        "length": s.length,
        "label": s.label,
        "text": tokens[s.begin..s.end()].join(" "),
    })
}

/// `token TAG` per line, or a bare tag sequence on one line.
fn parse_tagged(text: &str) -> Result<(Vec<String>, Vec<Tag>), String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let pairs: Vec<(String, String)> = if lines.len() == 1 && !lines[0].contains('/') {
        lines[0].split_whitespace().enumerate().map(|(i, t)| (format!("w{}", i + 1), t.to_string())).collect()
    } else {
        lines
            .iter()
            .flat_map(|l| l.split_whitespace())
            .map(|item| match item.rsplit_once('/') {
                Some((w, t)) => Ok((w.to_string(), t.to_string())),
                None => Err(format!("expected token/TAG, found `{item}`")),
            })
            .collect::<Result<_, _>>()?
    };
    let tags = pairs.iter().map(|(_, t)| Tag::parse(t)).collect::<Result<Vec<_>, _>>()?;
    Ok((pairs.into_iter().map(|p| p.0).collect(), tags))
}

/// Repair an IOB sequence and list its chunks.
#[wasm_bindgen]
pub fn repair_tags(text: &str) -> String {
    respond((|| {
        let (tokens, tags) = parse_tagged(text)?;
        let repaired = repair_iob(&tags);
        let chunks = iob_to_chunks(&repaired).map_err(|e| e.to_string())?;
        let changed: Vec<usize> = tags.iter().zip(&repaired).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect();
        Ok(json!({
            "tokens": tokens,
            "input": tags.iter().map(Tag::to_string).collect::<Vec<_>>(),
            "repaired": repaired.iter().map(Tag::to_string).collect::<Vec<_>>(),
            "changed": changed,
            "chunks": chunks.iter().map(|c| span_json(c, &tokens)).collect::<Vec<_>>(),
        }))
    })())
}

/// Score `token gold pred` lines the way conlleval does.
#[wasm_bindgen]
pub fn score(text: &str) -> String {
    respond((|| {
        let (gold, pred) = parse_conlleval_input(text).map_err(|e| e.to_string())?;
        let chunk = chunk_f1(&gold, &pred).map_err(|e| e.to_string())?;
        let seg = segment_f1(&gold, &pred).map_err(|e| e.to_string())?;
        Ok(json!({
            "report": chunk.conlleval_text(),
            "f1": chunk.f1(),
            "segment_f1": seg.f1(),
            "lengths": chunk.length_table(),
        }))
    })())
}

fn demo_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::toy(Variant::Model3);
    c.word_dim = 16;
    c.char_cnn = false;
    c.hidden_dim = 16;
    c.decoder_dim = 32;
    c.pointer_dim = 16;
    c.length_dim = 4;
    c.max_chunk_length = 4;
    c.context_window = 1;
    c.dropout = 0.0;
    c.decay = 0.0;
    c.init_range = 0.1;
    c.epochs = 1;
    c.seed = seed;
    c
}

/// A pointer chunker trained in the page on the bundled 20-sentence corpus.
#[wasm_bindgen]
pub struct DemoModel {
    model: Model,
    data: Vec<Sentence>,
    epoch: usize,
}

#[wasm_bindgen]
impl DemoModel {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<DemoModel, String> {
        let data = parse_conll(TOY20, Format::Chunking3Col).map_err(|e| e.to_string())?;
        let vocab = build_vocab(&data, 1).map_err(|e| e.to_string())?;
        let model = Model::new(&demo_config(seed as u64), &vocab).map_err(|e| e.to_string())?;
        Ok(DemoModel { model, data, epoch: 0 })
    }

    /// Run `epochs` more passes; returns one record per epoch.
    pub fn train(&mut self, epochs: u32) -> String {
        respond((|| {
            let mut rows = Vec::new();
            for _ in 0..epochs {
                self.model.net.config.seed = self.model.net.config.seed.wrapping_add(1);
                let data = &self.data;
                let out = train(&mut self.model, data, data, |_| true).map_err(|e| e.to_string())?;
                self.epoch += 1;
                let e = &out.log[0];
                rows.push(json!({
                    "epoch": self.epoch,
                    "loss": e.train_loss,
                    "f1": e.valid_f1,
                    "segment_f1": e.valid_segment_f1,
                }));
            }
            Ok(Value::Array(rows))
        })())
    }

    /// Chunk a whitespace-tokenized sentence and show every pointer decision.
    pub fn chunk(&self, sentence: &str) -> String {
        respond((|| {
            let tokens: Vec<String> = sentence.split_whitespace().map(String::from).collect();
            if tokens.is_empty() {
                return Err("empty sentence".to_string());
            }
            let input = self.model.net.input(&tokens);
            let store = &self.model.store;
            let trace = self.model.net.decode_trace(store, &input).map_err(|e| e.to_string())?;
            let tags = self.model.net.predict_tags(store, &input).map_err(|e| e.to_string())?;
            let steps: Vec<Value> = trace
                .iter()
                .map(|s| {
                    json!({
                        "begin": s.begin,
                        "end": s.end,
                        "label": s.label,
                        "candidates": s.candidates.iter().zip(&s.probs).map(|(i, p)| json!({
                            "end": i,
                            "text": tokens[s.begin..=*i].join(" "),
                            "prob": p,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            Ok(json!({
                "tokens": tokens,
                "tags": tags.iter().map(Tag::to_string).collect::<Vec<_>>(),
                "steps": steps,
            }))
        })())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Sentences from the training corpus, as plain text.
    pub fn samples(&self) -> String {
        Value::Array(self.data.iter().take(8).map(|s| json!(s.tokens.join(" "))).collect()).to_string()
    }
}
