//! Command-line front end: train, grid, eval, predict, gradcheck, stats, parity.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autodiff::FdOptions;
use crate::checkpoint;
use crate::corpus::{build_vocab, chunk_length_histogram, normalize_word, parse_conll, split_train_valid, write_conll, Format, Sentence, Tag};
use crate::error::{Error, Result};
use crate::eval::{chunk_f1, conlleval_parity, segment_f1, write_conlleval_input, EvalReport};
use crate::layers::parse_pretrained;
use crate::models::{gradcheck_instance, train, Model, ModelConfig, TrainOutcome, Variant};

/// Exit status for a failed gradient or parity check.
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Largest model `gradcheck` will build.
pub const GRADCHECK_MAX_PARAMS: usize = 100_000;

/// Keys `grid` may vary.
pub const TUNABLE: [&str; 4] = ["lr0", "decay", "context_window", "word_dim"];

#[derive(Parser, Debug)]
#[command(name = "chunkforge", version, about = "Neural sequence chunking: train, evaluate and inspect chunkers")]
pub struct Cli {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Corpus layout: chunking3col or slot2col.
    #[arg(long, global = true)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write best and final checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every point of a hyperparameter grid and rank by validation F1.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`; repeat for more keys.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
    },
    /// Score a checkpoint on a tagged file.
    Eval {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Predict the gold tags themselves.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        test: PathBuf,
        /// Write `token gold pred` lines for the reference scorer.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Tag a file; the tag column of the input is replaced.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare backprop gradients with finite differences on toy models.
    Gradcheck {
        #[arg(long, default_value = "model3")]
        variant: Variant,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Tokens in each random sentence.
        #[arg(long, default_value_t = 6)]
        length: usize,
        #[arg(long)]
        word_dim: Option<usize>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        init_range: Option<f64>,
        #[arg(long, default_value_t = 16)]
        coords: usize,
        /// Parameter blocks to freeze (reported as skipped).
        #[arg(long)]
        freeze: Vec<String>,
    },
    /// Chunk-length histogram of a corpus.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Also print the train/validation split sizes for this fraction.
        #[arg(long)]
        valid_fraction: Option<f64>,
    },
    /// Check our scorer against saved reference-scorer output.
    Parity {
        /// `token gold pred` file.
        #[arg(long)]
        input: PathBuf,
        /// Output of the reference scorer on the same file.
        #[arg(long)]
        reference: PathBuf,
    },
}

/// Model settings plus data paths and run options.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub freeze_embeddings: bool,
    pub checkpoint_dir: PathBuf,
    pub log_file: Option<PathBuf>,
    pub format: Format,
    pub valid_fraction: f64,
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: None,
            valid: None,
            test: None,
            embeddings: None,
            freeze_embeddings: false,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_file: None,
            format: Format::Chunking3Col,
            valid_fraction: 0.1,
            min_count: 1,
        }
    }
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into())
}

impl RunConfig {
    /// Parse `key=value` lines. `#` starts a comment. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut rc = RunConfig {
            checkpoint_dir: base.join("checkpoints"),
            ..RunConfig::default()
        };
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected key=value, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n) {
                return Err(Error::Config(format!("line {n}: `{k}` already set on line {prev}")));
            }
            rc.set(k, v, base).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {n}: {m}")),
                other => other,
            })?;
        }
        rc.model.validate()?;
        Ok(rc)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || -> Option<PathBuf> { (value != "-").then(|| base.join(value)) };
        match key {
            "train" => self.train = path(),
            "valid" => self.valid = path(),
            "test" => self.test = path(),
            "embeddings" => self.embeddings = path(),
            "log_file" => self.log_file = path(),
            "checkpoint_dir" => self.checkpoint_dir = base.join(value),
            "freeze_embeddings" => {
                self.freeze_embeddings = value.parse().map_err(|_| Error::Config(format!("bad boolean `{value}` for `{key}`")))?
            }
            "format" => self.format = value.parse()?,
            "valid_fraction" => {
                self.valid_fraction = value
                    .parse()
                    .ok()
                    .filter(|f| (0.0..1.0).contains(f))
                    .ok_or_else(|| Error::Config(format!("`valid_fraction` must be in [0, 1), got `{value}`")))?
            }
            "min_count" => self.min_count = value.parse().map_err(|_| Error::Config(format!("bad count `{value}`")))?,
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    /// Every setting, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.model.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.extend([
            ("train".into(), path_str(&self.train)),
            ("valid".into(), path_str(&self.valid)),
            ("test".into(), path_str(&self.test)),
            ("embeddings".into(), path_str(&self.embeddings)),
            ("freeze_embeddings".into(), self.freeze_embeddings.to_string()),
            ("checkpoint_dir".into(), self.checkpoint_dir.display().to_string()),
            ("log_file".into(), path_str(&self.log_file)),
            ("format".into(), self.format.to_string()),
            ("valid_fraction".into(), self.valid_fraction.to_string()),
            ("min_count".into(), self.min_count.to_string()),
        ]);
        out
    }

    /// Input files must exist before any training starts.
    pub fn check_paths(&self) -> Result<()> {
        let train = self.train.as_ref().ok_or_else(|| Error::Config("`train` is not set".into()))?;
        for (key, p) in [("train", Some(train)), ("valid", self.valid.as_ref()), ("test", self.test.as_ref()), ("embeddings", self.embeddings.as_ref())] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{key} file not found: {}", p.display())));
                }
            }
        }
        if self.valid.is_none() && self.valid_fraction == 0.0 {
            return Err(Error::Config("no `valid` file and `valid_fraction` is 0".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::parse(&text, base)
}

pub fn read_corpus(path: &Path, format: Format) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, format).map_err(|e| e.in_file(path))
}

/// Map an error to its process exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Writes every line to stdout and, if configured, to a log file.
struct Log<'a> {
    out: &'a mut dyn Write,
    file: Option<std::fs::File>,
}

impl Log<'_> {
    fn line(&mut self, s: &str) -> Result<()> {
        let io = |e| Error::io("<stdout>", e);
        writeln!(self.out, "{s}").map_err(io)?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{s}").map_err(io)?;
        }
        Ok(())
    }
}

struct Data {
    train: Vec<Sentence>,
    valid: Vec<Sentence>,
}

fn load_data(rc: &RunConfig) -> Result<Data> {
    rc.check_paths()?;
    let all = read_corpus(rc.train.as_ref().unwrap(), rc.format)?;
    let (train, valid) = match &rc.valid {
        Some(p) => (all, read_corpus(p, rc.format)?),
        None => split_train_valid(&all, rc.valid_fraction, rc.model.seed)?,
    };
    if train.is_empty() || valid.is_empty() {
        return Err(Error::domain("load_data", "training or validation set is empty"));
    }
    Ok(Data { train, valid })
}

fn fresh_model(rc: &RunConfig, data: &Data) -> Result<Model> {
    let vocab = build_vocab(&data.train, rc.min_count)?;
    let mut model = Model::new(&rc.model, &vocab)?;
    if let Some(p) = &rc.embeddings {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let vectors = parse_pretrained(&text).map_err(|e| e.in_file(p))?;
        let words = &model.net.vocab.words;
        let hits = model.net.words.load_vectors(&mut model.store, &vectors, |w| {
            let w = normalize_word(w);
            words.contains(&w).then(|| words.get(&w))
        })?;
        log::info!("pretrained vectors set for {hits} of {} words", words.len());
    }
    if rc.freeze_embeddings {
        model.store.set_requires_grad(model.net.words.table, false);
    }
    Ok(model)
}

fn run_one(rc: &RunConfig, data: &Data, log: &mut Log) -> Result<(Model, TrainOutcome)> {
    let mut model = fresh_model(rc, data)?;
    let mut write_err = None;
    let outcome = train(&mut model, &data.train, &data.valid, |line| match log.line(&line.to_string()) {
        Ok(()) => true,
        Err(e) => {
            write_err = Some(e);
            false
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok((model, outcome))
}

fn echo_config(rc: &RunConfig, log: &mut Log) -> Result<()> {
    for (k, v) in rc.entries() {
        log.line(&format!("config {k}={v}"))?;
    }
    Ok(())
}

fn with_overrides(mut rc: RunConfig, cli: &Cli) -> Result<RunConfig> {
    if let Some(s) = cli.seed {
        rc.model.seed = s;
    }
    if let Some(f) = cli.format {
        rc.format = f;
    }
    Ok(rc)
}

fn cmd_train(rc: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let file = match &rc.log_file {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    rc.check_paths()?;
    let mut log = Log { out, file };
    echo_config(rc, &mut log)?;
    let data = load_data(rc)?;
    log.line(&format!("data train_sentences={} valid_sentences={}", data.train.len(), data.valid.len()))?;
    let (model, outcome) = run_one(rc, &data, &mut log)?;
    std::fs::create_dir_all(&rc.checkpoint_dir).map_err(|e| Error::io(&rc.checkpoint_dir, e))?;
    let best_path = rc.checkpoint_dir.join("best.ckpt");
    let final_path = rc.checkpoint_dir.join("final.ckpt");
    let best = Model {
        net: model.net.clone(),
        store: outcome.best.clone(),
    };
    checkpoint::save(&best, &best_path)?;
    checkpoint::save(&model, &final_path)?;
    log.line(&format!("best epoch={} valid_f1={:.2}", outcome.best_epoch, outcome.best_valid_f1))?;
    log.line(&format!("checkpoint best={} final={}", best_path.display(), final_path.display()))?;
    if let Some(p) = &rc.test {
        let test = read_corpus(p, rc.format)?;
        let e = best.evaluate(&test)?;
        log.line(&format!("test f1={:.2} segment_f1={:.2}", e.chunk.f1(), e.segment.f1()))?;
    }
    Ok(())
}

/// Parse `key=v1,v2` grid arguments into an ordered list of value sets.
pub fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for spec in specs {
        let (k, vs) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry `{spec}` is not key=v1,v2,...")))?;
        if !TUNABLE.contains(&k) {
            return Err(Error::Config(format!("`{k}` is not tunable (tunable: {})", TUNABLE.join(", "))));
        }
        if out.iter().any(|(x, _)| x == k) {
            return Err(Error::Config(format!("grid key `{k}` given twice")));
        }
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid key `{k}` has no values")));
        }
        out.push((k.to_string(), values));
    }
    Ok(out)
}

/// Cartesian product in row-major order (last key varies fastest).
pub fn grid_points(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (k, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn cmd_grid(rc: &RunConfig, specs: &[String], out: &mut dyn Write) -> Result<()> {
    let grid = parse_grid(specs)?;
    let points = grid_points(&grid);
    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut c = rc.clone();
        for (k, v) in p {
            c.model.set(k, v)?;
        }
        c.model.validate()?;
        configs.push(c);
    }
    rc.check_paths()?;
    let mut log = Log { out, file: None };
    echo_config(rc, &mut log)?;
    let data = load_data(rc)?;
    let mut rows = Vec::new();
    for (p, c) in points.iter().zip(&configs) {
        let label: Vec<String> = p.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let label = label.join(" ");
        log.line(&format!("run {label}"))?;
        let (_, outcome) = run_one(c, &data, &mut log)?;
        rows.push((label, outcome.best_valid_f1, outcome.best_epoch));
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    log.line("rank\tsetting\tbest_valid_f1\tbest_epoch")?;
    for (i, (label, f1, epoch)) in rows.iter().enumerate() {
        log.line(&format!("{}\t{label}\t{f1:.2}\t{epoch}", i + 1))?;
    }
    log.line(&format!("best {}", rows[0].0))?;
    Ok(())
}

fn report_text(chunk: &EvalReport, segment: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&chunk.conlleval_text());
    s.push_str("\nsegmentation (labels stripped):\n");
    s.push_str(segment.conlleval_text().lines().take(2).collect::<Vec<_>>().join("\n").as_str());
    s.push_str("\n\nF1 by chunk length:\n");
    s.push_str(&chunk.length_table());
    s.push_str("\nsegment F1 by chunk length:\n");
    s.push_str(&segment.length_table());
    s.push('\n');
    s.push_str(&chunk.key_values(""));
    s.push_str(&segment.key_values("segment_"));
    s
}

fn cmd_eval(checkpoint_path: Option<&Path>, test: &Path, dump: Option<&Path>, format: Option<Format>, out: &mut dyn Write) -> Result<()> {
    let sentences = read_corpus(test, format.unwrap_or(Format::Chunking3Col))?;
    let gold: Vec<Vec<Tag>> = sentences.iter().map(|s| s.tags.clone()).collect();
    let pred = match checkpoint_path {
        Some(p) => checkpoint::load(p)?.predict(&sentences)?,
        None => gold.clone(),
    };
    let chunk = chunk_f1(&gold, &pred)?;
    let segment = segment_f1(&gold, &pred)?;
    write!(out, "{}", report_text(&chunk, &segment)).map_err(|e| Error::io("<stdout>", e))?;
    if let Some(d) = dump {
        let tokens: Vec<Vec<String>> = sentences.iter().map(|s| s.tokens.clone()).collect();
        std::fs::write(d, write_conlleval_input(&tokens, &gold, &pred)).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, input: &Path, output: Option<&Path>, format: Option<Format>, out: &mut dyn Write) -> Result<()> {
    let format = format.unwrap_or(Format::Chunking3Col);
    let sentences = read_corpus(input, format)?;
    let model = checkpoint::load(ckpt)?;
    let pred = model.predict(&sentences)?;
    let text = write_conll(&sentences, Some(&pred), format);
    match output {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

/// Outcome of a multi-seed gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    /// Worst relative error per block over all seeds; `None` for frozen blocks.
    pub blocks: Vec<(String, Option<f64>)>,
    pub per_seed: Vec<(u64, f64)>,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.per_seed.iter().map(|s| s.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < 1e-4
    }
}

pub fn gradcheck(config: &ModelConfig, seeds: std::ops::Range<u64>, length: usize, coords: usize, freeze: &[String]) -> Result<GradcheckSummary> {
    let mut summary = GradcheckSummary {
        blocks: Vec::new(),
        per_seed: Vec::new(),
    };
    for seed in seeds {
        let (mut model, sentence) = gradcheck_instance(config, seed, length)?;
        let n = model.store.scalar_count();
        if n >= GRADCHECK_MAX_PARAMS {
            return Err(Error::Config(format!("{n} parameters; gradcheck is limited to {GRADCHECK_MAX_PARAMS}")));
        }
        for name in freeze {
            let id = model.store.id(name).ok_or_else(|| Error::Config(format!("no parameter block `{name}`")))?;
            model.store.set_requires_grad(id, false);
        }
        let opts = FdOptions {
            coords_per_block: coords,
            seed,
            ..FdOptions::default()
        };
        let report = model.gradcheck(&sentence, &opts)?;
        if summary.blocks.is_empty() {
            summary.blocks = report.blocks.iter().map(|b| (b.name.clone(), b.max_rel_error)).collect();
        } else {
            for (acc, b) in summary.blocks.iter_mut().zip(&report.blocks) {
                acc.1 = match (acc.1, b.max_rel_error) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    _ => None,
                };
            }
        }
        summary.per_seed.push((seed, report.max_rel_error()));
    }
    Ok(summary)
}

pub fn gradcheck_text(variant: Variant, s: &GradcheckSummary) -> String {
    let mut out = String::new();
    for (seed, e) in &s.per_seed {
        let _ = writeln!(out, "seed {seed} max_rel_error {e:.3e}");
    }
    for (name, e) in &s.blocks {
        match e {
            Some(e) => {
                let _ = writeln!(out, "block {name} max_rel_error {e:.3e}");
            }
            None => {
                let _ = writeln!(out, "block {name} skipped (frozen)");
            }
        }
    }
    let verdict = if s.passed() { "pass" } else { "FAIL" };
    let _ = writeln!(out, "gradcheck {variant} {verdict} max_rel_error {:.3e} seeds {}", s.max_rel_error(), s.per_seed.len());
    out
}

fn cmd_stats(data: &Path, fraction: Option<f64>, format: Option<Format>, seed: u64, out: &mut dyn Write) -> Result<()> {
    let sentences = read_corpus(data, format.unwrap_or(Format::Chunking3Col))?;
    let h = chunk_length_histogram(&sentences);
    let mut text = format!("sentences {}\nchunks {}\n", sentences.len(), h.total());
    text.push_str(&h.table());
    if let Some(f) = fraction {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("--valid-fraction must be in [0, 1), got {f}")));
        }
        let (tr, va) = split_train_valid(&sentences, f, seed)?;
        let _ = writeln!(text, "split train {} valid {}", tr.len(), va.len());
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_parity(input: &Path, reference: &Path, out: &mut dyn Write) -> Result<bool> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let (report, diffs) = conlleval_parity(&read(input)?, &read(reference)?)?;
    let mut text = report.conlleval_text();
    for d in &diffs {
        let _ = writeln!(text, "mismatch {d}");
    }
    let _ = writeln!(text, "parity {}", if diffs.is_empty() { "ok" } else { "FAILED" });
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(diffs.is_empty())
}

/// Run one command; returns `Ok(false)` for a failed verification.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::Train { config } => {
            let rc = with_overrides(load_config(config)?, cli)?;
            cmd_train(&rc, out)?;
        }
        Command::Grid { config, grid } => {
            let rc = with_overrides(load_config(config)?, cli)?;
            cmd_grid(&rc, grid, out)?;
        }
        Command::Eval { checkpoint, oracle, test, dump } => {
            let ckpt = if *oracle { None } else { checkpoint.as_deref() };
            cmd_eval(ckpt, test, dump.as_deref(), cli.format, out)?;
        }
        Command::Predict { checkpoint, input, output } => cmd_predict(checkpoint, input, output.as_deref(), cli.format, out)?,
        Command::Gradcheck {
            variant,
            seeds,
            length,
            word_dim,
            hidden_dim,
            init_range,
            coords,
            freeze,
        } => {
            let mut c = ModelConfig::toy(*variant);
            if let Some(d) = word_dim {
                c.word_dim = *d;
            }
            if let Some(h) = hidden_dim {
                c.hidden_dim = *h;
                c.decoder_dim = 2 * h;
            }
            if let Some(r) = init_range {
                c.init_range = *r;
            }
            c.validate()?;
            let start = cli.seed.unwrap_or(0);
            let s = gradcheck(&c, start..start + seeds, *length, *coords, freeze)?;
            out.write_all(gradcheck_text(*variant, &s).as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            return Ok(s.passed());
        }
        Command::Stats { data, valid_fraction } => cmd_stats(data, *valid_fraction, cli.format, cli.seed.unwrap_or(0), out)?,
        Command::Parity { input, reference } => return cmd_parity(input, reference, out),
    }
    Ok(true)
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::new()
        .parse_filters(&std::env::var("CHUNKFORGE_LOG").unwrap_or_else(|_| "warn".into()))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(true) => 0,
        Ok(false) => EXIT_VERIFY,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let text = "# toy\nvariant = model1\nlr0=0.05 # inline\ntrain=data/t.txt\nformat=slot2col\n\n";
        let rc = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(rc.model.variant, Variant::Model1);
        assert_eq!(rc.model.lr0, 0.05);
        assert_eq!(rc.train, Some(PathBuf::from("/cfg/data/t.txt")));
        assert_eq!(rc.format, Format::Slot2Col);

        let err = RunConfig::parse("lr0=0.1\nlearning_rate=3\n", Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.starts_with("line 2") && m.contains("learning_rate")), "{err}");
        assert!(RunConfig::parse("lr0\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("lr0=1\nlr0=2\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("hidden_dim=7\n", Path::new(".")).is_err());
    }

    #[test]
    fn config_echo_reparses_to_same_settings() {
        let rc = RunConfig::parse("variant=model2\ntrain=/x/t\nlog_file=/x/log\nvalid_fraction=0.2\n", Path::new("/")).unwrap();
        let echoed: String = rc.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        assert_eq!(RunConfig::parse(&echoed, Path::new("/")).unwrap(), rc);
    }

    #[test]
    fn missing_train_file_is_a_config_error() {
        let rc = RunConfig::parse("train=/nonexistent/train.txt\n", Path::new("/")).unwrap();
        let err = rc.check_paths().unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
        assert!(err.to_string().contains("/nonexistent/train.txt"));
    }

    #[test]
    fn grid_expansion() {
        let g = parse_grid(&["lr0=0.01,0.1".into(), "context_window=1,3".into()]).unwrap();
        let pts = grid_points(&g);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1], vec![("lr0".into(), "0.01".into()), ("context_window".into(), "3".into())]);
        assert_eq!(grid_points(&parse_grid(&["decay=1e-5".into()]).unwrap()).len(), 1);
        assert!(matches!(parse_grid(&["hidden_dim=3,4".into()]), Err(Error::Config(_))));
        assert!(parse_grid(&["lr0=".into()]).is_err());
    }

    #[test]
    fn gradcheck_reports_frozen_blocks() {
        let c = ModelConfig::toy(Variant::Baseline);
        let s = gradcheck(&c, 0..2, 5, 8, &["word_emb".into()]).unwrap();
        assert!(s.passed(), "{}", gradcheck_text(Variant::Baseline, &s));
        assert_eq!(s.blocks.iter().find(|b| b.0 == "word_emb").unwrap().1, None);
        assert!(gradcheck_text(Variant::Baseline, &s).contains("block word_emb skipped (frozen)"));
        assert!(gradcheck(&c, 0..1, 5, 8, &["nope".into()]).is_err());
        let mut big = c.clone();
        big.hidden_dim = 150;
        big.decoder_dim = 300;
        assert!(matches!(gradcheck(&big, 0..1, 5, 8, &[]), Err(Error::Config(_))));
    }
}
