//! Versioned text checkpoints: header, embedded vocabulary, then parameters.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Index, Vocab};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};

pub const MAGIC: &str = "chunkforge-checkpoint";
pub const VERSION: u32 = 1;

fn hashes(vocab: &Vocab) -> [(&'static str, String); 3] {
    [
        ("words", Vocab::section_hash(vocab.words.symbols())),
        ("chars", Vocab::section_hash(vocab.chars.symbols())),
        ("labels", Vocab::section_hash(&vocab.labels)),
    ]
}

/// Serialize a model. Values use 17 significant digits and reload bit-exactly.
pub fn to_text(model: &Model) -> String {
    let mut out = String::new();
    let vocab = &model.net.vocab;
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "variant {}", model.config().variant);
    for (k, v) in model.config().entries() {
        let _ = writeln!(out, "config {k} {v}");
    }
    for (name, h) in hashes(vocab) {
        let _ = writeln!(out, "hash {name} {h}");
    }
    let sections: [(&str, &[String]); 3] = [
        ("words", vocab.words.symbols()),
        ("chars", vocab.chars.symbols()),
        ("labels", &vocab.labels),
    ];
    for (name, items) in sections {
        let _ = writeln!(out, "vocab {name} {}", items.len());
        for s in items {
            let _ = writeln!(out, "{s}");
        }
    }
    let _ = writeln!(out, "step {}", model.store.step());
    for (_, name, t) in model.store.iter() {
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        let _ = write!(out, "param {name} {} {}", shape.join("x"), u8::from(t.requires_grad()));
        for v in t.values() {
            let _ = write!(out, " {v:.16e}");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next(key)?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields[0] != key {
            return Err(Error::Checkpoint(format!("line {n}: expected `{key}`, found `{line}`")));
        }
        Ok((n, fields[1..].to_vec()))
    }
}

pub fn from_text(text: &str) -> Result<Model> {
    let bad = |n: usize, m: String| Error::Checkpoint(format!("line {n}: {m}"));
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, header) = lines.keyed(MAGIC).map_err(|_| Error::Checkpoint("not a checkpoint file".into()))?;
    if header != [VERSION.to_string().as_str()] {
        return Err(bad(n, format!("unsupported format version {}", header.join(" "))));
    }
    let (n, variant) = lines.keyed("variant")?;
    let mut config = ModelConfig::default();
    for _ in ModelConfig::KEYS {
        let (n, kv) = lines.keyed("config")?;
        let [k, v] = kv[..] else {
            return Err(bad(n, "malformed config line".into()));
        };
        config.set(k, v).map_err(|e| bad(n, e.to_string()))?;
    }
    if variant != [config.variant.name()] {
        return Err(bad(n, "variant line disagrees with config".into()));
    }
    let mut expected = Vec::new();
    for _ in 0..3 {
        let (n, h) = lines.keyed("hash")?;
        let [name, value] = h[..] else {
            return Err(bad(n, "malformed hash line".into()));
        };
        expected.push((name.to_string(), value.to_string()));
    }
    let mut sections: Vec<Vec<String>> = Vec::new();
    for name in ["words", "chars", "labels"] {
        let (n, f) = lines.keyed("vocab")?;
        let count: usize = match f[..] {
            [s, c] if s == name => c.parse().map_err(|_| bad(n, "bad vocabulary size".into()))?,
            _ => return Err(bad(n, format!("expected vocabulary section `{name}`"))),
        };
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            items.push(lines.next(name)?.1.to_string());
        }
        sections.push(items);
    }
    let labels = sections.pop().unwrap();
    let chars = sections.pop().unwrap();
    let words = sections.pop().unwrap();
    let vocab = Vocab::from_parts(Index::from_symbols(words), Index::from_symbols(chars), labels);
    for ((name, want), (_, got)) in expected.iter().zip(hashes(&vocab)) {
        if *want != got {
            return Err(Error::Checkpoint(format!("vocabulary hash mismatch for {name}: header {want}, content {got}")));
        }
    }
    let (n, step) = lines.keyed("step")?;
    let step: u64 = step.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad(n, "bad step".into()))?;

    let mut model = Model::new(&config, &vocab)?;
    model.store.set_step(step);
    let mut seen = vec![false; model.store.len()];
    loop {
        let (n, line) = lines.next("parameters")?;
        if line == "end" {
            break;
        }
        let mut f = line.split(' ');
        if f.next() != Some("param") {
            return Err(bad(n, "expected `param` or `end`".into()));
        }
        let name = f.next().ok_or_else(|| bad(n, "missing name".into()))?;
        let id = model.store.id(name).ok_or_else(|| bad(n, format!("unknown parameter `{name}`")))?;
        let shape = f.next().unwrap_or_default();
        let want: Vec<String> = model.store.get(id).shape().iter().map(ToString::to_string).collect();
        if shape != want.join("x") {
            return Err(bad(n, format!("shape {shape} for `{name}`, model expects {}", want.join("x"))));
        }
        let trainable = match f.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad(n, "bad trainable flag".into())),
        };
        let values = f
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(n, format!("bad value: {e}")))?;
        let dst = model.store.values_mut(id);
        if values.len() != dst.len() {
            return Err(bad(n, format!("{} values for `{name}`, expected {}", values.len(), dst.len())));
        }
        dst.copy_from_slice(&values);
        model.store.set_requires_grad(id, trainable);
        seen[id_index(&model, id)] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.store.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::Checkpoint(format!("parameter `{name}` missing")));
    }
    Ok(model)
}

fn id_index(model: &Model, id: crate::autodiff::ParamId) -> usize {
    model.store.ids().position(|x| x == id).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll, Format};
    use crate::models::Variant;

    fn model(variant: Variant) -> Model {
        let s = parse_conll("the B-NP\ncat I-NP\nsat B-VP\n. O\n", Format::Slot2Col).unwrap();
        Model::new(&ModelConfig::toy(variant), &Vocab::build(&s, 1)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let mut m = model(v);
            m.store.set_step(17);
            let first = m.store.ids().next().unwrap();
            m.store.values_mut(first)[0] = 0.1 + 0.2;
            m.store.set_requires_grad(first, false);
            let text = to_text(&m);
            let back = from_text(&text).unwrap();
            assert_eq!(back.config(), m.config());
            assert_eq!(back.net.vocab, m.net.vocab);
            assert_eq!(back.store.step(), 17);
            assert!(!back.store.get(first).requires_grad());
            for ((_, a, x), (_, b, y)) in m.store.iter().zip(back.store.iter()) {
                assert_eq!(a, b);
                assert_eq!(x.values(), y.values());
            }
            assert_eq!(to_text(&back), text);
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let text = to_text(&model(Variant::Model1));
        let tampered = text.replacen("\ncat\n", "\ncow\n", 1);
        assert!(matches!(from_text(&tampered), Err(Error::Checkpoint(m)) if m.contains("hash mismatch")));
        let cut: String = text.lines().take(40).collect::<Vec<_>>().join("\n");
        assert!(matches!(from_text(&cut), Err(Error::Checkpoint(_))));
        assert!(matches!(from_text("hello\n"), Err(Error::Checkpoint(_))));
        let v2 = text.replacen("checkpoint 1", "checkpoint 2", 1);
        assert!(matches!(from_text(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
        let no_end = text.replace("end\n", "");
        assert!(from_text(&no_end).is_err());
    }
}
