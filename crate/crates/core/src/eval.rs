//! Chunk scoring under the conlleval protocol: exact-boundary, exact-label
//! matching, plus segmentation-only and per-length views.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::corpus::{iob_to_chunks, repair_iob, ChunkSpan, LengthBucket, Tag};
use crate::error::{Error, Result};

/// Chunk counts for one slice of the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Score {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Score {
    /// Percent; zero when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.predicted as f64
        }
    }

    /// Percent; zero when there is no gold chunk.
    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    fn add(&mut self, other: &Score) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub overall: Score,
    pub per_label: BTreeMap<String, Score>,
    pub per_length: [Score; 3],
    pub tokens: usize,
    /// Tokens whose predicted tag string equals the gold tag string.
    pub tokens_correct: usize,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    /// Bucket score, or `None` ("n/a") when the bucket holds no gold and no predicted chunk.
    pub fn bucket(&self, b: LengthBucket) -> Option<Score> {
        let s = self.per_length[b.index()];
        (s.gold > 0 || s.predicted > 0).then_some(s)
    }

    fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            100.0 * self.tokens_correct as f64 / self.tokens as f64
        }
    }

    /// Summary in the reference script's layout.
    pub fn conlleval_text(&self) -> String {
        let o = &self.overall;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "processed {} tokens with {} phrases; found: {} phrases; correct: {}.",
            self.tokens, o.gold, o.predicted, o.correct
        );
        let _ = writeln!(
            out,
            "accuracy: {:6.2}%; precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}",
            self.accuracy(),
            o.precision(),
            o.recall(),
            o.f1()
        );
        for (label, s) in &self.per_label {
            if label.is_empty() {
                continue;
            }
            let _ = writeln!(
                out,
                "{label:>17}: precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}  {}",
                s.precision(),
                s.recall(),
                s.f1(),
                s.predicted
            );
        }
        out
    }

    /// `key: value` lines for scripts.
    pub fn key_values(&self, prefix: &str) -> String {
        let o = &self.overall;
        let mut out = String::new();
        let _ = writeln!(out, "{prefix}precision: {:.2}", o.precision());
        let _ = writeln!(out, "{prefix}recall: {:.2}", o.recall());
        let _ = writeln!(out, "{prefix}f1: {:.2}", o.f1());
        let _ = writeln!(out, "{prefix}gold_chunks: {}", o.gold);
        let _ = writeln!(out, "{prefix}predicted_chunks: {}", o.predicted);
        let _ = writeln!(out, "{prefix}correct_chunks: {}", o.correct);
        out
    }

    /// Per-length table with buckets `1`, `2`, `>=3`.
    pub fn length_table(&self) -> String {
        let mut out = String::from("length\tprecision\trecall\tF1\tgold\tpredicted\n");
        for b in LengthBucket::ALL {
            match self.bucket(b) {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}",
                        b.name(),
                        s.precision(),
                        s.recall(),
                        s.f1(),
                        s.gold,
                        s.predicted
                    );
                }
                None => {
                    let _ = writeln!(out, "{}\tn/a\tn/a\tn/a\t0\t0", b.name());
                }
            }
        }
        out
    }
}

/// Labeled chunks of a tag sequence as conlleval sees them: repaired, O spans dropped.
pub fn extract_chunks(tags: &[Tag]) -> Vec<ChunkSpan> {
    iob_to_chunks(&repair_iob(tags))
        .expect("repaired tags always decode")
        .into_iter()
        .filter(|s| !s.is_outside())
        .collect()
}

fn check_alignment(gold: &[Vec<Tag>], pred: &[Vec<Tag>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Alignment {
            sentence: gold.len().min(pred.len()),
            message: format!("{} gold sentences vs {} predicted", gold.len(), pred.len()),
        });
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Alignment {
                sentence: i,
                message: format!("{} gold tags vs {} predicted", g.len(), p.len()),
            });
        }
    }
    Ok(())
}

/// Chunk precision, recall and F1 over a corpus of tag sequences.
pub fn chunk_f1(gold: &[Vec<Tag>], pred: &[Vec<Tag>]) -> Result<EvalReport> {
    check_alignment(gold, pred)?;
    let mut report = EvalReport::default();
    for (g, p) in gold.iter().zip(pred) {
        report.tokens += g.len();
        report.tokens_correct += g.iter().zip(p).filter(|(a, b)| a == b).count();
        let gc = extract_chunks(g);
        let pc = extract_chunks(p);
        let gset: BTreeSet<&ChunkSpan> = gc.iter().collect();
        for c in &gc {
            report.per_label.entry(c.label.clone()).or_default().gold += 1;
            report.per_length[LengthBucket::of(c.length).index()].gold += 1;
        }
        for c in &pc {
            let hit = gset.contains(c);
            let label = report.per_label.entry(c.label.clone()).or_default();
            label.predicted += 1;
            let bucket = &mut report.per_length[LengthBucket::of(c.length).index()];
            bucket.predicted += 1;
            if hit {
                label.correct += 1;
                bucket.correct += 1;
            }
        }
    }
    let mut overall = Score::default();
    for s in report.per_label.values() {
        overall.add(s);
    }
    report.overall = overall;
    Ok(report)
}

/// Map every tag to its bare prefix.
pub fn strip_labels(tags: &[Vec<Tag>]) -> Vec<Vec<Tag>> {
    tags.iter().map(|s| s.iter().map(Tag::strip).collect()).collect()
}

/// Boundary-only F1: labels removed before scoring.
pub fn segment_f1(gold: &[Vec<Tag>], pred: &[Vec<Tag>]) -> Result<EvalReport> {
    check_alignment(gold, pred)?;
    chunk_f1(&strip_labels(gold), &strip_labels(pred))
}

/// Scores per chunk-length bucket; gold chunks count toward recall of their own
/// length, predicted chunks toward precision of theirs.
pub fn per_length_f1(gold: &[Vec<Tag>], pred: &[Vec<Tag>]) -> Result<[Option<Score>; 3]> {
    let r = chunk_f1(gold, pred)?;
    Ok(LengthBucket::ALL.map(|b| r.bucket(b)))
}

/// Read the conlleval input layout: tokens and features, then gold and predicted tags.
pub fn parse_conlleval_input(text: &str) -> Result<(Vec<Vec<Tag>>, Vec<Vec<Tag>>)> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let (mut g, mut p) = (Vec::new(), Vec::new());
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            if !g.is_empty() {
                gold.push(std::mem::take(&mut g));
                pred.push(std::mem::take(&mut p));
            }
            continue;
        }
        if f.len() < 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected at least 3 fields, found {}", f.len()),
            });
        }
        match width {
            None => width = Some(f.len()),
            Some(w) if w != f.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unexpected number of fields: {} ({w})", f.len()),
                })
            }
            _ => {}
        }
        let parse = |s: &str| parse_scored_tag(s).map_err(|message| Error::Parse { line: i + 1, message });
        g.push(parse(f[f.len() - 2])?);
        p.push(parse(f[f.len() - 1])?);
    }
    if !g.is_empty() {
        gold.push(g);
        pred.push(p);
    }
    Ok((gold, pred))
}

/// Like [`Tag::parse`] but also accepts the bare `B` and `I` of boundary-only files.
fn parse_scored_tag(s: &str) -> std::result::Result<Tag, String> {
    match s {
        "B" => Ok(Tag::B(String::new())),
        "I" => Ok(Tag::I(String::new())),
        _ => Tag::parse(s),
    }
}

/// Lay out `token gold pred` lines for the external script.
pub fn write_conlleval_input(tokens: &[Vec<String>], gold: &[Vec<Tag>], pred: &[Vec<Tag>]) -> String {
    let mut out = String::new();
    for ((toks, g), p) in tokens.iter().zip(gold).zip(pred) {
        for ((t, g), p) in toks.iter().zip(g).zip(p) {
            let _ = writeln!(out, "{t} {g} {p}");
        }
        out.push('\n');
    }
    out
}

/// Overall numbers pulled from the reference script's summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSummary {
    pub tokens: usize,
    pub gold: usize,
    pub found: usize,
    pub correct: usize,
    pub precision: String,
    pub recall: String,
    pub f1: String,
}

impl ReferenceSummary {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            line: 0,
            message: format!("unrecognized conlleval summary: {m}"),
        };
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| bad("empty"))?;
        let nums: Vec<usize> = first
            .split(|c: char| !c.is_ascii_digit())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        let [tokens, gold, found, correct] = nums[..] else {
            return Err(bad(first));
        };
        let second = lines.next().ok_or_else(|| bad("missing score line"))?;
        let field = |key: &str| -> Result<String> {
            let start = second.find(key).ok_or_else(|| bad(second))? + key.len();
            let rest = &second[start..];
            let end = rest.find(['%', ';']).unwrap_or(rest.len());
            Ok(rest[..end].trim().to_string())
        };
        Ok(ReferenceSummary {
            tokens,
            gold,
            found,
            correct,
            precision: field("precision:")?,
            recall: field("recall:")?,
            f1: field("FB1:")?,
        })
    }
}

/// Score a conlleval-layout file and diff it against the reference script's output.
///
/// Returns our report and the list of mismatches (empty on parity).
pub fn conlleval_parity(tag_file: &str, reference_output: &str) -> Result<(EvalReport, Vec<String>)> {
    let (gold, pred) = parse_conlleval_input(tag_file)?;
    let ours = chunk_f1(&gold, &pred)?;
    let reference = ReferenceSummary::parse(reference_output)?;
    let mut diffs = Vec::new();
    let mut cmp = |what: &str, a: String, b: &str| {
        if a != b {
            diffs.push(format!("{what}: ours {a}, reference {b}"));
        }
    };
    cmp("tokens", ours.tokens.to_string(), &reference.tokens.to_string());
    cmp("gold chunks", ours.overall.gold.to_string(), &reference.gold.to_string());
    cmp("found chunks", ours.overall.predicted.to_string(), &reference.found.to_string());
    cmp("correct chunks", ours.overall.correct.to_string(), &reference.correct.to_string());
    cmp("precision", format!("{:.2}", ours.precision()), &reference.precision);
    cmp("recall", format!("{:.2}", ours.recall()), &reference.recall);
    cmp("FB1", format!("{:.2}", ours.f1()), &reference.f1);
    Ok((ours, diffs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|x| parse_scored_tag(x).unwrap()).collect()
    }

    #[test]
    fn identical_streams_score_100() {
        let g = vec![t("O B-NP B-VP I-VP B-ADJP I-ADJP")];
        let r = chunk_f1(&g, &g).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (100.0, 100.0, 100.0));
        assert_eq!(r.overall.gold, 3);
        assert_eq!(format!("{:.2}", r.f1()), "100.00");
    }

    #[test]
    fn hand_enumerated_half_credit() {
        let g = vec![t("B-NP I-NP B-VP O")];
        let p = vec![t("B-NP I-NP B-VP I-VP")];
        let r = chunk_f1(&g, &p).unwrap();
        assert_eq!(r.overall, Score { gold: 2, predicted: 2, correct: 1 });
        assert_eq!(format!("{:.2} {:.2} {:.2}", r.precision(), r.recall(), r.f1()), "50.00 50.00 50.00");
    }

    #[test]
    fn no_predictions_scores_zero() {
        let r = chunk_f1(&[t("B-NP O")], &[t("O O")]).unwrap();
        assert_eq!((r.precision(), r.f1()), (0.0, 0.0));
    }

    #[test]
    fn alignment_errors_name_the_sentence() {
        let err = chunk_f1(&[t("O"), t("O O")], &[t("O"), t("O")]).unwrap_err();
        assert!(matches!(err, Error::Alignment { sentence: 1, .. }));
        assert!(chunk_f1(&[t("O")], &[]).is_err());
    }

    #[test]
    fn segment_score_example() {
        let g = vec![t("B-NP I-NP B-VP")];
        let p = vec![t("B-NP B-VP I-VP")];
        let r = segment_f1(&g, &p).unwrap();
        assert_eq!(r.overall, Score { gold: 2, predicted: 2, correct: 0 });
        assert_eq!(r.f1(), 0.0);

        let p = vec![t("B-VP I-VP B-NP")];
        assert_eq!(segment_f1(&g, &p).unwrap().f1(), 100.0);
        assert!(chunk_f1(&g, &p).unwrap().f1() < 100.0);
    }

    #[test]
    fn length_buckets() {
        let g = vec![t("B-NP O B-VP")];
        let [one, two, three] = per_length_f1(&g, &g).unwrap();
        assert_eq!(one.unwrap().f1(), 100.0);
        assert!(two.is_none() && three.is_none());
        let r = chunk_f1(&g, &g).unwrap();
        assert!(r.length_table().contains("2\tn/a"));

        // gold (0,3,NP) (3,1,VP); pred (0,2,NP) (2,2,VP)
        let g = vec![t("B-NP I-NP I-NP B-VP")];
        let p = vec![t("B-NP I-NP B-VP I-VP")];
        let [one, two, three] = per_length_f1(&g, &p).unwrap();
        assert_eq!(one.unwrap(), Score { gold: 1, predicted: 0, correct: 0 });
        assert_eq!(two.unwrap(), Score { gold: 0, predicted: 2, correct: 0 });
        assert_eq!(three.unwrap(), Score { gold: 1, predicted: 0, correct: 0 });
    }

    #[test]
    fn conlleval_layout_round_trip() {
        let toks = vec![vec!["a".to_string(), "b".into()]];
        let g = vec![t("B-NP I-NP")];
        let p = vec![t("B-NP B-NP")];
        let text = write_conlleval_input(&toks, &g, &p);
        let (g2, p2) = parse_conlleval_input(&text).unwrap();
        assert_eq!((g2, p2), (g, p));
        assert!(parse_conlleval_input("a B-NP\n").is_err());
        assert!(parse_conlleval_input("a x B-NP B-NP\nb B-NP B-NP\n").is_err());
    }

    #[test]
    fn summary_text_matches_reference_layout() {
        let text = "a B-NP B-NP\nb I-NP O\nc B-VP B-VP\n";
        let (g, p) = parse_conlleval_input(text).unwrap();
        let r = chunk_f1(&g, &p).unwrap();
        let s = r.conlleval_text();
        assert!(s.starts_with("processed 3 tokens with 2 phrases; found: 2 phrases; correct: 1.\n"), "{s}");
        assert!(s.contains("accuracy:  66.67%; precision:  50.00%; recall:  50.00%; FB1:  50.00"), "{s}");
        let parsed = ReferenceSummary::parse(&s).unwrap();
        assert_eq!(parsed.f1, "50.00");
        let (_, diffs) = conlleval_parity(text, &s).unwrap();
        assert!(diffs.is_empty());
    }

    #[test]
    fn all_outside_corpus_has_no_chunks() {
        let r = chunk_f1(&[t("O O O")], &[t("O O O")]).unwrap();
        assert_eq!(r.overall.gold, 0);
        assert_eq!(r.f1(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tags(n: usize) -> impl Strategy<Value = Vec<Tag>> {
            prop::collection::vec(
                prop_oneof![
                    Just(Tag::O),
                    prop::sample::select(vec!["NP", "VP"]).prop_map(|l| Tag::B(l.into())),
                    prop::sample::select(vec!["NP", "VP"]).prop_map(|l| Tag::I(l.into())),
                ],
                n,
            )
        }

        fn pair() -> impl Strategy<Value = (Vec<Tag>, Vec<Tag>)> {
            (1usize..15).prop_flat_map(|n| (tags(n), tags(n)))
        }

        proptest! {
            #[test]
            fn swapping_sides_swaps_p_and_r((g, p) in pair()) {
                let a = chunk_f1(std::slice::from_ref(&g), std::slice::from_ref(&p)).unwrap();
                let b = chunk_f1(&[p], &[g]).unwrap();
                prop_assert_eq!(a.precision(), b.recall());
                prop_assert_eq!(a.recall(), b.precision());
                prop_assert!((a.f1() - b.f1()).abs() < 1e-12);
            }

            // dominance needs well-formed input: stripping B-NP I-VP merges two chunks
            #[test]
            fn segment_dominates_chunk((g, p) in pair()) {
                let (g, p) = (repair_iob(&g), repair_iob(&p));
                let c = chunk_f1(std::slice::from_ref(&g), std::slice::from_ref(&p)).unwrap();
                let s = segment_f1(std::slice::from_ref(&g), std::slice::from_ref(&p)).unwrap();
                prop_assert!(s.overall.correct >= c.overall.correct);
                prop_assert!(s.f1() + 1e-9 >= c.f1());
                prop_assert_eq!(segment_f1(std::slice::from_ref(&g), std::slice::from_ref(&g)).unwrap().f1(),
                    if s.overall.gold > 0 { 100.0 } else { 0.0 });
                let twice = segment_f1(&strip_labels(&[g]), &strip_labels(&[p])).unwrap();
                prop_assert_eq!(twice, s);
            }

            #[test]
            fn adding_a_correct_chunk_never_lowers_f1((g, p) in pair()) {
                let before = chunk_f1(std::slice::from_ref(&g), std::slice::from_ref(&p)).unwrap();
                // replace the prediction over one unmatched gold chunk with that chunk
                let gold_chunks = extract_chunks(&g);
                let pred_chunks = extract_chunks(&p);
                if let Some(c) = gold_chunks.iter().find(|c| !pred_chunks.contains(c)) {
                    let free = pred_chunks.iter().all(|q| q.end() <= c.begin || q.begin >= c.end());
                    let next_is_i = matches!(p.get(c.end()), Some(Tag::I(_)));
                    if free && !next_is_i {
                        let mut p2 = p.clone();
                        p2[c.begin] = Tag::B(c.label.clone());
                        for k in c.begin + 1..c.end() {
                            p2[k] = Tag::I(c.label.clone());
                        }
                        let after = chunk_f1(&[g], &[p2]).unwrap();
                        prop_assert_eq!(after.overall.correct, before.overall.correct + 1);
                        prop_assert!(after.f1() + 1e-9 >= before.f1());
                    }
                }
            }

            #[test]
            fn aggregate_lies_between_buckets(
                g in prop::collection::vec(tags(12), 4), p in prop::collection::vec(tags(12), 4)
            ) {
                let r = chunk_f1(&g, &p).unwrap();
                let buckets: Vec<f64> = LengthBucket::ALL.iter().filter_map(|&b| r.bucket(b)).map(|s| s.f1()).collect();
                if buckets.len() == 3 {
                    // F1 = 2c / (p + g), a mediant of the bucket values
                    let lo = buckets.iter().copied().fold(f64::MAX, f64::min);
                    let hi = buckets.iter().copied().fold(f64::MIN, f64::max);
                    prop_assert!(r.f1() >= lo - 1e-9 && r.f1() <= hi + 1e-9);
                }
            }
        }
    }
}
