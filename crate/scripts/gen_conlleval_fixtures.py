"""Generate scorer parity fixtures with the Python port of conlleval.

Requires `pip install conlleval==0.2`. The port returns precision 1 when
nothing is predicted; the Perl original returns 0, so that is patched here.
"""

import random
import sys
from pathlib import Path

import conlleval.conlleval as ce


def summarize(correct, pred, gold):
    prec = 0 if pred == 0 else correct / pred
    rec = 0 if gold == 0 else correct / gold
    f1 = 0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return {
        "stats": {"gold": gold, "pred": pred, "correct": correct},
        "evals": {"f1": f1, "prec": prec, "rec": rec},
    }


ce.summarize = summarize

LABELS = ["NP", "VP", "PP", "ADJP", "ADVP", "SBAR", "toloc", "fromloc"]
WORDS = ["the", "cat", "sat", "on", "mat", "flights", "to", "boston", "42", "very", "quickly", "and"]


def well_formed(rng, n, labels):
    tags = []
    while len(tags) < n:
        if rng.random() < 0.25:
            tags.append("O")
            continue
        lab = rng.choice(labels)
        k = min(n - len(tags), rng.choice([1, 1, 2, 2, 3, 4, 6]))
        tags += ["B-" + lab] + ["I-" + lab] * (k - 1)
    return tags


def corrupt(rng, gold, labels, rate):
    out = []
    for t in gold:
        if rng.random() >= rate:
            out.append(t)
            continue
        r = rng.random()
        if r < 0.3:
            out.append("O")
        elif r < 0.6:
            out.append(rng.choice("BI") + "-" + rng.choice(labels))
        elif r < 0.8 and t != "O":
            out.append(("I" if t[0] == "B" else "B") + t[1:])
        else:
            out.append(t[:2] + rng.choice(labels) if t != "O" else "O")
    return out


def case(rng, index):
    labels = rng.sample(LABELS, rng.randint(1, 4))
    lines = []
    for _ in range(rng.randint(1, 6)):
        n = rng.randint(1, 14)
        gold = well_formed(rng, n, labels)
        if index % 10 == 3:
            pred = ["O"] * n
        elif index % 10 == 7:
            pred = [rng.choice(["O", "B-" + labels[0], "I-" + labels[-1]]) for _ in range(n)]
        else:
            pred = corrupt(rng, gold, labels, rng.choice([0.0, 0.1, 0.3, 0.6]))
        if index % 10 == 5:
            gold = [rng.choice(["O", "I-" + labels[0], "B-" + labels[-1]]) for _ in range(n)]
        for g, p in zip(gold, pred):
            lines.append(f"{rng.choice(WORDS)} {g} {p}")
        lines.append("")
    return lines


def main(out_dir):
    rng = random.Random(2000)
    cases, expected = [], []
    for i in range(100):
        lines = case(rng, i)
        report = ce.report(ce.evaluate(lines))
        cases.append(f"### case {i}\n" + "\n".join(lines) + "\n")
        expected.append(f"### case {i}\n" + report)
    out = Path(out_dir)
    (out / "conlleval_cases.txt").write_text("".join(cases))
    (out / "conlleval_expected.txt").write_text("".join(expected))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
