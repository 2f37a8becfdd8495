"""Generate the synthetic chunking corpora under crates/core/data.

Sentences come from a small phrase grammar with part-of-speech ambiguity
(words such as "watch" or "after" head different chunk types depending on
context). Output is three-column: token, POS, IOB chunk tag.

    python3 scripts/gen_corpora.py
"""

import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"

TOY_LEX = {
    "DT": ["the", "a"],
    "NN": ["dog", "cat", "park", "ball", "man", "watch", "plan"],
    "NNS": ["dogs", "birds"],
    "PRP": ["he", "she", "it"],
    "JJ": ["big", "small", "red", "old"],
    "RB": ["very", "quickly", "now"],
    "VBD": ["saw", "found", "liked"],
    "VBZ": ["runs", "sleeps"],
    "MD": ["can", "will"],
    "VB": ["watch", "plan", "see"],
    "IN": ["in", "on", "after"],
    "CC": ["and"],
    ",": [","],
    ".": ["."],
}

BIG_LEX = {
    "DT": ["the", "a", "this", "that", "every", "some"],
    "NN": ["dog", "cat", "park", "ball", "man", "woman", "city", "river", "house", "car",
           "teacher", "student", "book", "letter", "garden", "window", "market", "price",
           "report", "company", "watch", "plan", "run", "walk", "record", "change", "water"],
    "NNS": ["dogs", "birds", "prices", "reports", "students", "cars", "plans", "changes"],
    "NNP": ["Paris", "Mary", "John", "Acme", "Tokyo", "Ford"],
    "PRP": ["he", "she", "it", "they", "we"],
    "JJ": ["big", "small", "red", "old", "new", "quiet", "strong", "late", "early", "cheap"],
    "RB": ["very", "quickly", "now", "rarely", "almost", "too"],
    "VBD": ["saw", "found", "liked", "sold", "bought", "wrote", "opened", "closed", "left"],
    "VBZ": ["runs", "sleeps", "walks", "records", "changes", "plans", "waters"],
    "MD": ["can", "will", "may", "should"],
    "VB": ["watch", "plan", "see", "run", "walk", "record", "change", "water", "sell"],
    "VBN": ["seen", "sold", "closed", "changed"],
    "IN": ["in", "on", "after", "before", "near", "with", "of"],
    "SUB": ["after", "before", "because", "while"],
    "CC": ["and", "but"],
    ",": [","],
    ".": ["."],
}


class Gen:
    def __init__(self, rng, lex, max_adj):
        self.rng = rng
        self.lex = lex
        self.max_adj = max_adj

    def w(self, pos):
        tag = "IN" if pos == "SUB" else pos
        return (self.rng.choice(self.lex[pos]), tag)

    def chunk(self, label, words):
        return [(w, p, ("B-" if i == 0 else "I-") + label) for i, (w, p) in enumerate(words)]

    def np(self):
        r = self.rng.random()
        if r < 0.2:
            return self.chunk("NP", [self.w("PRP")])
        if r < 0.3 and "NNP" in self.lex:
            return self.chunk("NP", [self.w("NNP")])
        if r < 0.4:
            return self.chunk("NP", [self.w("NNS")])
        words = [self.w("DT")]
        for _ in range(self.rng.randint(0, self.max_adj)):
            words.append(self.w("JJ"))
        words.append(self.w("NN"))
        return self.chunk("NP", words)

    def vp(self):
        r = self.rng.random()
        if r < 0.4:
            return self.chunk("VP", [self.w("VBD")]), True
        if r < 0.6:
            return self.chunk("VP", [self.w("VBZ")]), False
        if r < 0.85 or "VBN" not in self.lex:
            return self.chunk("VP", [self.w("MD"), self.w("VB")]), True
        return self.chunk("VP", [self.w("MD"), ("be", "VB"), self.w("VBN")]), False

    def clause(self):
        out = self.np()
        if self.rng.random() < 0.2:
            out += self.chunk("ADVP", [self.w("RB")])
        vp, transitive = self.vp()
        out += vp
        r = self.rng.random()
        if transitive and r < 0.6:
            out += self.np()
        elif r < 0.75:
            out += self.chunk("ADJP", [self.w("RB"), self.w("JJ")] if self.rng.random() < 0.5 else [self.w("JJ")])
        if self.rng.random() < 0.5:
            out += self.chunk("PP", [self.w("IN")]) + self.np()
        return out

    def sentence(self):
        r = self.rng.random()
        if r < 0.2 and "SUB" in self.lex:
            out = self.chunk("SBAR", [self.w("SUB")]) + self.clause()
            out += [(",", ",", "O")] + self.clause()
        elif r < 0.4:
            out = self.clause() + [(self.w("CC")[0], "CC", "O")] + self.clause()
        else:
            out = self.clause()
        return out + [(".", ".", "O")]


def write(path, sentences):
    with open(path, "w") as f:
        for s in sentences:
            for w, p, t in s:
                f.write(f"{w} {p} {t}\n")
            f.write("\n")


def main():
    toy = Gen(random.Random(20), TOY_LEX, 1)
    sents, seen = [], set()
    while len(sents) < 20:
        s = toy.sentence()
        key = tuple(w for w, _, _ in s)
        if len(s) <= 12 and key not in seen:
            seen.add(key)
            sents.append(s)
    write(OUT / "toy20.txt", sents)

    big = Gen(random.Random(300), BIG_LEX, 2)
    write(OUT / "chunk300.txt", [big.sentence() for _ in range(300)])


if __name__ == "__main__":
    main()
