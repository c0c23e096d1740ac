"""Generate the bundled desk corpus (data/desk/{train,valid,test}.txt).

A seeded toy grammar over pseudo-words: determiners, adjectives, nouns with
plural agreement, verbs with preferred objects, prepositional phrases and
conjunctions.  Output is plain lowercase text, one to three sentences per
line, about 1 MB in total.

    python scripts/make_corpus.py [--out data/desk] [--seed 2018] [--chars 1000000]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "gl", "sh", "ch"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]
CODAS = ["", "", "", "n", "r", "l", "s", "t", "m", "nd", "rk"]

DETERMINERS = ["the", "a", "this", "that", "every", "some", "my", "our"]
PLURAL_DETERMINERS = ["the", "these", "those", "some", "many", "our", "my"]
PREPOSITIONS = ["in", "on", "under", "near", "with", "behind", "over", "from"]
CONJUNCTIONS = ["and", "but", "while", "because", "so"]


def pseudo_word(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(ONSETS[rng.integers(len(ONSETS))] + VOWELS[rng.integers(len(VOWELS))]
                     + CODAS[rng.integers(len(CODAS))])
    return "".join(parts)


def lexicon(rng: np.random.Generator, n: int, syl_lo: int, syl_hi: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        w = pseudo_word(rng, int(rng.integers(syl_lo, syl_hi + 1)))
        if w not in taken and not w.endswith("s"):
            taken.add(w)
            words.append(w)
    return words


def zipf(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


class Grammar:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        taken = set(DETERMINERS + PLURAL_DETERMINERS + PREPOSITIONS + CONJUNCTIONS)
        self.nouns = lexicon(rng, 300, 1, 3, taken)
        self.verbs = lexicon(rng, 160, 1, 2, taken)
        self.adjs = lexicon(rng, 100, 1, 3, taken)
        self.advs = [w + "ly" for w in lexicon(rng, 40, 1, 2, taken)]
        self.names = lexicon(rng, 40, 2, 3, taken)
        self.pn, self.pv, self.pa = zipf(len(self.nouns)), zipf(len(self.verbs)), zipf(len(self.adjs))
        # each verb prefers a small set of objects
        self.objects = [rng.choice(len(self.nouns), size=12, replace=False) for _ in self.verbs]

    def pick(self, items, probs=None):
        return items[self.rng.choice(len(items), p=probs)]

    def noun_phrase(self, noun: int | None = None, depth: int = 0) -> tuple[str, bool]:
        rng = self.rng
        if noun is None and rng.random() < 0.12:
            return self.pick(self.names), False
        plural = rng.random() < 0.3
        det = self.pick(PLURAL_DETERMINERS if plural else DETERMINERS)
        words = [det]
        for _ in range(rng.choice(3, p=[0.55, 0.35, 0.10])):
            words.append(self.pick(self.adjs, self.pa))
        n = noun if noun is not None else rng.choice(len(self.nouns), p=self.pn)
        words.append(self.nouns[n] + ("s" if plural else ""))
        if depth == 0 and rng.random() < 0.2:
            words.append(self.prep_phrase(depth + 1))
        return " ".join(words), plural

    def prep_phrase(self, depth: int) -> str:
        np_, _ = self.noun_phrase(depth=depth)
        return f"{self.pick(PREPOSITIONS)} {np_}"

    def clause(self) -> str:
        rng = self.rng
        subj, plural = self.noun_phrase()
        v = rng.choice(len(self.verbs), p=self.pv)
        verb = self.verbs[v] + ("" if plural else "s")
        words = [subj, verb]
        r = rng.random()
        if r < 0.7:
            obj = int(rng.choice(self.objects[v])) if rng.random() < 0.75 else None
            words.append(self.noun_phrase(obj)[0])
        elif r < 0.85:
            words.append(self.pick(self.advs))
        if rng.random() < 0.25:
            words.append(self.prep_phrase(1))
        return " ".join(words)

    def sentence(self) -> str:
        parts = [self.clause()]
        while self.rng.random() < 0.3 and len(parts) < 3:
            parts.append(self.pick(CONJUNCTIONS))
            parts.append(self.clause())
        return " ".join(parts) + " ."

    def line(self) -> str:
        return " ".join(self.sentence() for _ in range(self.rng.integers(1, 4)))


def generate(n_chars: int, seed: int) -> list[str]:
    g = Grammar(np.random.default_rng(seed))
    lines, total = [], 0
    while total < n_chars:
        ln = g.line()
        lines.append(ln)
        total += len(ln) + 1
    return lines


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/desk")
    ap.add_argument("--seed", type=int, default=2018)
    ap.add_argument("--chars", type=int, default=1_000_000)
    args = ap.parse_args()
    lines = generate(args.chars, args.seed)
    n = len(lines)
    n_valid = n_test = n // 20
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": lines[: n - n_valid - n_test],
        "valid": lines[n - n_valid - n_test: n - n_test],
        "test": lines[n - n_test:],
    }
    for name, ls in splits.items():
        (out / f"{name}.txt").write_text("\n".join(ls) + "\n", encoding="utf-8")
        print(f"{name}: {len(ls)} lines, {sum(len(x) + 1 for x in ls)} chars")


if __name__ == "__main__":
    main()
