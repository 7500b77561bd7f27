"""CIDEr-D and METEOR over a shared tokenizer."""
from __future__ import annotations

import logging
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Mapping, Sequence

from nltk.stem.porter import PorterStemmer

from .errors import MissingReferences

log = logging.getLogger(__name__)

_PUNCT = string.punctuation + "“”‘’…"
_stemmer = PorterStemmer()


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for w in text.lower().split():
        w = w.strip(_PUNCT)
        if w:
            out.append(w)
    return out


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    return _stemmer.stem(token)


# ---------------------------------------------------------------------------
# CIDEr-D

SIGMA = 6.0
MAX_N = 4


def _ngrams(tokens: Sequence[str], n_max: int = MAX_N) -> Counter:
    c = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            c[tuple(tokens[i:i + n])] += 1
    return c


@dataclass
class IdfTable:
    n: int = MAX_N
    doc_count: int = 0
    df: Dict[tuple, int] = field(default_factory=dict)

    @property
    def log_n(self) -> float:
        return math.log(float(self.doc_count)) if self.doc_count > 0 else 0.0

    def idf(self, gram: tuple) -> float:
        return self.log_n - math.log(max(1.0, float(self.df.get(gram, 0))))


def build_idf(references: Mapping[str, Sequence[str]], n: int = MAX_N) -> IdfTable:
    """Document frequency of each n-gram over the per-image reference sets."""
    df: Counter = Counter()
    for refs in references.values():
        grams = set()
        for r in refs:
            grams.update(_ngrams(tokenize(r), n))
        df.update(grams)
    return IdfTable(n=n, doc_count=len(references), df=dict(df))


def _vec(counts: Counter, idf: IdfTable):
    vec = [dict() for _ in range(idf.n)]
    norm = [0.0] * idf.n
    for gram, tf in counts.items():
        v = float(tf) * idf.idf(gram)
        vec[len(gram) - 1][gram] = v
        norm[len(gram) - 1] += v * v
    return vec, [math.sqrt(x) for x in norm]


def cider_image(candidate: str, refs: Sequence[str], idf: IdfTable, sigma: float = SIGMA) -> float:
    """CIDEr-D of one candidate against its references under a fixed IDF table."""
    if not refs:
        raise MissingReferences("candidate has no references")
    c_tok = tokenize(candidate)
    c_vec, c_norm = _vec(_ngrams(c_tok, idf.n), idf)
    total = 0.0
    for ref in refs:
        r_tok = tokenize(ref)
        r_vec, r_norm = _vec(_ngrams(r_tok, idf.n), idf)
        delta = float(len(c_tok) - len(r_tok))
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        acc = 0.0
        for k in range(idf.n):
            if c_norm[k] == 0.0 or r_norm[k] == 0.0:
                continue
            dot = 0.0
            rv = r_vec[k]
            for gram, val in c_vec[k].items():
                ref_val = rv.get(gram)
                if ref_val is not None:
                    dot += min(val, ref_val) * ref_val
            acc += dot / (c_norm[k] * r_norm[k])
        total += penalty * acc / idf.n
    return 10.0 * total / len(refs)


def cider(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]],
          sigma: float = SIGMA):
    """Corpus CIDEr-D.

    IDF statistics are computed over the reference sets of the candidate
    images.  Returns ``(per_image, mean)``.
    """
    for key in candidates:
        if not references.get(key):
            raise MissingReferences(f"no references for image {key!r}")
    refs = {k: list(references[k]) for k in candidates}
    idf = build_idf(refs)
    per = {k: cider_image(candidates[k], refs[k], idf, sigma) for k in candidates}
    mean = sum(per.values()) / len(per) if per else 0.0
    return per, mean


# ---------------------------------------------------------------------------
# METEOR (exact + stem stages)

ALPHA = 0.9
BETA = 3.0
GAMMA = 0.5


MAX_ALIGN_STATES = 20_000
ALIGN_BEAM = 64


def _options(cand, ref):
    c_stem = [stem(t) for t in cand]
    r_stem = [stem(t) for t in ref]
    options = []
    for i, t in enumerate(cand):
        opts = []
        for j, u in enumerate(ref):
            if t == u:
                opts.append((j, 1))
            elif c_stem[i] == r_stem[j]:
                opts.append((j, 0))
        options.append(opts)
    return options


def _align(cand: Sequence[str], ref: Sequence[str], max_states: int = MAX_ALIGN_STATES):
    """Best alignment as (exact_matches, matches, chunks).

    Maximises exact matches, then total matches, then minimises chunks.
    Forward dynamic programme over candidate positions; the state is the set
    of used reference positions that more than one candidate token could
    take, plus the previous match when the next token could extend its
    chunk.  When a layer grows beyond ``max_states`` (long captions with
    many repeated words) the search continues as a beam of the best
    ``ALIGN_BEAM`` states, so the result is exact only when no cut happened.
    """
    options = _options(cand, ref)
    takers = Counter(j for opts in options for j, _ in opts)
    bit_of = {j: k for k, j in enumerate(sorted(j for j, c in takers.items() if c > 1))}
    n = len(options)
    layer = {(0, -2): (0, 0, 0)}
    width = max_states
    for i in range(n):
        following = {j for j, _ in options[i + 1]} if i + 1 < n else set()
        new = {}
        for (used, prev), val in layer.items():
            key = (used, -2)
            if val > new.get(key, (-1, -1, 0)):
                new[key] = val
            e, m, negc = val
            for j, exact in options[i]:
                b = bit_of.get(j)
                if b is not None:
                    if used >> b & 1:
                        continue
                    nu = used | (1 << b)
                else:
                    nu = used
                chunk = 0 if prev >= 0 and prev == j - 1 else 1
                key = (nu, j if j + 1 in following else -2)
                cand_val = (e + exact, m + 1, negc - chunk)
                if cand_val > new.get(key, (-1, -1, 0)):
                    new[key] = cand_val
        layer = new
        if len(layer) > width:
            if width == max_states:
                log.debug("METEOR alignment switched to beam search at token %d", i)
                width = ALIGN_BEAM
            kept = sorted(layer.items(), key=lambda kv: (kv[1], kv[0]), reverse=True)[:width]
            layer = dict(kept)
    e, m, negc = max(layer.values())
    return e, m, -negc


def meteor_single(candidate: str, reference: str) -> float:
    c = tokenize(candidate)
    r = tokenize(reference)
    if not c or not r:
        return 0.0
    _, m, chunks = _align(c, r)
    if m == 0:
        return 0.0
    p = m / len(c)
    rec = m / len(r)
    f_mean = p * rec / (ALPHA * p + (1.0 - ALPHA) * rec)
    penalty = GAMMA * (chunks / m) ** BETA
    return f_mean * (1.0 - penalty)


def meteor(candidate: str, references: Sequence[str]) -> float:
    """METEOR against several references: the best single-reference score."""
    if not references:
        raise MissingReferences("METEOR needs at least one reference")
    return max(meteor_single(candidate, r) for r in references)


def meteor_corpus(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]]):
    for key in candidates:
        if not references.get(key):
            raise MissingReferences(f"no references for image {key!r}")
    per = {k: meteor(candidates[k], references[k]) for k in candidates}
    mean = sum(per.values()) / len(per) if per else 0.0
    return per, mean
