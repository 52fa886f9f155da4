"""Inverted index with Okapi BM25 ranking over the knowledge corpus.

Supplies the top-l candidate sets used as the latent-knowledge search space
and the random noise sentences mixed into training inputs.

Scoring, for query tokens t (each occurrence contributes):

    score(q, d) = sum_t IDF(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len_d / avg_len))
    IDF(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))

The +1-inside-log IDF keeps scores non-negative.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .text import tokenize

IDX_MAGIC = b"ZRIDX1"


class IndexError_(ValueError):
    """Configuration or persistence failure in the retrieval index."""


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0 or not 0.0 <= self.b <= 1.0:
            raise IndexError_(f"bad BM25 parameters k1={self.k1} b={self.b}")


@dataclass(frozen=True)
class KnowledgeSentence:
    id: int
    text: str
    token_count: int


@dataclass
class CandidateSet:
    """Top-l retrieval results, scores non-increasing, ids unique."""

    query_id: int
    items: list[tuple[KnowledgeSentence, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def sentences(self) -> list[KnowledgeSentence]:
        return [s for s, _ in self.items]

    def scores(self) -> list[float]:
        return [sc for _, sc in self.items]


class InvertedIndex:
    """Immutable after build; concurrently queryable."""

    def __init__(self, sentences: list[str], params: Bm25Params = Bm25Params()):
        if not sentences:
            raise IndexError_("cannot index an empty corpus")
        self.params = params
        self.sentences: list[KnowledgeSentence] = []
        self.postings: dict[str, list[tuple[int, int]]] = {}
        self.doc_len: list[int] = []
        for sid, text in enumerate(sentences):
            toks = tokenize(text)
            self.sentences.append(KnowledgeSentence(sid, text, len(toks)))
            self.doc_len.append(len(toks))
            counts: dict[str, int] = {}
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
            for t, tf in counts.items():
                self.postings.setdefault(t, []).append((sid, tf))
        self.n_docs = len(sentences)
        self.avg_len = sum(self.doc_len) / self.n_docs

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def _idf(self, df: int) -> float:
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def retrieve_topl(self, query: str, l: int, query_id: int = -1) -> CandidateSet:
        """The l highest-scoring sentences; ties broken by smaller id."""
        if l < 1:
            raise IndexError_(f"l must be >= 1, got {l}")
        k1, b = self.params.k1, self.params.b
        scores: dict[int, float] = {}
        for term in tokenize(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self._idf(len(plist))
            for sid, tf in plist:
                norm = tf + k1 * (1.0 - b + b * self.doc_len[sid] / self.avg_len)
                scores[sid] = scores.get(sid, 0.0) + idf * tf * (k1 + 1.0) / norm
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:l]
        return CandidateSet(query_id, [(self.sentences[sid], sc) for sid, sc in ranked])

    def sample_noise(self, n: int, rng: np.random.Generator,
                     exclude: set[int] = frozenset()) -> list[KnowledgeSentence]:
        """n distinct sentences outside `exclude`, order seed-deterministic."""
        if n == 0:
            return []
        pool = [sid for sid in range(self.n_docs) if sid not in exclude]
        if len(pool) < n:
            raise IndexError_(
                f"cannot draw {n} noise sentences from {len(pool)} remaining")
        picks = rng.choice(len(pool), size=n, replace=False)
        return [self.sentences[pool[i]] for i in picks]

    # -- persistence --------------------------------------------------------

    def save(self, prefix: str):
        """Write `<prefix>.idx` (binary) and `<prefix>.txt` (raw sentences)."""
        tmp_idx = prefix + ".idx.tmp"
        with open(tmp_idx, "wb") as fh:
            fh.write(IDX_MAGIC)
            fh.write(struct.pack("<dd", self.params.k1, self.params.b))
            fh.write(struct.pack("<I", self.n_docs))
            fh.write(struct.pack(f"<{self.n_docs}I", *self.doc_len))
            fh.write(struct.pack("<I", len(self.postings)))
            for term in sorted(self.postings):
                raw = term.encode("utf-8")
                plist = self.postings[term]
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", len(plist)))
                for sid, tf in plist:
                    fh.write(struct.pack("<II", sid, tf))
        os.replace(tmp_idx, prefix + ".idx")
        tmp_txt = prefix + ".txt.tmp"
        with open(tmp_txt, "w", encoding="utf-8") as fh:
            for s in self.sentences:
                fh.write(s.text.replace("\n", " ") + "\n")
        os.replace(tmp_txt, prefix + ".txt")

    @classmethod
    def load(cls, prefix: str) -> "InvertedIndex":
        with open(prefix + ".txt", encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh]
        with open(prefix + ".idx", "rb") as fh:
            magic = fh.read(len(IDX_MAGIC))
            if magic != IDX_MAGIC:
                raise IndexError_(f"bad index magic: {magic!r}")
            k1, b = struct.unpack("<dd", fh.read(16))
            (n_docs,) = struct.unpack("<I", fh.read(4))
            if n_docs != len(texts):
                raise IndexError_(
                    f"sidecar has {len(texts)} sentences but index expects {n_docs}")
            doc_len = list(struct.unpack(f"<{n_docs}I", fh.read(4 * n_docs)))
            (n_terms,) = struct.unpack("<I", fh.read(4))
            postings: dict[str, list[tuple[int, int]]] = {}
            for _ in range(n_terms):
                (tlen,) = struct.unpack("<H", fh.read(2))
                term = fh.read(tlen).decode("utf-8")
                (df,) = struct.unpack("<I", fh.read(4))
                plist = []
                for _ in range(df):
                    sid, tf = struct.unpack("<II", fh.read(8))
                    plist.append((sid, tf))
                postings[term] = plist
        idx = cls.__new__(cls)
        idx.params = Bm25Params(k1, b)
        idx.sentences = [KnowledgeSentence(i, t, doc_len[i]) for i, t in enumerate(texts)]
        idx.postings = postings
        idx.doc_len = doc_len
        idx.n_docs = n_docs
        idx.avg_len = sum(doc_len) / n_docs
        return idx


def brute_force_scores(sentences: list[str], query: str,
                       params: Bm25Params = Bm25Params()) -> list[float]:
    """Direct BM25 scoring of every sentence, no inverted index.

    Kept as the independent reference for the retrieval path.
    """
    docs = [tokenize(s) for s in sentences]
    n = len(docs)
    avg = sum(len(d) for d in docs) / n
    q = tokenize(query)
    out = []
    for d in docs:
        counts: dict[str, int] = {}
        for t in d:
            counts[t] = counts.get(t, 0) + 1
        score = 0.0
        for term in q:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            df = sum(1 for dd in docs if term in dd)
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            norm = tf + params.k1 * (1.0 - params.b + params.b * len(d) / avg)
            score += idf * tf * (params.k1 + 1.0) / norm
        out.append(score)
    return out
