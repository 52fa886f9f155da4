"""Tokenization, sentence splitting, and the shared vocabulary.

One word-level tokenizer serves the whole pipeline (corpus filters, the
retrieval index, metrics, and the networks), so token counts and overlap
statistics are consistent everywhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

PAD, CLS, SEP, UNK, BOS, EOS = "[PAD]", "[CLS]", "[SEP]", "[UNK]", "[BOS]", "[EOS]"
NUM_ALPHA_BUCKETS = 10
ALPHA_TOKENS = [f"[ZA_{i}]" for i in range(NUM_ALPHA_BUCKETS)]
RESERVED = [PAD, CLS, SEP, UNK, BOS, EOS] + ALPHA_TOKENS

# Embedded function-word list used by the response-quality filters.
STOPWORDS = frozenset("""
a about above after again against all am an and any are aren as at be because
been before being below between both but by can cannot could couldn did didn
do does doesn doing don down during each few for from further had hadn has
hasn have haven having he her here hers herself him himself his how i if in
into is isn it its itself just ll let me might more most mustn my myself no
nor not now o of off on once only or other ought our ours ourselves out over
own re s same shan she should shouldn so some such t than that the their
theirs them themselves then there these they this those through to too under
until up ve very was wasn we were weren what when where which while who whom
why will with won would wouldn you your yours yourself yourselves
""".split())

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")

_ABBREVIATIONS = frozenset(
    "dr. mr. mrs. ms. prof. sr. jr. st. vs. etc. e.g. i.e. fig. no. vol. "
    "gen. rep. sen. gov. capt. col. lt. sgt. approx. dept. est. min. max. "
    "jan. feb. mar. apr. jun. jul. aug. sep. sept. oct. nov. dec. "
    "mon. tue. wed. thu. fri. sat. sun. u.s. u.k. a.m. p.m.".split()
)

_SENT_END = frozenset(".!?")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into words and single punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def split_sentences(text: str) -> list[str]:
    """Rule-based sentence splitter.

    Splits after a terminal ``. ! ?`` followed by whitespace, unless the word
    carrying the period is a known abbreviation or a bare initial. The
    concatenation of the outputs preserves every non-whitespace character of
    the input; empty inputs yield an empty list.
    """
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in _SENT_END:
            # Swallow runs like "?!" or "..." as one terminator.
            j = i
            while j + 1 < n and text[j + 1] in _SENT_END:
                j += 1
            if j + 1 >= n or text[j + 1].isspace():
                word = _trailing_word(text, j)
                if ch != "." or not _is_abbreviation(word):
                    piece = text[start:j + 1].strip()
                    if piece:
                        sentences.append(piece)
                    start = j + 1
            i = j + 1
        else:
            i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _trailing_word(text: str, end: int) -> str:
    begin = end
    while begin > 0 and not text[begin - 1].isspace():
        begin -= 1
    return text[begin:end + 1].lower()


def _is_abbreviation(word: str) -> bool:
    if word in _ABBREVIATIONS:
        return True
    # Single-letter initials like "J." in "J. Smith".
    return len(word) == 2 and word[0].isalpha()


class VocabError(ValueError):
    pass


@dataclass
class Vocab:
    """Frozen token<->id mapping with a fixed reserved prefix."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise VocabError("duplicate tokens in vocabulary")
        if self.id_to_token[:len(RESERVED)] != RESERVED:
            raise VocabError("reserved tokens must occupy the id prefix")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def alpha_token_id(self, bucket: int) -> int:
        if not 0 <= bucket < NUM_ALPHA_BUCKETS:
            raise VocabError(f"alpha bucket out of range: {bucket}")
        return self.token_to_id[ALPHA_TOKENS[bucket]]

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def alpha_bucket(alpha: float, buckets: int = NUM_ALPHA_BUCKETS) -> int:
    """Quantize a grounding rate in [0,1] to a bucket index."""
    if not 0.0 <= alpha <= 1.0:
        raise VocabError(f"grounding rate out of [0,1]: {alpha}")
    return min(int(alpha * buckets), buckets - 1)


def build_vocab(streams, max_size: int = 16384, min_count: int = 1) -> Vocab:
    """Rank tokens by frequency (ties lexicographic) under a size cap.

    `streams` is an iterable of text strings. Tokens below `min_count` are
    dropped; everything out of vocabulary later maps to [UNK].
    """
    if max_size <= len(RESERVED):
        raise VocabError(f"max_size must exceed the {len(RESERVED)} reserved tokens")
    counts: dict[str, int] = {}
    for text in streams:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_count][: max_size - len(RESERVED)]
    return Vocab(RESERVED + kept)
