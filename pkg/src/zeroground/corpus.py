"""Dialogue/knowledge corpus ingestion and the training-data quality filters.

A dialogue example survives only if all five predicates hold:

  1. response token count strictly inside (10, 50)
  2. unique non-stopword ratio strictly inside (0.25, 0.6)
     (denominator: total non-stopword tokens)
  3. unique token ratio strictly above 0.5
  4. best retrieval-candidate similarity >= 0.1 (empty retrieval rejects here)
  5. that best-matching knowledge sentence has strictly more than 10 tokens

The first failing rule is the one reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .index import InvertedIndex
from .metrics import sim
from .text import STOPWORDS, split_sentences, tokenize


class CorpusError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path: str, line_no: int, why: str):
        super().__init__(f"{path}:{line_no}: {why}")
        self.line_no = line_no


@dataclass
class DialogueExample:
    context: list[str]
    response: str
    gold_knowledge: list[str] | None = None
    candidate_knowledge: list[str] | None = None

    def __post_init__(self):
        if not self.context:
            raise CorpusError("dialogue context must be non-empty")
        if not self.response:
            raise CorpusError("dialogue response must be non-empty")


@dataclass
class FilterReport:
    rejected: dict[int, int] = field(default_factory=lambda: {r: 0 for r in range(1, 6)})
    accepted: int = 0
    malformed: int = 0

    @property
    def total(self) -> int:
        return self.accepted + sum(self.rejected.values())

    def merge(self, other: "FilterReport"):
        for r, c in other.rejected.items():
            self.rejected[r] += c
        self.accepted += other.accepted
        self.malformed += other.malformed

    def to_tsv(self) -> str:
        lines = ["rule\trejected"]
        for r in range(1, 6):
            lines.append(f"{r}\t{self.rejected[r]}")
        lines.append(f"accepted\t{self.accepted}")
        lines.append(f"malformed\t{self.malformed}")
        return "\n".join(lines) + "\n"


def apply_filters(example: DialogueExample, index: InvertedIndex,
                  sim_fn=sim, l: int = 10) -> int | None:
    """Return None to accept, or the id (1-5) of the first failing rule."""
    tokens = tokenize(example.response)
    n = len(tokens)
    if not 10 < n < 50:
        return 1
    non_stop = [t for t in tokens if t not in STOPWORDS and t.isalnum()]
    ratio2 = len(set(non_stop)) / len(non_stop) if non_stop else 0.0
    if not 0.25 < ratio2 < 0.6:
        return 2
    if not len(set(tokens)) / n > 0.5:
        return 3
    candidates = index.retrieve_topl(example.response, l)
    best_sim = -1.0
    best_sentence = None
    for sentence, _ in candidates.items:
        s = sim_fn(example.response, sentence.text)
        if s > best_sim:
            best_sim = s
            best_sentence = sentence
    if best_sentence is None or best_sim < 0.1:
        return 4
    if not best_sentence.token_count > 10:
        return 5
    return None


def filter_corpus(examples, index: InvertedIndex, sim_fn=sim,
                  l: int = 10) -> tuple[list[DialogueExample], FilterReport]:
    report = FilterReport()
    accepted = []
    for ex in examples:
        rule = apply_filters(ex, index, sim_fn, l)
        if rule is None:
            report.accepted += 1
            accepted.append(ex)
        else:
            report.rejected[rule] += 1
    return accepted, report


def split_train_valid(examples: list[DialogueExample], valid_fraction: float,
                      seed: int) -> tuple[list[DialogueExample], list[DialogueExample]]:
    """Seed-deterministic disjoint split; union preserves the input multiset."""
    if not 0.0 < valid_fraction < 1.0:
        raise CorpusError(f"valid_fraction must be in (0,1), got {valid_fraction}")
    if len(examples) < 2:
        raise CorpusError("need at least 2 examples to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_valid = max(1, int(round(len(examples) * valid_fraction)))
    valid_ids = set(order[:n_valid].tolist())
    train = [ex for i, ex in enumerate(examples) if i not in valid_ids]
    valid = [ex for i, ex in enumerate(examples) if i in valid_ids]
    return train, valid


def _parse_example(obj: dict, path: str, line_no: int) -> DialogueExample:
    if not isinstance(obj, dict):
        raise ParseError(path, line_no, "expected a JSON object")
    if "response" not in obj:
        raise ParseError(path, line_no, "missing 'response' field")
    if "context" not in obj:
        raise ParseError(path, line_no, "missing 'context' field")
    context = obj["context"]
    response = obj["response"]
    if not isinstance(context, list) or not all(isinstance(u, str) for u in context):
        raise ParseError(path, line_no, "'context' must be a list of strings")
    if not isinstance(response, str) or not response:
        raise ParseError(path, line_no, "'response' must be a non-empty string")
    if not context:
        raise ParseError(path, line_no, "'context' must be non-empty")
    candidates = obj.get("knowledge")
    if candidates is not None and (
            not isinstance(candidates, list) or not all(isinstance(k, str) for k in candidates)):
        raise ParseError(path, line_no, "'knowledge' must be a list of strings")
    gold = obj.get("gold_knowledge")
    if gold is not None and not isinstance(gold, str):
        raise ParseError(path, line_no, "'gold_knowledge' must be a string")
    gold_list = [gold] if gold is not None else None
    if gold is not None:
        if candidates is None:
            candidates = [gold]
        elif gold not in candidates:
            candidates = candidates + [gold]
    return DialogueExample(context=context, response=response,
                           gold_knowledge=gold_list, candidate_knowledge=candidates)


def load_dialogues(path: str, strict: bool = True,
                   report: FilterReport | None = None) -> list[DialogueExample]:
    """Read JSON-lines dialogues; in non-strict mode bad lines are counted."""
    out: list[DialogueExample] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(_parse_example(obj, path, line_no))
            except (json.JSONDecodeError, ParseError) as err:
                if strict:
                    if isinstance(err, ParseError):
                        raise
                    raise ParseError(path, line_no, f"invalid JSON: {err}") from err
                if report is not None:
                    report.malformed += 1
    return out


def load_benchmark(path: str) -> list[DialogueExample]:
    """Strict loader for evaluation files carrying candidate knowledge."""
    return load_dialogues(path, strict=True)


def save_dialogues(examples: list[DialogueExample], path: str):
    import os
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj: dict = {"context": ex.context, "response": ex.response}
            if ex.candidate_knowledge is not None:
                obj["knowledge"] = ex.candidate_knowledge
            if ex.gold_knowledge:
                obj["gold_knowledge"] = ex.gold_knowledge[0]
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_knowledge(path: str, mode: str = "sentence") -> list[str]:
    """Read the knowledge corpus: one sentence or one document per line."""
    if mode not in ("sentence", "doc"):
        raise CorpusError(f"unknown knowledge mode: {mode!r}")
    sentences: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if mode == "sentence":
                sentences.append(line)
            else:
                sentences.extend(split_sentences(line))
    return sentences
