"""Templated synthetic corpora for smoke training and demos.

Responses embed one knowledge sentence at either a high or a low grounding
level; the templates are tuned so that the quality filters accept them
(length, repetition, and similarity bounds all hold by construction).
"""

from __future__ import annotations

import numpy as np

from .corpus import DialogueExample

NAMES = ["museum", "castle", "harbor", "garden", "market", "temple", "bridge",
         "tower", "forest", "valley", "stadium", "library", "canyon", "palace",
         "lagoon", "orchard", "village", "monastery", "lighthouse", "aquarium"]
PLACES = ["arden", "bruma", "calder", "dorne", "elvas",
          "farum", "gilead", "hobart", "istria", "jarvik"]
ADJS = ["ancient", "bright", "calm", "daring", "elegant",
        "gentle", "hidden", "lively", "modern", "noble"]
THINGS = ["statues", "murals", "fountains", "arches", "bells",
          "lanterns", "mosaics", "organs", "terraces", "frescoes"]
TIMES = ["spring", "summer", "autumn", "winter", "january",
         "june", "friday", "sunday", "morning", "evening"]

KNOWLEDGE_TEMPLATE = ("the {name} of {place} is famous for its {adj} {thing} "
                      "and its {adj2} {thing2} season every {time}")

HIGH_TEMPLATE = ("the {name} of {place} is famous for its {adj} {thing} and i "
                 "love the {adj} {thing} near the {name} of {place} , what a "
                 "{thing} !")

LOW_TEMPLATE = ("i am not sure , not sure about the {name} of {place} but i "
                "think the {name} is a nice {name} , a nice {name} i say")

CONTEXT_TEMPLATES = [
    ["what do you know about the {name} of {place} ?"],
    ["tell me about {place}", "have you heard of the {name} of {place} ?"],
    ["i will visit {place} soon", "what about the {name} of {place} ?"],
]


def make_knowledge() -> list[str]:
    """All 200 (landmark, town) fact sentences, deterministically worded."""
    out = []
    for ni, name in enumerate(NAMES):
        for pi, place in enumerate(PLACES):
            k = ni * len(PLACES) + pi
            out.append(KNOWLEDGE_TEMPLATE.format(
                name=name, place=place,
                adj=ADJS[k % 10], thing=THINGS[(k // 2) % 10],
                adj2=ADJS[(k + 3) % 10], thing2=THINGS[(k // 3 + 5) % 10],
                time=TIMES[(k + 7) % 10]))
    return out


def _fact_fields(k: int) -> dict[str, str]:
    ni, pi = divmod(k, len(PLACES))
    return {"name": NAMES[ni], "place": PLACES[pi],
            "adj": ADJS[k % 10], "thing": THINGS[(k // 2) % 10]}


def make_dialogues(n: int, seed: int, high_fraction: float = 0.5,
                   knowledge: list[str] | None = None) -> list[DialogueExample]:
    """`n` templated dialogues, each grounded in one knowledge sentence."""
    knowledge = knowledge if knowledge is not None else make_knowledge()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(len(knowledge)))
        f = _fact_fields(k)
        ctx_t = CONTEXT_TEMPLATES[int(rng.integers(len(CONTEXT_TEMPLATES)))]
        context = [u.format(**f) for u in ctx_t]
        template = HIGH_TEMPLATE if rng.random() < high_fraction else LOW_TEMPLATE
        response = template.format(**f)
        out.append(DialogueExample(context=context, response=response,
                                   gold_knowledge=[knowledge[k]]))
    return out


def make_benchmark(n: int, seed: int, n_candidates: int = 5,
                   knowledge: list[str] | None = None) -> list[DialogueExample]:
    """Evaluation-style examples with gold plus distractor candidates."""
    knowledge = knowledge if knowledge is not None else make_knowledge()
    rng = np.random.default_rng(seed)
    examples = make_dialogues(n, seed + 1, knowledge=knowledge)
    for ex in examples:
        gold = ex.gold_knowledge[0]
        distractors = []
        while len(distractors) < n_candidates - 1:
            cand = knowledge[int(rng.integers(len(knowledge)))]
            if cand != gold and cand not in distractors:
                distractors.append(cand)
        cands = distractors + [gold]
        rng.shuffle(cands)
        ex.candidate_knowledge = list(cands)
    return examples
