"""Test-time pipeline: selector ranking, packing, beam search, alpha sweep.

At generation time the candidate knowledge is ranked by the selector and
packed until the budget; the grounding rate comes from the predictor unless
overridden, which is what makes knowledge expression controllable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import sim
from .nets import ContractError, DialogueModel, PackedInput, pack_input
from .text import Vocab, alpha_bucket, detokenize

DEFAULT_ALPHA_GRID = [round(0.1 * i, 1) for i in range(1, 10)]


@dataclass(order=True)
class BeamHypothesis:
    sort_score: float
    tokens: list[int] = field(compare=False)
    log_prob: float = field(compare=False)
    finished: bool = field(compare=False, default=False)

    @classmethod
    def make(cls, tokens: list[int], log_prob: float, finished: bool = False):
        norm = log_prob / max(1, len(tokens))
        return cls(sort_score=norm, tokens=tokens, log_prob=log_prob, finished=finished)


def rank_and_pack(model: DialogueModel, context: list[str],
                  candidates: list[str], alpha: float | None = None,
                  forced_first: str | None = None,
                  reserve: int | None = None) -> PackedInput:
    """Sort candidates by selector probability and pack for generation.

    `alpha` overrides the predictor; `forced_first` pins one sentence to the
    head of the knowledge block regardless of its score.
    """
    candidates = [c for c in candidates if c.strip()]
    if forced_first is not None and not candidates:
        candidates = []
    elif not candidates and forced_first is None:
        raise ContractError("no non-empty knowledge candidates")
    with ad.no_grad():
        scores = [model.generator.selector_logit(context, c).item() for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    ranked = [candidates[i] for i in order]
    if forced_first is not None:
        ranked = [forced_first] + [c for c in ranked if c != forced_first]
    if reserve is None:
        reserve = model.cfg.max_output_len + 1
    if alpha is None:
        probe = pack_input(model.vocab, context, ranked, None, None,
                           model.cfg.max_input_len, reserve=reserve)
        with ad.no_grad():
            alpha = model.alpha_predictor.predict(
                context, probe.knowledge_texts or ranked[:1]).item()
    bucket = alpha_bucket(alpha)
    return pack_input(model.vocab, context, ranked, None, bucket,
                      model.cfg.max_input_len, reserve=reserve)


def beam_search(generator, vocab: Vocab, packed: PackedInput, beam: int = 5,
                max_len: int = 32, block_trigrams: bool = False) -> str:
    """Length-normalized beam search; the separator token terminates.

    `generator` needs only ``next_token_log_probs(packed, generated)``.
    Deterministic given the model parameters.
    """
    if beam < 1:
        raise ContractError(f"beam must be >= 1, got {beam}")
    sep = vocab.sep_id
    live = [BeamHypothesis.make([], 0.0)]
    done: list[BeamHypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        expansions: list[BeamHypothesis] = []
        for hyp in live:
            lp = generator.next_token_log_probs(packed, hyp.tokens)
            top = np.argsort(-lp)[: 2 * beam]
            for tok in top:
                tok = int(tok)
                if block_trigrams and _repeats_trigram(hyp.tokens, tok):
                    continue
                cand = BeamHypothesis.make(hyp.tokens + [tok], hyp.log_prob + float(lp[tok]),
                                           finished=(tok == sep))
                expansions.append(cand)
        expansions.sort(key=lambda h: -h.sort_score)
        live = []
        for cand in expansions:
            if cand.finished:
                done.append(cand)
            else:
                live.append(cand)
            if len(live) >= beam:
                break
    done.extend(live)
    if not done:
        return ""
    best = max(done, key=lambda h: h.sort_score)
    ids = [t for t in best.tokens if t != sep]
    return detokenize(vocab.decode(ids))


def _repeats_trigram(tokens: list[int], nxt: int) -> bool:
    if len(tokens) < 2:
        return False
    tri = (tokens[-2], tokens[-1], nxt)
    for i in range(len(tokens) - 2):
        if (tokens[i], tokens[i + 1], tokens[i + 2]) == tri:
            return True
    return False


def generate_response(model: DialogueModel, context: list[str],
                      candidates: list[str], alpha: float | None = None,
                      beam: int = 5, forced_first: str | None = None) -> str:
    packed = rank_and_pack(model, context, candidates, alpha=alpha,
                           forced_first=forced_first)
    return beam_search(model.generator, model.vocab, packed, beam=beam,
                       max_len=model.cfg.max_output_len)


@dataclass
class SweepRow:
    alpha: float
    mean_sim: float
    n_examples: int


def sweep_alpha(model: DialogueModel, examples, alphas=None, beam: int = 5,
                generator=None) -> tuple[list[SweepRow], int]:
    """Controllability sweep: fix the grounding rate, measure expression.

    For each alpha the gold knowledge is forced to the head of the packed
    block and the mean similarity between the generated response and the
    gold knowledge is reported. Examples without gold knowledge are skipped
    and counted. `generator` may substitute the decoding model (testing).
    """
    alphas = list(DEFAULT_ALPHA_GRID if alphas is None else alphas)
    gen = generator if generator is not None else model.generator
    skipped = 0
    usable = []
    for ex in examples:
        if ex.gold_knowledge:
            usable.append(ex)
        else:
            skipped += 1
    rows = []
    for alpha in alphas:
        sims = []
        for ex in usable:
            gold = ex.gold_knowledge[0]
            others = [c for c in (ex.candidate_knowledge or [gold]) if c != gold]
            packed = rank_and_pack(model, ex.context, others, alpha=alpha,
                                   forced_first=gold)
            response = beam_search(gen, model.vocab, packed, beam=beam,
                                   max_len=model.cfg.max_output_len)
            sims.append(sim(response, gold))
        rows.append(SweepRow(alpha, float(np.mean(sims)) if sims else 0.0, len(sims)))
    return rows, skipped


def sweep_to_tsv(rows: list[SweepRow]) -> str:
    lines = ["alpha\tmean_sim\tn_examples"]
    for r in rows:
        lines.append(f"{r.alpha}\t{r.mean_sim!r}\t{r.n_examples}")
    return "\n".join(lines) + "\n"
