"""Loss and posterior computations for the latent-knowledge EM scheme.

The variational posterior over knowledge is a softmax of matcher scores over
the retrieved candidate set; the exact posterior is enumerable over the same
set (prior times response likelihood, normalized in log space). The E step
fits the first to the second; the M step maximizes the evidence bound with a
single sampled knowledge sentence, a squared-error grounding-rate term, and
the Gumbel-softmax mutual-information loss that pushes generated responses
to encode their grounding rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .index import CandidateSet, InvertedIndex
from .metrics import sim
from .nets import DialogueModel, PackedInput, pack_input
from .text import alpha_bucket

KL_FLOOR = 1e-12


class SkipExample(Exception):
    """Raised when an example cannot contribute a loss (e.g. empty retrieval)."""


@dataclass
class CandidateDistribution:
    candidates: CandidateSet
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.probs) != len(self.candidates):
            raise ValueError("probability vector does not match the candidate set")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9 or (self.probs < 0).any():
            raise ValueError("probabilities must be non-negative and sum to 1")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.probs), p=self.probs))


@dataclass
class LatentSample:
    index: int
    z_alpha: float


# ---------------------------------------------------------------------------
# posteriors


def matcher_log_q(model: DialogueModel, context: list[str], response: str,
                  cands: CandidateSet) -> Tensor:
    """Log of the variational posterior: log-softmax of matcher scores."""
    if len(cands) == 0:
        raise SkipExample("empty candidate set")
    scores = [ad.reshape(model.matcher.score(context, response, s.text), (1,))
              for s in cands.sentences()]
    return ad.log_softmax(ad.concat(scores, axis=0), axis=-1)


def q_zk(model: DialogueModel, context: list[str], response: str,
         cands: CandidateSet) -> CandidateDistribution:
    with ad.no_grad():
        log_q = matcher_log_q(model, context, response, cands)
    return CandidateDistribution(cands, np.exp(log_q.data))


def squeezed_q(response: str, cands: CandidateSet, sim_fn=sim) -> CandidateDistribution:
    """Degenerate posterior: all mass on the best-similarity candidate."""
    if len(cands) == 0:
        raise SkipExample("empty candidate set")
    sims = [sim_fn(response, s.text) for s in cands.sentences()]
    probs = np.zeros(len(cands))
    probs[int(np.argmax(sims))] = 1.0
    return CandidateDistribution(cands, probs)


def selector_log_prior(model: DialogueModel, context: list[str],
                       cands: CandidateSet) -> Tensor:
    """Log of selector probabilities normalized over the candidate set."""
    logits = [ad.reshape(model.generator.selector_logit(context, s.text), (1,))
              for s in cands.sentences()]
    log_p = ad.log_sigmoid(ad.concat(logits, axis=0))
    # log-normalize: log p_i - log sum_j p_j
    norm = ad.log(ad.sum_(ad.exp(log_p)))
    return ad.sub(log_p, norm)


def candidate_log_likelihoods(model: DialogueModel, context: list[str],
                              response: str, cands: CandidateSet) -> np.ndarray:
    """log p(R | C, K_i) per candidate, grounding-rate token dropped."""
    out = np.empty(len(cands))
    with ad.no_grad():
        for i, s in enumerate(cands.sentences()):
            packed = pack_input(model.vocab, context, [s.text], response, None,
                                model.cfg.max_input_len,
                                max_response=model.cfg.max_output_len)
            nll, _ = model.generator.response_nll(packed)
            out[i] = -nll.item()
    return out


def posterior_from_logs(log_prior: np.ndarray, log_lik: np.ndarray) -> np.ndarray:
    """Normalize prior-times-likelihood in log space."""
    combined = np.asarray(log_prior, dtype=np.float64) + np.asarray(log_lik, dtype=np.float64)
    peak = combined.max()
    if not np.isfinite(peak):
        raise SkipExample("all posterior weights underflowed")
    shifted = np.exp(combined - peak)
    return shifted / shifted.sum()


def true_posterior(model: DialogueModel, context: list[str], response: str,
                   cands: CandidateSet) -> CandidateDistribution:
    """Exact posterior over the enumerable candidate set (no gradients)."""
    if len(cands) == 0:
        raise SkipExample("empty candidate set")
    with ad.no_grad():
        log_prior = selector_log_prior(model, context, cands).data
    log_lik = candidate_log_likelihoods(model, context, response, cands)
    return CandidateDistribution(cands, posterior_from_logs(log_prior, log_lik))


# ---------------------------------------------------------------------------
# E step


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with an epsilon floor on q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), KL_FLOOR)
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def e_step_loss(model: DialogueModel, context: list[str], response: str,
                cands: CandidateSet, target: CandidateDistribution) -> Tensor:
    """KL(q(Z_k) || p(Z_k|C,R)) with the target detached.

    Gradients reach only the matcher; the grounding-rate KL term is constant
    (its posterior is the parameter-free similarity) and therefore dropped.
    """
    log_q = matcher_log_q(model, context, response, cands)
    log_p = np.log(np.maximum(target.probs, KL_FLOOR))
    q = ad.exp(log_q)
    return ad.sum_(ad.mul(q, ad.sub(log_q, Tensor(log_p))))


# ---------------------------------------------------------------------------
# knowledge-selection loss


def ks_loss(model: DialogueModel, context: list[str], response: str,
            cands: CandidateSet, index: InvertedIndex,
            rng: np.random.Generator, sim_fn=sim) -> Tensor:
    """Binary selection loss: best-similarity positive vs random negative."""
    if len(cands) == 0:
        raise SkipExample("empty candidate set")
    sims = [sim_fn(response, s.text) for s in cands.sentences()]
    pos = cands.sentences()[int(np.argmax(sims))]
    exclude = {s.id for s in cands.sentences()}
    neg = index.sample_noise(1, rng, exclude=exclude)[0]
    pos_logit = model.generator.selector_logit(context, pos.text)
    neg_logit = model.generator.selector_logit(context, neg.text)
    loss = ad.add(ad.mul(ad.log_sigmoid(pos_logit), -1.0),
                  ad.mul(ad.log_sigmoid(ad.mul(neg_logit, -1.0)), -1.0))
    return loss


# ---------------------------------------------------------------------------
# Gumbel-softmax and the mutual-information loss


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator,
                          emb_table: Tensor | None = None):
    """Softmax((logits + Gumbel noise) / tau); optionally mix embedding rows.

    Returns (weights, soft_embedding) where the second is None when no
    embedding table is supplied. Differentiable w.r.t. `logits` (and the
    table); the noise is a constant.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    lt = logits if isinstance(logits, Tensor) else Tensor(logits)
    u = rng.random(lt.shape)
    noise = -np.log(-np.log(u))
    weights = ad.softmax(ad.mul(ad.add(lt, Tensor(noise.astype(lt.data.dtype))), 1.0 / tau),
                         axis=-1)
    if emb_table is None:
        return weights, None
    flat = ad.reshape(weights, (1, -1))
    return weights, ad.matmul(flat, emb_table)


def soft_decode(model: DialogueModel, prefix: PackedInput, steps: int,
                tau: float, rng: np.random.Generator) -> Tensor:
    """Autoregressive Gumbel-softmax decode; returns (steps, h) soft embeddings.

    Each step feeds the mixed token embedding (plus position and response
    segment embeddings) back as the next input row, so gradients flow from
    the audited response into the generator.
    """
    if prefix.has_response:
        raise ValueError("soft decode expects a response-free packed prefix")
    gen = model.generator
    emb = model.emb
    base = emb.embed(prefix.ids, prefix.positions, prefix.segments)
    p = len(prefix)
    rows = base
    soft_tokens: list[Tensor] = []
    for t in range(steps):
        hidden = gen.run_embedded(rows, p)
        last = ad.slice_rows(hidden, p + t - 1, p + t)
        logits = ad.matmul(last, gen.w_out)
        _, e_tok = gumbel_softmax_sample(logits, tau, rng, emb_table=emb.token)
        soft_tokens.append(e_tok)
        pos_row = ad.gather_rows(emb.pos, np.asarray([p + t]))
        seg_row = ad.gather_rows(emb.seg, np.asarray([2]))
        next_row = ad.add(ad.add(e_tok, pos_row), seg_row)
        rows = ad.concat([rows, next_row], axis=0)
    return ad.concat(soft_tokens, axis=0)


def mi_loss(model: DialogueModel, prefix: PackedInput, z_alpha: float,
            tau: float, steps: int, rng: np.random.Generator) -> Tensor:
    """Squared error between the set grounding rate and the audited one."""
    soft = soft_decode(model, prefix, steps, tau, rng)
    pred = model.auditor.predict_soft(soft)
    diff = ad.sub(Tensor(np.float64(z_alpha)), pred)
    return ad.mul(diff, diff)


# ---------------------------------------------------------------------------
# M step


@dataclass
class MStepTerms:
    nll: Tensor
    n_tokens: int
    kl: Tensor
    mse: Tensor | None
    sample: LatentSample
    packed: PackedInput

    def total(self) -> Tensor:
        loss = ad.add(self.nll, self.kl)
        if self.mse is not None:
            loss = ad.add(loss, self.mse)
        return loss


def m_step_loss(model: DialogueModel, context: list[str], response: str,
                cands: CandidateSet, q: CandidateDistribution,
                index: InvertedIndex, rng: np.random.Generator,
                n_noise: int = 9, sim_fn=sim,
                disable_z_alpha: bool = False) -> MStepTerms:
    """Single-sample evidence-bound loss.

    One knowledge sentence is drawn from q (reused for both the generation
    NLL and the grounding-rate MSE), mixed with noise sentences, ranked by
    the selector, and packed with the quantized grounding-rate token. The
    KL term pulls the normalized selector prior toward the (detached) q.
    """
    if len(cands) == 0:
        raise SkipExample("empty candidate set")
    pick = q.sample(rng)
    z_k = cands.sentences()[pick]
    z_alpha = sim_fn(response, z_k.text)
    sample = LatentSample(pick, z_alpha)

    exclude = {s.id for s in cands.sentences()}
    n_noise = min(n_noise, max(0, index.n_docs - len(exclude)))
    noise = index.sample_noise(n_noise, rng, exclude=exclude) if n_noise else []
    pool = [z_k] + noise
    with ad.no_grad():
        sel_scores = [model.generator.selector_logit(context, s.text).item() for s in pool]
    order = sorted(range(len(pool)), key=lambda i: -sel_scores[i])
    ranked = [pool[i].text for i in order]

    bucket = None if disable_z_alpha else alpha_bucket(z_alpha)
    packed = pack_input(model.vocab, context, ranked, response, bucket,
                        model.cfg.max_input_len, max_response=model.cfg.max_output_len)
    nll, n_tokens = model.generator.response_nll(packed)

    log_prior = selector_log_prior(model, context, cands)
    q_const = q.probs
    kl = ad.sum_(ad.mul(Tensor(q_const),
                        ad.sub(Tensor(np.log(np.maximum(q_const, KL_FLOOR))), log_prior)))

    mse = None
    if not disable_z_alpha:
        pred = model.alpha_predictor.predict(context, [z_k.text])
        diff = ad.sub(Tensor(np.float64(z_alpha)), pred)
        mse = ad.mul(diff, diff)
    return MStepTerms(nll=nll, n_tokens=n_tokens, kl=kl, mse=mse,
                      sample=sample, packed=packed)


# ---------------------------------------------------------------------------
# evidence-bound identity checker


def elbo_identity_check(model: DialogueModel, context: list[str], response: str,
                        cands: CandidateSet, z_alpha: float,
                        q: np.ndarray) -> float:
    """| log-marginal - (ELBO(q) + KL(q || posterior)) | at fixed grounding rate.

    ELBO(q) = sum_i q_i log p(R|C,K_i,z_a) - KL(q || prior), with the prior
    the normalized selector probabilities. Exact for any valid q.
    """
    log_lik = np.empty(len(cands))
    bucket = alpha_bucket(z_alpha)
    with ad.no_grad():
        log_prior = selector_log_prior(model, context, cands).data
        for i, s in enumerate(cands.sentences()):
            packed = pack_input(model.vocab, context, [s.text], response, bucket,
                                model.cfg.max_input_len,
                                max_response=model.cfg.max_output_len)
            nll, _ = model.generator.response_nll(packed)
            log_lik[i] = -nll.item()
    combined = log_prior + log_lik
    peak = combined.max()
    log_marginal = peak + math.log(np.exp(combined - peak).sum())
    prior = np.exp(log_prior)
    posterior = posterior_from_logs(log_prior, log_lik)
    elbo = float((q * log_lik).sum()) - kl_divergence(q, prior)
    return abs(log_marginal - (elbo + kl_divergence(q, posterior)))
