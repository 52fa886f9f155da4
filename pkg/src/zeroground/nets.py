"""Parameterized networks.

One shared embedding table (token + position + segment) feeds four
transformers:

* the generator: a prefix-masked seq2seq stack whose input is the packed
  layout ``[CLS] [ZA_b] c... [SEP] S1...Sk [SEP] r... [SEP]`` (the grounding
  prefix attends bidirectionally, the response block is causal), with an
  untied readout matrix and a sigmoid selector head on its [CLS] state;
* a 3-layer matcher scoring (context, response, knowledge) triples;
* a 3-layer grounding-rate predictor with a sigmoid scalar head;
* a 3-layer auditor predicting the grounding rate from (possibly soft)
  response token embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .text import Vocab, tokenize

HEAD_LAYERS = 3  # matcher / alpha-predictor / auditor depth


class ContractError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    vocab: int = 16384
    max_input_len: int = 128
    max_output_len: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ContractError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_input_len < 16:
            raise ContractError("max_input_len must be at least 16")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class PackedInput:
    """Token/segment/position layout plus the prefix/causal mask boundary."""

    ids: np.ndarray
    segments: np.ndarray
    positions: np.ndarray
    response_start: int  # == len(ids) when no response block is present
    alpha_bucket: int | None
    knowledge_texts: list[str] | None = None  # sentences that fit the budget

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_response(self) -> bool:
        return self.response_start < len(self.ids)

    @property
    def target_ids(self) -> np.ndarray:
        return self.ids[self.response_start:]


def attention_bias(length: int, response_start: int, dtype=np.float64) -> np.ndarray:
    """0 where attention is allowed, -1e9 where masked.

    Prefix positions see the whole prefix (bidirectional) and never the
    response; response position i sees the prefix and response positions <= i.
    """
    bias = np.full((length, length), -1e9, dtype=dtype)
    rs = response_start
    bias[:rs, :rs] = 0.0
    for i in range(rs, length):
        bias[i, :i + 1] = 0.0
    return bias


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int, dtype, name: str):
        self.w = Tensor(_trunc_normal(rng, (n_in, n_out), 0.02, dtype),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


class LayerNorm:
    def __init__(self, n: int, dtype, name: str):
        self.g = Tensor(np.ones(n, dtype=dtype), requires_grad=True, name=f"{name}.g")
        self.b = Tensor(np.zeros(n, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)

    def params(self) -> dict[str, Tensor]:
        return {self.g.name: self.g, self.b.name: self.b}


class TransformerLayer:
    """Pre-norm self-attention + GELU feed-forward block."""

    def __init__(self, rng, hidden: int, heads: int, dtype, name: str):
        self.heads = heads
        self.head_dim = hidden // heads
        self.ln1 = LayerNorm(hidden, dtype, f"{name}.ln1")
        self.wq = Linear(rng, hidden, hidden, dtype, f"{name}.wq")
        self.wk = Linear(rng, hidden, hidden, dtype, f"{name}.wk")
        self.wv = Linear(rng, hidden, hidden, dtype, f"{name}.wv")
        self.wo = Linear(rng, hidden, hidden, dtype, f"{name}.wo")
        self.ln2 = LayerNorm(hidden, dtype, f"{name}.ln2")
        self.ff1 = Linear(rng, hidden, 4 * hidden, dtype, f"{name}.ff1")
        self.ff2 = Linear(rng, 4 * hidden, hidden, dtype, f"{name}.ff2")

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        t = x.shape[0]
        normed = self.ln1(x)
        q = self._split(self.wq(normed), t)
        k = self._split(self.wk(normed), t)
        v = self._split(self.wv(normed), t)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
        scores = ad.mul(scores, 1.0 / math.sqrt(self.head_dim))
        scores = ad.add(scores, Tensor(bias))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t, -1))
        x = ad.add(x, self.wo(merged))
        ff = self.ff2(ad.gelu(self.ff1(self.ln2(x))))
        return ad.add(x, ff)

    def _split(self, x: Tensor, t: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (t, self.heads, self.head_dim)), (1, 0, 2))

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.ln1, self.wq, self.wk, self.wv, self.wo,
                     self.ln2, self.ff1, self.ff2):
            out.update(part.params())
        return out


class TransformerStack:
    def __init__(self, rng, layers: int, hidden: int, heads: int, dtype, name: str):
        self.layers = [TransformerLayer(rng, hidden, heads, dtype, f"{name}.L{i}")
                       for i in range(layers)]
        self.final_ln = LayerNorm(hidden, dtype, f"{name}.ln_f")

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        for layer in self.layers:
            x = layer(x, bias)
        return self.final_ln(x)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.final_ln.params())
        return out


class Embeddings:
    """Token + position + segment tables, shared by all networks."""

    def __init__(self, rng, cfg: GeneratorConfig):
        dt = cfg.np_dtype
        self.token = Tensor(_trunc_normal(rng, (cfg.vocab, cfg.hidden), 0.02, dt),
                            requires_grad=True, name="emb.token")
        self.pos = Tensor(_trunc_normal(rng, (cfg.max_input_len, cfg.hidden), 0.02, dt),
                          requires_grad=True, name="emb.pos")
        self.seg = Tensor(_trunc_normal(rng, (3, cfg.hidden), 0.02, dt),
                          requires_grad=True, name="emb.seg")

    def embed(self, ids, positions, segments) -> Tensor:
        x = ad.gather_rows(self.token, ids)
        x = ad.add(x, ad.gather_rows(self.pos, positions))
        return ad.add(x, ad.gather_rows(self.seg, segments))

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.token, self.pos, self.seg)}


def _fit(tokens: list[str], budget: int, keep: str) -> list[str]:
    if len(tokens) <= budget:
        return tokens
    return tokens[-budget:] if keep == "tail" else tokens[:budget]


class Generator:
    """Prefix-masked response generator with the selector head on [CLS]."""

    def __init__(self, rng, cfg: GeneratorConfig, vocab: Vocab, emb: Embeddings):
        self.cfg = cfg
        self.vocab = vocab
        self.emb = emb
        self.stack = TransformerStack(rng, cfg.layers, cfg.hidden, cfg.heads,
                                      cfg.np_dtype, "gen")
        # Eq-style readout: own matrix, untied from the input embeddings.
        self.w_out = Tensor(_trunc_normal(rng, (cfg.hidden, cfg.vocab), 0.02, cfg.np_dtype),
                            requires_grad=True, name="gen.w_out")
        self.sel_head = Linear(rng, cfg.hidden, 1, cfg.np_dtype, "sel.head")

    # -- core forward --------------------------------------------------------

    def hidden_states(self, packed: PackedInput) -> Tensor:
        if len(packed) > self.cfg.max_input_len:
            raise ContractError(
                f"packed length {len(packed)} exceeds max_input_len {self.cfg.max_input_len}")
        x = self.emb.embed(packed.ids, packed.positions, packed.segments)
        bias = attention_bias(len(packed), packed.response_start, self.cfg.np_dtype)
        return self.stack(x, bias)

    def run_embedded(self, x: Tensor, response_start: int) -> Tensor:
        """Forward a caller-built embedding matrix (soft rows allowed)."""
        if x.shape[0] > self.cfg.max_input_len:
            raise ContractError(f"input length {x.shape[0]} exceeds max_input_len")
        bias = attention_bias(x.shape[0], response_start, self.cfg.np_dtype)
        return self.stack(x, bias)

    def response_logits(self, packed: PackedInput) -> Tensor:
        """Logit rows predicting each response token (terminal [SEP] included).

        The token at response position t is predicted from the hidden state
        one position earlier, so the rows cover hidden[rs-1 : T-1].
        """
        if not packed.has_response:
            raise ContractError("packed input carries no response block")
        hidden = self.hidden_states(packed)
        rows = ad.slice_rows(hidden, packed.response_start - 1, len(packed) - 1)
        return ad.matmul(rows, self.w_out)

    def response_nll(self, packed: PackedInput) -> tuple[Tensor, int]:
        """(summed NLL over response targets, number of targets)."""
        logits = self.response_logits(packed)
        lp = ad.log_softmax(logits, axis=-1)
        picked = ad.gather_elements(lp, packed.target_ids)
        return ad.mul(ad.sum_(picked), -1.0), len(packed.target_ids)

    def response_log_probs(self, packed: PackedInput) -> np.ndarray:
        with ad.no_grad():
            logits = self.response_logits(packed)
            lp = ad.log_softmax(logits, axis=-1)
        rows = np.arange(len(packed.target_ids))
        return lp.data[rows, packed.target_ids]

    def next_token_log_probs(self, packed: PackedInput, generated: list[int]) -> np.ndarray:
        """Log-prob vector for the next response token after `generated`."""
        ids = np.concatenate([packed.ids, np.asarray(generated, dtype=np.int64)])
        t = len(ids)
        if t >= self.cfg.max_input_len:
            raise ContractError("generation exceeded max_input_len")
        positions = np.arange(t, dtype=np.int64)
        segments = np.concatenate([packed.segments, np.full(len(generated), 2, np.int64)])
        with ad.no_grad():
            x = self.emb.embed(ids, positions, segments)
            hidden = self.stack(x, attention_bias(t, packed.response_start, self.cfg.np_dtype))
            logits = ad.matmul(ad.slice_rows(hidden, t - 1, t), self.w_out)
            lp = ad.log_softmax(logits, axis=-1)
        return lp.data[0]

    # -- selector head --------------------------------------------------------

    def selector_logit(self, context: list[str], knowledge: str) -> Tensor:
        """Pre-sigmoid score of the layout [CLS] c... [SEP] z... [SEP]."""
        v = self.vocab
        budget = self.cfg.max_input_len - 3
        ctx = _fit([t for u in context for t in tokenize(u)], budget // 2, "tail")
        z = _fit(tokenize(knowledge), budget - len(ctx), "head")
        ids = ([v.cls_id] + v.encode(ctx) + [v.sep_id] + v.encode(z) + [v.sep_id])
        n = len(ids)
        segments = [0] * (len(ctx) + 2) + [1] * (len(z) + 1)
        ids = np.asarray(ids, dtype=np.int64)
        segments = np.asarray(segments, dtype=np.int64)
        positions = np.arange(n, dtype=np.int64)
        x = self.emb.embed(ids, positions, segments)
        hidden = self.stack(x, attention_bias(n, n, self.cfg.np_dtype))
        return ad.reshape(self.sel_head(ad.slice_rows(hidden, 0, 1)), ())

    def selector_prob(self, context: list[str], knowledge: str) -> Tensor:
        return ad.sigmoid(self.selector_logit(context, knowledge))

    def params(self) -> dict[str, Tensor]:
        out = dict(self.emb.params())
        out.update(self.stack.params())
        out[self.w_out.name] = self.w_out
        out.update(self.sel_head.params())
        return out


class Matcher:
    """3-layer transformer scoring (context, response, knowledge) triples."""

    def __init__(self, rng, cfg: GeneratorConfig, vocab: Vocab, emb: Embeddings):
        self.cfg = cfg
        self.vocab = vocab
        self.emb = emb
        self.stack = TransformerStack(rng, HEAD_LAYERS, cfg.hidden, cfg.heads,
                                      cfg.np_dtype, "match")
        self.head = Linear(rng, cfg.hidden, 1, cfg.np_dtype, "match.head")

    def score(self, context: list[str], response: str, knowledge: str) -> Tensor:
        v = self.vocab
        budget = self.cfg.max_input_len - 4
        third = budget // 3
        ctx = _fit([t for u in context for t in tokenize(u)], third, "tail")
        resp = _fit(tokenize(response), third, "head")
        z = _fit(tokenize(knowledge), budget - len(ctx) - len(resp), "head")
        ids = ([v.cls_id] + v.encode(ctx) + [v.sep_id] + v.encode(resp) + [v.sep_id]
               + v.encode(z) + [v.sep_id])
        segments = [0] * (len(ctx) + 2) + [2] * (len(resp) + 1) + [1] * (len(z) + 1)
        n = len(ids)
        x = self.emb.embed(np.asarray(ids, dtype=np.int64),
                           np.arange(n, dtype=np.int64),
                           np.asarray(segments, dtype=np.int64))
        hidden = self.stack(x, attention_bias(n, n, self.cfg.np_dtype))
        return ad.reshape(self.head(ad.slice_rows(hidden, 0, 1)), ())

    def params(self) -> dict[str, Tensor]:
        out = self.stack.params()
        out.update(self.head.params())
        return out


class AlphaPredictor:
    """Predicts the grounding rate from context plus packed knowledge."""

    def __init__(self, rng, cfg: GeneratorConfig, vocab: Vocab, emb: Embeddings):
        self.cfg = cfg
        self.vocab = vocab
        self.emb = emb
        self.stack = TransformerStack(rng, HEAD_LAYERS, cfg.hidden, cfg.heads,
                                      cfg.np_dtype, "alpha")
        self.head = Linear(rng, cfg.hidden, 1, cfg.np_dtype, "alpha.head")

    def predict(self, context: list[str], knowledge: list[str]) -> Tensor:
        """Sigmoid output on the [CLS] state of [CLS] c... [SEP] S1...Sk."""
        v = self.vocab
        budget = self.cfg.max_input_len - 2
        ctx = _fit([t for u in context for t in tokenize(u)], budget // 2, "tail")
        z = _fit([t for s in knowledge for t in tokenize(s)], budget - len(ctx), "head")
        ids = [v.cls_id] + v.encode(ctx) + [v.sep_id] + v.encode(z)
        segments = [0] * (len(ctx) + 2) + [1] * len(z)
        n = len(ids)
        x = self.emb.embed(np.asarray(ids, dtype=np.int64),
                           np.arange(n, dtype=np.int64),
                           np.asarray(segments, dtype=np.int64))
        hidden = self.stack(x, attention_bias(n, n, self.cfg.np_dtype))
        return ad.sigmoid(ad.reshape(self.head(ad.slice_rows(hidden, 0, 1)), ()))

    def params(self) -> dict[str, Tensor]:
        out = self.stack.params()
        out.update(self.head.params())
        return out


class AlphaAuditor:
    """Recovers the grounding rate from (soft) response token embeddings."""

    def __init__(self, rng, cfg: GeneratorConfig, emb: Embeddings):
        self.cfg = cfg
        self.emb = emb
        self.stack = TransformerStack(rng, HEAD_LAYERS, cfg.hidden, cfg.heads,
                                      cfg.np_dtype, "audit")
        self.head = Linear(rng, cfg.hidden, 1, cfg.np_dtype, "audit.head")

    def predict_soft(self, token_embeds: Tensor) -> Tensor:
        """Sigmoid grounding-rate estimate from a (T, h) embedding sequence.

        Rows may be hard embedding-table rows or Gumbel-softmax mixtures;
        position and response-segment embeddings are added internally.
        """
        t = token_embeds.shape[0]
        if t == 0:
            raise ContractError("auditor needs at least one response embedding")
        x = ad.add(token_embeds, ad.gather_rows(self.emb.pos, np.arange(t)))
        x = ad.add(x, ad.gather_rows(self.emb.seg, np.full(t, 2, dtype=np.int64)))
        hidden = self.stack(x, attention_bias(t, t, self.cfg.np_dtype))
        pooled = ad.reshape(ad.mean(hidden, axis=0), (1, -1))
        return ad.sigmoid(ad.reshape(self.head(pooled), ()))

    def predict_tokens(self, ids) -> Tensor:
        return self.predict_soft(ad.gather_rows(self.emb.token, ids))

    def params(self) -> dict[str, Tensor]:
        out = self.stack.params()
        out.update(self.head.params())
        return out


class DialogueModel:
    """The full network bundle plus checkpoint plumbing."""

    def __init__(self, cfg: GeneratorConfig, vocab: Vocab, seed: int = 0):
        if cfg.vocab != len(vocab):
            cfg.vocab = len(vocab)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.emb = Embeddings(rng, cfg)
        self.generator = Generator(rng, cfg, vocab, self.emb)
        self.matcher = Matcher(rng, cfg, vocab, self.emb)
        self.alpha_predictor = AlphaPredictor(rng, cfg, vocab, self.emb)
        self.auditor = AlphaAuditor(rng, cfg, self.emb)

    def params(self) -> dict[str, Tensor]:
        out = self.generator.params()
        out.update(self.matcher.params())
        out.update(self.alpha_predictor.params())
        out.update(self.auditor.params())
        return out

    def save(self, path: str):
        params = self.params()
        save_checkpoint(params, path)
        with open(path + ".manifest.txt", "w", encoding="utf-8") as fh:
            for name, p in params.items():
                fh.write(f"{name}\t{'x'.join(map(str, p.shape))}\n")

    def load(self, path: str):
        restore_params(self.params(), load_checkpoint(path))


def pack_input(vocab: Vocab, context: list[str], knowledge: list[str],
               response: str | None, alpha_bucket: int | None, max_len: int,
               reserve: int = 0, max_response: int | None = None) -> PackedInput:
    """Assemble the generator layout under the token budget.

    Knowledge sentences are appended whole, in the given (pre-ranked) order,
    stopping at the first one that would overflow. The context keeps at most
    half the budget, dropping oldest utterances first. `reserve` holds back
    room for generation when no response is given; omitting `alpha_bucket`
    drops the grounding-rate token entirely.
    """
    if not context:
        raise ContractError("context must contain at least one utterance")
    head = 2 if alpha_bucket is not None else 1

    utts = [tokenize(u) for u in context]
    ctx_budget = max_len // 2
    while sum(len(u) for u in utts) > ctx_budget and len(utts) > 1:
        utts.pop(0)
    ctx = [t for u in utts for t in u]
    if len(ctx) > ctx_budget:
        ctx = ctx[-ctx_budget:]

    if response is not None:
        resp = tokenize(response)
        limit = max_len - head - len(ctx) - 2 - 1
        if max_response is not None:
            limit = min(limit, max_response)
        resp = _fit(resp, limit, "head")
        resp_ids = vocab.encode(resp) + [vocab.sep_id]
        tail_len = len(resp_ids)
    else:
        resp_ids = []
        tail_len = reserve

    know_budget = max_len - head - len(ctx) - 2 - tail_len
    know_tokens: list[str] = []
    packed_sentences: list[str] = []
    for sentence in knowledge:
        toks = tokenize(sentence)
        if len(know_tokens) + len(toks) > know_budget:
            break
        know_tokens.extend(toks)
        packed_sentences.append(sentence)

    ids = [vocab.cls_id]
    if alpha_bucket is not None:
        ids.append(vocab.alpha_token_id(alpha_bucket))
    ids += vocab.encode(ctx) + [vocab.sep_id]
    segments = [0] * len(ids)
    ids += vocab.encode(know_tokens) + [vocab.sep_id]
    segments += [1] * (len(know_tokens) + 1)
    response_start = len(ids)
    ids += resp_ids
    segments += [2] * len(resp_ids)

    if len(ids) > max_len:
        raise ContractError(f"packed length {len(ids)} exceeds budget {max_len}")
    return PackedInput(
        ids=np.asarray(ids, dtype=np.int64),
        segments=np.asarray(segments, dtype=np.int64),
        positions=np.arange(len(ids), dtype=np.int64),
        response_start=response_start,
        alpha_bucket=alpha_bucket,
        knowledge_texts=packed_sentences,
    )
