"""Training orchestration.

Each step draws a uniform gate: below the threshold the selector trains on
the binary knowledge-selection loss; otherwise the step runs an E update
(fit the matcher posterior to the exact one) followed by an M update
(generation NLL + selector-prior KL + grounding-rate MSE + the
mutual-information loss) on the same mini-batch. Validation decodes the
held-out set with the full test-time pipeline and early-stops on F1 drops.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import objectives as obj
from .autodiff import Tensor
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .corpus import CorpusError, DialogueExample
from .decode import generate_response
from .index import InvertedIndex
from .metrics import unigram_f1
from .nets import DialogueModel, GeneratorConfig, PackedInput
from .optim import AdamState, adam_step, zero_grads


@dataclass
class TrainConfig:
    lam: float = 0.2            # knowledge-selection gate threshold
    max_steps: int = 20000
    tau: float = 0.1
    l: int = 10
    batch_size: int = 8
    base_lr: float = 3e-5
    warmup: int = 500
    validate_every: int = 500
    n_noise: int = 9
    seed: int = 0
    patience: int = 1
    grad_clip: float = 0.0
    mi_steps: int = 16
    beam: int = 5
    disable_z_alpha: bool = False
    disable_mi: bool = False
    squeeze_posterior: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise CorpusError(f"lambda must be in [0,1], got {self.lam}")
        if self.tau <= 0:
            raise CorpusError(f"tau must be positive, got {self.tau}")
        if self.l < 1:
            raise CorpusError(f"l must be >= 1, got {self.l}")


# Config files are flat key=value text; "lambda" maps to the gate threshold.
_KEY_ALIASES = {"lambda": "lam"}
_MODEL_KEYS = {"layers", "heads", "hidden", "vocab", "max_input_len",
               "max_output_len", "dtype"}


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CorpusError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CorpusError(f"expected a boolean, got {value!r}")
    return target_type(value)


def build_configs(raw: dict[str, str]) -> tuple[TrainConfig, dict]:
    """Split raw key=value pairs into a TrainConfig and model-config kwargs."""
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    train_kwargs: dict = {}
    model_kwargs: dict = {}
    for key, value in raw.items():
        name = _KEY_ALIASES.get(key, key)
        if name in defaults:
            train_kwargs[name] = _coerce(value, type(defaults[name]))
        elif name in _MODEL_KEYS:
            model_kwargs[name] = value if name == "dtype" else _coerce(value, int)
        else:
            raise CorpusError(f"unknown config key: {key!r}")
    return TrainConfig(**train_kwargs), model_kwargs


def pick_branch(rng: np.random.Generator, lam: float) -> str:
    """The per-step gate of the optimization loop."""
    return "ks" if rng.random() < lam else "em"


def simulate_gate(lam: float, steps: int, seed: int) -> float:
    """Loop-only mode: fraction of knowledge-selection branches drawn."""
    rng = np.random.default_rng(seed)
    hits = sum(1 for _ in range(steps) if pick_branch(rng, lam) == "ks")
    return hits / steps


@dataclass
class TrainState:
    step: int = 0
    best_f1: float = -1.0
    drops: int = 0

    def should_stop(self, new_f1: float, patience: int) -> bool:
        """Stop after `patience` consecutive validations below the best F1."""
        if new_f1 > self.best_f1:
            self.best_f1 = new_f1
            self.drops = 0
            return False
        if new_f1 < self.best_f1:
            self.drops += 1
            return self.drops >= patience
        return False


@dataclass
class TrainResult:
    best_path: str
    log_path: str
    best_f1: float
    steps_run: int
    state: TrainState = field(default_factory=TrainState)


def prefix_of(packed: PackedInput) -> PackedInput:
    """The response-free prefix of a packed training input."""
    rs = packed.response_start
    return PackedInput(ids=packed.ids[:rs], segments=packed.segments[:rs],
                       positions=packed.positions[:rs], response_start=rs,
                       alpha_bucket=packed.alpha_bucket,
                       knowledge_texts=packed.knowledge_texts)


def validate(model: DialogueModel, valid_set: list[DialogueExample],
             index: InvertedIndex, l: int = 10, beam: int = 5) -> float:
    """Mean unigram F1 of full-pipeline decodes against gold responses.

    Examples carrying candidate knowledge use it; the rest retrieve with the
    most recent context turn (test time never sees the response).
    """
    scores = []
    for ex in valid_set:
        if ex.candidate_knowledge:
            candidates = list(ex.candidate_knowledge)
        else:
            cset = index.retrieve_topl(ex.context[-1], l)
            candidates = [s.text for s in cset.sentences()]
        if not candidates:
            continue
        response = generate_response(model, ex.context, candidates, beam=beam)
        scores.append(unigram_f1(response, ex.response))
    return float(np.mean(scores)) if scores else 0.0


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class Trainer:
    def __init__(self, config: TrainConfig, model: DialogueModel,
                 train_set: list[DialogueExample], valid_set: list[DialogueExample],
                 index: InvertedIndex, out_dir: str):
        if not train_set:
            raise CorpusError("empty filtered training set")
        self.cfg = config
        self.model = model
        self.train_set = train_set
        self.valid_set = valid_set
        self.index = index
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.params = model.params()
        self.adam = AdamState(config.base_lr, config.warmup)
        self.rng = np.random.default_rng(config.seed)
        self.state = TrainState()
        # Retrieval is static per example: cache the candidate sets up front.
        self.retrievals = [index.retrieve_topl(ex.response, config.l, query_id=i)
                           for i, ex in enumerate(train_set)]

    # -- persistence ---------------------------------------------------------

    def save_train_state(self, tag: str = "last"):
        self.model.save(os.path.join(self.out_dir, f"{tag}.ckpt"))
        moments = {}
        for name, m in self.adam.m.items():
            moments[f"m.{name}"] = Tensor(m)
            moments[f"v.{name}"] = Tensor(self.adam.v[name])
        if moments:
            save_checkpoint(moments, os.path.join(self.out_dir, f"{tag}.moments"))
        meta = {
            "step": self.state.step,
            "best_f1": self.state.best_f1,
            "drops": self.state.drops,
            "adam_step": self.adam.step,
            "rng_state": self.rng.bit_generator.state,
        }
        tmp = os.path.join(self.out_dir, f"{tag}.state.json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        os.replace(tmp, os.path.join(self.out_dir, f"{tag}.state.json"))

    def load_train_state(self, tag: str = "last"):
        self.model.load(os.path.join(self.out_dir, f"{tag}.ckpt"))
        moments_path = os.path.join(self.out_dir, f"{tag}.moments")
        if os.path.exists(moments_path):
            arrays = load_checkpoint(moments_path)
            for key, arr in arrays.items():
                kind, name = key.split(".", 1)
                target = self.adam.m if kind == "m" else self.adam.v
                target[name] = arr.astype(self.params[name].data.dtype)
        with open(os.path.join(self.out_dir, f"{tag}.state.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        self.state.step = meta["step"]
        self.state.best_f1 = meta["best_f1"]
        self.state.drops = meta["drops"]
        self.adam.step = meta["adam_step"]
        self.rng.bit_generator.state = meta["rng_state"]

    # -- steps ----------------------------------------------------------------

    def _batch(self) -> list[int]:
        n = len(self.train_set)
        replace = n < self.cfg.batch_size
        return list(self.rng.choice(n, size=self.cfg.batch_size, replace=replace))

    def _q_for(self, i: int) -> obj.CandidateDistribution:
        ex = self.train_set[i]
        cands = self.retrievals[i]
        if self.cfg.squeeze_posterior:
            return obj.squeezed_q(ex.response, cands)
        return obj.q_zk(self.model, ex.context, ex.response, cands)

    def _ks_step(self, batch: list[int]) -> float:
        losses = []
        for i in batch:
            ex = self.train_set[i]
            try:
                losses.append(obj.ks_loss(self.model, ex.context, ex.response,
                                          self.retrievals[i], self.index, self.rng))
            except obj.SkipExample:
                continue
        if not losses:
            return float("nan")
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss = total * (1.0 / len(losses))
        zero_grads(self.params)
        loss.backward()
        adam_step(self.params, self.adam, self.cfg.grad_clip)
        return loss.item()

    def _e_step(self, batch: list[int]) -> float | None:
        if self.cfg.squeeze_posterior:
            return None  # the squeezed posterior has no matcher parameters
        losses = []
        for i in batch:
            ex = self.train_set[i]
            cands = self.retrievals[i]
            try:
                target = obj.true_posterior(self.model, ex.context, ex.response, cands)
                losses.append(obj.e_step_loss(self.model, ex.context, ex.response,
                                              cands, target))
            except obj.SkipExample:
                continue
        if not losses:
            return None
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss = total * (1.0 / len(losses))
        zero_grads(self.params)
        loss.backward()
        adam_step(self.params, self.adam, self.cfg.grad_clip)
        return loss.item()

    def _m_step(self, batch: list[int]) -> dict[str, float] | None:
        nll_v = kl_v = mse_v = mi_v = 0.0
        n = n_tok = 0
        pieces = []
        run_mi = not (self.cfg.disable_mi or self.cfg.disable_z_alpha)
        for i in batch:
            ex = self.train_set[i]
            cands = self.retrievals[i]
            try:
                q = self._q_for(i)
                terms = obj.m_step_loss(self.model, ex.context, ex.response, cands,
                                        q, self.index, self.rng,
                                        n_noise=self.cfg.n_noise,
                                        disable_z_alpha=self.cfg.disable_z_alpha)
            except obj.SkipExample:
                continue
            example_loss = terms.total()
            nll_v += terms.nll.item()
            n_tok += terms.n_tokens
            kl_v += terms.kl.item()
            if terms.mse is not None:
                mse_v += terms.mse.item()
            if run_mi:
                prefix = prefix_of(terms.packed)
                steps = min(self.cfg.mi_steps,
                            self.model.cfg.max_input_len - prefix.response_start)
                if steps > 0:
                    mi = obj.mi_loss(self.model, prefix, terms.sample.z_alpha,
                                     self.cfg.tau, steps, self.rng)
                    example_loss = example_loss + mi
                    mi_v += mi.item()
            pieces.append(example_loss)
            n += 1
        if not pieces:
            return None
        total = pieces[0]
        for extra in pieces[1:]:
            total = total + extra
        loss = total * (1.0 / n)
        zero_grads(self.params)
        loss.backward()
        adam_step(self.params, self.adam, self.cfg.grad_clip)
        return {"nll": nll_v / n, "per_token_nll": nll_v / max(1, n_tok),
                "kl": kl_v / n, "mse": mse_v / n, "mi": mi_v / n}

    # -- main loop -------------------------------------------------------------

    def train(self, resume: bool = False) -> TrainResult:
        log_path = os.path.join(self.out_dir, "train_log.tsv")
        valid_path = os.path.join(self.out_dir, "valid_log.tsv")
        mode = "a" if resume and os.path.exists(log_path) else "w"
        log = open(log_path, mode, encoding="utf-8")
        vlog = open(valid_path, mode, encoding="utf-8")
        if mode == "w":
            log.write("step\tbranch\tks\te\tnll\tkl\tmse\tmi\tlr\n")
            vlog.write("step\tf1\tbest_f1\n")
        best_path = os.path.join(self.out_dir, "best.ckpt")
        try:
            while self.state.step < self.cfg.max_steps:
                self.state.step += 1
                batch = self._batch()
                branch = pick_branch(self.rng, self.cfg.lam)
                row: dict[str, float | None] = {k: None for k in
                                                ("ks", "e", "nll", "kl", "mse", "mi")}
                if branch == "ks":
                    row["ks"] = self._ks_step(batch)
                else:
                    row["e"] = self._e_step(batch)
                    m = self._m_step(batch)
                    if m is not None:
                        row.update({k: m[k] for k in ("nll", "kl", "mse", "mi")})
                log.write("\t".join([str(self.state.step), branch,
                                     _fmt(row["ks"]), _fmt(row["e"]), _fmt(row["nll"]),
                                     _fmt(row["kl"]), _fmt(row["mse"]), _fmt(row["mi"]),
                                     repr(self.adam.effective_lr())]) + "\n")
                log.flush()
                if self.cfg.validate_every and self.state.step % self.cfg.validate_every == 0:
                    f1 = validate(self.model, self.valid_set, self.index,
                                  l=self.cfg.l, beam=self.cfg.beam)
                    self.model.save(os.path.join(self.out_dir,
                                                 f"ckpt_{self.state.step}.ckpt"))
                    improved = f1 > self.state.best_f1
                    stop = self.state.should_stop(f1, self.cfg.patience)
                    if improved:
                        self.model.save(best_path)
                    vlog.write(f"{self.state.step}\t{f1!r}\t{self.state.best_f1!r}\n")
                    vlog.flush()
                    if stop:
                        break
        finally:
            log.close()
            vlog.close()
        if not os.path.exists(best_path):
            self.model.save(best_path)
        self.save_train_state("last")
        return TrainResult(best_path=best_path, log_path=log_path,
                           best_f1=self.state.best_f1, steps_run=self.state.step,
                           state=self.state)
