"""Joint optimization of the prompt module and the language model."""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, TrainingDivergenceError
from .model import MASKED, TransformerLM
from .numerics import Tape, backward
from .prompting import PromptModule, forward_ipl, forward_prompt_tuning
from .tasks import (
    DEFAULT_PATTERN,
    DEFAULT_VERBALIZER,
    EOS,
    PAD,
    collate_cls,
    collate_gen,
    source_sequence,
)

METHODS = ("ipl", "prompt_tuning", "finetune_pet")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 1.0
EVAL_BATCH = 256


@dataclass
class OptimConfig:
    learning_rate: float = 3e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    method: str = "ipl"
    prompt_length: int = 16
    mode: str = MASKED
    float_width: int = 64

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be >= 0")
        if self.method == "finetune_pet" and self.prompt_length:
            raise ConfigError("finetune_pet trains without a prompt; set prompt_length to 0")
        if self.float_width not in (32, 64):
            raise ConfigError("float_width must be 32 or 64")
        return self

    @property
    def dtype(self):
        return np.float64 if self.float_width == 64 else np.float32

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_dev: float = -math.inf
    rng: np.random.Generator = None


@dataclass
class TrainResult:
    pm: PromptModule
    lm: TransformerLM
    history: list
    best_dev: float
    state: TrainState


def build_models(model_config, optim_config):
    """Seeded model and prompt initialization."""
    optim_config.validate()
    if optim_config.mode != model_config.mode:
        raise ConfigError(f"optimizer mode {optim_config.mode!r} != model mode {model_config.mode!r}")
    rng = np.random.default_rng(optim_config.seed)
    lm = TransformerLM(model_config, rng=rng, dtype=optim_config.dtype)
    pm = PromptModule.for_model(lm, optim_config.prompt_length, rng=rng)
    return pm, lm


def new_state(optim_config):
    return TrainState(rng=np.random.default_rng([optim_config.seed, 1]))


def trainable_parameters(method, pm, lm):
    params = {}
    if method == "ipl":
        params.update(pm.parameters())
    elif method == "prompt_tuning":
        params["prompt.P"] = pm.P
    params.update(lm.parameters())
    return params


def run_forward(method, pm, lm, tokens, valid, gate_valid=None, return_attention=False):
    """Dispatch to the method's forward; returns ``(logits, gates_or_None[, attention])``."""
    if method == "ipl":
        return forward_ipl(pm, lm, tokens, valid, gate_valid=gate_valid, return_attention=return_attention)
    out = forward_prompt_tuning(pm, lm, tokens, valid, return_attention=return_attention)
    if return_attention:
        return out[0], None, out[1]
    return out, None


def collate(instances, kind, pm, lm, pattern=DEFAULT_PATTERN):
    max_len = lm.config.max_len
    if kind == "gen":
        return collate_gen(instances, max_len, pm.length)
    return collate_cls(instances, pattern, lm.config.mode, max_len, pm.length)


def batch_loss(method, pm, lm, batch, verbalizer=DEFAULT_VERBALIZER):
    """Mean cross-entropy: verbalizer tokens at the mask (cls) or next-token on the target span (gen)."""
    l = pm.length
    if hasattr(batch, "labels"):
        logits, _ = run_forward(method, pm, lm, batch.tokens, batch.valid)
        rows = nx.gather_positions(logits, batch.mask_positions + l)
        scores = nx.take_columns(rows, verbalizer.tokens)
        targets = np.searchsorted(verbalizer.labels, batch.labels)
        return nx.softmax_cross_entropy(scores, targets)
    logits, _ = run_forward(method, pm, lm, batch.tokens, batch.valid, gate_valid=batch.gate_valid)
    rows = nx.gather_positions(logits, batch.target_positions + l, batch.target_rows)
    return nx.softmax_cross_entropy(rows, batch.target_ids)


def _clip(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


def adam_update(params, grads, state, lr):
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = (p.data - lr * step).astype(p.dtype, copy=False)


def train_step(batch, state, pm, lm, config, verbalizer=DEFAULT_VERBALIZER):
    """One clipped Adam step on the mean batch loss; returns ``(state, loss)``."""
    params = trainable_parameters(config.method, pm, lm)
    with Tape() as tape:
        loss = batch_loss(config.method, pm, lm, batch, verbalizer)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergenceError(state.step + 1, value)
    grads = backward(tape, loss)
    grads = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}
    grads, _ = _clip(grads, CLIP_NORM)
    adam_update(params, grads, state, config.learning_rate)
    return state, value


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _cls_predictions(scores):
    # argmax takes the first maximum, i.e. the lowest label on ties
    return np.argmax(scores, axis=1)


def accuracy(predictions, labels):
    """Fraction of positions where prediction equals label (0.0 when empty)."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return float(np.mean(predictions == labels)) if len(labels) else 0.0


def evaluate(instances, pm, lm, method, kind="cls", pattern=DEFAULT_PATTERN, verbalizer=DEFAULT_VERBALIZER,
             with_gates=True):
    """Accuracy (cls) or greedy exact-match (gen); per-instance gates for IPL."""
    if kind == "gen":
        return evaluate_generation(instances, pm, lm, method, with_gates)
    instances = list(instances)
    correct, preds, gates = [], [], []
    labels = np.array(verbalizer.labels)
    for chunk in _batches(instances, EVAL_BATCH):
        batch = collate(chunk, kind, pm, lm, pattern)
        logits, s = run_forward(method, pm, lm, batch.tokens, batch.valid)
        rows = logits.data[np.arange(len(chunk)), batch.mask_positions + pm.length]
        pred = labels[_cls_predictions(rows[:, verbalizer.tokens])]
        preds.extend(int(p) for p in pred)
        correct.extend(bool(c) for c in pred == batch.labels)
        if s is not None and with_gates:
            gates.extend(s.data.copy())
    metrics = {
        "accuracy": accuracy(preds, [inst.label for inst in instances]),
        "n": len(correct),
        "predictions": preds,
        "correct": correct,
    }
    if method == "ipl" and with_gates:
        metrics["gates"] = gates
    return metrics


def greedy_decode(instances, pm, lm, method, max_new_tokens=None):
    """Batched greedy decoding until EOS; returns generated id lists (EOS stripped)."""
    outputs = []
    for chunk in _batches(list(instances), EVAL_BATCH):
        seqs = [source_sequence(inst) for inst in chunk]
        src_len = [len(s) for s in seqs]
        budget = max_new_tokens or max(2 * max(len(inst.tokens) for inst in chunk), 4)
        budget = min(budget, lm.config.max_len - pm.length - max(src_len))
        done = [False] * len(chunk)
        generated = [[] for _ in chunk]
        for _ in range(budget):
            n = max(len(s) for s in seqs)
            tokens = np.full((len(seqs), n), PAD, dtype=np.int64)
            valid = np.zeros((len(seqs), n), dtype=bool)
            gate_valid = np.zeros((len(seqs), n), dtype=bool)
            for b, s in enumerate(seqs):
                tokens[b, :len(s)] = s
                valid[b, :len(s)] = True
                gate_valid[b, :src_len[b]] = True
            logits, _ = run_forward(method, pm, lm, tokens, valid, gate_valid=gate_valid)
            last = np.array([pm.length + len(s) - 1 for s in seqs])
            nxt = np.argmax(logits.data[np.arange(len(seqs)), last], axis=1)
            for b, tok in enumerate(nxt):
                if done[b]:
                    continue
                if tok == EOS:
                    done[b] = True
                else:
                    generated[b].append(int(tok))
                    seqs[b] = seqs[b] + [int(tok)]
            if all(done):
                break
        outputs.extend(generated)
    return outputs


def evaluate_generation(instances, pm, lm, method, with_gates=True):
    instances = list(instances)
    outputs = greedy_decode(instances, pm, lm, method)
    correct = [out == list(inst.target) for out, inst in zip(outputs, instances)]
    metrics = {
        "exact_match": float(np.mean(correct)) if correct else 0.0,
        "accuracy": float(np.mean(correct)) if correct else 0.0,
        "n": len(correct),
        "outputs": outputs,
        "correct": correct,
    }
    if method == "ipl" and with_gates:
        gates = []
        for chunk in _batches(instances, EVAL_BATCH):
            batch = collate_gen(chunk, lm.config.max_len, pm.length)
            _, s = run_forward(method, pm, lm, batch.tokens, batch.valid, gate_valid=batch.gate_valid)
            gates.extend(s.data.copy())
        metrics["gates"] = gates
    return metrics


def _snapshot(pm, lm):
    params = dict(lm.parameters())
    params.update(pm.parameters())
    return {name: p.data.copy() for name, p in params.items()}


def _restore(pm, lm, snapshot):
    params = dict(lm.parameters())
    params.update(pm.parameters())
    for name, p in params.items():
        p.data = snapshot[name]


def train(dataset, model_config, optim_config, run_dir=None, pattern=DEFAULT_PATTERN,
          verbalizer=DEFAULT_VERBALIZER, log=None):
    """Full training run with best-dev model selection.

    Writes one JSON line per epoch to ``run_dir/metrics.jsonl`` when a run
    directory is given; the returned models carry the best-dev parameters.
    """
    optim_config.validate()
    pm, lm = build_models(model_config, optim_config)
    state = new_state(optim_config)
    kind = dataset.kind
    train_items = list(dataset.train)
    history = []
    best = None
    metrics_fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_fh = open(os.path.join(run_dir, "metrics.jsonl"), "w", encoding="utf-8")
    try:
        for epoch in range(1, optim_config.epochs + 1):
            order = state.rng.permutation(len(train_items))
            losses = []
            for idx in _batches(order, optim_config.batch_size):
                batch = collate([train_items[i] for i in idx], kind, pm, lm, pattern)
                state, loss = train_step(batch, state, pm, lm, optim_config, verbalizer)
                losses.append(loss)
            dev = evaluate(dataset.dev, pm, lm, optim_config.method, kind, pattern, verbalizer, with_gates=False)
            dev_metric = dev["accuracy"]
            if dev_metric > state.best_dev:
                state.best_dev = dev_metric
                best = _snapshot(pm, lm)
            line = {
                "epoch": epoch,
                "step": state.step,
                "train_loss": float(np.mean(losses)) if losses else None,
                "dev_metric": dev_metric,
                "best_dev": state.best_dev,
            }
            history.append(line)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(line) + "\n")
                metrics_fh.flush()
            if log is not None:
                log(line)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if best is not None:
        _restore(pm, lm, best)
    return TrainResult(pm=pm, lm=lm, history=history, best_dev=state.best_dev, state=state)
