"""Gate/attention exports, gate-similarity structure and prompt-length sweeps."""

import csv
import io
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .prompting import relevance_matrix
from .tasks import DEFAULT_PATTERN, DEFAULT_VERBALIZER
from .train import collate, evaluate, run_forward, train

EXACT_LIMIT = 1000
SAMPLED_PAIRS = 100_000


@dataclass
class GateRecord:
    id: int
    type: int
    gates: list
    correct: bool

    def to_json(self):
        return json.dumps(
            {"id": self.id, "type": self.type, "gates": [float(g) for g in self.gates], "correct": self.correct},
            separators=(",", ":"),
        )


@dataclass
class Similarity:
    within_type_mean_cosine: float
    between_type_mean_cosine: float
    gap: float
    degenerate: bool = False
    sampled: bool = False

    def to_dict(self):
        return dict(self.__dict__)


def gate_records(instances, pm, lm, kind="cls", pattern=DEFAULT_PATTERN, verbalizer=DEFAULT_VERBALIZER):
    metrics = evaluate(instances, pm, lm, "ipl", kind, pattern, verbalizer)
    return [
        GateRecord(id=i, type=int(inst.type), gates=[float(g) for g in gates], correct=bool(ok))
        for i, (inst, gates, ok) in enumerate(zip(instances, metrics["gates"], metrics["correct"]))
    ]


def attention_record(index, inst, pm, lm, kind="cls", pattern=DEFAULT_PATTERN):
    """Relevance ``M N^T`` and layer-1 head-averaged prompt->instance attention, both ``(l, n)``."""
    batch = collate([inst], kind, pm, lm, pattern)
    tokens = batch.tokens[0]
    gate_valid = getattr(batch, "gate_valid", batch.valid)
    n = int(batch.valid[0].sum())
    _, _, attention = run_forward(
        "ipl", pm, lm, batch.tokens, batch.valid, gate_valid=gate_valid, return_attention=True
    )
    l = pm.length
    X = lm.embed(tokens[:n])
    relevance = relevance_matrix(pm, X)
    if attention:
        layer1 = attention[0][0].mean(axis=0)
        sub = layer1[:l, l:l + n]
    else:
        sub = np.zeros((l, n))
    return {"id": index, "relevance": relevance.tolist(), "attention": sub.tolist()}


def export_gates(instances, pm, lm, path, attention_ids=(), attention_path=None, kind="cls",
                 pattern=DEFAULT_PATTERN, verbalizer=DEFAULT_VERBALIZER):
    """Write one gate record per instance, plus attention records for ``attention_ids``.

    The attention file defaults to ``<path stem>.attention.jsonl``.
    """
    instances = list(instances)
    records = gate_records(instances, pm, lm, kind, pattern, verbalizer)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    attention_ids = list(attention_ids)
    if attention_ids:
        if attention_path is None:
            stem = path[:-6] if path.endswith(".jsonl") else path
            attention_path = stem + ".attention.jsonl"
        with open(attention_path, "w", encoding="utf-8") as fh:
            for i in attention_ids:
                rec = attention_record(i, instances[i], pm, lm, kind, pattern)
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return records


def load_gate_records(path):
    with open(path, encoding="utf-8") as fh:
        return [GateRecord(**json.loads(line)) for line in fh if line.strip()]


def _pair_sums(unit, types):
    cos = unit @ unit.T
    same = types[:, None] == types[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    within = same & upper
    between = ~same & upper
    return cos[within].sum(), int(within.sum()), cos[between].sum(), int(between.sum())


def gate_similarity(records, seed=0, exact_limit=EXACT_LIMIT, n_pairs=SAMPLED_PAIRS):
    """Mean pairwise gate cosine within and between instance types.

    Pairs are enumerated exactly up to ``exact_limit`` records; beyond that
    ``n_pairs`` uniformly random pairs are drawn.
    """
    records = list(records)
    types = [r.type for r in records]
    counts = {t: types.count(t) for t in set(types)}
    if len(counts) < 2 or min(counts.values()) < 2:
        raise ContractError("gate_similarity needs at least 2 types with at least 2 records each")
    # canonical order makes the result independent of record order
    records = sorted(records, key=lambda r: (r.type, tuple(r.gates)))
    G = np.array([r.gates for r in records], dtype=np.float64)
    t = np.array([r.type for r in records])
    if np.all(G == G[0]):
        return Similarity(1.0, 1.0, 0.0, degenerate=True)
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    unit = G / np.where(norms == 0, 1.0, norms)

    if len(records) <= exact_limit:
        w_sum, w_n, b_sum, b_n = _pair_sums(unit, t)
        within, between, sampled = w_sum / w_n, b_sum / b_n, False
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, len(records), size=n_pairs)
        j = rng.integers(0, len(records) - 1, size=n_pairs)
        j = j + (j >= i)  # uniform over j != i
        cos = np.einsum("kd,kd->k", unit[i], unit[j])
        same = t[i] == t[j]
        if same.all() or (~same).all():
            raise ContractError("pair sample contains only one kind of pair")
        within, between, sampled = cos[same].mean(), cos[~same].mean(), True
    within, between = float(within), float(between)
    return Similarity(within, between, within - between, degenerate=False, sampled=sampled)


@dataclass
class SweepRow:
    length: int
    seed: int
    dev_metric: float


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["length", "seed", "dev_metric"])
    for r in rows:
        writer.writerow([r.length, r.seed, repr(float(r.dev_metric))])
    return buf.getvalue()


def _sweep_one(args):
    dataset, model_config, optim_config, length, seed = args
    cfg = replace(optim_config, prompt_length=length, seed=seed)
    result = train(dataset, model_config, cfg)
    return SweepRow(length, seed, result.best_dev)


def prompt_length_sweep(lengths, dataset, model_config, optim_config, seeds=(0,), csv_path=None, workers=1):
    """One training run per (length, seed); rows come back in input order."""
    lengths = list(lengths)
    if len(set(lengths)) != len(lengths) or any(l < 0 for l in lengths):
        raise ContractError("lengths must be distinct and non-negative")
    jobs = [(dataset, model_config, optim_config, l, s) for l in lengths for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(job) for job in jobs]
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(sweep_csv(rows))
    return rows
