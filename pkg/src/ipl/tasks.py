"""Synthetic desk-scale tasks, cloze patterns and verbalizers.

Closed vocabulary (ids)::

    0 PAD   1 MASK   2 SEP   3 EOS   4/5 type sentinels A/B
    6/7 verbalizer tokens ("no"/"yes")   8-10 pattern literals
    11/12 generation separators (type A/B)
    16.. payload symbols, low half then high half
    40.. generation keys, then values

Cue-flip classification: an instance is a payload of low/high symbols with
one sentinel inserted at a random position.  For type A the label is 1 iff
high symbols are the majority; type B inverts that rule.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, SequenceLengthError, VocabularyError
from .model import CAUSAL, MASKED

PAD, MASK, SEP, EOS = 0, 1, 2, 3
SENTINELS = (4, 5)
LABEL_TOKENS = (6, 7)
THE, ANSWER, IS = 8, 9, 10
GEN_SEPARATORS = (11, 12)
PAYLOAD_START = 16

INSTANCE_SLOT = "INSTANCE"
MASK_SLOT = "MASK"


@dataclass
class Instance:
    tokens: list
    type: int
    label: int = None
    target: list = None

    def to_record(self):
        rec = {"tokens": list(self.tokens)}
        if self.target is not None:
            rec["target"] = list(self.target)
        else:
            rec["label"] = self.label
        rec["type"] = self.type
        return rec

    @classmethod
    def from_record(cls, rec):
        return cls(tokens=list(rec["tokens"]), type=rec["type"], label=rec.get("label"), target=rec.get("target"))


@dataclass
class Dataset:
    train: list
    dev: list
    test: list
    kind: str = "cls"

    def split(self, name):
        return getattr(self, name)

    def __iter__(self):
        return iter(self.train + self.dev + self.test)


@dataclass
class Pattern:
    """Cloze template of literal token ids plus one INSTANCE and one MASK slot."""

    template: tuple

    def __post_init__(self):
        self.template = tuple(self.template)
        if self.template.count(INSTANCE_SLOT) != 1 or self.template.count(MASK_SLOT) != 1:
            raise ConfigError("a pattern needs exactly one INSTANCE slot and one MASK slot")


@dataclass
class Verbalizer:
    """Injective map from class label to the vocabulary token scored for it."""

    label_tokens: dict

    def __post_init__(self):
        self.label_tokens = {int(k): int(v) for k, v in self.label_tokens.items()}
        if not self.label_tokens:
            raise ConfigError("verbalizer is empty")
        if len(set(self.label_tokens.values())) != len(self.label_tokens):
            raise ConfigError("verbalizer tokens must be distinct")

    @property
    def labels(self):
        return sorted(self.label_tokens)

    @property
    def tokens(self):
        return [self.label_tokens[k] for k in self.labels]


DEFAULT_PATTERN = Pattern((INSTANCE_SLOT, THE, ANSWER, IS, MASK_SLOT))
DEFAULT_VERBALIZER = Verbalizer({0: LABEL_TOKENS[0], 1: LABEL_TOKENS[1]})


@dataclass
class TaskConfig:
    name: str = "cue-flip"
    vocab_size: int = 64
    payload_length: int = 5
    n_symbols: int = 24
    n_keys: int = 8
    n_values: int = 16
    max_pairs: int = 3

    def validate(self):
        if self.name not in ("cue-flip", "kv-gen"):
            raise ConfigError(f"unknown task {self.name!r}")
        if self.payload_length < 1 or self.payload_length % 2 == 0:
            raise ConfigError("payload_length must be a positive odd number (no majority ties)")
        if self.n_symbols < 2 or self.n_symbols % 2:
            raise ConfigError("n_symbols must be even and >= 2")
        if self.max_pairs < 1 or self.max_pairs > self.n_keys:
            raise ConfigError("max_pairs must lie in [1, n_keys]")
        needed = PAYLOAD_START + self.n_symbols + self.n_keys + self.n_values
        if needed > self.vocab_size:
            raise ConfigError(f"vocabulary of {self.vocab_size} too small, need {needed}")
        return self

    @property
    def low_symbols(self):
        return list(range(PAYLOAD_START, PAYLOAD_START + self.n_symbols // 2))

    @property
    def high_symbols(self):
        return list(range(PAYLOAD_START + self.n_symbols // 2, PAYLOAD_START + self.n_symbols))

    @property
    def keys(self):
        start = PAYLOAD_START + self.n_symbols
        return list(range(start, start + self.n_keys))

    @property
    def values(self):
        start = PAYLOAD_START + self.n_symbols + self.n_keys
        return list(range(start, start + self.n_values))

    def to_dict(self):
        return asdict(self)


def format_pattern(inst, pattern=DEFAULT_PATTERN, mode=MASKED, max_len=None, prompt_length=0):
    """Fill a cloze pattern; returns ``(tokens, mask_position)``.

    In masked mode the MASK slot becomes the mask token.  In causal mode the
    slot is dropped and the answer is read off the last position, so MASK
    must be the final slot.  ``mask_position`` indexes the sequence before
    any prompt is prepended.
    """
    tokens = []
    for item in pattern.template:
        if item == INSTANCE_SLOT:
            tokens.extend(int(t) for t in inst.tokens)
        elif item == MASK_SLOT:
            if mode == MASKED:
                mask_position = len(tokens)
                tokens.append(MASK)
        else:
            tokens.append(int(item))
    if mode == CAUSAL:
        if pattern.template[-1] != MASK_SLOT:
            raise ConfigError("causal mode needs the MASK slot at the end of the pattern")
        mask_position = len(tokens) - 1
    if max_len is not None and len(tokens) + prompt_length > max_len:
        raise SequenceLengthError(
            f"formatted length {len(tokens)} + prompt {prompt_length} exceeds max_len={max_len}"
        )
    return tokens, mask_position


def verbalizer_score(row, verbalizer=DEFAULT_VERBALIZER):
    """Score labels by their token's raw logit; ties go to the lowest label."""
    row = np.asarray(row)
    scores = row[verbalizer.tokens]
    return verbalizer.labels[int(np.argmax(scores))], scores


# cue-flip -----------------------------------------------------------------

def majority_high(tokens, config):
    high = set(config.high_symbols)
    low = set(config.low_symbols)
    n_high = sum(t in high for t in tokens)
    n_low = sum(t in low for t in tokens)
    return int(n_high > n_low)


def cue_flip_label(tokens, config):
    """Ground-truth rule: majority-high for sentinel A, inverted for sentinel B."""
    kind = instance_type(tokens)
    return majority_high(tokens, config) ^ kind


def instance_type(tokens):
    for t in tokens:
        if t in SENTINELS:
            return SENTINELS.index(t)
    raise ConfigError("instance carries no type sentinel")


def swap_sentinel(inst, config):
    """Same payload with the other sentinel; the label is recomputed."""
    other = {SENTINELS[0]: SENTINELS[1], SENTINELS[1]: SENTINELS[0]}
    tokens = [other.get(t, t) for t in inst.tokens]
    return Instance(tokens=tokens, type=1 - inst.type, label=cue_flip_label(tokens, config))


def _payload(rng, config, want_high):
    low, high = config.low_symbols, config.high_symbols
    while True:
        is_high = rng.random(config.payload_length) < 0.5
        if int(is_high.sum() * 2 > config.payload_length) == want_high:
            break
    return [int(rng.choice(high)) if h else int(rng.choice(low)) for h in is_high]


def _check_size(n_examples, per_cell):
    if n_examples < per_cell:
        raise ConfigError(f"need at least {per_cell} examples (2 per class per type), got {n_examples}")


def _split_balanced(rng, instances):
    """80/10/10 split performed separately inside each type, then shuffled."""
    parts = {"train": [], "dev": [], "test": []}
    for kind in sorted({inst.type for inst in instances}):
        group = [inst for inst in instances if inst.type == kind]
        n = len(group)
        n_dev = n_test = max(1, n // 10)
        parts["dev"] += group[:n_dev]
        parts["test"] += group[n_dev:n_dev + n_test]
        parts["train"] += group[n_dev + n_test:]
    for name in parts:
        order = rng.permutation(len(parts[name]))
        parts[name] = [parts[name][i] for i in order]
    return parts


def gen_synthetic_cls(seed, n_examples, config=None):
    """Cue-flip dataset, exactly balanced over (type, label) cells."""
    config = (config or TaskConfig()).validate()
    _check_size(n_examples, 8)
    rng = np.random.default_rng(seed)
    instances = []
    for i in range(n_examples):
        kind = i % 2
        label = (i // 2) % 2
        payload = _payload(rng, config, label ^ kind)
        pos = int(rng.integers(0, len(payload) + 1))
        tokens = payload[:pos] + [SENTINELS[kind]] + payload[pos:]
        instances.append(Instance(tokens=tokens, type=kind, label=label))
    order = rng.permutation(len(instances))
    instances = [instances[i] for i in order]
    return Dataset(kind="cls", **_split_balanced(rng, instances))


# key-value generation -------------------------------------------------------

def kv_target(tokens, config):
    """Values in canonical key order, joined by the type's separator."""
    kind = instance_type(tokens)
    body = [t for t in tokens if t not in SENTINELS]
    pairs = sorted(zip(body[0::2], body[1::2]))
    out = []
    for i, (_, v) in enumerate(pairs):
        if i:
            out.append(GEN_SEPARATORS[kind])
        out.append(v)
    return out


def gen_synthetic_gen(seed, n_examples, config=None):
    """Shuffled ``(key, value)`` tables; target lists values by ascending key."""
    config = (config or TaskConfig(name="kv-gen")).validate()
    _check_size(n_examples, 4)
    rng = np.random.default_rng(seed)
    keys, values = config.keys, config.values
    instances = []
    for i in range(n_examples):
        kind = i % 2
        n_pairs = int(rng.integers(1, config.max_pairs + 1))
        chosen = rng.choice(keys, size=n_pairs, replace=False)
        tokens = [SENTINELS[kind]]
        for k in chosen:
            tokens += [int(k), int(rng.choice(values))]
        instances.append(Instance(tokens=tokens, type=kind, target=kv_target(tokens, config)))
    order = rng.permutation(len(instances))
    instances = [instances[i] for i in order]
    return Dataset(kind="gen", **_split_balanced(rng, instances))


def generate(task_config, seed, n_examples):
    if task_config.name == "cue-flip":
        return gen_synthetic_cls(seed, n_examples, task_config)
    return gen_synthetic_gen(seed, n_examples, task_config)


# serialization ------------------------------------------------------------

def dumps_jsonl(instances):
    return "".join(json.dumps(inst.to_record(), separators=(",", ":")) + "\n" for inst in instances)


def save_jsonl(instances, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_jsonl(instances))


def load_jsonl(path, vocab_size=None):
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                inst = Instance.from_record(json.loads(line))
                if not inst.tokens:
                    raise ConfigError(f"{path}: instance with no tokens")
                if vocab_size is not None and max(inst.tokens) >= vocab_size:
                    raise VocabularyError(f"{path}: token id outside vocabulary of {vocab_size}")
                instances.append(inst)
    return instances


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    for name in ("train", "dev", "test"):
        save_jsonl(dataset.split(name), os.path.join(directory, f"{name}.jsonl"))


def load_dataset(directory, vocab_size=None):
    parts = {name: load_jsonl(os.path.join(directory, f"{name}.jsonl"), vocab_size) for name in ("train", "dev", "test")}
    first = next((i for p in parts.values() for i in p), None)
    kind = "gen" if first is not None and first.target is not None else "cls"
    return Dataset(kind=kind, **parts)


# batching -----------------------------------------------------------------

@dataclass
class ClsBatch:
    tokens: np.ndarray      # (B, n) padded with PAD
    valid: np.ndarray       # (B, n) bool
    mask_positions: np.ndarray  # (B,) before prompt offset
    labels: np.ndarray      # (B,)
    types: np.ndarray = field(default=None)


@dataclass
class GenBatch:
    tokens: np.ndarray      # (B, n): source, SEP, target, EOS, padding
    valid: np.ndarray
    gate_valid: np.ndarray  # source tokens only
    target_rows: np.ndarray     # batch index of each predicted token
    target_positions: np.ndarray  # position (pre-prompt) whose logits predict it
    target_ids: np.ndarray
    types: np.ndarray = field(default=None)


def _pad(seqs):
    n = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), n), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = s
        valid[i, :len(s)] = True
    return tokens, valid


def collate_cls(instances, pattern=DEFAULT_PATTERN, mode=MASKED, max_len=None, prompt_length=0):
    seqs, positions = [], []
    for inst in instances:
        toks, pos = format_pattern(inst, pattern, mode, max_len, prompt_length)
        seqs.append(toks)
        positions.append(pos)
    tokens, valid = _pad(seqs)
    return ClsBatch(
        tokens=tokens,
        valid=valid,
        mask_positions=np.array(positions, dtype=np.int64),
        labels=np.array([inst.label for inst in instances], dtype=np.int64),
        types=np.array([inst.type for inst in instances], dtype=np.int64),
    )


def source_sequence(inst):
    return list(inst.tokens) + [SEP]


def collate_gen(instances, max_len=None, prompt_length=0):
    seqs, rows, positions, ids = [], [], [], []
    src_lens = []
    for b, inst in enumerate(instances):
        src = source_sequence(inst)
        full = src + list(inst.target) + [EOS]
        if max_len is not None and len(full) + prompt_length > max_len:
            raise SequenceLengthError(f"sequence of {len(full)} + prompt {prompt_length} exceeds max_len={max_len}")
        seqs.append(full)
        src_lens.append(len(src))
        for t in range(len(src), len(full)):
            rows.append(b)
            positions.append(t - 1)
            ids.append(full[t])
    tokens, valid = _pad(seqs)
    gate_valid = np.zeros_like(valid)
    for b, n in enumerate(src_lens):
        gate_valid[b, :n] = True
    return GenBatch(
        tokens=tokens,
        valid=valid,
        gate_valid=gate_valid,
        target_rows=np.array(rows, dtype=np.int64),
        target_positions=np.array(positions, dtype=np.int64),
        target_ids=np.array(ids, dtype=np.int64),
        types=np.array([inst.type for inst in instances], dtype=np.int64),
    )
