"""Miniature pre-norm transformer LM that consumes input embeddings directly.

Taking embeddings (rather than token ids) in :meth:`TransformerLM.forward`
is what lets a gated prompt be prepended to an embedded instance.  Positional
embeddings are added inside ``forward``, after any concatenation, so the
first prompt token sits at position 0.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, SequenceLengthError
from .numerics import Tensor

CAUSAL = "causal"
MASKED = "masked"
INIT_STD = 0.02
# token rows of norm ~sqrt(d_e)/2; at 0.02 the gate pre-activations stay ~1e-2
TOKEN_EMB_STD = 0.5


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_e: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    mode: str = MASKED
    mask_token_id: int = 1

    def validate(self):
        if self.mode not in (CAUSAL, MASKED):
            raise ConfigError(f"mode must be {CAUSAL!r} or {MASKED!r}, got {self.mode!r}")
        for name in ("vocab_size", "d_e", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_e % self.n_heads:
            raise ConfigError(f"d_e={self.d_e} is not divisible by n_heads={self.n_heads}")
        if self.mode == MASKED and not 0 <= self.mask_token_id < self.vocab_size:
            raise ConfigError(f"mask_token_id {self.mask_token_id} outside vocabulary")
        return self

    def to_dict(self):
        return asdict(self)


def parameter_count(config):
    """Closed-form number of scalars in a :class:`TransformerLM`."""
    v, d, f, n = config.vocab_size, config.d_e, config.d_ff, config.n_layers
    per_layer = 4 * d * d + 2 * d * f + 9 * d + f
    final_norm = 2 * d if n > 0 else 0
    return v * d + config.max_len * d + n * per_layer + final_norm


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class TransformerLM:
    """Token/position embeddings, ``n_layers`` pre-norm blocks, tied output head.

    The final layer norm belongs to the block stack, so a zero-layer model
    computes ``(embeds + positions) @ E.T`` exactly.
    """

    def __init__(self, config, rng=None, dtype=np.float64):
        self.config = config.validate()
        rng = np.random.default_rng(0) if rng is None else rng
        d, f = config.d_e, config.d_ff
        proj_std = INIT_STD / math.sqrt(2 * max(config.n_layers, 1))
        params = {
            "tok_emb": _normal(rng, (config.vocab_size, d), TOKEN_EMB_STD, dtype),
            "pos_emb": _normal(rng, (config.max_len, d), INIT_STD, dtype),
        }
        for i in range(config.n_layers):
            p = f"layers.{i}."
            params[p + "ln1.g"] = np.ones(d, dtype)
            params[p + "ln1.b"] = np.zeros(d, dtype)
            params[p + "attn.w_qkv"] = _normal(rng, (d, 3 * d), INIT_STD, dtype)
            params[p + "attn.b_qkv"] = np.zeros(3 * d, dtype)
            params[p + "attn.w_o"] = _normal(rng, (d, d), proj_std, dtype)
            params[p + "attn.b_o"] = np.zeros(d, dtype)
            params[p + "ln2.g"] = np.ones(d, dtype)
            params[p + "ln2.b"] = np.zeros(d, dtype)
            params[p + "ffn.w1"] = _normal(rng, (d, f), INIT_STD, dtype)
            params[p + "ffn.b1"] = np.zeros(f, dtype)
            params[p + "ffn.w2"] = _normal(rng, (f, d), proj_std, dtype)
            params[p + "ffn.b2"] = np.zeros(d, dtype)
        if config.n_layers:
            params["ln_f.g"] = np.ones(d, dtype)
            params["ln_f.b"] = np.zeros(d, dtype)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}

    def parameters(self):
        return dict(self.params)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def embed(self, tokens):
        """Token-embedding lookup for ids of shape ``(n,)`` or ``(B, n)``.

        Positions are not added here.
        """
        return nx.embedding(self.params["tok_emb"], tokens)

    def attention_allowed(self, valid):
        """Boolean ``(B, T, T)`` matrix of permitted query->key pairs."""
        allowed = np.repeat(valid[:, None, :], valid.shape[1], axis=1)
        if self.config.mode == CAUSAL:
            allowed &= np.tril(np.ones((valid.shape[1],) * 2, dtype=bool))[None]
        return allowed

    def forward(self, inputs_embeds, attention_mask=None, return_attention=False):
        """Logits for every position of ``inputs_embeds`` (``(T, d)`` or ``(B, T, d)``).

        ``attention_mask`` marks valid (non-padding) positions.  With
        ``return_attention`` the per-layer attention probabilities are also
        returned as arrays of shape ``(B, n_heads, T, T)``.
        """
        cfg = self.config
        single = inputs_embeds.ndim == 2
        x = nx.reshape(inputs_embeds, (1,) + inputs_embeds.shape) if single else inputs_embeds
        b, t, d = x.shape
        if t > cfg.max_len:
            raise SequenceLengthError(f"sequence of length {t} exceeds max_len={cfg.max_len}")
        if attention_mask is None:
            valid = np.ones((b, t), dtype=bool)
        else:
            valid = np.asarray(attention_mask, dtype=bool).reshape(b, t)
        allowed = np.repeat(self.attention_allowed(valid), cfg.n_heads, axis=0)

        P = self.params
        pos = nx.narrow(P["pos_emb"], 0, 0, t)
        h = nx.add(x, nx.expand_batch(pos, b))
        head_dim = d // cfg.n_heads
        inv_sqrt = 1.0 / math.sqrt(head_dim)
        attention = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a = nx.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = nx.add_bias(nx.matmul(a, P[p + "attn.w_qkv"]), P[p + "attn.b_qkv"])
            q = nx.split_heads(nx.narrow(qkv, 2, 0, d), cfg.n_heads)
            k = nx.split_heads(nx.narrow(qkv, 2, d, 2 * d), cfg.n_heads)
            v = nx.split_heads(nx.narrow(qkv, 2, 2 * d, 3 * d), cfg.n_heads)
            scores = nx.scale(nx.matmul(q, nx.transpose(k)), inv_sqrt)
            probs = nx.softmax(scores, allowed)
            if return_attention:
                attention.append(probs.data.reshape(b, cfg.n_heads, t, t))
            ctx = nx.merge_heads(nx.matmul(probs, v), cfg.n_heads)
            h = nx.add(h, nx.add_bias(nx.matmul(ctx, P[p + "attn.w_o"]), P[p + "attn.b_o"]))
            f = nx.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
            f = nx.gelu(nx.add_bias(nx.matmul(f, P[p + "ffn.w1"]), P[p + "ffn.b1"]))
            f = nx.add_bias(nx.matmul(f, P[p + "ffn.w2"]), P[p + "ffn.b2"])
            h = nx.add(h, f)
        if cfg.n_layers:
            h = nx.layer_norm(h, P["ln_f.g"], P["ln_f.b"])
        logits = nx.matmul(h, nx.transpose(P["tok_emb"]))
        if single:
            logits = nx.reshape(logits, logits.shape[1:])
        if return_attention:
            return logits, attention
        return logits


def mask_logits(logits, mask_positions, batch_index=None):
    """Gather the logit rows at ``mask_positions`` (in the given order)."""
    return nx.gather_positions(logits, mask_positions, batch_index)
