"""Instance-aware prompt gating and the fixed-prompt baseline.

For an embedded instance ``X (n, d_e)`` and a learnable prompt ``P (l, d_e)``:

    M = P @ W_M,  N = X @ W_N
    s_j = sigmoid(mean_i <M_j, N_i>)        (mean over valid instance tokens)
    P_hat_j = s_j * P_j

and the model sees ``[P_hat; X]``.  All functions accept a single instance
(rank-2 ``X``) or a padded batch (rank-3 ``X`` with a ``(B, n)`` validity
mask); in the batched case each instance gets its own gate vector.
"""

import numpy as np

from . import numerics as nx
from .errors import DimensionError, SequenceLengthError
from .numerics import Tensor

PROJ_STD = 0.02


class PromptModule:
    """Learnable prompt ``P`` and the two relevance projections."""

    def __init__(self, length, d_e, d_h=None, rng=None, token_table=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        d_h = d_e if d_h is None else d_h
        if token_table is not None:
            rows = rng.integers(0, token_table.shape[0], size=length)
            prompt = np.array(token_table[rows], dtype=dtype)
        else:
            prompt = (rng.standard_normal((length, d_e)) * PROJ_STD).astype(dtype)
        self.length = length
        self.d_e = d_e
        self.d_h = d_h
        self.P = Tensor(prompt.reshape(length, d_e), requires_grad=True, name="prompt.P")
        self.W_M = Tensor(
            (rng.standard_normal((d_e, d_h)) * PROJ_STD).astype(dtype), requires_grad=True, name="prompt.W_M"
        )
        self.W_N = Tensor(
            (rng.standard_normal((d_e, d_h)) * PROJ_STD).astype(dtype), requires_grad=True, name="prompt.W_N"
        )

    @classmethod
    def for_model(cls, lm, length, d_h=None, rng=None):
        """Prompt rows sampled uniformly from the model's token-embedding table."""
        table = lm.params["tok_emb"].data
        return cls(length, lm.config.d_e, d_h, rng=rng, token_table=table, dtype=table.dtype)

    def parameters(self):
        return {"prompt.P": self.P, "prompt.W_M": self.W_M, "prompt.W_N": self.W_N}


def project(pm, X):
    """Map prompt and instance into the relevance space: ``(P W_M, X W_N)``."""
    if X.shape[-1] != pm.d_e:
        raise DimensionError(f"instance width {X.shape[-1]} != prompt width {pm.d_e}")
    return nx.matmul(pm.P, pm.W_M), nx.matmul(X, pm.W_N)


def gate_scores(M, N, valid=None):
    """Per-prompt-token contribution scores in (0, 1).

    ``valid`` masks padding out of the mean; it has shape ``(n,)`` for a
    single instance or ``(B, n)`` for a batch.
    """
    if M.shape[-1] != N.shape[-1]:
        raise DimensionError(f"projection widths differ: M {M.shape} vs N {N.shape}")
    single = N.ndim == 2
    if single:
        N = nx.reshape(N, (1,) + N.shape)
    b, n = N.shape[:2]
    valid = np.ones((b, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(b, n)
    relevance = nx.matmul(N, nx.transpose(M))  # (B, n, l)
    s = nx.sigmoid(nx.masked_mean(relevance, valid))
    return nx.reshape(s, s.shape[1:]) if single else s


def relevance_matrix(pm, X):
    """Pre-mean relevance ``M @ N.T`` of shape ``(l, n)`` for one instance."""
    M, N = project(pm, X)
    return M.data @ N.data.T


def weight_prompt(pm, s):
    """Scale each prompt row by its gate: shape ``(l, d)`` or ``(B, l, d)``."""
    if s.shape[-1] != pm.length:
        raise DimensionError(f"{s.shape[-1]} gates for a prompt of length {pm.length}")
    return nx.row_scale(pm.P, s)


def build_input(P_hat, X):
    """Row concatenation ``[P_hat; X]`` along the sequence axis."""
    if P_hat.shape[-1] != X.shape[-1] or P_hat.ndim != X.ndim:
        raise DimensionError(f"cannot stack prompt {P_hat.shape} on instance {X.shape}")
    return nx.concat([P_hat, X], axis=X.ndim - 2)


def _prepare(pm, lm, tokens, valid):
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    b, n = tokens.shape
    if pm.length + n > lm.config.max_len:
        raise SequenceLengthError(
            f"prompt length {pm.length} + instance length {n} exceeds max_len={lm.config.max_len}"
        )
    valid = np.ones((b, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(b, n)
    attention_mask = np.concatenate([np.ones((b, pm.length), dtype=bool), valid], axis=1)
    return tokens, valid, attention_mask, single


def _finish(logits, single):
    return nx.reshape(logits, logits.shape[1:]) if single else logits


def forward_ipl(pm, lm, tokens, valid=None, gate_valid=None, gate_override=None, return_attention=False):
    """Gated-prompt forward pass.

    ``valid`` marks non-padding instance tokens (attention); ``gate_valid``
    selects the tokens averaged into the gates and defaults to ``valid``.
    ``gate_override`` replaces the computed gates by fixed values (shape
    ``(l,)`` or ``(B, l)``).  Returns ``(logits, gates)`` with logits over the
    full ``l + n`` sequence, plus the attention list if requested.
    """
    tokens, valid, attention_mask, single = _prepare(pm, lm, tokens, valid)
    b = tokens.shape[0]
    X = lm.embed(tokens)
    if gate_override is not None:
        override = np.broadcast_to(np.asarray(gate_override, dtype=X.dtype), (b, pm.length))
        s = Tensor(override.copy())
    else:
        gv = valid if gate_valid is None else np.asarray(gate_valid, dtype=bool).reshape(valid.shape)
        M, N = project(pm, X)
        s = gate_scores(M, N, gv)
    inputs = build_input(weight_prompt(pm, s), X)
    out = lm.forward(inputs, attention_mask, return_attention=return_attention)
    logits, attention = out if return_attention else (out, None)
    logits = _finish(logits, single)
    gates = nx.reshape(s, s.shape[1:]) if single else s
    if return_attention:
        return logits, gates, attention
    return logits, gates


def forward_prompt_tuning(pm, lm, tokens, valid=None, return_attention=False):
    """Fixed-prompt forward: the same ``P`` is prepended to every instance."""
    tokens, valid, attention_mask, single = _prepare(pm, lm, tokens, valid)
    X = lm.embed(tokens)
    inputs = build_input(nx.expand_batch(pm.P, tokens.shape[0]), X)
    out = lm.forward(inputs, attention_mask, return_attention=return_attention)
    if return_attention:
        return _finish(out[0], single), out[1]
    return _finish(out, single)
