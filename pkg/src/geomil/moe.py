"""Sparse mixture-of-experts block with top-k routing.

Each token is normalized, scored by a softmax gate, and dispatched to its
``top_k`` highest-probability experts; the selected probabilities are
renormalized to sum to one and weight the expert outputs, which are fused
back through a DropPath residual.  Routing decisions are returned as
:class:`RoutingRecord` diagnostics.

Only the selected gate probabilities carry gradient (the index set is
treated as constant during backward); per token exactly ``top_k`` expert
evaluations run, never all ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .ssm import ConfigurationError, drop_path


@dataclass
class ExpertParams:
    """Two-layer GELU feed-forward expert with dropout on the hidden layer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.1


@dataclass
class MoeLayerParams:
    gate_w: np.ndarray
    experts: list[ExpertParams]
    top_k: int = 2
    drop_path_rate: float = 0.0

    @property
    def k(self) -> int:
        return len(self.experts)

    def validate(self) -> None:
        if not 1 <= self.top_k <= self.k:
            raise ConfigurationError(
                f"top_k must be in [1, {self.k}], got {self.top_k}"
            )


@dataclass
class RoutingRecord:
    """One token's routing decision.

    ``expert_ids`` and ``weights`` are slot-ordered by descending gate
    probability (ties to the lower expert index); weights are the selected
    probabilities renormalized to sum to one.  ``probs`` is the full dense
    gate distribution.
    """

    expert_ids: np.ndarray
    weights: np.ndarray
    probs: np.ndarray
    token_index: int = -1


def gate_probs(x_token: np.ndarray, gate_w: np.ndarray) -> np.ndarray:
    """Softmax routing distribution for one token (max-subtracted logits)."""
    x_token = np.asarray(x_token, dtype=np.float64)
    logits = x_token @ np.asarray(ag.value_of(gate_w), dtype=np.float64)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def select_topk(probs: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` largest probabilities, ties to lower index."""
    probs = np.asarray(probs)
    k = probs.shape[-1]
    if top_k > k:
        raise ConfigurationError(f"top_k={top_k} exceeds expert count {k}")
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :top_k]


def topk_renormalize(probs: np.ndarray, top_k: int, token_index: int = -1) -> RoutingRecord:
    """Keep the ``top_k`` largest probabilities and rescale them to sum to 1."""
    probs = np.asarray(probs, dtype=np.float64)
    ids = select_topk(probs, top_k)
    selected = probs[ids]
    weights = selected / selected.sum()
    return RoutingRecord(expert_ids=ids, weights=weights, probs=probs,
                         token_index=token_index)


def _expert_apply(x_rows, e: ExpertParams, mode: str, rng: np.random.Generator | None):
    """Run one expert on a batch of routed tokens ``(rows, d_model)``."""
    hidden = ag.gelu(ag.add(ag.matmul(x_rows, e.w1), e.b1))
    if mode == "train" and e.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout requires an rng")
        value = ag.value_of(hidden)
        keep = rng.random(value.shape) >= e.dropout_rate
        hidden = ag.mul(hidden, keep.astype(value.dtype) / (1.0 - e.dropout_rate))
    return ag.add(ag.matmul(hidden, e.w2), e.b2)


def expert_forward(x_token: np.ndarray, e: ExpertParams, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-token expert evaluation; dropout is identity in eval mode."""
    x_token = np.asarray(ag.value_of(x_token), dtype=np.float64)
    if x_token.shape[-1] != np.shape(ag.value_of(e.w1))[0]:
        raise ValueError(
            f"token width {x_token.shape[-1]} does not match expert input "
            f"width {np.shape(ag.value_of(e.w1))[0]}"
        )
    out = _expert_apply(x_token[None, :], e, mode, rng)
    return ag.value_of(out)[0]


def moe_branch(x, params: MoeLayerParams, mode: str = "eval",
               rng: np.random.Generator | None = None,
               force_expert: int | None = None,
               with_aux: bool = False,
               collect_records: bool = True):
    """Weighted expert mixture of the normalized input.

    Returns ``(branch, records, aux)`` where ``branch`` is the pre-residual
    output, ``records`` the per-token routing diagnostics, and ``aux`` the
    switch-style load-balance term ``k * sum(fraction * importance)`` (None
    unless ``with_aux``).  ``force_expert`` overrides routing and sends every
    token to a single expert with weight one (diagnostics path).
    """
    params.validate()
    ln = ag.layer_norm(x)
    n_tokens = np.shape(ag.value_of(ln))[0]
    k = params.k

    probs = ag.softmax(ag.matmul(ln, params.gate_w))
    probs_v = ag.value_of(probs)

    dtype = probs_v.dtype
    if force_expert is not None:
        if not 0 <= force_expert < k:
            raise ConfigurationError(f"force_expert={force_expert} out of range")
        ids = np.full((n_tokens, 1), force_expert, dtype=np.intp)
        dense_w = np.zeros((n_tokens, k), dtype=dtype)
        dense_w[:, force_expert] = 1.0
        weights = dense_w  # constant: forced routing carries no gate gradient
    else:
        ids = select_topk(probs_v, params.top_k)
        mask = np.zeros((n_tokens, k), dtype=dtype)
        np.put_along_axis(mask, ids, 1.0, axis=1)
        selected = ag.mul(probs, mask)
        denom = ag.sum_(selected, axis=1, keepdims=True)
        weights = ag.div(selected, denom)

    branch = None
    for e_idx in range(k):
        rows = np.nonzero((ids == e_idx).any(axis=1))[0]
        if rows.size == 0:
            continue
        onehot = np.zeros((1, k), dtype=dtype)
        onehot[0, e_idx] = 1.0
        w_col = ag.sum_(ag.mul(weights, onehot), axis=1, keepdims=True)
        routed = ag.gather_rows(ln, rows)
        out_rows = _expert_apply(routed, params.experts[e_idx], mode, rng)
        weighted = ag.mul(out_rows, ag.gather_rows(w_col, rows))
        contrib = ag.scatter_rows(weighted, rows, n_tokens)
        branch = contrib if branch is None else ag.add(branch, contrib)

    records = []
    if collect_records:
        weights_v = ag.value_of(weights)
        records = [
            RoutingRecord(
                expert_ids=ids[t].copy(),
                weights=weights_v[t, ids[t]].copy(),
                probs=probs_v[t].copy(),
                token_index=t,
            )
            for t in range(n_tokens)
        ]

    aux = None
    if with_aux and force_expert is None:
        counts = np.bincount(ids.ravel(), minlength=k).astype(np.float64)
        fraction = counts / n_tokens
        importance = ag.mul(ag.sum_(probs, axis=0), 1.0 / n_tokens)
        aux = ag.sum_(ag.mul(importance, float(k) * fraction))
    return branch, records, aux


def moe_block_forward(x, params: MoeLayerParams, mode: str = "eval",
                      rng: np.random.Generator | None = None,
                      force_expert: int | None = None):
    """Residual MoE block: ``x + DropPath(mixture(LN(x)))`` plus diagnostics."""
    xv = ag.value_of(x)
    if np.shape(xv)[1] != np.shape(ag.value_of(params.gate_w))[0]:
        raise ValueError(
            f"input width {np.shape(xv)[1]} does not match gate width "
            f"{np.shape(ag.value_of(params.gate_w))[0]}"
        )
    branch, records, _ = moe_branch(x, params, mode, rng, force_expert)
    out = ag.add(x, drop_path(branch, params.drop_path_rate, mode, rng))
    return out, records


def load_balance_stats(records: list[RoutingRecord], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert routing share and mean gate probability.

    ``fraction[j]`` counts top-k selections of expert ``j`` per token (sums
    to ``top_k``); ``importance[j]`` is the mean dense probability (sums
    to 1).
    """
    if not records:
        raise ValueError("no routing records to summarize")
    fraction = np.zeros(k)
    importance = np.zeros(k)
    for rec in records:
        fraction[rec.expert_ids] += 1.0
        importance += rec.probs
    fraction /= len(records)
    importance /= len(records)
    return fraction, importance
