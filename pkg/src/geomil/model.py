"""Full bag classifier: cascaded SSM/MoE blocks, max-pool aggregation,
hybrid geometric head, and linear classifier.

A bag of instance embeddings ``(N, d_in)`` is projected to ``d_model``,
passed through ``n_blocks`` residual SSM+MoE pairs, max-pooled over the
token axis, fused into a hybrid Euclidean/hyperbolic embedding, and
classified.  Eval-mode inference is a deterministic pure function of
``(params, bag)``.

Parameters are stored as float32 ndarrays (the checkpoint payload dtype);
all arithmetic promotes to float64 because the bag features are converted
on ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

import numpy as np

from . import autograd as ag
from . import moe as moe_mod
from . import ssm as ssm_mod
from .geometry import check_curvature
from .moe import ExpertParams, MoeLayerParams, RoutingRecord
from .ssm import ConfigurationError, S4BlockParams, SsmLayerParams

FUSION_MODES = ("weighted_add", "concat", "project")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every field has a desk-scale default."""

    d_in: int = 32
    d_model: int = 128
    n_blocks: int = 2
    n_state: int = 64
    k_experts: int = 4
    top_k: int = 2
    fusion_dim: int = 128
    curvature: float = 0.1
    fusion_mode: str = "weighted_add"
    n_classes: int = 2
    max_seq_len: int = 4096
    seed: int = 0
    dropout_rate: float = 0.1
    drop_path_rate: float = 0.0

    def validate(self) -> None:
        for name in ("d_in", "d_model", "n_blocks", "n_state", "k_experts",
                     "top_k", "fusion_dim", "n_classes", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(
                f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}"
            )
        if self.top_k > self.k_experts:
            raise ConfigurationError("top_k cannot exceed k_experts")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigurationError("drop_path_rate must be in [0, 1)")
        check_curvature(self.curvature)

    @property
    def d_hidden(self) -> int:
        return 4 * self.d_model

    @property
    def classifier_width(self) -> int:
        return 2 * self.fusion_dim if self.fusion_mode == "concat" else self.fusion_dim


@dataclass
class GhsParams:
    """Hybrid-geometry head: Euclidean and hyperbolic projections plus gate."""

    w_e: np.ndarray
    w_h: np.ndarray
    alpha_raw: np.ndarray
    c: float


@dataclass
class BagFeatures:
    """One bag: instance embedding matrix, class label, identifier."""

    features: np.ndarray
    label: int = -1
    bag_id: str = ""

    def validate(self) -> None:
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"bag features must be a nonempty (N, D) matrix, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"bag {self.bag_id!r} contains non-finite features")


@dataclass
class BlockParams:
    s4: S4BlockParams
    moe: MoeLayerParams


@dataclass
class ModelParams:
    config: ModelConfig
    in_w: np.ndarray
    in_b: np.ndarray
    blocks: list[BlockParams]
    ghs: GhsParams
    cls_w: np.ndarray
    cls_b: np.ndarray


def init_model(config: ModelConfig) -> ModelParams:
    """Seeded initialization; float32 storage, zero-initialized classifier."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    def normal(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    d, m = config.d_model, config.fusion_dim
    in_w = normal((config.d_in, d), 1.0 / np.sqrt(config.d_in))
    in_b = np.zeros(d, dtype=np.float32)

    blocks = []
    for _ in range(config.n_blocks):
        layer = ssm_mod.hippo_diag_init(
            config.n_state, d, seed=int(rng.integers(2**31 - 1))
        )
        layer = SsmLayerParams(
            *(np.asarray(getattr(layer, f.name), dtype=np.float32) for f in fields(layer))
        )
        s4 = S4BlockParams(
            norm_g=np.ones(d, dtype=np.float32),
            norm_b=np.zeros(d, dtype=np.float32),
            ssm=layer,
            mix_w=normal((d, d), 1.0 / np.sqrt(d)),
            mix_b=np.zeros(d, dtype=np.float32),
            drop_path_rate=config.drop_path_rate,
        )
        experts = [
            ExpertParams(
                w1=normal((d, config.d_hidden), 1.0 / np.sqrt(d)),
                b1=np.zeros(config.d_hidden, dtype=np.float32),
                w2=normal((config.d_hidden, d), 1.0 / np.sqrt(config.d_hidden)),
                b2=np.zeros(d, dtype=np.float32),
                dropout_rate=config.dropout_rate,
            )
            for _ in range(config.k_experts)
        ]
        moe = MoeLayerParams(
            gate_w=normal((d, config.k_experts), 0.02),
            experts=experts,
            top_k=config.top_k,
            drop_path_rate=config.drop_path_rate,
        )
        blocks.append(BlockParams(s4=s4, moe=moe))

    ghs = GhsParams(
        w_e=normal((d, m), 1.0 / np.sqrt(d)),
        w_h=normal((d, m), 1.0 / np.sqrt(d)),
        alpha_raw=np.zeros(m, dtype=np.float32),
        c=config.curvature,
    )
    cls_w = np.zeros((config.classifier_width, config.n_classes), dtype=np.float32)
    cls_b = np.zeros(config.n_classes, dtype=np.float32)
    return ModelParams(config, in_w, in_b, blocks, ghs, cls_w, cls_b)


# ---------------------------------------------------------------------------
# named parameter table
# ---------------------------------------------------------------------------

_SSM_FROZEN = ("a_re", "a_im", "b_re", "b_im", "dt", "skip")


def named_params(params: ModelParams) -> dict[str, Any]:
    """Flat name -> tensor view of every parameter, in a stable order."""
    table: dict[str, Any] = {"in_proj.w": params.in_w, "in_proj.b": params.in_b}
    for i, blk in enumerate(params.blocks):
        p = f"block{i}"
        table[f"{p}.s4.norm_g"] = blk.s4.norm_g
        table[f"{p}.s4.norm_b"] = blk.s4.norm_b
        for name in ("a_re", "a_im", "b_re", "b_im", "dt", "c_re", "c_im", "skip"):
            table[f"{p}.s4.ssm.{name}"] = getattr(blk.s4.ssm, name)
        table[f"{p}.s4.mix_w"] = blk.s4.mix_w
        table[f"{p}.s4.mix_b"] = blk.s4.mix_b
        table[f"{p}.moe.gate_w"] = blk.moe.gate_w
        for j, e in enumerate(blk.moe.experts):
            for name in ("w1", "b1", "w2", "b2"):
                table[f"{p}.moe.expert{j}.{name}"] = getattr(e, name)
    table["ghs.w_e"] = params.ghs.w_e
    table["ghs.w_h"] = params.ghs.w_h
    table["ghs.alpha_raw"] = params.ghs.alpha_raw
    table["cls.w"] = params.cls_w
    table["cls.b"] = params.cls_b
    return table


def trainable_names(params: ModelParams) -> list[str]:
    """Trainable subset: everything except the frozen state dynamics."""
    names = []
    for name in named_params(params):
        leaf = name.rsplit(".", 1)[-1]
        if ".ssm." in name and leaf in _SSM_FROZEN:
            continue
        names.append(name)
    return names


def with_params(params: ModelParams, table: Mapping[str, Any]) -> ModelParams:
    """Rebuild the parameter tree substituting tensors by name.

    Values may be ndarrays or tape variables; anything absent from
    ``table`` is carried over unchanged.
    """
    cur = named_params(params)

    def pick(name):
        return table.get(name, cur[name])

    blocks = []
    for i, blk in enumerate(params.blocks):
        p = f"block{i}"
        layer = SsmLayerParams(
            **{n: pick(f"{p}.s4.ssm.{n}")
               for n in ("a_re", "a_im", "b_re", "b_im", "dt", "c_re", "c_im", "skip")}
        )
        s4 = S4BlockParams(
            norm_g=pick(f"{p}.s4.norm_g"), norm_b=pick(f"{p}.s4.norm_b"), ssm=layer,
            mix_w=pick(f"{p}.s4.mix_w"), mix_b=pick(f"{p}.s4.mix_b"),
            drop_path_rate=blk.s4.drop_path_rate,
        )
        experts = [
            ExpertParams(
                w1=pick(f"{p}.moe.expert{j}.w1"), b1=pick(f"{p}.moe.expert{j}.b1"),
                w2=pick(f"{p}.moe.expert{j}.w2"), b2=pick(f"{p}.moe.expert{j}.b2"),
                dropout_rate=e.dropout_rate,
            )
            for j, e in enumerate(blk.moe.experts)
        ]
        moe = MoeLayerParams(
            gate_w=pick(f"{p}.moe.gate_w"), experts=experts,
            top_k=blk.moe.top_k, drop_path_rate=blk.moe.drop_path_rate,
        )
        blocks.append(BlockParams(s4=s4, moe=moe))

    ghs = GhsParams(w_e=pick("ghs.w_e"), w_h=pick("ghs.w_h"),
                    alpha_raw=pick("ghs.alpha_raw"), c=params.ghs.c)
    return ModelParams(
        config=params.config,
        in_w=pick("in_proj.w"), in_b=pick("in_proj.b"),
        blocks=blocks, ghs=ghs,
        cls_w=pick("cls.w"), cls_b=pick("cls.b"),
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def max_pool_slide(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension max over tokens with winning-row indices.

    Ties resolve to the lowest token index; raises on an empty sequence.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a nonempty (N, D) matrix, got shape {x.shape}")
    arg = np.argmax(x, axis=0)
    return x[arg, np.arange(x.shape[1])], arg


def ghs_fuse(h, params: GhsParams, mode: str):
    """Fuse a pooled feature into the hybrid geometric embedding.

    ``z_E = h W_E`` and ``z_H = exp_0^c(clip(h W_H))``; then

    * ``weighted_add``: ``alpha * z_E + (1 - alpha) * log_0^c(z_H)``
      with ``alpha = sigmoid(alpha_raw)`` (output width ``m``);
    * ``concat``: ``[z_E ; log_0^c(z_H)]`` (width ``2m``);
    * ``project``: ``z_E`` scaled by the scalar hyperbolic norm feature
      ``d_hyp(0, z_H)`` (width ``m``).
    """
    if mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion mode {mode!r}")
    hv = ag.value_of(h)
    one_dim = np.ndim(hv) == 1
    row = ag.reshape(h, (1, -1)) if one_dim else h
    c = params.c
    z_e = ag.matmul(row, params.w_e)
    tangent = ag.project_ball(ag.matmul(row, params.w_h), c)
    z_h = ag.exp_map0(tangent, c)
    if mode == "weighted_add":
        alpha = ag.sigmoid(params.alpha_raw)
        out = ag.add(ag.mul(alpha, z_e),
                     ag.mul(ag.sub(1.0, alpha), ag.log_map0(z_h, c)))
    elif mode == "concat":
        out = ag.concat_cols(z_e, ag.log_map0(z_h, c))
    else:  # project
        scale = ag.reshape(ag.dist_to_origin(z_h, c), (1, 1))
        out = ag.mul(z_e, scale)
    return ag.reshape(out, (-1,)) if one_dim else out


def _backbone(params: ModelParams, feats, mode: str,
              rng: np.random.Generator | None,
              force_expert: int | None = None,
              with_aux: bool = False):
    """Input projection plus the cascaded SSM/MoE stack.

    Returns ``(sequence, records, aux_terms)`` where ``sequence`` is the
    ``(N, d_model)`` token matrix entering the pooling stage.
    """
    cfg = params.config
    x = ag.add(ag.matmul(feats, params.in_w), params.in_b)
    records: list[RoutingRecord] = []
    aux_terms = []
    for blk in params.blocks:
        x = ssm_mod.s4_block_forward(x, blk.s4, mode, rng,
                                     max_kernel_len=cfg.max_seq_len)
        branch, recs, aux = moe_mod.moe_branch(x, blk.moe, mode, rng,
                                               force_expert, with_aux)
        x = ag.add(x, ssm_mod.drop_path(branch, blk.moe.drop_path_rate, mode, rng))
        records.extend(recs)
        if aux is not None:
            aux_terms.append(aux)
    return x, records, aux_terms


def _head(params: ModelParams, pooled_row):
    fused = ghs_fuse(pooled_row, params.ghs, params.config.fusion_mode)
    return ag.add(ag.matmul(fused, params.cls_w), params.cls_b)


def _prepare_features(params: ModelParams, bag: BagFeatures, mode: str) -> np.ndarray:
    bag.validate()
    dtype = np.asarray(ag.value_of(params.in_w)).dtype
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    feats = np.asarray(bag.features, dtype=dtype)
    if feats.shape[1] != params.config.d_in:
        raise ValueError(
            f"bag width {feats.shape[1]} does not match model d_in {params.config.d_in}"
        )
    if mode == "train" and feats.shape[0] > params.config.max_seq_len:
        feats = feats[: params.config.max_seq_len]
    return feats


def forward_bag(params: ModelParams, bag: BagFeatures, mode: str = "eval",
                rng: np.random.Generator | None = None,
                force_expert: int | None = None,
                with_aux: bool = False):
    """Run the full model on one bag.

    Returns ``(logits, records, pool_idx)`` -- the class logits (length
    ``n_classes``; a tape variable of shape ``(1, n_classes)`` when the
    parameters are tape-tracked), the routing diagnostics, and the
    max-pool winning-row indices.  With ``with_aux`` a fourth element
    carries the load-balance terms.
    """
    feats = _prepare_features(params, bag, mode)
    seq, records, aux_terms = _backbone(params, feats, mode, rng,
                                        force_expert, with_aux)
    pooled, pool_idx = ag.max_pool_rows(seq)
    logits = _head(params, pooled)
    if not isinstance(logits, ag.Var):
        logits = logits.reshape(-1)
    if with_aux:
        return logits, records, pool_idx, aux_terms
    return logits, records, pool_idx


def predict_logits(params: ModelParams, bag: BagFeatures) -> np.ndarray:
    """Deterministic eval-mode logits for one bag."""
    logits, _, _ = forward_bag(params, bag, mode="eval")
    return np.asarray(logits, dtype=np.float64)


def forward_bags_batch(params: ModelParams, bags: list[BagFeatures],
                       mode: str = "eval",
                       rng: np.random.Generator | None = None,
                       with_aux: bool = False):
    """Run several equal-length bags through the network in one pass.

    The bags are stacked along the token axis; every per-token operation is
    shared and the sequence mixing runs per bag.  Returns ``(logits, aux)``
    where ``logits`` has one row per bag.  Bag results are independent of
    the co-batched bags up to floating-point reassociation; the per-bag
    path (:func:`forward_bag`) is the reference.
    """
    cfg = params.config
    feats = [_prepare_features(params, bag, mode) for bag in bags]
    lengths = {f.shape[0] for f in feats}
    if len(lengths) != 1:
        raise ValueError(f"batched forward needs equal bag lengths, got {sorted(lengths)}")
    n_bags = len(bags)
    x = ag.add(ag.matmul(np.concatenate(feats, axis=0), params.in_w), params.in_b)
    aux_terms = []
    for blk in params.blocks:
        x = ssm_mod.s4_block_forward(x, blk.s4, mode, rng,
                                     max_kernel_len=cfg.max_seq_len, n_bags=n_bags)
        branch, _, aux = moe_mod.moe_branch(x, blk.moe, mode, rng,
                                            with_aux=with_aux, collect_records=False)
        x = ag.add(x, ssm_mod.drop_path(branch, blk.moe.drop_path_rate, mode, rng,
                                        n_bags=n_bags))
        if aux is not None:
            aux_terms.append(aux)
    pooled, _ = ag.max_pool_bags(x, n_bags)
    logits = _head(params, pooled)
    return logits, aux_terms


def saliency(params: ModelParams, bag: BagFeatures) -> np.ndarray:
    """Max-pool-provenance instance scores.

    Each pooled dimension is attributed to the instance that won its max;
    the dimension's weight is the total absolute influence of that
    dimension on the class logits (summed over classes, computed through
    the fusion head).  Scores are nonnegative, sum to one, and are
    supported only on argmax-winning instances.
    """
    feats = _prepare_features(params, bag, "eval")
    seq, _, _ = _backbone(params, feats, "eval", None)
    pooled, pool_idx = max_pool_slide(seq)
    d_model = pooled.shape[0]
    n_classes = params.config.n_classes

    influence = np.zeros(d_model)
    for cls in range(n_classes):
        tape = ag.Tape()
        hv = tape.var(pooled[None, :])
        logits = _head(params, hv)
        onehot = np.zeros((1, n_classes))
        onehot[0, cls] = 1.0
        ag.backward(tape, ag.sum_(ag.mul(logits, onehot)))
        influence += np.abs(hv.grad[0])

    if not np.any(influence > 0):
        influence = np.ones(d_model)
    scores = np.zeros(feats.shape[0])
    np.add.at(scores, pool_idx, influence)
    return scores / scores.sum()
