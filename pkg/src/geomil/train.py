"""Optimizer and training loop.

AdamW with decoupled weight decay and a half-cycle cosine schedule that
decays to a fixed fraction of the base learning rate by the final epoch.
The loop is fully deterministic given its seed: bag shuffling, dropout,
and DropPath all draw from one seeded generator in a fixed order, and
gradients accumulate in bag-index order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .model import (
    BagFeatures,
    ModelConfig,
    ModelParams,
    forward_bag,
    forward_bags_batch,
    init_model,
    named_params,
    trainable_names,
    with_params,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    floor_frac: float = 0.1
    aux_weight: float = 0.0
    train_split: str = "train"
    val_split: str = ""


@dataclass
class OptimState:
    """Per-parameter Adam moments plus the schedule description."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    base_lr: float
    weight_decay: float
    total_epochs: int
    floor_frac: float = 0.1

    @classmethod
    def create(cls, params: dict[str, np.ndarray], base_lr: float,
               weight_decay: float, total_epochs: int,
               floor_frac: float = 0.1) -> "OptimState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            base_lr=base_lr,
            weight_decay=weight_decay,
            total_epochs=total_epochs,
            floor_frac=floor_frac,
        )


def cosine_lr(epoch: int, total: int, base: float, floor_frac: float = 0.1) -> float:
    """Half-cycle cosine: ``base`` at epoch 0, ``floor_frac * base`` at the end."""
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    cos = (1.0 + np.cos(np.pi * epoch / total)) / 2.0
    return base * (floor_frac + (1.0 - floor_frac) * cos)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += ADAM_EPS
        update = m / bc1
        update /= denom
        update *= lr
        new_p = p * (1.0 - lr * state.weight_decay)
        new_p -= update
        params[name] = new_p


def batch_loss_and_grads(params: ModelParams, live: dict[str, np.ndarray],
                         batch: list[BagFeatures], labels: list[int],
                         rng: np.random.Generator, aux_weight: float = 0.0):
    """Mean cross-entropy over a batch plus gradients for the live tensors.

    One tape spans the whole batch.  Equal-length bags share a stacked
    forward pass; stragglers run individually in batch order, so the
    gradient reduction stays deterministic.  Returns
    ``(loss, n_correct, grads)``.
    """
    tape = ag.Tape()
    leaves = {name: tape.var(value) for name, value in live.items()}
    shadow = with_params(params, leaves)
    with_aux = aux_weight > 0.0
    scale = 1.0 / len(batch)

    cap = params.config.max_seq_len
    groups: dict[int, list[int]] = {}
    for i, bag in enumerate(batch):
        n = min(np.asarray(bag.features).shape[0], cap)
        groups.setdefault(n, []).append(i)

    total = None
    n_correct = 0
    for _, members in sorted(groups.items()):
        if len(members) > 1:
            logits, aux_terms = forward_bags_batch(
                shadow, [batch[i] for i in members], mode="train", rng=rng,
                with_aux=with_aux)
        else:
            out = forward_bag(shadow, batch[members[0]], mode="train", rng=rng,
                              with_aux=with_aux)
            logits, aux_terms = out[0], (out[3] if with_aux else [])
            logits = ag.reshape(logits, (1, -1))
        logits_v = ag.value_of(logits)
        for row, i in enumerate(members):
            ce = ag.cross_entropy(ag.gather_rows(logits, np.array([row])), labels[i])
            term = ag.mul(ce, scale)
            total = term if total is None else ag.add(total, term)
            if int(np.argmax(logits_v[row])) == labels[i]:
                n_correct += 1
        for aux in aux_terms:
            total = ag.add(total, ag.mul(aux, aux_weight * len(members) * scale))
    ag.backward(tape, total)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    return float(ag.value_of(total)), n_correct, grads


def fit_model(bags: list[BagFeatures], labels: list[int], model_cfg: ModelConfig,
              train_cfg: TrainConfig, seed: int,
              val_bags: list[BagFeatures] | None = None,
              val_labels: list[int] | None = None,
              log_rows: list[str] | None = None) -> ModelParams:
    """Train a freshly initialized model on in-memory bags.

    ``seed`` drives both initialization and the training-time randomness.
    ``log_rows``, when given, collects one tab-separated line per epoch:
    ``epoch  lr  train_loss  train_acc`` plus ``val_loss  val_acc`` when a
    validation set is supplied.
    """
    if not bags:
        raise ValueError("no training bags")
    if len(bags) != len(labels):
        raise ValueError("bags and labels length mismatch")
    for label in labels:
        if not 0 <= label < model_cfg.n_classes:
            raise ValueError(f"label {label} out of range for {model_cfg.n_classes} classes")

    # training runs in single precision (the storage dtype); only the
    # geometry of the fusion head computes internally in double
    params = init_model(replace(model_cfg, seed=seed))
    names = trainable_names(params)
    table = named_params(params)
    live = {n: np.asarray(table[n], dtype=np.float32) for n in names}
    state = OptimState.create(live, train_cfg.base_lr, train_cfg.weight_decay,
                              train_cfg.epochs, train_cfg.floor_frac)
    rng = np.random.default_rng(seed + 1)

    def snapshot() -> ModelParams:
        return with_params(params, {k: v.astype(np.float32) for k, v in live.items()})

    n = len(bags)
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.base_lr, train_cfg.floor_frac)
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = [bags[i] for i in idx]
            blabels = [labels[i] for i in idx]
            loss, correct, grads = batch_loss_and_grads(
                params, live, batch, blabels, rng, train_cfg.aux_weight
            )
            epoch_loss += loss * len(idx)
            epoch_correct += correct
            adamw_step(live, grads, state, lr)
        if log_rows is not None:
            row = (f"{epoch}\t{lr:.8g}\t{epoch_loss / n:.6f}\t{epoch_correct / n:.4f}")
            if val_bags:
                v_loss, v_acc = _eval_loss_acc(snapshot(), val_bags, val_labels)
                row += f"\t{v_loss:.6f}\t{v_acc:.4f}"
            log_rows.append(row)
    return snapshot()


def _eval_loss_acc(params: ModelParams, bags, labels) -> tuple[float, float]:
    total = 0.0
    correct = 0
    for bag, label in zip(bags, labels):
        logits, _, _ = forward_bag(params, bag, mode="eval")
        total += float(ag.cross_entropy(logits, label))
        correct += int(np.argmax(logits)) == label
    return total / len(bags), correct / len(bags)


def verify_model_gradients(params: ModelParams, bag: BagFeatures, label: int,
                           step: float = 1e-4):
    """End-to-end finite-difference check of the trainable gradients.

    Runs the eval-mode forward plus cross-entropy.  Coordinates whose
    top-k routing or pooling argmax flips under the probe step are
    excluded (those points sit on a subgradient boundary).  Returns
    ``(errors, n_checked, n_skipped)`` where ``errors`` maps parameter
    names to the error measure of :func:`geomil.autograd.gradient_error`.
    """
    names = trainable_names(params)
    table = named_params(params)
    live = {n: np.asarray(table[n], dtype=np.float64) for n in names}

    def run(values):
        shadow = with_params(params, values)
        logits, records, pool_idx = forward_bag(shadow, bag, mode="eval")
        loss = ag.cross_entropy(logits, int(label))
        signature = (
            tuple(tuple(int(i) for i in r.expert_ids) for r in records),
            tuple(int(i) for i in pool_idx),
        )
        return loss, signature

    tape = ag.Tape()
    leaves = {n: tape.var(v) for n, v in live.items()}
    loss, base_sig = run(leaves)
    ag.backward(tape, loss)

    errors: dict[str, float] = {}
    n_checked = 0
    n_skipped = 0
    for name in names:
        base = live[name]
        analytic = leaves[name].grad
        analytic = np.zeros_like(base) if analytic is None else analytic
        worst = 0.0
        flat = base.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp, sig_p = run(live)
            flat[i] = orig - step
            fm, sig_m = run(live)
            flat[i] = orig
            if sig_p != base_sig or sig_m != base_sig:
                n_skipped += 1
                continue
            numeric = (float(ag.value_of(fp)) - float(ag.value_of(fm))) / (2.0 * step)
            worst = max(worst, ag.gradient_error(aflat[i], numeric))
            n_checked += 1
        errors[name] = worst
    return errors, n_checked, n_skipped


def train_loop(manifest_path: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
               seed: int, ckpt_path: str, log_path: str | None = None) -> ModelParams:
    """Manifest-driven training: load bags, fit, save checkpoint and log."""
    import os

    from .checkpoint import checkpoint_save
    from .data import load_split_bags, read_manifest

    entries = read_manifest(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    train_bags, train_labels = load_split_bags(entries, train_cfg.train_split, base_dir)
    val_bags, val_labels = (None, None)
    if train_cfg.val_split:
        val_bags, val_labels = load_split_bags(entries, train_cfg.val_split, base_dir)

    rows: list[str] = []
    params = fit_model(train_bags, train_labels, model_cfg, train_cfg, seed,
                       val_bags, val_labels, rows)
    checkpoint_save(params, ckpt_path)
    if log_path:
        header = "epoch\tlr\ttrain_loss\ttrain_acc"
        if val_bags:
            header += "\tval_loss\tval_acc"
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(row + "\n")
    return params
