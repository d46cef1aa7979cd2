"""Minibatch maximum-likelihood / ELBO training with per-group Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .config import TrainingConfig
from .mechanisms import AmortisedMechanism, GumbelMechanism
from .numerics import Adam
from .scm import Scm
from .transforms import Preprocessing

__all__ = ["TrainResult", "make_optimizer", "evaluate", "fit", "initialise_from_data", "snapshot", "restore"]


@dataclass
class TrainResult:
    step: int
    best_epoch: int
    best_val: float
    history: list = field(default_factory=list)
    best_params: dict = field(default_factory=dict)


def _group_of(mech) -> str:
    if isinstance(mech, AmortisedMechanism):
        return "amortised"
    if isinstance(mech, GumbelMechanism):
        return "discrete"
    return "flow"


def make_optimizer(scm: Scm, lr: Mapping[str, float], nodes=None) -> Adam:
    groups: dict[str, tuple[list, float]] = {}
    for name in scm.order:
        if nodes is not None and name not in nodes:
            continue
        mech = scm.mechanism(name)
        g = _group_of(mech)
        params, _ = groups.setdefault(g, ([], lr[g]))
        params.extend(mech.parameters())
    return Adam(groups)


def snapshot(scm: Scm) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in scm.named_tensors().items()}


def restore(scm: Scm, params: Mapping[str, np.ndarray]) -> None:
    tensors = scm.named_tensors()
    for k, v in params.items():
        tensors[k].data[...] = v


def initialise_from_data(scm: Scm, obs: Mapping[str, np.ndarray]) -> None:
    """Start each image decoder at the mean training image in logit space."""
    for name in scm.order:
        mech = scm.mechanism(name)
        if isinstance(mech, AmortisedMechanism) and name in obs:
            pre: Preprocessing = mech.preprocessing
            mean_logit = pre.inverse(np.asarray(obs[name], dtype=float).reshape(len(obs[name]), -1)).data.mean(axis=0)
            mech.decoder.layers[-1].bias.data[...] = mean_logit


def _batches(obs: Mapping[str, np.ndarray], idx: np.ndarray, size: int):
    for s in range(0, len(idx), size):
        b = idx[s : s + size]
        yield {k: v[b] for k, v in obs.items()}


def evaluate(scm: Scm, obs: Mapping[str, np.ndarray], particles: int = 4, seed: int = 0, nodes=None, batch: int = 1000) -> dict[str, float]:
    """Mean per-node objective on ``obs`` (exact log-likelihood or ELBO)."""
    rng = np.random.default_rng([seed, 99])
    n = len(next(iter(obs.values())))
    sums: dict[str, float] = {}
    for part in _batches(obs, np.arange(n), batch):
        for k, v in scm.node_objectives(part, rng, particles, nodes=nodes).items():
            sums[k] = sums.get(k, 0.0) + float(v.data.sum())
    return {k: v / n for k, v in sums.items()}


def fit(
    scm: Scm,
    train: Mapping[str, np.ndarray],
    val: Mapping[str, np.ndarray] | None,
    cfg: TrainingConfig,
    epochs: int | None = None,
    optimizer: Adam | None = None,
    nodes=None,
    start_step: int = 0,
    log: Callable[[str], None] | None = None,
    restore_best: bool = True,
) -> TrainResult:
    """Train ``nodes`` (default: all) by maximising the summed node objectives.

    The validation objective is tracked every epoch; with ``restore_best``
    the parameters of the best epoch are put back at the end.
    """
    epochs = cfg.epochs if epochs is None else int(epochs)
    nodes = list(scm.order if nodes is None else nodes)
    needed = [k for k in scm.order if k in scm.with_parents(nodes)]
    train = {k: np.asarray(train[k], dtype=float) for k in needed}
    val = None if val is None else {k: np.asarray(val[k], dtype=float) for k in needed}
    optimizer = optimizer or make_optimizer(scm, cfg.lr, nodes)
    n = len(train[needed[0]])
    rng = np.random.default_rng([cfg.seed, 1, start_step])
    step = start_step
    history = []
    best_val, best_epoch, best = -np.inf, -1, snapshot(scm)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for batch in _batches(train, perm, cfg.batch_size):
            terms = scm.node_objectives(batch, rng, cfg.particles, nodes=nodes)
            total = None
            for v in terms.values():
                total = v if total is None else total + v
            loss = -total.mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(loss.item())
        entry = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses))}
        if val is not None:
            v = evaluate(scm, val, cfg.particles, cfg.seed, nodes)
            entry["val"] = v
            entry["val_total"] = float(sum(v.values()))
            if entry["val_total"] > best_val:
                best_val, best_epoch, best = entry["val_total"], epoch, snapshot(scm)
        history.append(entry)
        if log:
            extra = f" val={entry['val_total']:.4f}" if val is not None else ""
            log(f"epoch {epoch + 1}/{epochs} loss={entry['train_loss']:.4f}{extra}")
    if val is None or best_epoch < 0:
        best = snapshot(scm)
        best_val = float("nan")
    elif restore_best:
        restore(scm, best)
    return TrainResult(step, best_epoch, best_val, history, best)
