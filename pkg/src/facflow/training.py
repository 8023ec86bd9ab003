"""Maximum-likelihood training: exact gradients plus Adam.

The negative log-likelihood of a batch decomposes into a prior term and an
entropy (log-det) term; both are differentiated by explicit reverse-mode
accumulation through the normalizing sweep (see flow.py) and the Gaussian
prior.  No autodiff framework is involved, which is what makes the whole
gradient checkable against central finite differences.

Training is deterministic given the seed: epoch shuffles are derived from
(seed, epoch), batches reduce in a fixed order, and Adam state lives in flat
buffers aligned with the parameter store.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonInvertibleError, TrainingDivergedError, ValidationError
from .flow import FlowModel
from .priors import LOG_TWO_PI, PriorSpec


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 40
    seed: int = 0
    checkpoint_every: int = 0          # in epochs; 0 disables
    grad_clip: float | None = 5.0      # max global gradient norm; None disables

    def validate(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ValidationError("adam_epsilon must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive or None")


@dataclass
class TrainState:
    """Adam moments (aligned with the flat parameter store) plus bookkeeping."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epoch: int = 0
    best_nll: float = float("inf")
    last_nll: float = float("nan")

    @classmethod
    def fresh(cls, n_params: int) -> "TrainState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: TrainState, params: np.ndarray, grad: np.ndarray,
              config: TrainConfig):
    """One bias-corrected Adam update, in place, after optional norm clipping."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValidationError("parameter / gradient / moment shapes disagree")
    if config.grad_clip is not None:
        norm = float(np.linalg.norm(grad))
        if norm > config.grad_clip:
            grad = grad * (config.grad_clip / norm)
    state.step += 1
    state.m *= config.beta1
    state.m += (1.0 - config.beta1) * grad
    state.v *= config.beta2
    state.v += (1.0 - config.beta2) * grad * grad
    m_hat = state.m / (1.0 - config.beta1 ** state.step)
    v_hat = state.v / (1.0 - config.beta2 ** state.step)
    params -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return params, state


def nll_and_grad(model: FlowModel, spec: PriorSpec, X, labels=None,
                 training: bool = True):
    """Mean negative log-likelihood of a batch and its exact gradient.

    The gradient covers every entry of the shared flat parameter store (flow
    parameters and, for class-conditional regimes, the prior means).  With
    ``training=True`` batch-norm layers use (and differentiate through) batch
    statistics; running statistics are not touched here.

    Returns (nll, grad, parts) with parts holding the mean prior and entropy
    terms, whose sum is -nll.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("batch must be a nonempty (N, D) matrix")
    n = X.shape[0]
    Z, log_det, caches = model.normalize_cached(X, training)
    mean_rows = spec.mean_rows(labels, n)
    resid = Z - mean_rows
    prior_i = -0.5 * spec.dim * LOG_TWO_PI - 0.5 * np.einsum("ij,ij->i", resid, resid)
    nll = -float(np.mean(prior_i + log_det))
    if not np.isfinite(nll):
        raise NonInvertibleError("non-finite training loss")

    grad = model.store.zeros()
    dZ = resid / n
    dld = np.full(n, -1.0 / n)
    model.backward_from_latent(caches, dZ, dld, grad)
    if spec.trainable:
        lab = spec._check_labels(labels, n)
        for name in spec.factor_names:
            g = model.store.view(f"prior.{name}.means", grad)
            sl = spec.partition.slice_of(name)
            np.add.at(g, lab[name], -resid[:, sl] / n)
    if not np.all(np.isfinite(grad)):
        raise NonInvertibleError("non-finite gradient")
    parts = {
        "prior": float(np.mean(prior_i)),
        "entropy": float(np.mean(log_det)),
    }
    return nll, grad, parts


def evaluate_nll(model: FlowModel, spec: PriorSpec, X, labels=None,
                 training: bool = True):
    """Objective value over a full dataset as a single batch (no gradient)."""
    X = np.asarray(X, dtype=np.float64)
    Z, log_det = model.inverse(X, training=training)
    mean_rows = spec.mean_rows(labels, X.shape[0])
    resid = Z - mean_rows
    prior_i = -0.5 * spec.dim * LOG_TWO_PI - 0.5 * np.einsum("ij,ij->i", resid, resid)
    parts = {
        "prior": float(np.mean(prior_i)),
        "entropy": float(np.mean(log_det)),
    }
    return -(parts["prior"] + parts["entropy"]), parts


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # Stateless per-epoch shuffle: resuming at epoch e replays the same order.
    return np.random.default_rng([seed, epoch]).permutation(n)


def _snapshot(model: FlowModel):
    return model.store.flat.copy(), [buf.copy() for _, buf in model.buffers()]


def _restore(model: FlowModel, snap):
    flat, bufs = snap
    model.store.flat[:] = flat
    for (_, buf), saved in zip(model.buffers(), bufs):
        buf[:] = saved


def train(model: FlowModel, spec: PriorSpec, dataset, config: TrainConfig,
          state: TrainState | None = None, start_epoch: int = 0,
          on_epoch=None):
    """Adam maximum-likelihood training; returns (model, history).

    ``history`` holds one record per epoch: the full-dataset training-mode
    NLL with its prior/entropy split, evaluated at the epoch's final
    parameters (so it is a deterministic function of parameters and data).
    If the loss turns non-finite the last completed epoch's parameters are
    restored and TrainingDivergedError is raised with the partial history.

    ``state``/``start_epoch`` allow bit-identical resumption from a
    checkpoint that stored the optimizer moments.

    Batches of size 1 cannot pass through training-mode batch norm (zero
    variance), so a trailing singleton batch is dropped.
    """
    config.validate()
    X = dataset.features
    labels = dataset.labels
    n = X.shape[0]
    if n < 1:
        raise ValidationError("cannot train on an empty dataset")
    for name in spec.factor_names:
        if name not in dataset.class_counts:
            raise ValidationError(f"dataset has no labels for factor {name!r}")
        if dataset.class_counts[name] != spec.class_counts[name]:
            raise ValidationError(
                f"class count mismatch for factor {name!r}: dataset has "
                f"{dataset.class_counts[name]}, prior has {spec.class_counts[name]}")
    if state is None:
        state = TrainState.fresh(model.store.size)
    if state.m.shape != model.store.flat.shape:
        raise ValidationError("optimizer state does not match the parameter store")

    history = []
    good = _snapshot(model)
    model.set_mode("training")
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            perm = _epoch_permutation(config.seed, epoch, n)
            try:
                for lo in range(0, n, config.batch_size):
                    idx = perm[lo:lo + config.batch_size]
                    if idx.size < 2 and n > 1:
                        continue  # singleton batch: no usable batch variance
                    bl = {k: v[idx] for k, v in labels.items()}
                    _, grad, _ = nll_and_grad(model, spec, X[idx], bl, training=True)
                    model.update_running_stats()
                    adam_step(state, model.store.flat, grad, config)
                nll, parts = evaluate_nll(model, spec, X, labels, training=True)
                if not np.isfinite(nll):
                    raise NonInvertibleError("non-finite epoch NLL")
            except NonInvertibleError as err:
                _restore(model, good)
                raise TrainingDivergedError(
                    f"training diverged in epoch {epoch}: {err}",
                    history=history) from err
            record = {
                "epoch": epoch,
                "nll": nll,
                "prior": parts["prior"],
                "entropy": parts["entropy"],
                "wall": time.perf_counter() - t0,
            }
            history.append(record)
            state.epoch = epoch + 1
            state.last_nll = nll
            state.best_nll = min(state.best_nll, nll)
            good = _snapshot(model)
            if on_epoch is not None:
                on_epoch(record, state)
    finally:
        model.set_mode("inference")
    return model, history
