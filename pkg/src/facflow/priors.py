"""Latent priors: standard Gaussian, class-conditional, and factorized.

Three regimes over a latent code z of length D, all with identity covariance:

  standard        z ~ N(0, I)
  discriminative  z ~ N(mean[y], I), one mean per class of a single labelling
  factorial       z splits into contiguous partial codes, one per information
                  factor; each partial code has its own class-conditional
                  Gaussian, and the full prior is their product

The discriminative regime is represented internally as a single factor
spanning all D dimensions, so every regime reduces to "sum of per-factor
partial log-densities" (the standard regime has no factors and mean zero).

Class means are trainable and live in the same flat parameter store as the
flow parameters when built through :func:`facflow.build.build_system`.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .params import ParameterStore

LOG_TWO_PI = float(np.log(2.0 * np.pi))

REGIMES = ("standard", "discriminative", "factorial")


class LatentPartition:
    """Ordered split of the latent code into contiguous per-factor slices."""

    def __init__(self, factor_names, dims):
        factor_names = list(factor_names)
        dims = [int(d) for d in dims]
        if len(factor_names) != len(dims):
            raise ValidationError("factor_names and dims must have equal length")
        if len(factor_names) == 0:
            raise ValidationError("partition needs at least one factor")
        if len(set(factor_names)) != len(factor_names):
            raise ValidationError("duplicate factor names in partition")
        if any(d < 1 for d in dims):
            raise ValidationError("every partial-code width must be >= 1")
        self.factor_names = factor_names
        self.dims = dims
        self._slices = {}
        start = 0
        for name, d in zip(factor_names, dims):
            self._slices[name] = slice(start, start + d)
            start += d

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def slice_of(self, factor: str) -> slice:
        try:
            return self._slices[factor]
        except KeyError:
            raise ValidationError(f"unknown factor {factor!r}; "
                                  f"have {self.factor_names}") from None

    def width(self, factor: str) -> int:
        s = self.slice_of(factor)
        return s.stop - s.start

    def check_dim(self, dim: int):
        if self.total_dim != dim:
            raise ValidationError(
                f"partition widths sum to {self.total_dim}, latent dim is {dim}")

    def __repr__(self):
        parts = ", ".join(f"{n}:{d}" for n, d in zip(self.factor_names, self.dims))
        return f"LatentPartition({parts})"


class PriorSpec:
    """Prior regime plus per-factor class-mean tables (identity covariance)."""

    def __init__(self, regime: str, dim: int, partition: LatentPartition | None,
                 class_counts: dict | None, store: ParameterStore | None):
        if regime not in REGIMES:
            raise ValidationError(f"unknown prior regime {regime!r}")
        self.regime = regime
        self.dim = int(dim)
        self.partition = partition
        self.class_counts = dict(class_counts) if class_counts else {}
        self.store = store
        if regime == "standard":
            if partition is not None and partition.total_dim != dim:
                partition.check_dim(dim)
            return
        if partition is None:
            raise ValidationError(f"{regime} regime needs a latent partition")
        partition.check_dim(dim)
        for name in partition.factor_names:
            if name not in self.class_counts:
                raise ValidationError(f"missing class count for factor {name!r}")
            if self.class_counts[name] < 1:
                raise ValidationError(f"factor {name!r} needs at least one class")
        if store is None:
            raise ValidationError("class-conditional priors need a parameter store")
        for name in partition.factor_names:
            store.add(f"prior.{name}.means",
                      (self.class_counts[name], partition.width(name)))

    @classmethod
    def standard(cls, dim: int) -> "PriorSpec":
        return cls("standard", dim, None, None, None)

    @classmethod
    def create(cls, regime: str, dim: int, partition: LatentPartition | None = None,
               class_counts: dict | None = None,
               seed: int | np.random.Generator = 0) -> "PriorSpec":
        """Self-contained spec with its own finalized store and seeded means."""
        if regime == "standard":
            return cls.standard(dim)
        store = ParameterStore()
        spec = cls(regime, dim, partition, class_counts, store)
        store.finalize()
        spec.bind()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        spec.init_params(rng)
        return spec

    @property
    def trainable(self) -> bool:
        return self.regime != "standard"

    @property
    def factor_names(self) -> list[str]:
        return [] if self.partition is None else list(self.partition.factor_names)

    def bind(self):
        self.means = {}
        if self.regime == "standard":
            return
        for name in self.partition.factor_names:
            self.means[name] = self.store.view(f"prior.{name}.means")

    def init_params(self, rng: np.random.Generator):
        # Means start i.i.d. standard normal.
        for name in self.factor_names:
            self.means[name][:] = rng.normal(0.0, 1.0, self.means[name].shape)

    def _check_labels(self, labels, n: int):
        if self.regime == "standard":
            return {}
        if labels is None:
            raise ValidationError(f"{self.regime} prior needs labels")
        out = {}
        for name in self.partition.factor_names:
            if name not in labels:
                raise ValidationError(f"missing labels for factor {name!r}")
            lab = np.asarray(labels[name])
            if lab.shape != (n,):
                raise ValidationError(
                    f"labels for {name!r} must have shape ({n},), got {lab.shape}")
            k = self.class_counts[name]
            if lab.min(initial=0) < 0 or lab.max(initial=0) >= k:
                raise ValidationError(
                    f"label out of range for factor {name!r} (valid: 0..{k - 1})")
            out[name] = lab.astype(np.int64)
        return out

    def mean_rows(self, labels, n: int) -> np.ndarray:
        """Full-D prior mean for each sample's label combination."""
        M = np.zeros((n, self.dim))
        lab = self._check_labels(labels, n)
        for name in self.factor_names:
            M[:, self.partition.slice_of(name)] = self.means[name][lab[name]]
        return M


def _gauss_logpdf_rows(diff: np.ndarray) -> np.ndarray:
    # log N(z; mu, I) with diff = z - mu, per row.
    w = diff.shape[1]
    return -0.5 * w * LOG_TWO_PI - 0.5 * np.einsum("ij,ij->i", diff, diff)


def log_prior(spec: PriorSpec, z, labels=None):
    """Per-sample log prior density: sum of the per-factor partial terms."""
    Z = np.asarray(z, dtype=np.float64)
    single = Z.ndim == 1
    if single:
        Z = Z[None, :]
        labels = None if labels is None else {
            k: np.atleast_1d(v) for k, v in labels.items()}
    if Z.shape[1] != spec.dim:
        raise ValidationError(f"latent dim mismatch: got {Z.shape[1]}, spec has {spec.dim}")
    out = _gauss_logpdf_rows(Z - spec.mean_rows(labels, Z.shape[0]))
    return float(out[0]) if single else out


class LogLikelihood(NamedTuple):
    total: np.ndarray | float
    prior: np.ndarray | float
    entropy: np.ndarray | float


def log_likelihood(model, spec: PriorSpec, x, labels=None) -> LogLikelihood:
    """Exact log p(x) = log prior(f^{-1}(x)) + log|det d f^{-1}(x)/dx|.

    Evaluated with frozen statistics (inference mode).  The prior and entropy
    terms are returned separately alongside their sum.
    """
    z, log_det = model.inverse(x, training=False)
    prior = log_prior(spec, z, labels)
    return LogLikelihood(prior + log_det, prior, log_det)


def prior_grad_means(spec: PriorSpec, z_batch, labels_batch) -> dict:
    """Gradient of sum_i log prior(z_i) w.r.t. each factor's class means.

    For class y of factor f this is sum over samples labelled y of
    (z_i^f - mean_y); classes with no samples get a zero row.
    """
    if spec.regime == "standard":
        return {}
    Z = np.asarray(z_batch, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ValidationError("z_batch must be a nonempty (N, D) matrix")
    lab = spec._check_labels(labels_batch, Z.shape[0])
    grads = {}
    for name in spec.factor_names:
        sl = spec.partition.slice_of(name)
        resid = Z[:, sl] - spec.means[name][lab[name]]
        g = np.zeros_like(spec.means[name])
        np.add.at(g, lab[name], resid)
        grads[name] = g
    return grads
