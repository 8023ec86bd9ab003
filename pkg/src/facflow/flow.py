"""Invertible transform stack: affine coupling and invertible batch norm.

Every layer implements the same two directions on batches of row vectors:

    generate(Z)  -> X          latent -> observation
    normalize(X) -> Z, ld      observation -> latent, plus the per-sample
                               log|det| of the Jacobian of the normalizing map

Summed over the stack, ``ld`` is the entropy term of the exact change-of-
variables log-likelihood.  A :class:`FlowModel` stores its layers in
generative order; one block is (coupling, batch norm) generatively, i.e.
(batch norm, coupling) when normalizing observations.

All arithmetic is float64.  Gradients are produced by explicit backward
rules (``backward_normalize``), not by an autodiff framework; each rule is
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import NonInvertibleError
from .params import ParameterStore

# Coupling log-scales are squashed to (-LOG_SCALE_MAX, LOG_SCALE_MAX) so the
# transform stays invertible for arbitrary parameter values.
LOG_SCALE_MAX = 2.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected a vector or a matrix of row vectors, got ndim={x.ndim}")


class TwoLayerNet:
    """Perceptron d_in -> hidden -> d_out with tanh hidden activation.

    Parameter blocks live in the shared store under ``prefix``.
    """

    def __init__(self, store: ParameterStore, prefix: str, d_in: int, hidden: int, d_out: int):
        self.store = store
        self.prefix = prefix
        self.d_in, self.hidden, self.d_out = d_in, hidden, d_out
        store.add(prefix + ".w1", (d_in, hidden))
        store.add(prefix + ".b1", (hidden,))
        store.add(prefix + ".w2", (hidden, d_out))
        store.add(prefix + ".b2", (d_out,))

    def bind(self):
        s, p = self.store, self.prefix
        self.w1 = s.view(p + ".w1")
        self.b1 = s.view(p + ".b1")
        self.w2 = s.view(p + ".w2")
        self.b2 = s.view(p + ".b2")

    def init(self, rng: np.random.Generator):
        # Small random hidden layer, zero output layer: the net starts as the
        # constant-zero map, which makes a fresh coupling layer the identity.
        self.w1[:] = rng.normal(0.0, 1.0 / np.sqrt(max(self.d_in, 1)), self.w1.shape)
        self.b1[:] = 0.0
        self.w2[:] = 0.0
        self.b2[:] = 0.0

    def forward(self, a: np.ndarray):
        h = np.tanh(a @ self.w1 + self.b1)
        out = h @ self.w2 + self.b2
        return out, (a, h)

    def backward(self, cache, dout: np.ndarray, gbuf: np.ndarray) -> np.ndarray:
        a, h = cache
        s, p = self.store, self.prefix
        gw2 = s.view(p + ".w2", gbuf)
        gw2 += h.T @ dout
        gb2 = s.view(p + ".b2", gbuf)
        gb2 += dout.sum(axis=0)
        dh_pre = (dout @ self.w2.T) * (1.0 - h * h)
        gw1 = s.view(p + ".w1", gbuf)
        gw1 += a.T @ dh_pre
        gb1 = s.view(p + ".b1", gbuf)
        gb1 += dh_pre.sum(axis=0)
        return dh_pre @ self.w1.T


def _coupling_split(dim: int, parity: int):
    """Contiguous halves; the passthrough half gets the extra dim when odd."""
    d_pass = (dim + 1) // 2
    if parity % 2 == 0:
        return slice(0, d_pass), slice(d_pass, dim)
    return slice(dim - d_pass, dim), slice(0, dim - d_pass)


class CouplingLayer:
    """Affine coupling: scale/shift half the dims as a function of the rest.

    Generative map on the transformed half:  x_t = z_t * exp(s(z_p)) + t(z_p)
    with s bounded by LOG_SCALE_MAX * tanh(.).  The normalizing Jacobian is
    triangular, so its log|det| is just -sum(s).
    """

    kind = "coupling"

    def __init__(self, store: ParameterStore, name: str, dim: int, hidden: int, mask_parity: int):
        if dim < 2:
            raise ValueError("coupling layers need dim >= 2")
        self.name = name
        self.dim = dim
        self.hidden_width = hidden
        self.mask_parity = mask_parity % 2
        self.pass_slice, self.trans_slice = _coupling_split(dim, mask_parity)
        d_pass = self.pass_slice.stop - self.pass_slice.start
        d_trans = dim - d_pass
        self.scale_net = TwoLayerNet(store, name + ".scale", d_pass, hidden, d_trans)
        self.translate_net = TwoLayerNet(store, name + ".translate", d_pass, hidden, d_trans)

    def bind(self):
        self.scale_net.bind()
        self.translate_net.bind()

    def init_params(self, rng: np.random.Generator):
        self.scale_net.init(rng)
        self.translate_net.init(rng)

    def _nets(self, a):
        raw_s, cache_s = self.scale_net.forward(a)
        th = np.tanh(raw_s)
        s = LOG_SCALE_MAX * th
        t, cache_t = self.translate_net.forward(a)
        return s, th, t, cache_s, cache_t

    def generate(self, Z: np.ndarray, training: bool = False) -> np.ndarray:
        a = Z[:, self.pass_slice]
        s, _, t, _, _ = self._nets(a)
        X = Z.copy()
        X[:, self.trans_slice] = Z[:, self.trans_slice] * np.exp(s) + t
        return X

    def normalize(self, X: np.ndarray, training: bool = False):
        Z, ld, _ = self.normalize_cached(X, training)
        return Z, ld

    def normalize_cached(self, X: np.ndarray, training: bool):
        a = X[:, self.pass_slice]
        s, th, t, cache_s, cache_t = self._nets(a)
        Z = X.copy()
        zt = (X[:, self.trans_slice] - t) * np.exp(-s)
        Z[:, self.trans_slice] = zt
        ld = -s.sum(axis=1)
        cache = (s, th, zt, cache_s, cache_t)
        return Z, ld, cache

    def backward_normalize(self, cache, dZ: np.ndarray, dld: np.ndarray, gbuf: np.ndarray):
        s, th, zt, cache_s, cache_t = cache
        dzt = dZ[:, self.trans_slice]
        dXt = dzt * np.exp(-s)
        dt = -dXt
        # z_t = (x_t - t) e^{-s}  =>  dz_t/ds = -z_t ; d(ld)/ds = -1 per dim
        ds = -dzt * zt - dld[:, None]
        draw_s = ds * LOG_SCALE_MAX * (1.0 - th * th)
        da = dZ[:, self.pass_slice].copy()
        da += self.scale_net.backward(cache_s, draw_s, gbuf)
        da += self.translate_net.backward(cache_t, dt, gbuf)
        dX = np.empty_like(dZ)
        dX[:, self.pass_slice] = da
        dX[:, self.trans_slice] = dXt
        return dX


class BatchNormLayer:
    """Invertible per-dimension batch normalization.

    Normalizing map: z = gamma * (x - m) / sqrt(v + eps) + beta, where (m, v)
    are batch statistics in training mode and the frozen running statistics
    in inference mode.  log|det| of that map is sum(log|gamma| - 0.5 log(v+eps)).
    In inference mode the layer is a fixed invertible affine map.
    """

    kind = "batchnorm"

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 momentum: float = BN_MOMENTUM, epsilon: float = BN_EPS):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.name = name
        self.dim = dim
        self.momentum = momentum
        self.epsilon = epsilon
        self.store = store
        store.add(name + ".gamma", (dim,))
        store.add(name + ".beta", (dim,))
        # Buffers, not parameters: persisted in checkpoints but never trained.
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.full(dim, 1.0 - epsilon, dtype=np.float64)
        # Batch statistics from the most recent training-mode normalize();
        # generate() in training mode inverts against these.
        self._batch_mean = None
        self._batch_var = None

    def bind(self):
        self.gamma = self.store.view(self.name + ".gamma")
        self.beta = self.store.view(self.name + ".beta")

    def init_params(self, rng: np.random.Generator):
        # gamma=1, beta=0 plus running var 1-eps make the layer an exact identity.
        self.gamma[:] = 1.0
        self.beta[:] = 0.0
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0 - self.epsilon

    def _stats(self, training: bool):
        if training:
            if self._batch_mean is None:
                raise NonInvertibleError(
                    f"{self.name}: training-mode generate() without a batch context"
                )
            return self._batch_mean, self._batch_var
        return self.running_mean, self.running_var

    def generate(self, Z: np.ndarray, training: bool = False) -> np.ndarray:
        m, v = self._stats(training)
        if np.any(self.gamma == 0.0):
            raise NonInvertibleError(f"{self.name}: gamma has a zero entry")
        return (Z - self.beta) / self.gamma * np.sqrt(v + self.epsilon) + m

    def normalize(self, X: np.ndarray, training: bool = False):
        Z, ld, _ = self.normalize_cached(X, training)
        return Z, ld

    def normalize_cached(self, X: np.ndarray, training: bool):
        if training:
            m = X.mean(axis=0)
            v = X.var(axis=0)
            self._batch_mean, self._batch_var = m, v
        else:
            m, v = self.running_mean, self.running_var
        inv_sd = 1.0 / np.sqrt(v + self.epsilon)
        xhat = (X - m) * inv_sd
        Z = self.gamma * xhat + self.beta
        ld_scalar = np.sum(np.log(np.abs(self.gamma)) - 0.5 * np.log(v + self.epsilon))
        ld = np.full(X.shape[0], ld_scalar)
        cache = (X, m, v, inv_sd, xhat, training)
        return Z, ld, cache

    def backward_normalize(self, cache, dZ: np.ndarray, dld: np.ndarray, gbuf: np.ndarray):
        X, m, v, inv_sd, xhat, training = cache
        n = X.shape[0]
        s = self.store
        dgamma = s.view(self.name + ".gamma", gbuf)
        dbeta = s.view(self.name + ".beta", gbuf)
        # d(ld)/d(gamma) = 1/gamma for every sample in the batch.
        dgamma += (dZ * xhat).sum(axis=0) + dld.sum() / self.gamma
        dbeta += dZ.sum(axis=0)
        dxhat = dZ * self.gamma
        if not training:
            return dxhat * inv_sd
        # Training mode differentiates through the batch statistics, including
        # the log-det's dependence on the batch variance.
        S = v + self.epsilon
        dvar = -0.5 * (inv_sd / S) * (dxhat * (X - m)).sum(axis=0)
        dvar += -0.5 * dld.sum() / S
        dmean = -inv_sd * dxhat.sum(axis=0)
        dX = dxhat * inv_sd + (2.0 / n) * (X - m) * dvar + dmean / n
        return dX

    def update_running(self):
        """Fold the most recent batch statistics into the running statistics."""
        if self._batch_mean is None:
            raise RuntimeError(f"{self.name}: no batch statistics to fold in")
        mom = self.momentum
        self.running_mean *= 1.0 - mom
        self.running_mean += mom * self._batch_mean
        self.running_var *= 1.0 - mom
        self.running_var += mom * self._batch_var


class FlowModel:
    """Stack of 2*B invertible layers (B blocks) over vectors of length dim.

    ``layers`` is in generative order: forward() composes them left to right
    on latent codes, inverse() walks them right to left with each layer's
    normalizing map.  All parameters live in ``store.flat``.
    """

    def __init__(self, dim: int, n_blocks: int, hidden: int, store: ParameterStore):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        if n_blocks < 1:
            raise ValueError("need at least one block")
        self.dim = dim
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.store = store
        self.mode = "inference"
        self.layers = []
        for b in range(n_blocks):
            self.layers.append(CouplingLayer(store, f"block{b}.coupling", dim, hidden, b))
            self.layers.append(BatchNormLayer(store, f"block{b}.batchnorm", dim))

    @classmethod
    def create(cls, dim: int, n_blocks: int = 6, hidden: int = 64,
               seed: int | np.random.Generator = 0) -> "FlowModel":
        """Build a model with its own parameter store, identity-initialized."""
        store = ParameterStore()
        model = cls(dim, n_blocks, hidden, store)
        store.finalize()
        model.bind()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        model.init_params(rng)
        return model

    def bind(self):
        for layer in self.layers:
            layer.bind()

    def init_params(self, rng: np.random.Generator):
        for layer in self.layers:
            layer.init_params(rng)

    def set_mode(self, mode: str):
        if mode not in ("training", "inference"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode

    @property
    def training(self) -> bool:
        return self.mode == "training"

    def _check_dim(self, X):
        if X.shape[1] != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}, got {X.shape[1]}")

    def forward(self, z, training: bool | None = None):
        """Generative map f: latent code(s) -> observation(s)."""
        Z, single = _as_batch(z)
        self._check_dim(Z)
        training = self.training if training is None else training
        X = Z
        for layer in self.layers:
            X = layer.generate(X, training=training)
        return X[0] if single else X

    def inverse(self, x, training: bool | None = None):
        """Normalizing map f^{-1} with the exact entropy term.

        Returns (z, log|det d f^{-1}(x)/dx|); log_det has one entry per row.
        """
        X, single = _as_batch(x)
        self._check_dim(X)
        training = self.training if training is None else training
        Z = X
        log_det = np.zeros(X.shape[0])
        for idx in range(len(self.layers) - 1, -1, -1):
            Z, ld = self.layers[idx].normalize(Z, training=training)
            if not np.all(np.isfinite(Z)) or not np.all(np.isfinite(ld)):
                raise NonInvertibleError(
                    f"non-finite values while normalizing through layer {idx} "
                    f"({self.layers[idx].name})", layer_index=idx)
            log_det += ld
        if single:
            return Z[0], float(log_det[0])
        return Z, log_det

    def normalize_cached(self, X: np.ndarray, training: bool):
        """Normalizing sweep keeping per-layer caches (for backprop)."""
        self._check_dim(X)
        Z = X
        log_det = np.zeros(X.shape[0])
        caches = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            Z, ld, caches[idx] = self.layers[idx].normalize_cached(Z, training)
            if not np.all(np.isfinite(Z)) or not np.all(np.isfinite(ld)):
                raise NonInvertibleError(
                    f"non-finite values while normalizing through layer {idx} "
                    f"({self.layers[idx].name})", layer_index=idx)
            log_det += ld
        return Z, log_det, caches

    def backward_from_latent(self, caches, dZ: np.ndarray, dld: np.ndarray,
                             gbuf: np.ndarray) -> np.ndarray:
        """Reverse-mode sweep through the normalizing computation.

        ``dZ`` is the loss gradient at the latent output, ``dld`` the gradient
        w.r.t. each sample's total log-det (shared by every layer, since the
        total is a plain sum).  Accumulates parameter gradients into ``gbuf``
        and returns the gradient at the observation input.
        """
        d = dZ
        for idx, layer in enumerate(self.layers):
            d = layer.backward_normalize(caches[idx], d, dld, gbuf)
            if not np.all(np.isfinite(d)):
                raise NonInvertibleError(
                    f"non-finite gradient below layer {idx} ({layer.name})",
                    layer_index=idx)
        return d

    def update_running_stats(self):
        for layer in self.layers:
            if layer.kind == "batchnorm":
                layer.update_running()

    def batchnorm_layers(self):
        return [l for l in self.layers if l.kind == "batchnorm"]

    def buffers(self):
        """(name, array) pairs of non-trainable state, in declared order."""
        out = []
        for layer in self.layers:
            if layer.kind == "batchnorm":
                out.append((layer.name + ".running_mean", layer.running_mean))
                out.append((layer.name + ".running_var", layer.running_var))
        return out


def randomize_parameters(model: FlowModel, rng: np.random.Generator, scale: float = 0.5):
    """Overwrite all parameters and statistics with well-conditioned randoms.

    Used for round-trip / Jacobian testing on models far from the identity:
    coupling weights ~ N(0, scale^2); gamma is kept away from zero and the
    running variance strictly positive so the stack stays invertible.
    """
    for layer in model.layers:
        if layer.kind == "coupling":
            for net in (layer.scale_net, layer.translate_net):
                net.w1[:] = rng.normal(0.0, scale, net.w1.shape)
                net.b1[:] = rng.normal(0.0, scale, net.b1.shape)
                net.w2[:] = rng.normal(0.0, scale, net.w2.shape)
                net.b2[:] = rng.normal(0.0, scale, net.b2.shape)
        else:
            sign = rng.choice([-1.0, 1.0], size=layer.dim)
            layer.gamma[:] = sign * rng.uniform(0.5, 1.5, layer.dim)
            layer.beta[:] = rng.normal(0.0, scale, layer.dim)
            layer.running_mean[:] = rng.normal(0.0, 1.0, layer.dim)
            layer.running_var[:] = rng.uniform(0.5, 2.0, layer.dim)


def log_det_numeric(model: FlowModel, x, h: float = 1e-5) -> float:
    """Finite-difference oracle for the entropy term at a single point.

    Builds the central-difference Jacobian of f^{-1} (O(dim^2) evaluations of
    the inverse; keep dim <= 32) and returns log|det| of it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("log_det_numeric expects a single vector")
    if h <= 0:
        raise ValueError("step h must be positive")
    dim = x.shape[0]
    J = np.empty((dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        zp, _ = model.inverse(x + e)
        zm, _ = model.inverse(x - e)
        J[:, j] = (zp - zm) / (2.0 * h)
    sign, logabs = np.linalg.slogdet(J)
    if sign == 0.0 or not np.isfinite(logabs):
        raise NonInvertibleError(
            "numerical Jacobian of f^{-1} is singular (determinant rounds to zero)")
    return float(logabs)
