"""Labeled datasets: ingestion, persistence, and a synthetic generator.

The synthetic generator draws from a linear two-(or more-)factor model with
known ground truth: per factor f a loading matrix M_f and per-class latent
means; a sample of cell (y_1, ..., y_F) is

    x = sum_f M_f v_f + noise * eps,   v_f ~ N(mean_{f, y_f}, I),  eps ~ N(0, I)

which makes population moments analytic (cell covariance is
sum_f M_f M_f^T + diag(noise)^2) and gives the benchmark an exactly
factorized ground truth.

Dataset file format (text):

    factorial-dataset v1; D=<int>; factors=<name:count,...>[; encoding=binary][; config=<hex>]
    <id>,<label per factor>,<D feature values>          one sample per line

Feature values are written with 17 significant digits, which round-trips
IEEE-754 doubles exactly.  The binary variant keeps the same header line and
then stores, little-endian: uint64 sample count, then per sample one int64
id, one int64 per factor label, and D float64 features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ValidationError

HEADER_PREFIX = "factorial-dataset v1"


@dataclass
class LabeledDataset:
    """Feature matrix with one integer label per factor per sample."""

    features: np.ndarray                      # (N, D) float64
    labels: dict[str, np.ndarray]             # factor -> (N,) int64
    class_counts: dict[str, int]
    ids: np.ndarray | None = None             # (N,) int64; default 0..N-1

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValidationError("features must be an (N, D) matrix")
        n = self.features.shape[0]
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")
        self.labels = {k: np.asarray(v, dtype=np.int64) for k, v in self.labels.items()}
        for name, lab in self.labels.items():
            if lab.shape != (n,):
                raise ValidationError(f"labels for {name!r} must have length {n}")
            if name not in self.class_counts:
                raise ValidationError(f"no class count for factor {name!r}")
            k = int(self.class_counts[name])
            if n > 0 and (lab.min() < 0 or lab.max() >= k):
                raise ValidationError(
                    f"label out of range for factor {name!r} (valid: 0..{k - 1})")
        if set(self.class_counts) != set(self.labels):
            raise ValidationError("class_counts and labels name different factors")
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (n,):
                raise ValidationError("ids must have one entry per sample")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def factor_names(self) -> list[str]:
        return list(self.labels.keys())

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            features=self.features[idx],
            labels={k: v[idx] for k, v in self.labels.items()},
            class_counts=dict(self.class_counts),
            ids=self.ids[idx],
        )


@dataclass
class SyntheticSpec:
    """Ground-truth configuration of the linear factor generator."""

    dim_obs: int
    factor_names: list[str]
    class_counts: dict[str, int]
    latent_widths: dict[str, int]
    loadings: dict[str, np.ndarray]           # factor -> (dim_obs, width)
    class_means: dict[str, np.ndarray]        # factor -> (K, width)
    noise: np.ndarray                         # (dim_obs,) diagonal, > 0
    seed: int = 0

    def __post_init__(self):
        self.noise = np.asarray(self.noise, dtype=np.float64)
        if self.noise.shape != (self.dim_obs,):
            raise ValidationError("noise must have one entry per observed dim")
        if np.any(self.noise <= 0.0):
            raise ValidationError("noise diagonal entries must be positive")
        for name in self.factor_names:
            w = self.latent_widths[name]
            M = np.asarray(self.loadings[name], dtype=np.float64)
            if M.shape != (self.dim_obs, w):
                raise ValidationError(f"loading matrix for {name!r} must be "
                                      f"({self.dim_obs}, {w})")
            if w > 0 and np.linalg.matrix_rank(M) < w:
                raise ValidationError(f"loading matrix for {name!r} is rank-deficient")
            self.loadings[name] = M
            mu = np.asarray(self.class_means[name], dtype=np.float64)
            if mu.shape != (self.class_counts[name], w):
                raise ValidationError(f"class means for {name!r} must be "
                                      f"({self.class_counts[name]}, {w})")
            self.class_means[name] = mu

    @classmethod
    def random(cls, dim_obs: int = 16, class_counts: dict | None = None,
               latent_widths: dict | None = None, noise_scale: float = 0.1,
               mean_std: float = 2.0, seed: int = 0) -> "SyntheticSpec":
        """Seeded random instance; the desk-scale default is 16 dims, 5x5 classes."""
        if class_counts is None:
            class_counts = {"factor_a": 5, "factor_b": 5}
        if latent_widths is None:
            latent_widths = {name: 4 for name in class_counts}
        names = list(class_counts.keys())
        rng = np.random.default_rng(seed)
        loadings = {}
        class_means = {}
        for name in names:
            w = latent_widths[name]
            loadings[name] = rng.normal(0.0, 1.0, (dim_obs, w))
            class_means[name] = rng.normal(0.0, mean_std, (class_counts[name], w))
        return cls(dim_obs=dim_obs, factor_names=names,
                   class_counts=dict(class_counts),
                   latent_widths=dict(latent_widths),
                   loadings=loadings, class_means=class_means,
                   noise=np.full(dim_obs, float(noise_scale)), seed=seed)


def generate_synthetic(spec: SyntheticSpec, n_per_cell: int,
                       seed: int | None = None, return_latents: bool = False):
    """Draw n_per_cell samples from every class-combination cell.

    Deterministic given the seed (defaults to spec.seed).  Cells are visited
    in lexicographic label order, so label marginals are exactly uniform over
    the grid.  With return_latents=True the per-factor latent draws and the
    noise draws are returned alongside, for oracle checks.
    """
    if n_per_cell < 1:
        raise ValidationError("n_per_cell must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    names = spec.factor_names
    grids = np.meshgrid(*[np.arange(spec.class_counts[f]) for f in names],
                        indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    n_total = cells.shape[0] * n_per_cell
    X = np.zeros((n_total, spec.dim_obs))
    labels = {name: np.zeros(n_total, dtype=np.int64) for name in names}
    latents = {name: np.zeros((n_total, spec.latent_widths[name])) for name in names}
    row = 0
    for cell in cells:
        sl = slice(row, row + n_per_cell)
        for name, cls_id in zip(names, cell):
            w = spec.latent_widths[name]
            v = spec.class_means[name][cls_id] + rng.standard_normal((n_per_cell, w))
            latents[name][sl] = v
            X[sl] += v @ spec.loadings[name].T
            labels[name][sl] = cls_id
        eps = rng.standard_normal((n_per_cell, spec.dim_obs))
        X[sl] += eps * spec.noise
        row += n_per_cell
    dataset = LabeledDataset(features=X, labels=labels,
                             class_counts=dict(spec.class_counts))
    if return_latents:
        return dataset, latents
    return dataset


def cell_covariance(spec: SyntheticSpec) -> np.ndarray:
    """Analytic within-cell covariance: sum_f M_f M_f^T + diag(noise)^2."""
    C = np.diag(spec.noise ** 2)
    for name in spec.factor_names:
        M = spec.loadings[name]
        C = C + M @ M.T
    return C


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _format_header(dim: int, class_counts: dict, binary: bool,
                   config_hash: str | None) -> str:
    factors = ",".join(f"{name}:{count}" for name, count in class_counts.items())
    parts = [HEADER_PREFIX, f"D={dim}", f"factors={factors}"]
    if binary:
        parts.append("encoding=binary")
    if config_hash:
        parts.append(f"config={config_hash}")
    return "; ".join(parts)


def _parse_header(line: str):
    parts = [p.strip() for p in line.strip().split(";")]
    if not parts or parts[0] != HEADER_PREFIX:
        raise DataFormatError(
            f"malformed header: expected {HEADER_PREFIX!r}, got {line.strip()!r}")
    dim = None
    class_counts = {}
    binary = False
    config_hash = None
    for part in parts[1:]:
        if "=" not in part:
            raise DataFormatError(f"malformed header field {part!r}")
        key, value = part.split("=", 1)
        if key == "D":
            try:
                dim = int(value)
            except ValueError:
                raise DataFormatError(f"malformed header: bad dimension {value!r}") from None
        elif key == "factors":
            for item in value.split(","):
                if ":" not in item:
                    raise DataFormatError(f"malformed header: bad factor {item!r}")
                name, count = item.split(":", 1)
                try:
                    class_counts[name] = int(count)
                except ValueError:
                    raise DataFormatError(
                        f"malformed header: bad class count {count!r}") from None
        elif key == "encoding":
            if value != "binary":
                raise DataFormatError(f"malformed header: unknown encoding {value!r}")
            binary = True
        elif key == "config":
            config_hash = value
        else:
            raise DataFormatError(f"malformed header: unknown field {key!r}")
    if dim is None or dim < 1:
        raise DataFormatError("malformed header: missing or invalid D")
    if not class_counts:
        raise DataFormatError("malformed header: missing factors")
    return dim, class_counts, binary, config_hash


def save_dataset(dataset: LabeledDataset, path, binary: bool = False,
                 config_hash: str | None = None):
    header = _format_header(dataset.dim, dataset.class_counts, binary, config_hash)
    names = dataset.factor_names
    if binary:
        with open(path, "wb") as fh:
            fh.write((header + "\n").encode("utf-8"))
            fh.write(np.uint64(dataset.n).tobytes())
            rec = np.empty((dataset.n, 1 + len(names)), dtype="<i8")
            rec[:, 0] = dataset.ids
            for j, name in enumerate(names):
                rec[:, 1 + j] = dataset.labels[name]
            feats = np.ascontiguousarray(dataset.features, dtype="<f8")
            for i in range(dataset.n):
                fh.write(rec[i].tobytes())
                fh.write(feats[i].tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for i in range(dataset.n):
            cols = [str(int(dataset.ids[i]))]
            cols += [str(int(dataset.labels[name][i])) for name in names]
            cols += [format(v, ".17g") for v in dataset.features[i]]
            fh.write(",".join(cols) + "\n")


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError("malformed header: file has no header line")
    try:
        header = raw[:nl].decode("utf-8")
    except UnicodeDecodeError:
        raise DataFormatError("malformed header: not valid UTF-8") from None
    dim, class_counts, binary, _ = _parse_header(header)
    names = list(class_counts.keys())
    body = raw[nl + 1:]
    if binary:
        return _load_binary_body(body, dim, class_counts, names)
    return _load_text_body(body.decode("utf-8"), dim, class_counts, names)


def _load_text_body(text: str, dim, class_counts, names) -> LabeledDataset:
    n_fields = 1 + len(names) + dim
    ids, labels, rows = [], {name: [] for name in names}, []
    for lineno, line in enumerate(text.splitlines(), start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != n_fields:
            raise DataFormatError(
                f"ragged row at line {lineno}: expected {n_fields} fields, "
                f"got {len(fields)}")
        try:
            ids.append(int(fields[0]))
        except ValueError:
            raise DataFormatError(f"bad id at line {lineno}: {fields[0]!r}") from None
        for j, name in enumerate(names):
            try:
                lab = int(fields[1 + j])
            except ValueError:
                raise DataFormatError(
                    f"bad label at line {lineno} (factor {name!r}): "
                    f"{fields[1 + j]!r}") from None
            if not 0 <= lab < class_counts[name]:
                raise DataFormatError(
                    f"label out of range at line {lineno} (factor {name!r}): {lab}")
            labels[name].append(lab)
        try:
            rows.append([float(v) for v in fields[1 + len(names):]])
        except ValueError:
            raise DataFormatError(f"bad feature value at line {lineno}") from None
    feats = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return LabeledDataset(
        features=feats,
        labels={name: np.asarray(v, dtype=np.int64) for name, v in labels.items()},
        class_counts=class_counts,
        ids=np.asarray(ids, dtype=np.int64),
    )


def _load_binary_body(body: bytes, dim, class_counts, names) -> LabeledDataset:
    if len(body) < 8:
        raise DataFormatError("binary payload truncated before sample count")
    n = int(np.frombuffer(body[:8], dtype="<u8")[0])
    rec_bytes = 8 * (1 + len(names)) + 8 * dim
    expected = 8 + n * rec_bytes
    if len(body) != expected:
        raise DataFormatError(
            f"binary payload has {len(body)} bytes, expected {expected} "
            f"for {n} samples")
    ids = np.zeros(n, dtype=np.int64)
    labels = {name: np.zeros(n, dtype=np.int64) for name in names}
    feats = np.zeros((n, dim))
    off = 8
    for i in range(n):
        ints = np.frombuffer(body, dtype="<i8", count=1 + len(names), offset=off)
        ids[i] = ints[0]
        for j, name in enumerate(names):
            lab = int(ints[1 + j])
            if not 0 <= lab < class_counts[name]:
                raise DataFormatError(
                    f"label out of range at record {i} (factor {name!r}): {lab}")
            labels[name][i] = lab
        off += 8 * (1 + len(names))
        feats[i] = np.frombuffer(body, dtype="<f8", count=dim, offset=off)
        off += 8 * dim
    return LabeledDataset(features=feats, labels=labels,
                          class_counts=class_counts, ids=ids)
