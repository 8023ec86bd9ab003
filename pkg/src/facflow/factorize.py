"""Encoding observations to latent codes and mean-shift factor manipulation.

Converting a sample from class c1 to class c2 of a factor moves its latent
code by the difference of the factor's empirical class means and maps the
result back through the flow:

    x' = f(f^{-1}(x) + shift),  shift = mean[c2] - mean[c1]

For a factorized prior the shift touches only the factor's partial
dimensions, so the other factors' partial codes are bit-identical before and
after.  For whole-code priors (standard / single-labelling baselines) the
empirical means span all dimensions and the shift is full-dimensional.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .flow import FlowModel
from .priors import PriorSpec


class EncodeResult(NamedTuple):
    z: np.ndarray
    partials: dict[str, np.ndarray]


def encode(model: FlowModel, spec: PriorSpec, x) -> EncodeResult:
    """Exact latent code(s) z = f^{-1}(x) plus per-factor partial codes.

    Partial codes are slices of z per the prior's latent partition; for the
    standard regime the partials dict is empty.
    """
    z, _ = model.inverse(x, training=False)
    partials = {}
    if spec.partition is not None:
        arr = z if z.ndim == 2 else z[None, :]
        for name in spec.partition.factor_names:
            part = arr[:, spec.partition.slice_of(name)]
            partials[name] = part if z.ndim == 2 else part[0]
    return EncodeResult(z, partials)


def decode(model: FlowModel, z):
    return model.forward(z, training=False)


@dataclass
class ClassMeanTable:
    """Empirical per-class means of encoded latent codes for one factor.

    ``means`` rows are partial-width for factorized priors (``full_dim``
    False, applying on ``latent_slice``) and full-D otherwise.  Classes with
    count zero have undefined mean rows and are rejected by manipulate().
    """

    factor: str
    means: np.ndarray          # (K, width)
    counts: np.ndarray         # (K,) int64
    full_dim: bool
    latent_slice: slice

    def require_class(self, c: int):
        k = self.means.shape[0]
        if not 0 <= c < k:
            raise ValidationError(
                f"class {c} out of range for factor {self.factor!r} (0..{k - 1})")
        if self.counts[c] == 0:
            raise ValidationError(
                f"class {c} of factor {self.factor!r} has no samples in the mean table")


def class_means(model: FlowModel, spec: PriorSpec, dataset, factor: str) -> ClassMeanTable:
    """Arithmetic mean of encoded codes per class of ``factor``.

    Uses the factor's partial dimensions for factorized priors and the full
    code otherwise.  Empty classes are reported via a zero count.
    """
    if factor not in dataset.labels:
        raise ValidationError(f"dataset has no labels for factor {factor!r}")
    z, _ = model.inverse(dataset.features, training=False)
    if spec.regime == "factorial":
        sl = spec.partition.slice_of(factor)
        full_dim = False
    else:
        sl = slice(0, model.dim)
        full_dim = True
    cols = z[:, sl]
    k = int(dataset.class_counts[factor])
    lab = dataset.labels[factor]
    sums = np.zeros((k, cols.shape[1]))
    np.add.at(sums, lab, cols)
    counts = np.bincount(lab, minlength=k).astype(np.int64)
    means = np.zeros_like(sums)
    nonzero = counts > 0
    means[nonzero] = sums[nonzero] / counts[nonzero, None]
    return ClassMeanTable(factor=factor, means=means, counts=counts,
                          full_dim=full_dim, latent_slice=sl)


def manipulate(model: FlowModel, table: ClassMeanTable, x,
               from_class: int, to_class: int, return_codes: bool = False):
    """Convert sample(s) from one class of the table's factor to another.

    Returns x'; with return_codes=True also the original and shifted latent
    codes, whose entries outside the shifted slice are bit-identical.
    """
    table.require_class(from_class)
    table.require_class(to_class)
    z, _ = model.inverse(x, training=False)
    shift = table.means[to_class] - table.means[from_class]
    z_shifted = z.copy()
    if z.ndim == 1:
        z_shifted[table.latent_slice] += shift
    else:
        z_shifted[:, table.latent_slice] += shift
    x_out = model.forward(z_shifted, training=False)
    if return_codes:
        return x_out, z, z_shifted
    return x_out


CODES_HEADER_PREFIX = "# facflow-codes v1"


def export_codes(model: FlowModel, spec: PriorSpec, dataset, path,
                 config_hash: str | None = None):
    """Write ids, labels, and full latent codes as decimal text.

    Line 1 is a metadata comment (dimension, factors, partition for
    factorized priors, optional producing-config hash); line 2 the column
    header ``id,<factor...>,z_0..z_{D-1}``; then one row per sample with
    17-significant-digit values, which reload bit-exactly.  Partial codes
    are the contiguous column ranges given by the partition.
    """
    names = dataset.factor_names
    meta = [CODES_HEADER_PREFIX, f"D={model.dim}",
            "factors=" + ",".join(f"{n}:{dataset.class_counts[n]}" for n in names)]
    if spec.partition is not None:
        meta.append("partition=" + ",".join(
            f"{n}:{spec.partition.width(n)}" for n in spec.partition.factor_names))
    if config_hash:
        meta.append(f"config={config_hash}")
    if dataset.n > 0:
        z, _ = model.inverse(dataset.features, training=False)
    else:
        z = np.zeros((0, model.dim))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("; ".join(meta) + "\n")
        fh.write(",".join(["id"] + names + [f"z_{d}" for d in range(model.dim)]) + "\n")
        for i in range(dataset.n):
            cols = [str(int(dataset.ids[i]))]
            cols += [str(int(dataset.labels[name][i])) for name in names]
            cols += [format(v, ".17g") for v in z[i]]
            fh.write(",".join(cols) + "\n")
    return path


class CodesFile(NamedTuple):
    ids: np.ndarray
    labels: dict[str, np.ndarray]
    codes: np.ndarray
    partition_widths: dict[str, int] | None


def read_codes(path) -> CodesFile:
    """Load a codes file written by export_codes, bit-exactly."""
    from .errors import DataFormatError

    with open(path, "r", encoding="utf-8") as fh:
        meta_line = fh.readline().strip()
        header = fh.readline().strip()
        if not meta_line.startswith(CODES_HEADER_PREFIX):
            raise DataFormatError("not a codes file (missing metadata line)")
        partition = None
        for part in meta_line.split(";")[1:]:
            part = part.strip()
            if part.startswith("partition="):
                partition = {}
                for item in part[len("partition="):].split(","):
                    name, width = item.split(":")
                    partition[name] = int(width)
        columns = header.split(",")
        n_z = sum(1 for c in columns if c.startswith("z_"))
        names = columns[1:len(columns) - n_z]
        ids, labels, rows = [], {name: [] for name in names}, []
        for line in fh:
            if not line.strip():
                continue
            fields = line.strip().split(",")
            if len(fields) != len(columns):
                raise DataFormatError("ragged row in codes file")
            ids.append(int(fields[0]))
            for j, name in enumerate(names):
                labels[name].append(int(fields[1 + j]))
            rows.append([float(v) for v in fields[1 + len(names):]])
    return CodesFile(
        ids=np.asarray(ids, dtype=np.int64),
        labels={k: np.asarray(v, dtype=np.int64) for k, v in labels.items()},
        codes=np.asarray(rows, dtype=np.float64).reshape(len(rows), n_z),
        partition_widths=partition,
    )
