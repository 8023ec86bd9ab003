"""Flat parameter storage shared by the flow layers and the prior means.

All trainable parameters of a model live in one contiguous float64 vector;
layers address their blocks by name and work on reshaped views.  Gradient /
optimizer-moment buffers use the same layout, so a gradient is just another
flat vector and finite-difference checks can perturb single entries of
``store.flat`` directly.

Registration is two-phase: ``add`` declares named blocks, ``finalize``
allocates the backing vector.  After finalize the vector must only be
mutated in place (``flat[:] = ...``) so that existing views stay valid.
"""

from __future__ import annotations

import math

import numpy as np


class ParameterStore:
    def __init__(self):
        self._layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._order: list[str] = []
        self._size = 0
        self.flat: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self._size

    @property
    def names(self) -> list[str]:
        return list(self._order)

    @property
    def finalized(self) -> bool:
        return self.flat is not None

    def add(self, name: str, shape: tuple[int, ...]) -> None:
        if self.flat is not None:
            raise RuntimeError("cannot add parameters after finalize()")
        if name in self._layout:
            raise ValueError(f"duplicate parameter name: {name!r}")
        shape = tuple(int(s) for s in shape)
        self._layout[name] = (self._size, shape)
        self._order.append(name)
        self._size += math.prod(shape)

    def finalize(self) -> None:
        if self.flat is not None:
            raise RuntimeError("finalize() called twice")
        self.flat = np.zeros(self._size, dtype=np.float64)

    def view(self, name: str, buf: np.ndarray | None = None) -> np.ndarray:
        """Shaped view of block ``name`` inside ``buf`` (default: the values)."""
        offset, shape = self._layout[name]
        if buf is None:
            if self.flat is None:
                raise RuntimeError("store not finalized")
            buf = self.flat
        n = math.prod(shape)
        return buf[offset:offset + n].reshape(shape)

    def slice_of(self, name: str) -> slice:
        offset, shape = self._layout[name]
        return slice(offset, offset + math.prod(shape))

    def zeros(self) -> np.ndarray:
        """Fresh flat buffer with this store's layout (for grads, moments)."""
        return np.zeros(self._size, dtype=np.float64)

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.shape != (self._size,):
            raise ValueError(
                f"flat vector has {values.size} entries, store holds {self._size}"
            )
        self.flat[:] = values
