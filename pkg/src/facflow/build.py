"""Construction of a flow model and its prior over one shared parameter store."""

from __future__ import annotations

import numpy as np

from .flow import FlowModel
from .params import ParameterStore
from .priors import LatentPartition, PriorSpec


def build_system(dim: int, n_blocks: int = 6, hidden: int = 64,
                 regime: str = "standard",
                 partition: LatentPartition | None = None,
                 class_counts: dict | None = None,
                 seed: int = 0) -> tuple[FlowModel, PriorSpec]:
    """Flow model + prior sharing one flat parameter vector, seeded.

    The shared store is what lets the optimizer update flow parameters and
    class means jointly and keeps checkpoints a single contiguous payload.
    """
    store = ParameterStore()
    model = FlowModel(dim, n_blocks, hidden, store)
    if regime == "standard":
        spec = PriorSpec.standard(dim)
    else:
        spec = PriorSpec(regime, dim, partition, class_counts, store)
    store.finalize()
    model.bind()
    spec.bind()
    rng = np.random.default_rng(seed)
    model.init_params(rng)
    spec.init_params(rng)
    return model, spec
