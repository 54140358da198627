"""Deterministic seed derivation.

Every run owns a single root seed; each component derives its own stream
through a fixed name table so adding a component never shifts the streams
of existing ones.
"""

import numpy as np

# Fixed component ids. Append only; never renumber.
_STREAMS = {
    "dataset": 0,
    "fit": 1,
    "model-init": 2,
    "train": 3,
    "eval": 4,
    "rollout": 5,
    "noise": 6,
    "fusion": 7,
    "encoder": 8,
    "validation": 9,
}


def component_rng(root_seed: int, component: str, index: int = 0) -> np.random.Generator:
    """Return the deterministic generator for one component stream.

    Args:
        root_seed: the run's single root seed.
        component: name from the fixed stream table.
        index: sub-stream index, e.g. an episode number.

    Raises:
        KeyError: unknown component name (guards against silent stream reuse).
    """
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(_STREAMS[component], index))
    return np.random.default_rng(ss)
