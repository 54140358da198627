"""Hierarchical attention mask and the learnable cross-layer KV mixer.

Both are standalone, shape-verified constructs: the mask is a boolean
matrix any toy transformer could consume, and the mixer recombines
per-layer key/value stacks without assuming anything else about the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayoutError

GROUP_ORDER = ("image", "task", "stage", "state", "fast", "action")


@dataclass(frozen=True)
class TokenGroups:
    """Token counts per group, in fixed sequence order."""

    image: int = 0
    task: int = 0
    stage: int = 0
    state: int = 0
    fast: int = 0
    action: int = 0

    def __post_init__(self):
        for name in GROUP_ORDER:
            if getattr(self, name) < 0:
                raise ConfigError(f"negative token count for group {name!r}")

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in GROUP_ORDER)

    def slices(self) -> dict:
        out, start = {}, 0
        for name in GROUP_ORDER:
            n = getattr(self, name)
            out[name] = slice(start, start + n)
            start += n
        return out


def build_mask(groups: TokenGroups) -> np.ndarray:
    """Boolean attention mask; mask[i, j] is True when query i may attend to key j.

    Rules by query group:
      image, task -> image and task only (never the noisier groups)
      stage       -> image, task, state (not other stage tokens)
      state       -> image, task, stage, state
      fast        -> the full non-action prefix, plus causal among fast
      action      -> everything except fast, bidirectional among action
    """
    s = groups.slices()
    n = groups.total
    mask = np.zeros((n, n), dtype=bool)

    for q in ("image", "task"):
        mask[s[q], s["image"]] = True
        mask[s[q], s["task"]] = True

    mask[s["stage"], s["image"]] = True
    mask[s["stage"], s["task"]] = True
    mask[s["stage"], s["state"]] = True

    for k in ("image", "task", "stage", "state"):
        mask[s["state"], s[k]] = True

    for k in ("image", "task", "stage", "state"):
        mask[s["fast"], s[k]] = True
    f = s["fast"]
    mask[f, f] = np.tril(np.ones((groups.fast, groups.fast), dtype=bool))

    for k in ("image", "task", "stage", "state", "action"):
        mask[s["action"], s[k]] = True
    return mask


def mask_to_pbm(mask: np.ndarray) -> str:
    """Plain-PBM text grid (1 = may attend) for eyeballing against a reference."""
    mask = np.asarray(mask, dtype=bool)
    lines = ["P1", f"{mask.shape[1]} {mask.shape[0]}"]
    for row in mask.astype(int):
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


class KvMixer:
    """Per-expert-layer linear recombination of the source layers' K/V stacks.

    out[j] = sum_i w[i, j] * cache[i] + b[j], with separate scalar weight
    matrices for keys and values and a per-layer (heads, head_dim) bias
    broadcast over batch and sequence. Identity-initialized, so a fresh
    mixer is a provable no-op.
    """

    def __init__(self, n_source_layers: int, n_expert_layers: int, heads: int, head_dim: int):
        if min(n_source_layers, n_expert_layers, heads, head_dim) < 1:
            raise ConfigError("all KvMixer dimensions must be >= 1")
        self.w_k = np.eye(n_source_layers, n_expert_layers)
        self.w_v = np.eye(n_source_layers, n_expert_layers)
        self.b_k = np.zeros((n_expert_layers, heads, head_dim))
        self.b_v = np.zeros((n_expert_layers, heads, head_dim))

    @property
    def n_source_layers(self) -> int:
        return self.w_k.shape[0]

    @property
    def n_expert_layers(self) -> int:
        return self.w_k.shape[1]

    @property
    def params_per_expert_layer(self) -> int:
        heads, head_dim = self.b_k.shape[1:]
        return 2 * (self.n_source_layers + heads * head_dim)

    def _mix_one(self, caches: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        caches = np.asarray(caches, dtype=np.float64)
        if caches.ndim != 5 or caches.shape[0] != self.n_source_layers:
            raise LayoutError(
                f"expected {self.n_source_layers} layer stacks of shape "
                f"(batch, seq, heads, head_dim), got array of shape {caches.shape}"
            )
        if caches.shape[3:] != self.b_k.shape[1:]:
            raise LayoutError(
                f"per-token shape {caches.shape[3:]} does not match bias shape "
                f"{self.b_k.shape[1:]}"
            )
        mixed = np.einsum("ij,ibshd->jbshd", w, caches)
        return mixed + b[:, None, None, :, :]


def mix_kv(keys, values, mixer: KvMixer):
    """Apply the mixer to matching key and value stacks; returns (keys, values)."""
    return (
        mixer._mix_one(keys, mixer.w_k, mixer.b_k),
        mixer._mix_one(values, mixer.w_v, mixer.b_v),
    )
