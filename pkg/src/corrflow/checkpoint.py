"""Checkpoint files: one JSON header line, then raw float64 weight blobs.

The header carries every scalar needed to rebuild the stack (layout, component
hyperparameters, the task table, training config, seed) plus a blob directory
with the name, shape, and byte length of each array that follows. Arrays are
written little-endian float64 in directory order, so the file can be audited
with a text editor for the first line and numpy for the rest.
"""

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .actions import ChunkNormalizer
from .correlation import CovarianceModel, shrink
from .data import _layout_from_dict, _layout_to_dict
from .errors import MissingInputError, SchemaError
from .flow import IdentityNoise
from .inference import GripperStats, PolicyEngine
from .models import ObservationEncoder, ParametricModel
from .stages import FusionParams, StageHead
from .training import PolicyStack, TrainConfig

FORMAT_TAG = "corrflow-checkpoint-v1"
STATS_FORMAT_TAG = "corrflow-stats-v1"

FUSION_FIELDS = (
    "task_embeddings", "stage_embeddings", "w_gate", "b_gate",
    "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2", "w_stage_mix", "b_stage_mix",
)
MODEL_FIELDS = ParametricModel.PARAM_NAMES


class _BlobWriter:
    """Collects named arrays and emits header + little-endian f8 blobs."""

    def __init__(self):
        self.blobs = []
        self.directory = []

    def add(self, name, arr):
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        self.blobs.append((name, arr))
        self.directory.append({"name": name, "shape": list(arr.shape), "nbytes": arr.nbytes})

    def write(self, path, header: dict):
        header = dict(header, blobs=self.directory)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            for _, arr in self.blobs:
                fh.write(arr.astype("<f8").tobytes())


def _read_blob_file(path, format_tag: str, kind: str):
    """Parse a header+blobs file; returns (header, {name: array})."""
    if not os.path.exists(path):
        raise MissingInputError(f"{kind} file not found: {path}")
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{kind} header is not valid JSON: {exc}") from None
        if header.get("format") != format_tag:
            raise SchemaError(f"unrecognized {kind} format {header.get('format')!r}")
        arrays = {}
        for entry in header["blobs"]:
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise SchemaError(f"{kind} truncated in blob {entry['name']!r}")
            arrays[entry["name"]] = (
                np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
            )
    return header, arrays


def _restore_normalizer(layout, header, arrays) -> ChunkNormalizer:
    normalizer = ChunkNormalizer(layout, exempt_dims=header["normalizer"]["exempt_dims"])
    normalizer.mu_ = arrays["normalizer.mu"]
    normalizer.sigma_ = arrays["normalizer.sigma"]
    mask = np.zeros(layout.dim, dtype=bool)
    mask[header["normalizer"]["exempt_dims"]] = True
    normalizer.exempt_mask_ = mask
    normalizer.n_chunks_ = header["normalizer"]["n_chunks"]
    return normalizer


def _restore_covariance(layout, header, arrays) -> CovarianceModel:
    covariance = CovarianceModel(beta=header["covariance"]["beta"])
    covariance.shape_ = (layout.horizon, layout.dim)
    covariance.sigma_ = arrays["covariance.sigma"]
    covariance.sigma_reg_ = shrink(covariance.sigma_, covariance.beta)
    covariance.chol_ = arrays["covariance.chol"]
    covariance._partitions = {}
    return covariance


def save_stats(path, normalizer: ChunkNormalizer, covariance: CovarianceModel) -> None:
    """Write fitted normalization and correlation statistics to one file."""
    H, D = covariance.shape_
    writer = _BlobWriter()
    writer.add("normalizer.mu", normalizer.mu_)
    writer.add("normalizer.sigma", normalizer.sigma_)
    writer.add("covariance.sigma", covariance.sigma_)
    writer.add("covariance.chol", covariance.chol_)
    writer.write(path, {
        "format": STATS_FORMAT_TAG,
        "H": int(H),
        "D": int(D),
        "beta": float(covariance.beta),
        "layout": _layout_to_dict(normalizer.layout),
        "normalizer": {
            "exempt_dims": [int(d) for d in np.flatnonzero(normalizer.exempt_mask_)],
            "n_chunks": int(normalizer.n_chunks_),
        },
        "covariance": {"beta": float(covariance.beta)},
    })


def load_stats(path):
    """Read a statistics file; returns (header, normalizer, covariance).

    Raises:
        MissingInputError: the file does not exist.
        SchemaError: the header is malformed or the blobs are truncated.
    """
    header, arrays = _read_blob_file(path, STATS_FORMAT_TAG, "statistics")
    layout = _layout_from_dict(header["layout"])
    normalizer = _restore_normalizer(layout, header, arrays)
    covariance = _restore_covariance(layout, header, arrays)
    return header, normalizer, covariance


@dataclass
class Checkpoint:
    """A loaded checkpoint: the stack plus whatever context was saved with it."""

    stack: PolicyStack
    gripper_stats: Optional[GripperStats]
    config: Optional[TrainConfig]
    root_seed: Optional[int]

    def build_engine(self, **kwargs) -> PolicyEngine:
        kwargs.setdefault("gripper_stats", self.gripper_stats)
        return PolicyEngine(self.stack, **kwargs)


def _gripper_to_dict(stats: Optional[GripperStats]):
    if stats is None:
        return None
    return {
        "dims": list(stats.gripper_dims),
        "dilate": stats.dilate,
        "closed_threshold": [float(v) for v in stats.closed_threshold_],
        "open_value": [float(v) for v in stats.open_value_],
        "table": [
            [int(tid), int(stage), [bool(b) for b in flags]]
            for (tid, stage), flags in sorted(stats.table_.items())
        ],
    }


def _gripper_from_dict(d) -> Optional[GripperStats]:
    if d is None:
        return None
    stats = GripperStats(gripper_dims=tuple(d["dims"]), dilate=d["dilate"])
    stats.closed_threshold_ = np.array(d["closed_threshold"], dtype=np.float64)
    stats.open_value_ = np.array(d["open_value"], dtype=np.float64)
    stats.table_ = {
        (tid, stage): np.array(flags, dtype=bool) for tid, stage, flags in d["table"]
    }
    return stats


def save_checkpoint(path, stack: PolicyStack, *, gripper_stats=None, config=None,
                    root_seed=None) -> None:
    """Write the stack (and optional training context) to one binary file."""
    writer = _BlobWriter()
    writer.add("normalizer.mu", stack.normalizer.mu_)
    writer.add("normalizer.sigma", stack.normalizer.sigma_)
    writer.add("covariance.sigma", stack.covariance.sigma_)
    writer.add("covariance.chol", stack.covariance.chol_)
    writer.add("encoder.proj", stack.encoder.proj)
    writer.add("encoder.phase", stack.encoder.phase)
    for f in FUSION_FIELDS:
        writer.add(f"fusion.{f}", getattr(stack.fusion, f))
    for f in MODEL_FIELDS:
        writer.add(f"model.{f}", stack.model.params[f])
    writer.add("head.weight", stack.stage_head.weight)
    writer.add("head.bias", stack.stage_head.bias)

    header = {
        "format": FORMAT_TAG,
        "layout": _layout_to_dict(stack.layout),
        "normalizer": {
            "exempt_dims": [int(d) for d in np.flatnonzero(stack.normalizer.exempt_mask_)],
            "n_chunks": int(stack.normalizer.n_chunks_),
        },
        "covariance": {"beta": float(stack.covariance.beta)},
        "noise": "identity" if isinstance(stack.noise, IdentityNoise) else "corr",
        "encoder": {
            "obs_dim": stack.encoder.obs_dim,
            "n_features": stack.encoder.n_features,
            "bandwidth": stack.encoder.bandwidth,
        },
        "fusion": {"s_max": stack.fusion.s_max},
        "task_table": [
            {"task_id": t.task_id, "n_stages": t.n_stages} for t in stack.tasks.values()
        ],
        "model": {
            "flat_size": stack.model.flat_size,
            "context_size": stack.model.context_size,
            "hidden": stack.model.hidden,
            "n_time_freq": stack.model.n_time_freq,
            "inv_floor": stack.model.inv_floor,
        },
        "gripper": _gripper_to_dict(gripper_stats),
        "config": None if config is None else vars(config).copy(),
        "root_seed": None if root_seed is None else int(root_seed),
    }
    writer.write(path, header)


def load_checkpoint(path) -> Checkpoint:
    """Rebuild a stack from a checkpoint file.

    Raises:
        MissingInputError: the file does not exist.
        SchemaError: the header is malformed or the blobs are truncated.
    """
    header, arrays = _read_blob_file(path, FORMAT_TAG, "checkpoint")
    layout = _layout_from_dict(header["layout"])
    normalizer = _restore_normalizer(layout, header, arrays)
    covariance = _restore_covariance(layout, header, arrays)
    if header["noise"] == "identity":
        noise = IdentityNoise((layout.horizon, layout.dim))
    else:
        noise = covariance

    enc_h = header["encoder"]
    encoder = ObservationEncoder(enc_h["obs_dim"], n_features=enc_h["n_features"],
                                 bandwidth=enc_h["bandwidth"])
    encoder.proj = arrays["encoder.proj"]
    encoder.phase = arrays["encoder.phase"]

    fusion = FusionParams(**{f: arrays[f"fusion.{f}"] for f in FUSION_FIELDS})
    tasks = {
        row["task_id"]: fusion.task_info(row["task_id"], row["n_stages"])
        for row in header["task_table"]
    }

    mh = header["model"]
    model = ParametricModel(mh["flat_size"], context_size=mh["context_size"],
                            hidden=mh["hidden"], n_time_freq=mh["n_time_freq"],
                            inv_floor=mh["inv_floor"])
    for f in MODEL_FIELDS:
        model.params[f] = arrays[f"model.{f}"]

    head = StageHead(arrays["head.weight"].shape[1], s_max=header["fusion"]["s_max"])
    head.weight = arrays["head.weight"]
    head.bias = arrays["head.bias"]

    stack = PolicyStack(
        layout=layout, normalizer=normalizer, covariance=covariance, noise=noise,
        encoder=encoder, fusion=fusion, tasks=tasks, model=model, stage_head=head,
    )
    config = None
    if header["config"] is not None:
        config = TrainConfig(**header["config"])
    return Checkpoint(
        stack=stack,
        gripper_stats=_gripper_from_dict(header["gripper"]),
        config=config,
        root_seed=header["root_seed"],
    )
