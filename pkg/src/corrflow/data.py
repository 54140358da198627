"""Episode containers, chunk extraction, and the on-disk dataset format.

A dataset is a directory: manifest.json plus one binary file per episode.
Binary layout per episode, all little-endian: float32 observations
(length x obs_dim), float32 actions (length x action_dim), stage labels
as one byte each. Lengths live in the manifest, never in the binaries.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import ActionLayout, to_delta
from .errors import LayoutError, MissingInputError, SchemaError

MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "corrflow-dataset-v1"


@dataclass
class Episode:
    task_id: int
    observations: np.ndarray
    actions: np.ndarray
    stage_labels: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.stage_labels = np.asarray(self.stage_labels, dtype=np.int64)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise LayoutError("episode arrays must be 2-D (length x width)")
        n = len(self.actions)
        if len(self.observations) != n or len(self.stage_labels) != n:
            raise LayoutError(
                f"episode arrays disagree on length: obs {len(self.observations)}, "
                f"actions {n}, labels {len(self.stage_labels)}"
            )
        if not (np.all(np.isfinite(self.observations)) and np.all(np.isfinite(self.actions))):
            raise LayoutError("episode contains non-finite values")

    @property
    def length(self) -> int:
        return len(self.actions)


def _layout_to_dict(layout: ActionLayout) -> dict:
    return {
        "horizon": layout.horizon,
        "dim": layout.dim,
        "velocity_dims": list(layout.velocity_dims),
        "gripper_dims": list(layout.gripper_dims),
        "control_rate": layout.control_rate,
    }


def _layout_from_dict(d: dict) -> ActionLayout:
    try:
        return ActionLayout(
            horizon=int(d["horizon"]),
            dim=int(d["dim"]),
            velocity_dims=tuple(int(v) for v in d["velocity_dims"]),
            gripper_dims=tuple(int(v) for v in d["gripper_dims"]),
            control_rate=float(d["control_rate"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad layout block in manifest: {exc}") from exc


class EpisodeDataset:
    """Episodes plus the action layout and per-task metadata.

    The joint state for delta conversion is read from the first action_dim
    observation columns, which the world lays out to match action dims.
    """

    def __init__(self, episodes, layout: ActionLayout, task_table):
        self.episodes = list(episodes)
        self.layout = layout
        # task_table rows: {"task_id", "name", "n_stages", "scripted_steps"}
        self.task_table = [dict(row) for row in task_table]
        self._by_id = {row["task_id"]: row for row in self.task_table}
        for ep in self.episodes:
            if ep.task_id not in self._by_id:
                raise SchemaError(f"episode refers to unknown task {ep.task_id}")
            if ep.observations.shape[1] < layout.dim:
                raise LayoutError(
                    "observations too narrow to carry the joint state "
                    f"({ep.observations.shape[1]} < {layout.dim})"
                )

    def __len__(self) -> int:
        return len(self.episodes)

    def task_row(self, task_id: int) -> dict:
        return self._by_id[task_id]

    @property
    def obs_dim(self) -> int:
        return self.episodes[0].observations.shape[1]

    def n_chunks(self, ep_idx: int) -> int:
        return max(self.episodes[ep_idx].length - self.layout.horizon + 1, 0)

    def joint_state(self, ep_idx: int, start: int) -> np.ndarray:
        return self.episodes[ep_idx].observations[start, : self.layout.dim]

    def delta_chunk(self, ep_idx: int, start: int) -> np.ndarray:
        """One horizon-length action chunk, positions re-expressed as deltas."""
        ep = self.episodes[ep_idx]
        h = self.layout.horizon
        if not 0 <= start <= ep.length - h:
            raise LayoutError(f"chunk start {start} out of range for episode {ep_idx}")
        chunk = ep.actions[start : start + h]
        return to_delta(chunk, self.joint_state(ep_idx, start), self.layout)

    def delta_chunk_blocks(self):
        """Per-episode blocks of every overlapping delta chunk, for streaming fits."""
        h = self.layout.horizon
        for idx, ep in enumerate(self.episodes):
            n = ep.length - h + 1
            if n <= 0:
                continue
            block = np.empty((n, h, self.layout.dim))
            for i in range(n):
                block[i] = self.delta_chunk(idx, i)
            yield block

    def chunk_index(self):
        """(episode, start) pairs for every chunk, in deterministic order."""
        pairs = []
        for idx in range(len(self.episodes)):
            for start in range(self.n_chunks(idx)):
                pairs.append((idx, start))
        return pairs

    def split_episodes(self, val_fraction: float, rng) -> tuple:
        """Episode-level train/validation datasets, stratified by task."""
        by_task = {}
        for i, ep in enumerate(self.episodes):
            by_task.setdefault(ep.task_id, []).append(i)
        train, val = [], []
        for task_id in sorted(by_task):
            idx = np.array(by_task[task_id])
            perm = rng.permutation(len(idx))
            n_val = max(int(round(val_fraction * len(idx))), 1) if len(idx) > 1 else 0
            val.extend(idx[perm[:n_val]].tolist())
            train.extend(idx[perm[n_val:]].tolist())
        return self.subset(sorted(train)), self.subset(sorted(val))

    def subset(self, episode_indices) -> "EpisodeDataset":
        eps = [self.episodes[i] for i in episode_indices]
        return EpisodeDataset(eps, self.layout, self.task_table)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        index = []
        for i, ep in enumerate(self.episodes):
            name = f"ep_{i:05d}.bin"
            blob = (
                ep.observations.astype("<f4").tobytes()
                + ep.actions.astype("<f4").tobytes()
                + ep.stage_labels.astype(np.uint8).tobytes()
            )
            (path / name).write_bytes(blob)
            index.append({"file": name, "task_id": ep.task_id, "length": ep.length})
        manifest = {
            "format": FORMAT_TAG,
            "layout": _layout_to_dict(self.layout),
            "obs_dim": self.obs_dim,
            "tasks": self.task_table,
            "episodes": index,
        }
        (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EpisodeDataset":
        path = Path(path)
        manifest_path = path / MANIFEST_NAME
        if not manifest_path.is_file():
            raise MissingInputError(f"no {MANIFEST_NAME} under {path}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
        if manifest.get("format") != FORMAT_TAG:
            raise SchemaError(f"unknown dataset format {manifest.get('format')!r}")
        layout = _layout_from_dict(manifest["layout"])
        obs_dim = int(manifest["obs_dim"])
        episodes = []
        for row in manifest["episodes"]:
            fpath = path / row["file"]
            if not fpath.is_file():
                raise MissingInputError(f"missing episode file {fpath}")
            raw = fpath.read_bytes()
            n = int(row["length"])
            obs_bytes = n * obs_dim * 4
            act_bytes = n * layout.dim * 4
            if len(raw) != obs_bytes + act_bytes + n:
                raise SchemaError(
                    f"{row['file']}: expected {obs_bytes + act_bytes + n} bytes, "
                    f"found {len(raw)}"
                )
            obs = np.frombuffer(raw, dtype="<f4", count=n * obs_dim).reshape(n, obs_dim)
            acts = np.frombuffer(
                raw, dtype="<f4", count=n * layout.dim, offset=obs_bytes
            ).reshape(n, layout.dim)
            labels = np.frombuffer(raw, dtype=np.uint8, offset=obs_bytes + act_bytes)
            episodes.append(
                Episode(int(row["task_id"]), obs.astype(np.float64),
                        acts.astype(np.float64), labels.astype(np.int64))
            )
        return cls(episodes, layout, manifest["tasks"])

    def dataset_hash(self) -> str:
        """Content hash over the canonical manifest and every episode blob."""
        digest = hashlib.sha256()
        manifest = {
            "format": FORMAT_TAG,
            "layout": _layout_to_dict(self.layout),
            "obs_dim": self.obs_dim,
            "tasks": self.task_table,
            "episodes": [
                {"task_id": ep.task_id, "length": ep.length} for ep in self.episodes
            ],
        }
        digest.update(json.dumps(manifest, sort_keys=True).encode())
        for ep in self.episodes:
            digest.update(ep.observations.astype("<f4").tobytes())
            digest.update(ep.actions.astype("<f4").tobytes())
            digest.update(ep.stage_labels.astype(np.uint8).tobytes())
        return digest.hexdigest()
