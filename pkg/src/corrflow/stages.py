"""Stage labels, the classification head, the voting tracker, and stage-task fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, LayoutError
from .models import time_features

# Cross-entropy weight of the stage head in the joint training loss.
STAGE_LOSS_WEIGHT = 0.1
S_MAX_DEFAULT = 15
HISTORY_LEN = 3


def label_stages(length: int, n_stages: int) -> np.ndarray:
    """Temporal-quantile stage labels: timestep i gets floor(i * n / length)."""
    length = int(length)
    n_stages = int(n_stages)
    if n_stages < 1:
        raise ConfigError(f"n_stages must be >= 1, got {n_stages}")
    if length < n_stages:
        raise LayoutError(
            f"episode of length {length} cannot be split into {n_stages} stages"
        )
    labels = (np.arange(length, dtype=np.int64) * n_stages) // length
    return np.minimum(labels, n_stages - 1)


@dataclass(frozen=True)
class TaskInfo:
    task_id: int
    n_stages: int
    embedding: np.ndarray

    def __post_init__(self):
        if self.n_stages < 1:
            raise ConfigError(f"task {self.task_id}: n_stages must be >= 1")
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise ConfigError(f"task {self.task_id}: embedding must be a finite vector")
        object.__setattr__(self, "embedding", emb)


class StageHead:
    """Linear stage classifier over encoder features, trained with cross-entropy.

    Logits for stages >= the task's stage count are masked to -inf before the
    softmax, so invalid stages are never predicted and carry no gradient.
    """

    def __init__(self, feature_dim: int, s_max: int = S_MAX_DEFAULT):
        self.weight = np.zeros((s_max, feature_dim), dtype=np.float64)
        self.bias = np.zeros(s_max, dtype=np.float64)

    @property
    def s_max(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def logits(self, features: np.ndarray, n_stages: int) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.feature_dim:
            raise LayoutError(
                f"feature width {features.shape[-1]} does not match head width "
                f"{self.feature_dim}"
            )
        if not 1 <= n_stages <= self.s_max:
            raise ConfigError(f"n_stages {n_stages} outside [1, {self.s_max}]")
        out = features @ self.weight.T + self.bias
        out[..., n_stages:] = -np.inf
        return out

    def batch_loss_grad(self, features, labels, n_stages):
        """Mean masked cross-entropy over a batch, with parameter gradients.

        n_stages may be a scalar or a per-row vector (mixed-task batches).
        """
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        b = features.shape[0]
        counts = np.broadcast_to(np.asarray(n_stages, dtype=np.int64), (b,))
        if np.any(labels < 0) or np.any(labels >= counts):
            raise ConfigError("stage label outside the task's valid range")
        logits = features @ self.weight.T + self.bias
        valid = np.arange(self.s_max)[None, :] < counts[:, None]
        logits = np.where(valid, logits, -np.inf)
        m = logits.max(axis=1, keepdims=True)
        z = np.exp(logits - m)
        denom = z.sum(axis=1)
        rows = np.arange(b)
        loss = float(np.mean(np.log(denom) + m[:, 0] - logits[rows, labels]))
        dlogits = z / denom[:, None]
        dlogits[rows, labels] -= 1.0
        dlogits /= b
        grads = {"weight": dlogits.T @ features, "bias": dlogits.sum(axis=0)}
        return loss, grads

    def accuracy(self, features, labels, n_stages) -> float:
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        b = features.shape[0]
        counts = np.broadcast_to(np.asarray(n_stages, dtype=np.int64), (b,))
        logits = features @ self.weight.T + self.bias
        valid = np.arange(self.s_max)[None, :] < counts[:, None]
        pred = np.where(valid, logits, -np.inf).argmax(axis=1)
        return float(np.mean(pred == labels))


def predict_stage(head: StageHead, features, task: TaskInfo):
    """Masked logits and the argmax stage (ties break toward the lowest stage)."""
    logits = head.logits(features, task.n_stages)
    return logits, int(np.argmax(logits[..., : task.n_stages], axis=-1))


def stage_loss(logits, label: int) -> float:
    """Softmax cross-entropy of one masked logit row against an integer label."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    label = int(label)
    if label < 0 or label >= logits.size or not np.isfinite(logits[label]):
        raise ConfigError(f"stage label {label} is not valid for this task")
    finite = logits[np.isfinite(logits)]
    m = finite.max()
    lse = m + np.log(np.sum(np.exp(finite - m)))
    return float(lse - logits[label])


@dataclass
class StageTracker:
    """Debounced stage state machine fed one raw prediction per control cycle.

    Holds the 3 most recent raw predictions. Transition rules, checked in
    order after each append: advance when at least 2 buffered predictions
    equal current+1; advance by one when all 3 equal current+2; roll back
    when all 3 equal current-1. Any applied transition clears the buffer.
    """

    task: TaskInfo
    current_stage: int = 0
    history: list = field(default_factory=list)

    def vote(self, raw_prediction: int) -> int:
        raw = int(raw_prediction)
        self.history.append(raw)
        if len(self.history) > HISTORY_LEN:
            self.history.pop(0)
        cur = self.current_stage
        h = self.history
        candidate = cur
        if sum(1 for p in h if p == cur + 1) >= 2:
            candidate = cur + 1
        elif len(h) == HISTORY_LEN and all(p == cur + 2 for p in h):
            candidate = cur + 1
        elif len(h) == HISTORY_LEN and all(p == cur - 1 for p in h):
            candidate = cur - 1
        new = min(max(candidate, 0), self.task.n_stages - 1)
        if new != cur:
            self.history.clear()
            self.current_stage = new
        return self.current_stage

    def reset(self) -> None:
        self.current_stage = 0
        self.history.clear()


def stage_norm(stage: int, n_stages: int) -> float:
    """Normalized stage position: 0.0 at stage 0, 1.0 at the final stage."""
    return float(stage) / max(n_stages - 1, 1)


@dataclass(frozen=True)
class FusionParams:
    """Frozen random weights for the five-token stage-task fusion.

    Widths: task embeddings W, learned stage embeddings W_emb, sincos stage
    encoding W - W_emb, so the raw concat token lands exactly at width W.
    """

    task_embeddings: np.ndarray   # (n_tasks, W)
    stage_embeddings: np.ndarray  # (n_tasks, s_max, W_emb)
    w_gate: np.ndarray
    b_gate: np.ndarray
    w_mlp1: np.ndarray
    b_mlp1: np.ndarray
    w_mlp2: np.ndarray
    b_mlp2: np.ndarray
    w_stage_mix: np.ndarray
    b_stage_mix: np.ndarray

    @property
    def width(self) -> int:
        return self.task_embeddings.shape[1]

    @property
    def stage_width(self) -> int:
        return self.stage_embeddings.shape[2]

    @property
    def sincos_width(self) -> int:
        return self.width - self.stage_width

    @property
    def n_tasks(self) -> int:
        return self.task_embeddings.shape[0]

    @property
    def s_max(self) -> int:
        return self.stage_embeddings.shape[1]

    @classmethod
    def init(cls, n_tasks, width=64, stage_width=32, s_max=S_MAX_DEFAULT, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        sincos_width = width - stage_width
        if sincos_width <= 0 or sincos_width % 2 != 0:
            raise ConfigError(
                f"width - stage_width must be a positive even number, got {sincos_width}"
            )
        d_all = width + sincos_width + stage_width
        hidden = 2 * width

        def xavier(n_out, n_in):
            scale = np.sqrt(2.0 / (n_in + n_out))
            return rng.normal(0.0, scale, size=(n_out, n_in))

        return cls(
            task_embeddings=rng.normal(0.0, 1.0, size=(n_tasks, width)),
            stage_embeddings=rng.normal(0.0, 1.0, size=(n_tasks, s_max, stage_width)),
            w_gate=xavier(d_all, d_all),
            b_gate=np.zeros(d_all),
            w_mlp1=xavier(hidden, d_all),
            b_mlp1=np.zeros(hidden),
            w_mlp2=xavier(width, hidden),
            b_mlp2=np.zeros(width),
            w_stage_mix=xavier(width, width),
            b_stage_mix=np.zeros(width),
        )

    def task_info(self, task_id: int, n_stages: int) -> TaskInfo:
        if not 0 <= task_id < self.n_tasks:
            raise ConfigError(f"task_id {task_id} outside [0, {self.n_tasks})")
        if n_stages > self.s_max:
            raise ConfigError(f"n_stages {n_stages} exceeds table size {self.s_max}")
        return TaskInfo(task_id, n_stages, self.task_embeddings[task_id])


def _stage_inputs(task: TaskInfo, stage: int, params: FusionParams):
    if not 0 <= stage < task.n_stages:
        raise ConfigError(
            f"stage {stage} invalid for task {task.task_id} with {task.n_stages} stages"
        )
    s = stage_norm(stage, task.n_stages)
    sincos = time_features(np.array([s]), params.sincos_width // 2)[0]
    learned = params.stage_embeddings[task.task_id, stage]
    return sincos, learned


def fusion_gates(task: TaskInfo, stage: int, params: FusionParams) -> np.ndarray:
    """Sigmoid gates over [task | sincos | learned], concatenated in that order."""
    sincos, learned = _stage_inputs(task, stage, params)
    x_all = np.concatenate([task.embedding, sincos, learned])
    return expit(params.w_gate @ x_all + params.b_gate)


def fuse_stage_task(task: TaskInfo, stage: int, params: FusionParams) -> np.ndarray:
    """Five context tokens of width W: plain task embedding plus four fusions.

    Token order: task embedding, task-gated, balanced two-layer map,
    gated stage mix, raw stage concat.
    """
    sincos, learned = _stage_inputs(task, stage, params)
    w = params.width
    x_all = np.concatenate([task.embedding, sincos, learned])
    gates = expit(params.w_gate @ x_all + params.b_gate)
    g_task = gates[:w]
    g_sincos = gates[w : w + params.sincos_width]
    g_learned = gates[w + params.sincos_width :]

    f1 = task.embedding * g_task
    hidden = np.maximum(params.w_mlp1 @ x_all + params.b_mlp1, 0.0)
    f2 = params.w_mlp2 @ hidden + params.b_mlp2
    f3 = params.w_stage_mix @ np.concatenate([sincos * g_sincos, learned * g_learned])
    f3 = f3 + params.b_stage_mix
    f4 = np.concatenate([sincos, learned])
    return np.stack([task.embedding, f1, f2, f3, f4])
