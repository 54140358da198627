"""Joint training of the velocity model and the stage head.

One trainer step draws a batch of demonstration chunks, computes the
flow-matching loss on the velocity network and a cross-entropy loss on the
stage head from the same frames, and applies one SGD-with-momentum update to
both under a cosine-decayed learning rate. The two losses are combined as
total = action + stage_loss_weight * stage.

The module also owns PolicyStack, the bundle of fitted pieces (normalizer,
covariance, encoder, fusion tables, model, head) that training produces and
the inference engine consumes.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .actions import ActionLayout, ChunkNormalizer, fit_normalization
from .correlation import CovarianceModel
from .errors import ConfigError, TrainingDivergedError
from .flow import IdentityNoise, flow_loss_grad
from .models import ObservationEncoder, ParametricModel
from .seeds import component_rng
from .stages import (
    S_MAX_DEFAULT,
    STAGE_LOSS_WEIGHT,
    FusionParams,
    StageHead,
    TaskInfo,
    fuse_stage_task,
)

NOISE_KINDS = ("corr", "identity")


@dataclass
class TrainConfig:
    """Hyperparameters for stack construction and the training loop."""

    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    n_samples: int = 15
    stage_loss_weight: float = STAGE_LOSS_WEIGHT
    head_lr_scale: float = 100.0
    hidden: int = 192
    encoder_features: int = 54
    encoder_bandwidth: float = 2.0
    fusion_width: int = 64
    fusion_stage_width: int = 32
    s_max: int = S_MAX_DEFAULT
    beta: float = 0.5
    noise: str = "corr"
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    val_every: int = 200
    val_chunks: int = 256
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.stage_loss_weight < 0:
            raise ConfigError("stage_loss_weight must be non-negative")
        if not self.head_lr_scale > 0:
            raise ConfigError("head_lr_scale must be positive")
        if self.noise not in NOISE_KINDS:
            raise ConfigError(f"noise must be one of {NOISE_KINDS}, got {self.noise!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")
        if not self.divergence_limit > 0:
            raise ConfigError("divergence_limit must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or None")


@dataclass
class PolicyStack:
    """Everything the policy needs at run time, fitted against one dataset.

    The model and stage head are mutated in place by train(); the remaining
    members are frozen statistics or frozen random tables.
    """

    layout: ActionLayout
    normalizer: ChunkNormalizer
    covariance: CovarianceModel
    noise: object
    encoder: ObservationEncoder
    fusion: FusionParams
    tasks: dict
    model: ParametricModel
    stage_head: StageHead
    _fusion_flat: dict = field(default_factory=dict, repr=False)

    @property
    def context_dim(self) -> int:
        # encoder features, the task embedding, and the five fused tokens
        return self.encoder.out_dim + self.fusion.width * 6

    def task_info(self, task_id: int) -> TaskInfo:
        try:
            return self.tasks[int(task_id)]
        except KeyError:
            raise ConfigError(f"task {task_id} is not in this stack") from None

    def fusion_flat(self, task_id: int, stage: int) -> np.ndarray:
        """Flattened stage-task fusion tokens, cached per (task, stage)."""
        key = (int(task_id), int(stage))
        if key not in self._fusion_flat:
            tokens = fuse_stage_task(self.task_info(task_id), stage, self.fusion)
            self._fusion_flat[key] = tokens.ravel()
        return self._fusion_flat[key]

    def context_for(self, obs: np.ndarray, task_id: int, stage: int) -> np.ndarray:
        """Conditioning vector for one observation at a known task and stage."""
        feats = self.encoder.encode(obs)
        task = self.task_info(task_id)
        return np.concatenate([feats, task.embedding, self.fusion_flat(task_id, stage)])

    def context_batch(self, features: np.ndarray, task_ids, stages) -> np.ndarray:
        """Batched contexts from precomputed encoder features."""
        features = np.asarray(features, dtype=np.float64)
        b = features.shape[0]
        out = np.empty((b, self.context_dim))
        w = self.fusion.width
        e = self.encoder.out_dim
        out[:, :e] = features
        for i in range(b):
            task = self.task_info(task_ids[i])
            out[i, e : e + w] = task.embedding
            out[i, e + w :] = self.fusion_flat(task_ids[i], stages[i])
        return out


@dataclass
class TrainResult:
    """Per-step loss curves and end-of-run summary statistics."""

    loss_curve: np.ndarray
    flow_curve: np.ndarray
    stage_curve: np.ndarray
    val_steps: list
    val_losses: list
    stage_accuracy: float
    val_stage_accuracy: Optional[float]
    steps_run: int


def build_stack(dataset, config: TrainConfig, root_seed: int,
                prefit=None) -> PolicyStack:
    """Fit statistics and initialize all learnable pieces for one dataset.

    Fitting order: normalizer from raw delta chunks, covariance from the
    normalized chunks, then the frozen encoder/fusion tables and the randomly
    initialized model and head. All randomness derives from root_seed through
    fixed component streams. Pass prefit=(normalizer, covariance) to reuse
    statistics fitted earlier instead of refitting; shapes must match the
    dataset layout.
    """
    layout = dataset.layout
    if prefit is not None:
        normalizer, covariance = prefit
        if covariance.shape_ != (layout.horizon, layout.dim):
            raise ConfigError(
                f"prefit statistics cover shape {covariance.shape_}, "
                f"dataset layout is ({layout.horizon}, {layout.dim})"
            )
    else:
        normalizer = fit_normalization(dataset, layout)
        blocks = (normalizer.transform(b) for b in dataset.delta_chunk_blocks())
        covariance = CovarianceModel(beta=config.beta).fit(blocks)
    shape = (layout.horizon, layout.dim)
    noise = covariance if config.noise == "corr" else IdentityNoise(shape)

    encoder = ObservationEncoder(
        dataset.obs_dim,
        n_features=config.encoder_features,
        bandwidth=config.encoder_bandwidth,
        rng=component_rng(root_seed, "encoder"),
    )
    n_tasks = max(row["task_id"] for row in dataset.task_table) + 1
    fusion = FusionParams.init(
        n_tasks,
        width=config.fusion_width,
        stage_width=config.fusion_stage_width,
        s_max=config.s_max,
        rng=component_rng(root_seed, "fusion"),
    )
    tasks = {
        row["task_id"]: fusion.task_info(row["task_id"], row["n_stages"])
        for row in dataset.task_table
    }

    stack = PolicyStack(
        layout=layout,
        normalizer=normalizer,
        covariance=covariance,
        noise=noise,
        encoder=encoder,
        fusion=fusion,
        tasks=tasks,
        model=None,
        stage_head=None,
    )
    stack.model = ParametricModel(
        layout.horizon * layout.dim,
        context_size=stack.context_dim,
        hidden=config.hidden,
        rng=component_rng(root_seed, "model-init"),
    )
    stack.stage_head = StageHead(encoder.out_dim, s_max=config.s_max)
    return stack


def _gather_batch(stack: PolicyStack, dataset, pairs: np.ndarray, idx: np.ndarray):
    """Materialize normalized chunks, contexts, and stage labels for a batch."""
    b = len(idx)
    H, D = stack.layout.horizon, stack.layout.dim
    chunks = np.empty((b, H, D))
    obs = np.empty((b, dataset.obs_dim))
    labels = np.empty(b, dtype=np.int64)
    task_ids = np.empty(b, dtype=np.int64)
    counts = np.empty(b, dtype=np.int64)
    for j, row in enumerate(idx):
        ep_idx, start = int(pairs[row, 0]), int(pairs[row, 1])
        ep = dataset.episodes[ep_idx]
        chunks[j] = stack.normalizer.transform(dataset.delta_chunk(ep_idx, start))
        obs[j] = ep.observations[start]
        labels[j] = ep.stage_labels[start]
        task_ids[j] = ep.task_id
        counts[j] = stack.task_info(ep.task_id).n_stages
    features = stack.encoder.encode(obs)
    contexts = stack.context_batch(features, task_ids, labels)
    return chunks, contexts, features, labels, counts


def _cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * step / max(total, 1)))


def _clip_grads(grads: dict, limit) -> dict:
    """Scale the whole gradient dict so its global norm stays within limit.

    Rare small-t draws carry a 1/t^2 factor through the endpoint output map;
    clipping bounds those spikes without reweighting the loss itself.
    """
    if limit is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= limit:
        return grads
    factor = limit / total
    return {k: g * factor for k, g in grads.items()}


def _momentum_update(params: dict, grads: dict, velocity: dict, lr: float, mu: float):
    for name, g in grads.items():
        velocity[name] = mu * velocity[name] - lr * g
        params[name] += velocity[name]


def stage_accuracy(stack: PolicyStack, dataset, block: int = 8192) -> float:
    """Fraction of frames where the head's masked argmax matches the label."""
    correct = 0
    total = 0
    for ep in dataset.episodes:
        n_stages = stack.task_info(ep.task_id).n_stages
        for lo in range(0, ep.length, block):
            obs = ep.observations[lo : lo + block]
            labels = ep.stage_labels[lo : lo + block]
            feats = stack.encoder.encode(obs)
            acc = stack.stage_head.accuracy(feats, labels, n_stages)
            correct += acc * len(labels)
            total += len(labels)
    if total == 0:
        raise ConfigError("cannot measure stage accuracy on an empty dataset")
    return float(correct / total)


def _val_sample(stack: PolicyStack, val_ds, n_chunks: int, rng: np.random.Generator):
    pairs = np.asarray(val_ds.chunk_index())
    if len(pairs) == 0:
        return None
    take = min(n_chunks, len(pairs))
    idx = rng.choice(len(pairs), size=take, replace=False)
    return _gather_batch(stack, val_ds, pairs, idx)


def _val_loss(stack: PolicyStack, config: TrainConfig, batch, root_seed: int) -> float:
    """Flow loss on the held-out sample under frozen (t, eps) draws.

    The validation rng is rebuilt from the same stream at every evaluation,
    so the Monte Carlo draws are identical across steps and across runs with
    the same root seed; only the parameters move.
    """
    chunks, contexts, _, _, _ = batch
    rng = component_rng(root_seed, "validation", 1)
    loss, _ = flow_loss_grad(
        stack.model, chunks, contexts, stack.noise, n_samples=config.n_samples, rng=rng
    )
    return loss


def train(stack: PolicyStack, dataset, config: TrainConfig, root_seed: int) -> TrainResult:
    """Run the joint SGD loop, mutating stack.model and stack.stage_head.

    Raises:
        TrainingDivergedError: the combined loss exceeded divergence_limit or
            went non-finite; the step index is named in the message.
    """
    if config.val_fraction > 0:
        train_ds, val_ds = dataset.split_episodes(
            config.val_fraction, component_rng(root_seed, "validation", 0)
        )
        if len(val_ds.episodes) == 0:
            val_ds = None
    else:
        train_ds, val_ds = dataset, None

    pairs = np.asarray(train_ds.chunk_index())
    if len(pairs) == 0:
        raise ConfigError("training split contains no chunks")
    rng = component_rng(root_seed, "train")
    val_batch = None
    if val_ds is not None:
        val_batch = _val_sample(stack, val_ds, config.val_chunks, component_rng(root_seed, "validation", 2))

    model, head = stack.model, stack.stage_head
    vel_model = {k: np.zeros_like(v) for k, v in model.params.items()}
    vel_head = {"weight": np.zeros_like(head.weight), "bias": np.zeros_like(head.bias)}
    head_params = {"weight": head.weight, "bias": head.bias}

    loss_curve = np.empty(config.steps)
    flow_curve = np.empty(config.steps)
    stage_curve = np.empty(config.steps)
    val_steps: list = []
    val_losses: list = []

    for step in range(config.steps):
        idx = rng.integers(0, len(pairs), size=config.batch_size)
        chunks, contexts, features, labels, counts = _gather_batch(stack, train_ds, pairs, idx)

        action_loss, model_grads = flow_loss_grad(
            model, chunks, contexts, stack.noise, n_samples=config.n_samples, rng=rng
        )
        stage_ce, head_grads = head.batch_loss_grad(features, labels, counts)
        total = action_loss + config.stage_loss_weight * stage_ce
        if not np.isfinite(total) or total > config.divergence_limit:
            raise TrainingDivergedError(
                f"loss {total:.4g} at step {step} exceeded the divergence limit "
                f"{config.divergence_limit:.4g}"
            )
        loss_curve[step] = total
        flow_curve[step] = action_loss
        stage_curve[step] = stage_ce

        lr = _cosine_lr(config.learning_rate, step, config.steps)
        _momentum_update(model.params, _clip_grads(model_grads, config.clip_norm), vel_model, lr, config.momentum)
        if config.stage_loss_weight > 0:
            # the head is linear and its loss carries a 0.1 weight; without a
            # larger step it stays far from convergence over a joint run
            scaled = {k: config.stage_loss_weight * g for k, g in head_grads.items()}
            _momentum_update(head_params, _clip_grads(scaled, config.clip_norm), vel_head,
                             lr * config.head_lr_scale, config.momentum)

        if val_batch is not None and (step % config.val_every == 0 or step == config.steps - 1):
            val_steps.append(step)
            val_losses.append(_val_loss(stack, config, val_batch, root_seed))

    return TrainResult(
        loss_curve=loss_curve,
        flow_curve=flow_curve,
        stage_curve=stage_curve,
        val_steps=val_steps,
        val_losses=val_losses,
        stage_accuracy=stage_accuracy(stack, train_ds),
        val_stage_accuracy=None if val_ds is None else stage_accuracy(stack, val_ds),
        steps_run=config.steps,
    )
