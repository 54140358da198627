"""Closed-loop action pipeline.

A cycle: classify the stage and update the vote tracker, denoise a fresh
chunk while softly inpainting the saved tail of the previous one, convert to
physical actions, optionally compress the executed slice through a spline,
and run the gripper guard over every emitted row. The engine speaks the same
begin_episode/plan protocol as the scripted expert, so the rollout harness
drives both interchangeably.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .actions import from_delta
from .errors import ConfigError, InterpolationError, LayoutError
from .flow import denoise
from .stages import StageTracker, predict_stage
from .training import PolicyStack

logger = logging.getLogger(__name__)

INPAINT_MODES = ("corr", "hard", "off")


@dataclass
class RollingPlan:
    """Carry-over between cycles: the un-executed tail and its frozen noise.

    saved_tail holds the last k rows of the previous normalized chunk;
    fixed_noise is one correlated draw restricted to the observed block,
    reused at every qualifying denoising step of this cycle.
    """

    saved_tail: np.ndarray
    fixed_noise: np.ndarray
    execute_count: int = 26

    def check(self, horizon: int) -> None:
        k = self.saved_tail.shape[0]
        if k + self.execute_count != horizon:
            raise ConfigError(
                f"tail rows ({k}) + execute_count ({self.execute_count}) "
                f"must equal the horizon ({horizon})"
            )


@dataclass
class InpaintConfig:
    """How the saved tail constrains the next denoising pass.

    mode: "corr" propagates the constraint residual into the free block
    through m_corr, "hard" sets the observed block only, "off" skips the
    constraint entirely. The threshold gates on the step's pre-update flow
    time; corrections stop once it falls to the threshold or below.
    """

    time_threshold: float = 0.3
    partition: Optional[object] = None
    mode: str = "corr"
    reanchor_tail: bool = True

    def __post_init__(self):
        if not 0.0 <= self.time_threshold <= 1.0:
            raise ConfigError(
                f"time_threshold must lie in [0, 1], got {self.time_threshold}"
            )
        if self.mode not in INPAINT_MODES:
            raise ConfigError(f"mode must be one of {INPAINT_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class CompressionConfig:
    """Spline resampling of the executed slice plus velocity scaling."""

    in_steps: int = 26
    out_steps: int = 20
    speedup: float = 1.3
    velocity_dim_range: tuple = (0, 1, 2)
    gripper_dims: tuple = (4,)
    gripper_change_threshold: float = 0.5

    def __post_init__(self):
        if self.in_steps < 4:
            raise ConfigError(f"in_steps must be >= 4 for a cubic spline, got {self.in_steps}")
        if self.out_steps < 2:
            raise ConfigError(f"out_steps must be >= 2, got {self.out_steps}")
        if abs(self.speedup - self.in_steps / self.out_steps) > 1e-12:
            raise ConfigError(
                f"speedup {self.speedup} must equal in_steps/out_steps "
                f"= {self.in_steps / self.out_steps}"
            )
        if self.gripper_change_threshold < 0:
            raise ConfigError("gripper_change_threshold must be non-negative")


def inpaint_denoise(model, context, plan: Optional[RollingPlan], cfg: InpaintConfig,
                    noise, steps: int = 10, rng=None) -> np.ndarray:
    """One denoising pass, tail-constrained while flow time is above threshold.

    Draws the starting noise from the sampler; the constraint noise comes
    frozen inside the plan. After each Euler update whose pre-update time
    exceeds the threshold, the observed block is hard-set to the interpolant
    between the saved tail and the plan's fixed noise at the post-update
    time, and in "corr" mode the residual is propagated into the free block.
    With no plan (first cycle) or mode "off" this is a plain denoise.

    Raises:
        ConfigError: a plan is given but the partition is missing.
    """
    if rng is None:
        raise ConfigError("inpaint_denoise needs an explicit rng")
    eps_start = noise.sample(rng)
    if plan is None or cfg.mode == "off":
        return denoise(model, eps_start, context=context, steps=steps)

    part = cfg.partition
    if part is None:
        raise ConfigError("inpainting requested but the partition is missing")
    h, d = eps_start.shape
    plan.check(h)
    x0_obs = np.asarray(plan.saved_tail, dtype=np.float64).ravel()
    z_obs = np.asarray(plan.fixed_noise, dtype=np.float64).ravel()
    if x0_obs.size != part.observed.size or z_obs.size != part.observed.size:
        raise LayoutError(
            f"tail/noise size {x0_obs.size}/{z_obs.size} does not match the "
            f"observed block ({part.observed.size})"
        )
    dt = 1.0 / steps
    threshold = cfg.time_threshold
    propagate = cfg.mode == "corr"

    def correct(x_flat, i, t_after):
        t_curr = 1.0 - i * dt
        if not t_curr > threshold:
            return x_flat
        desired = (1.0 - t_after) * x0_obs + t_after * z_obs
        delta_obs = desired - x_flat[..., part.observed]
        x_flat[..., part.observed] = desired
        if propagate:
            x_flat[..., part.free] += delta_obs @ part.m_corr.T
        return x_flat

    return denoise(model, eps_start, context=context, steps=steps, post_step=correct)


def threshold_hits(cfg: InpaintConfig, steps: int) -> int:
    """How many Euler steps of a cycle fire the tail correction."""
    if cfg.mode == "off":
        return 0
    dt = 1.0 / steps
    return sum(1 for i in range(steps) if 1.0 - i * dt > cfg.time_threshold)


def compress(actions: np.ndarray, cfg: CompressionConfig) -> np.ndarray:
    """Resample a chunk through a natural cubic spline and scale velocities.

    Knots sit at 0..in_steps-1; the output is evaluated at out_steps times
    linearly spaced over the same span, so both endpoints are reproduced
    exactly. Velocity dims are multiplied by the speedup afterwards.
    """
    arr = np.asarray(actions, dtype=np.float64)
    if arr.ndim != 2:
        raise LayoutError(f"expected a 2-D action block, got shape {arr.shape}")
    n = arr.shape[0]
    if n < 4:
        raise InterpolationError(f"cubic resampling needs at least 4 rows, got {n}")
    if n != cfg.in_steps:
        raise LayoutError(f"got {n} rows but the config expects {cfg.in_steps}")
    knots = np.arange(n, dtype=np.float64)
    spline = CubicSpline(knots, arr, axis=0, bc_type="natural")
    times = np.linspace(0.0, float(n - 1), cfg.out_steps)
    out = spline(times)
    vel = list(cfg.velocity_dim_range)
    out[:, vel] *= cfg.speedup
    return out


def should_compress(actions: np.ndarray, cfg: CompressionConfig) -> bool:
    """False iff some gripper dim swings by more than the threshold.

    The swing is measured on whatever units the caller passes; the engine
    passes the normalized executed slice, so the default threshold is in
    normalized units. Equality with the threshold still compresses.
    """
    arr = np.asarray(actions, dtype=np.float64)
    swing = 0.0
    for d in cfg.gripper_dims:
        col = arr[..., d]
        swing = max(swing, float(col.max() - col.min()))
    return not swing > cfg.gripper_change_threshold


class GripperStats:
    """Per (task, stage) record of whether each gripper dim ever closed.

    Fitted from demonstration actions: a value below the midpoint of the
    dim's overall range counts as closed, fully open is the dataset maximum.
    Stage attribution is dilated one stage each way, since quantile labels
    and actual grasp windows disagree near boundaries.

    Fitted attributes: closed_threshold_ and open_value_ per gripper dim,
    table_ mapping (task_id, stage) to a per-dim ever-closed bool array.
    """

    def __init__(self, gripper_dims=(4,), dilate: int = 1):
        self.gripper_dims = tuple(int(d) for d in gripper_dims)
        self.dilate = int(dilate)
        if not self.gripper_dims:
            raise ConfigError("at least one gripper dim is required")
        if self.dilate < 0:
            raise ConfigError("dilate must be non-negative")

    def fit(self, dataset):
        dims = list(self.gripper_dims)
        lo = np.full(len(dims), np.inf)
        hi = np.full(len(dims), -np.inf)
        for ep in dataset.episodes:
            cols = ep.actions[:, dims]
            lo = np.minimum(lo, cols.min(axis=0))
            hi = np.maximum(hi, cols.max(axis=0))
        if not np.all(hi > lo):
            raise ConfigError("gripper dims show no range in this dataset")
        self.closed_threshold_ = lo + 0.5 * (hi - lo)
        self.open_value_ = hi

        raw: dict = {}
        for ep in dataset.episodes:
            closed = ep.actions[:, dims] < self.closed_threshold_
            n_stages = dataset.task_row(ep.task_id)["n_stages"]
            for s in range(n_stages):
                mask = ep.stage_labels == s
                key = (ep.task_id, s)
                seen = closed[mask].any(axis=0) if mask.any() else np.zeros(len(dims), dtype=bool)
                raw[key] = raw.get(key, np.zeros(len(dims), dtype=bool)) | seen

        table = {}
        for (task_id, s), seen in raw.items():
            merged = seen.copy()
            for off in range(1, self.dilate + 1):
                for neighbor in ((task_id, s - off), (task_id, s + off)):
                    if neighbor in raw:
                        merged |= raw[neighbor]
            table[(task_id, s)] = merged
        self.table_ = table
        return self

    def lookup(self, task_id: int, stage: int):
        """Ever-closed flags for one (task, stage), or None when unknown."""
        return self.table_.get((int(task_id), int(stage)))


def gripper_correct(current_action: np.ndarray, task_id: int, stage: int,
                    stats: GripperStats) -> np.ndarray:
    """Open any gripper commanded closed where training never closed it.

    Unknown (task, stage) pairs pass through unchanged, logged. Applying the
    correction twice changes nothing: an opened gripper is no longer closed.
    """
    out = np.asarray(current_action, dtype=np.float64).copy()
    record = stats.lookup(task_id, stage)
    if record is None:
        logger.info("no gripper statistics for task %s stage %s; passing through",
                    task_id, stage)
        return out
    for j, d in enumerate(stats.gripper_dims):
        if out[d] < stats.closed_threshold_[j] and not record[j]:
            out[d] = stats.open_value_[j]
    return out


class PolicyEngine:
    """Learned chunked policy wired for the rollout harness.

    Per plan() call: one stage vote, one (optionally inpainted) denoise, tail
    bookkeeping in normalized-delta space, physical conversion, optional
    compression, gripper guard, one trace record.
    """

    def __init__(self, stack: PolicyStack, *, gripper_stats: Optional[GripperStats] = None,
                 inpaint: Optional[InpaintConfig] = None,
                 compression: Optional[CompressionConfig] = None,
                 denoise_steps: int = 10, execute_count: int = 26, save_count: int = 4,
                 use_tracker: bool = True, use_gripper_rule: bool = True,
                 trace_path=None):
        layout = stack.layout
        if save_count + execute_count != layout.horizon:
            raise ConfigError(
                f"save_count ({save_count}) + execute_count ({execute_count}) "
                f"must equal the horizon ({layout.horizon})"
            )
        if denoise_steps < 1:
            raise ConfigError(f"denoise_steps must be >= 1, got {denoise_steps}")
        self.stack = stack
        self.gripper_stats = gripper_stats
        cfg = inpaint if inpaint is not None else InpaintConfig()
        if cfg.mode != "off" and cfg.partition is None:
            cfg = InpaintConfig(
                time_threshold=cfg.time_threshold,
                partition=stack.covariance.partition(save_count),
                mode=cfg.mode,
                reanchor_tail=cfg.reanchor_tail,
            )
        self.inpaint = cfg
        if compression is None:
            compression = CompressionConfig(
                in_steps=execute_count,
                out_steps=20,
                speedup=execute_count / 20,
                velocity_dim_range=layout.velocity_dims,
                gripper_dims=layout.gripper_dims,
            )
        self.compression = compression
        self.denoise_steps = int(denoise_steps)
        self.execute_count = int(execute_count)
        self.save_count = int(save_count)
        self.use_tracker = use_tracker
        self.use_gripper_rule = use_gripper_rule
        self.trace_path = trace_path
        self._task = None

    def begin_episode(self, task, rng, world=None) -> None:
        self._task = self.stack.task_info(task.task_id)
        self._tracker = StageTracker(task=self._task) if self.use_tracker else None
        self._rng = rng
        self._tail = None
        self._tail_base = None
        self._prev_last = None
        self._cycle = 0
        self._jumps: list = []
        self._agg = {"cycles": 0, "compressed_cycles": 0, "corrections": 0,
                     "threshold_hits": 0, "final_stage": 0}

    def _build_plan(self, q_current: np.ndarray) -> Optional[RollingPlan]:
        if self._tail is None or self.inpaint.mode == "off":
            return None
        tail = self._tail
        if self.inpaint.reanchor_tail:
            # tail deltas were planned against the previous base joints; shift
            # the position dims so they aim at the same absolute targets
            tail = tail.copy()
            layout = self.stack.layout
            pos = list(layout.position_dims)
            h0 = layout.horizon - self.save_count
            sigma = self.stack.normalizer.sigma_[h0:, pos]
            shift = self._tail_base[pos] - q_current[pos]
            tail[:, pos] += shift / sigma
        part = self.inpaint.partition
        z = self.stack.noise.sample(self._rng).ravel()[part.observed]
        return RollingPlan(saved_tail=tail, fixed_noise=z, execute_count=self.execute_count)

    def plan(self, obs) -> np.ndarray:
        stack = self.stack
        layout = stack.layout
        obs = np.asarray(obs, dtype=np.float64)
        q = obs[: layout.dim].copy()

        features = stack.encoder.encode(obs)
        _, raw_stage = predict_stage(stack.stage_head, features, self._task)
        stage = self._tracker.vote(raw_stage) if self._tracker is not None else 0
        context = np.concatenate(
            [features, self._task.embedding, stack.fusion_flat(self._task.task_id, stage)]
        )

        plan_state = self._build_plan(q)
        chunk = inpaint_denoise(stack.model, context, plan_state, self.inpaint, stack.noise,
                                steps=self.denoise_steps, rng=self._rng)

        self._tail = chunk[layout.horizon - self.save_count :].copy()
        self._tail_base = q
        norm_exec = chunk[: self.execute_count]
        delta = stack.normalizer.inverse_transform(chunk)
        physical = from_delta(delta, q, layout)[: self.execute_count]

        compressed = should_compress(norm_exec, self.compression)
        out = compress(physical, self.compression) if compressed else physical

        corrections = 0
        if self.use_gripper_rule and self.gripper_stats is not None:
            for i in range(out.shape[0]):
                fixed = gripper_correct(out[i], self._task.task_id, stage, self.gripper_stats)
                if not np.array_equal(fixed, out[i]):
                    corrections += 1
                    out[i] = fixed

        jump = 0.0
        if self._prev_last is not None:
            jump = float(np.max(np.abs(out[0] - self._prev_last)))
            self._jumps.append(jump)
        self._prev_last = out[-1].copy()

        hits = threshold_hits(self.inpaint, self.denoise_steps) if plan_state is not None else 0
        agg = self._agg
        agg["cycles"] += 1
        agg["compressed_cycles"] += int(compressed)
        agg["corrections"] += corrections
        agg["threshold_hits"] += hits
        agg["final_stage"] = stage
        self._write_trace(
            {
                "cycle": self._cycle,
                "stage": stage,
                "raw_stage": raw_stage,
                "threshold_hits": hits,
                "boundary_jump": jump,
                "compressed": compressed,
                "corrections": corrections,
            }
        )
        self._cycle += 1
        return out

    def _write_trace(self, record: dict) -> None:
        if self.trace_path is None:
            return
        with open(self.trace_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    @property
    def trace(self) -> dict:
        out = dict(self._agg)
        out["boundary_jumps"] = [round(j, 6) for j in self._jumps]
        out["mean_boundary_jump"] = float(np.mean(self._jumps)) if self._jumps else 0.0
        return out
