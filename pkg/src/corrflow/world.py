"""Planar staged-task simulator, scripted experts, and the q-score evaluator.

The world is deliberately small: a point agent with two auxiliary joints
and one gripper in a [-1.5, 1.5]^2 workspace. What makes it interesting is
what the observation hides. The agent never sees a carried-object flag,
and the object-proximity channel is an aggregate (nearest object, no
identity), so repeated visits to the same place look alike. Task progress
has to come from somewhere else; that is the job of the stage system.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .actions import ActionLayout
from .data import Episode, EpisodeDataset
from .errors import GenerationError
from .seeds import component_rng
from .stages import label_stages

WORLD_DT = 1.0 / 30.0
VMAX = 0.6
AUX_RATE = 0.15          # max aux-joint travel per step toward the command
AUX_LIMIT = 1.6
GRIP_CLOSED = 0.35       # below this the gripper counts as closed
GRAB_RADIUS = 0.12
GOAL_RADIUS = 0.15
WAYPOINT_RADIUS = 0.06
VIA_RADIUS = 0.12
SENSE_RADIUS = 0.7
WORKSPACE = 1.5
SLOWDOWN_DIST = 0.3
BEACONS = np.array([[1.2, 1.2], [-1.2, 1.2], [-1.2, -1.2], [1.2, -1.2]])
OBS_DIM = 10             # x, y, th1, th2, grip, 4 beacon ranges, object proximity

WORLD_LAYOUT = ActionLayout(
    horizon=30, dim=5, velocity_dims=(0, 1), gripper_dims=(4,), control_rate=30.0
)


@dataclass(frozen=True)
class GoalCondition:
    kind: str                  # "object_at" | "gripped" | "reached"
    object_idx: int = -1
    point: tuple = ()
    radius: float = GOAL_RADIUS


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    n_stages: int
    start: tuple
    objects: tuple             # initial object positions
    program: tuple             # controller ops: goto/grab/release/dwell
    conditions: tuple


@dataclass
class GoalReport:
    satisfied: list
    reason: str = "ok"

    @property
    def q(self) -> float:
        return float(np.mean(self.satisfied)) if self.satisfied else 0.0

    @property
    def success(self) -> bool:
        return bool(self.satisfied) and all(self.satisfied)


def default_world_spec():
    """Four tasks: plain delivery, patrol, double delivery, ambiguous shuttle."""
    t0 = TaskSpec(
        task_id=0,
        name="deliver",
        n_stages=6,
        start=(-0.9, 0.9),
        objects=((0.6, 0.6),),
        program=(
            ("goto", (0.6, 0.6)),
            ("grab",),
            ("goto", (-0.6, -0.6)),
            ("release",),
            ("goto", (-0.9, 0.3)),
            ("dwell", 15),
        ),
        conditions=(
            GoalCondition("gripped", object_idx=0),
            GoalCondition("object_at", object_idx=0, point=(-0.6, -0.6)),
        ),
    )
    patrol = ((1.05, -0.35), (0.65, 0.95), (-0.65, 0.95), (-1.05, -0.35))
    t1 = TaskSpec(
        task_id=1,
        name="patrol",
        n_stages=4,
        start=(0.0, -1.05),
        objects=(),
        program=tuple(("goto", p) for p in patrol) + (("dwell", 15),),
        conditions=tuple(GoalCondition("reached", point=p) for p in patrol),
    )
    t2 = TaskSpec(
        task_id=2,
        name="double-deliver",
        n_stages=8,
        start=(-1.05, 0.0),
        objects=((0.9, 0.5), (0.9, -0.5)),
        program=(
            ("goto", (0.9, 0.5)),
            ("grab",),
            ("goto", (-0.9, 0.5)),
            ("release",),
            ("goto", (0.9, -0.5)),
            ("grab",),
            ("goto", (-0.9, -0.5)),
            ("release",),
            ("dwell", 15),
        ),
        conditions=(
            GoalCondition("gripped", object_idx=0),
            GoalCondition("object_at", object_idx=0, point=(-0.9, 0.5)),
            GoalCondition("gripped", object_idx=1),
            GoalCondition("object_at", object_idx=1, point=(-0.9, -0.5)),
        ),
    )
    # Shuttle: four rounds, each ferrying its own object across a distinct
    # horizontal band. Any single frame pins down the band, but not how many
    # rounds are done: cross-band transits intersect the bands pointwise, and
    # a policy that loses count repeats or skips a round. Dwells are tuned so
    # every round takes one temporal quarter of the episode.
    picks = ((1.05, 0.9), (1.05, 0.3), (1.05, -0.3), (1.05, -0.9))
    drops = ((-1.0, 0.9), (-1.0, 0.3), (-1.0, -0.3), (-1.0, -0.9))
    dwells = (30, 41, 41, 41)
    program = []
    for k in range(4):
        program += [
            ("goto", picks[k]),
            ("grab",),
            ("goto", drops[k]),
            ("release",),
            ("dwell", dwells[k]),
        ]
    t3 = TaskSpec(
        task_id=3,
        name="shuttle",
        n_stages=4,
        start=(-1.25, 0.55),
        objects=picks,
        program=tuple(program),
        conditions=tuple(
            GoalCondition("object_at", object_idx=k, point=drops[k]) for k in range(4)
        ),
    )
    return (t0, t1, t2, t3)


class World:
    """Deterministic world state; all randomness enters through start jitter."""

    def __init__(self, task: TaskSpec, rng=None, start_jitter=0.0, force_close=None):
        self.task = task
        jitter = np.zeros(2)
        if rng is not None and start_jitter > 0:
            jitter = rng.normal(0.0, start_jitter, size=2)
        self.pos = np.array(task.start, dtype=np.float64) + jitter
        self.theta = np.zeros(2)
        self.grip = 1.0
        self.carried = None
        self.object_pos = [np.array(p, dtype=np.float64) for p in task.objects]
        self.ever_gripped = set()
        self.reached = [False] * len(task.conditions)
        self.force_close = force_close
        self.t = 0
        self.distance = 0.0
        self._mark_reached()   # the spawn state itself can satisfy conditions

    def _mark_reached(self) -> None:
        for i, cond in enumerate(self.task.conditions):
            if cond.kind == "reached" and not self.reached[i]:
                if np.linalg.norm(self.pos - np.array(cond.point)) <= cond.radius:
                    self.reached[i] = True

    @property
    def carrying(self) -> bool:
        return self.carried is not None

    def joint_state(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.theta[0], self.theta[1], self.grip])

    def observe(self) -> np.ndarray:
        obs = np.empty(OBS_DIM)
        obs[:5] = self.joint_state()
        obs[5:9] = np.linalg.norm(BEACONS - self.pos, axis=1) / (2 * WORKSPACE)
        near = 0.0
        for pos in self.object_pos:
            d = float(np.linalg.norm(pos - self.pos))
            near = max(near, 1.0 - d / SENSE_RADIUS)
        obs[9] = max(near, 0.0)
        return obs

    def step(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        v = a[:2]
        speed = float(np.linalg.norm(v))
        if speed > VMAX:
            v = v * (VMAX / speed)
        new_pos = np.clip(self.pos + WORLD_DT * v, -WORKSPACE, WORKSPACE)
        self.distance += float(np.linalg.norm(new_pos - self.pos))
        self.pos = new_pos

        delta = np.clip(a[2:4] - self.theta, -AUX_RATE, AUX_RATE)
        self.theta = np.clip(self.theta + delta, -AUX_LIMIT, AUX_LIMIT)

        prev_grip = self.grip
        grip = float(np.clip(a[4], 0.0, 1.0))
        if self.force_close is not None and self.force_close[0] <= self.t < self.force_close[1]:
            grip = 0.0
        self.grip = grip

        closed_now = self.grip < GRIP_CLOSED
        closed_before = prev_grip < GRIP_CLOSED
        if closed_now and not closed_before and not self.carrying:
            best, best_d = None, np.inf
            for idx, pos in enumerate(self.object_pos):
                d = float(np.linalg.norm(pos - self.pos))
                if d <= GRAB_RADIUS and d < best_d:
                    best, best_d = idx, d
            if best is not None:
                self.carried = best
                self.ever_gripped.add(best)
        elif not closed_now and closed_before and self.carrying:
            self.object_pos[self.carried] = self.pos.copy()
            self.carried = None

        if self.carrying:
            self.object_pos[self.carried] = self.pos.copy()

        self._mark_reached()
        self.t += 1
        return self.observe()

    def goal_report(self) -> GoalReport:
        satisfied = []
        for i, cond in enumerate(self.task.conditions):
            if cond.kind == "object_at":
                d = np.linalg.norm(self.object_pos[cond.object_idx] - np.array(cond.point))
                satisfied.append(bool(d <= cond.radius))
            elif cond.kind == "gripped":
                satisfied.append(cond.object_idx in self.ever_gripped)
            elif cond.kind == "reached":
                satisfied.append(self.reached[i])
            else:
                raise GenerationError(f"unknown condition kind {cond.kind!r}")
        return GoalReport(satisfied)


class ScriptedController:
    """Waypoint-following expert with low-pass filtered commands.

    The filter state is internal and not observable, which is what gives
    the demonstrations their correlated, non-Markovian texture.
    """

    LP_VEL = 0.15
    LP_AUX = 0.25

    def __init__(self, task: TaskSpec, rng=None, dither=0.015):
        self.task = task
        self.rng = rng
        self.dither = dither
        self.op_idx = 0
        self.dwell_left = 0
        self._dwell_op = None
        self.v_cmd = np.zeros(2)
        self.aux_cmd = np.zeros(2)
        self.grip_cmd = 1.0
        self.prev_heading = 0.0

    @property
    def done(self) -> bool:
        return self.op_idx >= len(self.task.program)

    def _advance(self, world: World) -> None:
        while not self.done:
            op = self.task.program[self.op_idx]
            if op[0] == "goto":
                if np.linalg.norm(world.pos - np.array(op[1])) > WAYPOINT_RADIUS:
                    return
            elif op[0] == "via":
                # pass-through waypoint: looser radius, taken at full speed
                if np.linalg.norm(world.pos - np.array(op[1])) > VIA_RADIUS:
                    return
            elif op[0] == "grab":
                if not world.carrying:
                    self.grip_cmd = 0.0
                    return
            elif op[0] == "release":
                if world.carrying:
                    self.grip_cmd = 1.0
                    return
            elif op[0] == "dwell":
                if self._dwell_op != self.op_idx:
                    self._dwell_op = self.op_idx
                    self.dwell_left = int(op[1])
                if self.dwell_left > 0:
                    self.dwell_left -= 1
                    return
            self.op_idx += 1

    def action(self, world: World) -> np.ndarray:
        self._advance(world)
        v_des = np.zeros(2)
        dist = 0.0
        if not self.done:
            op = self.task.program[self.op_idx]
            if op[0] in ("goto", "via"):
                target = np.array(op[1])
                offset = target - world.pos
                dist = float(np.linalg.norm(offset))
                if dist > 1e-9:
                    scale = 1.0 if op[0] == "via" else min(1.0, dist / SLOWDOWN_DIST)
                    v_des = offset / dist * VMAX * scale
        if self.rng is not None and self.dither > 0:
            v_des = v_des + self.rng.normal(0.0, self.dither, size=2)

        self.v_cmd = (1 - self.LP_VEL) * self.v_cmd + self.LP_VEL * v_des

        heading = math.atan2(self.v_cmd[1], self.v_cmd[0]) if np.linalg.norm(self.v_cmd) > 1e-6 else self.prev_heading
        # first joint tracks turn rate, not absolute heading: it settles back to
        # zero on straight segments instead of remembering where the agent
        # came from, so repeated approaches stay observation-identical
        turn = math.remainder(heading - self.prev_heading, 2 * math.pi)
        self.prev_heading = heading
        aux_des = np.array([3.0 * turn, 0.6 * min(dist, 1.0) - 0.3])
        if self.rng is not None and self.dither > 0:
            aux_des = aux_des + self.rng.normal(0.0, 0.01, size=2)
        self.aux_cmd = (1 - self.LP_AUX) * self.aux_cmd + self.LP_AUX * aux_des

        return np.array([self.v_cmd[0], self.v_cmd[1], self.aux_cmd[0], self.aux_cmd[1], self.grip_cmd])


@lru_cache(maxsize=None)
def scripted_duration(task: TaskSpec) -> int:
    """Steps a jitter-free scripted run takes; the time-limit reference."""
    world = World(task)
    ctrl = ScriptedController(task, rng=None, dither=0.0)
    cap = 20000
    for step in range(cap):
        if ctrl.done:
            return step
        world.step(ctrl.action(world))
    raise GenerationError(f"scripted controller did not finish task {task.name!r}")


class ScriptedEngine:
    """Expert wrapped in the engine interface; used as the oracle closure."""

    def __init__(self, dither=0.0):
        self.dither = dither
        self._ctrl = None
        self._world = None

    def begin_episode(self, task: TaskSpec, rng, world: World = None) -> None:
        # The expert legitimately reads sim internals; learned engines do not.
        self._ctrl = ScriptedController(task, rng=rng if self.dither > 0 else None,
                                        dither=self.dither)
        self._world = world

    def plan(self, obs) -> np.ndarray:
        return self._ctrl.action(self._world)[None, :]

    @property
    def trace(self):
        return {}


def generate_demos(tasks, episodes_per_task: int, root_seed: int,
                   start_jitter=0.03) -> EpisodeDataset:
    """Scripted demonstrations with per-timestep stage labels, all verified q=1."""
    episodes = []
    table = []
    for task in tasks:
        table.append(
            {
                "task_id": task.task_id,
                "name": task.name,
                "n_stages": task.n_stages,
                "scripted_steps": scripted_duration(task),
            }
        )
    idx = 0
    for task in tasks:
        cap = 4 * scripted_duration(task) + 200
        for _ in range(episodes_per_task):
            rng = component_rng(root_seed, "dataset", idx)
            world = World(task, rng=rng, start_jitter=start_jitter)
            ctrl = ScriptedController(task, rng=rng)
            obs_rows, act_rows = [], []
            while not ctrl.done:
                if len(act_rows) >= cap:
                    raise GenerationError(
                        f"task {task.name!r} episode {idx} exceeded {cap} steps"
                    )
                obs_rows.append(world.observe())
                a = ctrl.action(world)
                act_rows.append(a)
                world.step(a)
            report = world.goal_report()
            if not report.success:
                raise GenerationError(
                    f"scripted demo failed task {task.name!r} (q={report.q:.2f})"
                )
            length = len(act_rows)
            episodes.append(
                Episode(
                    task.task_id,
                    np.array(obs_rows),
                    np.array(act_rows),
                    label_stages(length, task.n_stages),
                )
            )
            idx += 1
    return EpisodeDataset(episodes, WORLD_LAYOUT, table)


def rollout(engine, task: TaskSpec, rng, *, start_jitter=0.03, force_close=None,
            time_limit=None):
    """Close the loop: engine plans, world steps, conditions scored at the end."""
    if time_limit is None:
        time_limit = 2 * scripted_duration(task)
    world = World(task, rng=rng, start_jitter=start_jitter, force_close=force_close)
    engine.begin_episode(task, rng, world=world)
    obs = world.observe()
    steps = 0
    reason = "ok"
    while steps < time_limit:
        plan = np.asarray(engine.plan(obs))
        if plan.ndim != 2 or not np.all(np.isfinite(plan)):
            reason = "numerical"
            break
        stop = False
        for row in plan:
            obs = world.step(row)
            steps += 1
            if steps >= time_limit:
                stop = True
                break
        if stop:
            break
    report = world.goal_report()
    if reason != "ok":
        report = GoalReport([False] * len(report.satisfied), reason=reason)
    trace = {
        "task_id": task.task_id,
        "steps": steps,
        "distance": world.distance,
        "reason": reason,
        "engine": dict(getattr(engine, "trace", {}) or {}),
    }
    return report, trace


def evaluate(engine_factory, tasks, episodes_per_task: int, root_seed: int,
             threads=None, force_close=None):
    """Per-task and overall q table: episode q -> task mean -> overall mean."""
    jobs = []
    idx = 0
    for task in tasks:
        for _ in range(episodes_per_task):
            jobs.append((task, idx))
            idx += 1

    def run_one(job):
        task, episode_idx = job
        rng = component_rng(root_seed, "rollout", episode_idx)
        engine = engine_factory()
        report, trace = rollout(engine, task, rng, force_close=force_close)
        return task.task_id, episode_idx, report, trace

    if threads is None:
        threads = int(os.environ.get("CORRFLOW_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, jobs))
    else:
        outcomes = [run_one(j) for j in jobs]
    outcomes.sort(key=lambda r: (r[0], r[1]))

    per_task = {}
    for task_id, episode_idx, report, trace in outcomes:
        row = per_task.setdefault(
            task_id, {"q": [], "success": [], "steps": [], "distance": []}
        )
        row["q"].append(report.q)
        row["success"].append(report.success)
        row["steps"].append(trace["steps"])
        row["distance"].append(trace["distance"])

    tasks_out = []
    for task in tasks:
        row = per_task.get(task.task_id, {"q": [], "success": [], "steps": [], "distance": []})
        tasks_out.append(
            {
                "task_id": task.task_id,
                "name": task.name,
                "episodes": len(row["q"]),
                "q": float(np.mean(row["q"])) if row["q"] else 0.0,
                "success_rate": float(np.mean(row["success"])) if row["success"] else 0.0,
                "mean_steps": float(np.mean(row["steps"])) if row["steps"] else 0.0,
                "mean_distance": float(np.mean(row["distance"])) if row["distance"] else 0.0,
                "episode_q": [float(v) for v in row["q"]],
            }
        )
    overall = float(np.mean([t["q"] for t in tasks_out])) if tasks_out else 0.0
    overall_success = float(np.mean([t["success_rate"] for t in tasks_out])) if tasks_out else 0.0
    return {"tasks": tasks_out, "q_score": overall, "success_rate": overall_success}
