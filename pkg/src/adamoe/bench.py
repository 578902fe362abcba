"""Deterministic 2-D manipulation benchmark: point effector plus scalar gripper.

Three task kinds exercise the qualitative phases of manipulation (approach,
grasp, transport, release): reach a goal, move one object into a goal region,
and a two-object sequential variant. Scripted proportional controllers provide
expert demonstrations; datasets are line-delimited JSON with 17-significant-
digit floats so regeneration is byte-identical and replay is exact.

Actions are [dx, dy, dgrip]; every component is a per-step delta clipped to
0.1, so the zero action leaves the state unchanged. An object is grasped when
the gripper closes below 0.5 within 0.05 of it, and a held object tracks the
effector exactly until the gripper opens back past 0.5.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, RegistryError
from .policy import Observation

MAX_DELTA = 0.1
GRASP_RADIUS = 0.05
GRIP_CLOSED = 0.5    # below: can grasp; at or above: open / releases
WORKSPACE = 1.0
GENERATOR_VERSION = 1

Box = tuple[tuple[float, float], tuple[float, float]]  # (low, high) corners

D_STATE = 3
D_SCENE = 8


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    kind: str                       # reach | pick-place | sequential
    goals: tuple[tuple[float, float], ...]
    object_boxes: tuple[Box, ...] = ()
    effector_box: Box = ((-0.9, -0.9), (0.9, 0.9))
    tolerance: float = 0.05
    max_steps: int = 60

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")
        for point in self.goals:
            if max(abs(point[0]), abs(point[1])) > WORKSPACE:
                raise ConfigError(f"goal {point} outside workspace")
        for low, high in self.object_boxes + (self.effector_box,):
            if min(low + high) < -WORKSPACE or max(low + high) > WORKSPACE:
                raise ConfigError("spawn box outside workspace")


def default_task_specs() -> list[TaskSpec]:
    return [
        TaskSpec(task_id=0, name="reach", kind="reach",
                 goals=((0.6, 0.6),),
                 effector_box=((-0.9, -0.9), (0.3, 0.3)),
                 max_steps=60),
        TaskSpec(task_id=1, name="pick-place", kind="pick-place",
                 goals=((0.6, -0.4),),
                 object_boxes=(((-0.85, -0.6), (-0.3, 0.6)),),
                 effector_box=((0.0, 0.3), (0.5, 0.9)),
                 max_steps=150),
        TaskSpec(task_id=2, name="sequential", kind="sequential",
                 goals=((0.5, 0.5), (0.7, -0.5)),
                 object_boxes=(((-0.9, 0.2), (-0.5, 0.8)),
                               ((-0.9, -0.8), (-0.5, -0.2))),
                 effector_box=((-0.1, -0.1), (0.3, 0.3)),
                 max_steps=300),
    ]


def task_registry() -> dict[str, TaskSpec]:
    return {spec.name: spec for spec in default_task_specs()}


def resolve_tasks(names: list[str]) -> list[TaskSpec]:
    registry = task_registry()
    specs = []
    for name in names:
        if name not in registry:
            raise RegistryError(f"unknown task {name!r}; known tasks: {sorted(registry)}")
        specs.append(registry[name])
    return specs


@dataclass
class EnvState:
    effector: np.ndarray          # [2]
    gripper: float                # opening in [0, 1]
    objects: np.ndarray           # [n_objects, 2]
    held: int | None
    step: int
    success: bool


def derive_seed(master: int, index: int) -> int:
    """splitmix64 stream: one well-mixed 63-bit seed per episode index."""
    mask = (1 << 64) - 1
    z = (master + (index + 1) * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return (z ^ (z >> 31)) & ((1 << 63) - 1)


def _success(spec: TaskSpec, effector, gripper, objects, held) -> bool:
    if spec.kind == "reach":
        return bool(np.linalg.norm(effector - np.asarray(spec.goals[0])) < spec.tolerance)
    placed = all(
        np.linalg.norm(objects[i] - np.asarray(spec.goals[i])) < spec.tolerance
        for i in range(len(spec.object_boxes)))
    return placed and gripper >= GRIP_CLOSED and held is None


def env_reset(spec: TaskSpec, seed: int) -> EnvState:
    rng = np.random.default_rng(seed)
    low, high = spec.effector_box
    effector = rng.uniform(low, high)
    objects = np.array([rng.uniform(b[0], b[1]) for b in spec.object_boxes],
                       dtype=np.float64).reshape(len(spec.object_boxes), 2)
    state = EnvState(effector=effector, gripper=1.0, objects=objects,
                     held=None, step=0, success=False)
    state.success = _success(spec, state.effector, state.gripper, state.objects, state.held)
    return state


def env_step(spec: TaskSpec, state: EnvState, action: np.ndarray) -> EnvState:
    action = np.asarray(action, dtype=np.float64)
    delta = np.clip(action[:2], -MAX_DELTA, MAX_DELTA)
    effector = np.clip(state.effector + delta, -WORKSPACE, WORKSPACE)
    gripper = float(np.clip(state.gripper + np.clip(action[2], -MAX_DELTA, MAX_DELTA), 0.0, 1.0))

    objects = state.objects.copy()
    held = state.held
    if held is not None:
        if gripper >= GRIP_CLOSED:
            held = None               # release; object stays where it is
        else:
            objects[held] = effector  # held object tracks the effector exactly
    if held is None and gripper < GRIP_CLOSED and len(objects):
        dists = np.linalg.norm(objects - effector, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] < GRASP_RADIUS:
            held = nearest
            objects[held] = effector

    success = state.success or _success(spec, effector, gripper, objects, held)
    return EnvState(effector=effector, gripper=gripper, objects=objects,
                    held=held, step=state.step + 1, success=success)


def observation_from_state(spec: TaskSpec, state: EnvState) -> Observation:
    scene = np.zeros(D_SCENE)
    for i in range(min(2, len(state.objects))):
        scene[2 * i:2 * i + 2] = state.objects[i]
    for i in range(min(2, len(spec.goals))):
        scene[4 + 2 * i:6 + 2 * i] = spec.goals[i]
    return Observation(state=np.array([state.effector[0], state.effector[1], state.gripper]),
                       scene=scene, task_id=spec.task_id)


# --- scripted experts ---------------------------------------------------------


def _toward(target, position) -> np.ndarray:
    return np.clip(np.asarray(target) - position, -MAX_DELTA, MAX_DELTA)


def _pick_place_action(state: EnvState, obj: int, goal) -> np.ndarray:
    goal = np.asarray(goal)
    if state.held == obj:
        if np.abs(goal - state.effector).max() > 1e-12:
            return np.array([*(_toward(goal, state.effector)), -MAX_DELTA])
        return np.array([0.0, 0.0, MAX_DELTA])     # on target: open to release
    target = state.objects[obj]
    if np.abs(target - state.effector).max() > 1e-12:
        return np.array([*(_toward(target, state.effector)), MAX_DELTA])
    return np.array([0.0, 0.0, -MAX_DELTA])        # on the object: close to grasp


def _delivered(spec: TaskSpec, state: EnvState, obj: int) -> bool:
    return (state.held != obj
            and np.linalg.norm(state.objects[obj] - np.asarray(spec.goals[obj])) < spec.tolerance)


def expert_action(spec: TaskSpec, state: EnvState) -> np.ndarray:
    """Proportional controller toward the current subgoal with gripper scheduling."""
    if spec.kind == "reach":
        return np.array([*(_toward(spec.goals[0], state.effector)), MAX_DELTA])
    if spec.kind == "pick-place":
        return _pick_place_action(state, 0, spec.goals[0])
    if not _delivered(spec, state, 0):
        return _pick_place_action(state, 0, spec.goals[0])
    return _pick_place_action(state, 1, spec.goals[1])


@dataclass(frozen=True)
class TrajStep:
    obs: Observation
    chunk: np.ndarray   # [horizon, 3] upcoming expert actions


@dataclass(frozen=True)
class Trajectory:
    task_id: int
    seed: int
    success: bool
    steps: tuple[TrajStep, ...]


def scripted_expert(spec: TaskSpec, seed: int, horizon: int = 50) -> Trajectory:
    """Roll the scripted controller and package (observation, chunk) pairs.

    Chunk targets are the next `horizon` controller actions, padded by
    repeating the final action once the episode ends.
    """
    state = env_reset(spec, seed)
    observations: list[Observation] = []
    actions: list[np.ndarray] = []
    while not state.success and state.step < spec.max_steps:
        action = expert_action(spec, state)
        observations.append(observation_from_state(spec, state))
        actions.append(action)
        state = env_step(spec, state, action)
    steps = []
    n = len(actions)
    for t in range(n):
        chunk = np.empty((horizon, 3))
        for j in range(horizon):
            chunk[j] = actions[min(t + j, n - 1)]
        steps.append(TrajStep(obs=observations[t], chunk=chunk))
    return Trajectory(task_id=spec.task_id, seed=seed, success=state.success,
                      steps=tuple(steps))


def replay_trajectory(spec: TaskSpec, traj: Trajectory) -> tuple[bool, float]:
    """Re-run the stored actions; returns (final success, max observation drift)."""
    state = env_reset(spec, traj.seed)
    drift = 0.0
    for step in traj.steps:
        recorded = observation_from_state(spec, state)
        drift = max(drift,
                    float(np.abs(recorded.state - step.obs.state).max(initial=0.0)),
                    float(np.abs(recorded.scene - step.obs.scene).max(initial=0.0)))
        state = env_step(spec, state, step.chunk[0])
    return state.success, drift


# --- dataset serialization ------------------------------------------------------


def _fmt(value) -> str:
    """Minimal JSON emitter with 17-significant-digit floats for exact round trips."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, np.ndarray):
        return _fmt(value.tolist())
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ",".join(f"{_fmt(str(k))}:{_fmt(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"cannot serialize {type(value)!r}")


def _trajectory_record(traj: Trajectory) -> dict:
    return {
        "task_id": traj.task_id,
        "seed": traj.seed,
        "success": traj.success,
        "steps": [{"obs": {"state": s.obs.state, "scene": s.obs.scene,
                           "task_id": s.obs.task_id},
                   "chunk": s.chunk} for s in traj.steps],
    }


def manifest_path(dataset_path: str) -> str:
    return dataset_path + ".manifest.json"


def generate_dataset(specs: list[TaskSpec], per_task: int, seed: int,
                     out_path: str, horizon: int = 50) -> dict:
    """Write one JSON record per successful expert trajectory plus a manifest.

    Controller failures (which should not occur) are excluded from the file
    and reported in the manifest. Deterministic given `seed`.
    """
    if per_task < 1:
        raise ContractError("per_task count must be >= 1")
    lines = []
    tasks_meta = {}
    episode = 0
    for spec in specs:
        seeds, failures = [], 0
        for _ in range(per_task):
            ep_seed = derive_seed(seed, episode)
            episode += 1
            traj = scripted_expert(spec, ep_seed, horizon=horizon)
            if traj.success:
                lines.append(_fmt(_trajectory_record(traj)))
                seeds.append(ep_seed)
            else:
                failures += 1
        tasks_meta[spec.name] = {
            "task_id": spec.task_id,
            "count": len(seeds),
            "failures": failures,
            "success_rate": len(seeds) / per_task,
            "seeds": seeds,
        }
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "master_seed": seed,
        "horizon": horizon,
        "total": len(lines),
        "tasks": tasks_meta,
    }
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    try:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        with open(manifest_path(out_path), "w", encoding="utf-8") as fh:
            fh.write(_fmt(manifest) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset to {out_path}: {exc}") from exc
    return manifest


def load_dataset(path: str) -> list[Trajectory]:
    trajectories = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                steps = tuple(
                    TrajStep(obs=Observation(state=np.array(s["obs"]["state"]),
                                             scene=np.array(s["obs"]["scene"]),
                                             task_id=s["obs"]["task_id"]),
                             chunk=np.array(s["chunk"]))
                    for s in rec["steps"])
                trajectories.append(Trajectory(task_id=rec["task_id"], seed=rec["seed"],
                                               success=rec["success"], steps=steps))
    except OSError as exc:
        raise OSError(f"failed reading dataset from {path}: {exc}") from exc
    return trajectories


# --- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    successes: int
    trials: int
    rate: float
    ci_low: float
    ci_high: float


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def evaluate(policy, spec: TaskSpec, trials: int, seed: int,
             n_denoise: int = 10, execute_horizon: int = 25) -> EvalResult:
    """Receding-horizon rollout: predict a chunk, execute its first
    `execute_horizon` actions, replan; success = task predicate before timeout."""
    if trials < 1:
        raise ContractError("trials must be >= 1")
    successes = 0
    for trial in range(trials):
        trial_seed = derive_seed(seed, trial)
        rng = np.random.default_rng(trial_seed)
        state = env_reset(spec, trial_seed)
        while not state.success and state.step < spec.max_steps:
            obs = observation_from_state(spec, state)
            chunk = policy.predict_action_chunk(obs, rng, n_denoise)
            for action in chunk[:execute_horizon]:
                state = env_step(spec, state, action)
                if state.success or state.step >= spec.max_steps:
                    break
        successes += int(state.success)
    low, high = wilson_interval(successes, trials)
    return EvalResult(successes=successes, trials=trials,
                      rate=successes / trials, ci_low=low, ci_high=high)


class ScriptedPolicy:
    """Expert controller wrapped behind the policy interface for evaluation."""

    def __init__(self, spec: TaskSpec, horizon: int = 50):
        self.spec = spec
        self.horizon = horizon

    def _state_from_obs(self, obs: Observation) -> EnvState:
        effector = obs.state[:2].copy()
        gripper = float(obs.state[2])
        objects = np.array([obs.scene[2 * i:2 * i + 2]
                            for i in range(len(self.spec.object_boxes))]).reshape(-1, 2)
        held = None
        if gripper < GRIP_CLOSED and len(objects):
            dists = np.linalg.norm(objects - effector, axis=1)
            nearest = int(np.argmin(dists))
            if dists[nearest] < 1e-9:   # a held object tracks the effector exactly
                held = nearest
        return EnvState(effector=effector, gripper=gripper, objects=objects,
                        held=held, step=0, success=False)

    def predict_action_chunk(self, obs: Observation, rng, n_steps: int = 10) -> np.ndarray:
        state = self._state_from_obs(obs)
        chunk = np.zeros((self.horizon, 3))
        action = np.zeros(3)
        for t in range(self.horizon):
            if not state.success:
                action = expert_action(self.spec, state)
                state = env_step(self.spec, state, action)
            chunk[t] = action
        return chunk
