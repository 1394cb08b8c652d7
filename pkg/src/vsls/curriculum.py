"""Reverse-expansion goal curriculum for look-at and screw-motion goals.

Stage parameters grow linearly from near-trivial goals at stage 0 to the
benchmark ranges at the last stage. A freshly sampled goal is only kept for
training if the current policy fails it; goals it already solves count as
solved and are skipped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import se3
from .se3 import Pose
from .sim import CameraIntrinsics, PlanarScene, Workspace, center_visible, is_feasible, render

LOOK_AT = "look-at"
SCREW = "screw"
SCENARIOS = (LOOK_AT, SCREW)


class CurriculumError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurriculumStage:
    stage_idx: int
    box: tuple[float, float, float]
    lookat_radius: float
    roll_sigma: float
    screw_disp: float
    screw_theta: float
    perturb_scale: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box)
        return d

    def as_vector(self) -> np.ndarray:
        return np.array([*self.box, self.lookat_radius, self.roll_sigma, self.screw_disp,
                         self.screw_theta, self.perturb_scale])


@dataclass(frozen=True)
class CurriculumConfig:
    n_stages: int = 8
    goals_per_stage: int = 10
    p_revisit: float = 0.2
    success_return: float = 8.0
    eval_episodes: int = 3
    max_stage: int | None = None  # last stage training may reach (None: n_stages - 1)
    first_box: tuple[float, float, float] = (0.05, 0.05, 0.05)
    last_box: tuple[float, float, float] = (0.75, 0.75, 0.6)
    first_radius: float = 0.02
    last_radius: float = 0.10
    first_roll_sigma: float = math.radians(2.0)
    last_roll_sigma: float = math.radians(5.0)
    first_screw: tuple[float, float] = (0.03, math.radians(10.0))
    last_screw: tuple[float, float] = (0.25, math.radians(70.0))
    # plane perturbation at full scale: (metres, radians) per axis
    plane_perturbation: tuple[float, float] = (0.02, math.radians(5.0))
    max_fresh_tries: int = 40
    max_sample_retries: int = 200

    def __post_init__(self):
        if self.n_stages < 1 or self.goals_per_stage < 1:
            raise ValueError("need at least one stage and one goal per stage")
        if not (0 <= self.p_revisit <= 1):
            raise ValueError("p_revisit must lie in [0, 1]")

    @property
    def last_trainable_stage(self) -> int:
        top = self.n_stages - 1
        return top if self.max_stage is None else min(self.max_stage, top)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def stage_params(cfg: CurriculumConfig, idx: int) -> CurriculumStage:
    s = 0.0 if cfg.n_stages == 1 else idx / (cfg.n_stages - 1)

    def lerp(a, b):
        return (1 - s) * a + s * b

    box = tuple(float(lerp(a, b)) for a, b in zip(cfg.first_box, cfg.last_box))
    return CurriculumStage(
        stage_idx=idx, box=box,
        lookat_radius=float(lerp(cfg.first_radius, cfg.last_radius)),
        roll_sigma=float(lerp(cfg.first_roll_sigma, cfg.last_roll_sigma)),
        screw_disp=float(lerp(cfg.first_screw[0], cfg.last_screw[0])),
        screw_theta=float(lerp(cfg.first_screw[1], cfg.last_screw[1])),
        perturb_scale=float(s),
    )


@dataclass(eq=False)
class Goal:
    goal_id: int
    goal_pose: Pose
    goal_image: np.ndarray
    scene: PlanarScene
    scenario: str
    stage_idx: int = 0
    solved: bool = False
    scene_index: int = 0

    def record(self) -> dict:
        return {"goal_id": self.goal_id, "scenario": self.scenario, "stage": self.stage_idx,
                "scene_id": self.scene.scene_id, "pose": self.goal_pose.to_list(),
                "plane_pose": self.scene.plane_pose.to_list(), "solved": self.solved}


@dataclass(frozen=True)
class GoalContext:
    """Everything goal sampling needs besides the stage."""

    scenes: Sequence[PlanarScene]
    intrinsics: CameraIntrinsics
    workspace: Workspace
    home: Pose
    scenarios: tuple[str, ...] = (LOOK_AT,)
    plane_perturbation: tuple[float, float] = (0.02, math.radians(5.0))


def sample_disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    return np.array([r * math.cos(phi), r * math.sin(phi)])


def lookat_goal_pose(stage: CurriculumStage, home: Pose, scene: PlanarScene,
                     rng: np.random.Generator) -> Pose:
    half = 0.5 * np.asarray(stage.box)
    position = home.t + rng.uniform(-half, half)
    offset = sample_disk(rng, stage.lookat_radius)
    target = scene.plane_pose.t + scene.plane_pose.R @ np.array([offset[0], offset[1], 0.0])
    roll = float(np.clip(rng.normal(0.0, stage.roll_sigma), -2 * stage.roll_sigma,
                         2 * stage.roll_sigma)) if stage.roll_sigma > 0 else 0.0
    return se3.lookat_pose(position, target, roll)


def screw_goal_pose(stage: CurriculumStage, start: Pose, rng: np.random.Generator) -> Pose:
    d = rng.uniform(-stage.screw_disp, stage.screw_disp)
    theta = rng.uniform(-stage.screw_theta, stage.screw_theta)
    return se3.compose(start, Pose([d, 0.0, 0.0], se3.axis_angle_quat([1, 0, 0], theta)))


def sample_goal(stage: CurriculumStage, scenario: str, ctx: GoalContext,
                rng: np.random.Generator, goal_id: int = 0, max_retries: int = 200) -> Goal:
    """Draw a feasible, visible goal; raises CurriculumError when retries run out."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    trans, rot = ctx.plane_perturbation
    for _ in range(max_retries):
        si = int(rng.integers(len(ctx.scenes)))
        scene = ctx.scenes[si]
        if stage.perturb_scale > 0 and (trans > 0 or rot > 0):
            scene = scene.perturbed(rng, stage.perturb_scale * trans, stage.perturb_scale * rot)
        try:
            if scenario == LOOK_AT:
                pose = lookat_goal_pose(stage, ctx.home, scene, rng)
            else:
                pose = screw_goal_pose(stage, ctx.home, rng)
        except ValueError:
            continue
        if not is_feasible(pose, ctx.workspace) or not center_visible(scene, ctx.intrinsics, pose):
            continue
        img = render(scene, ctx.intrinsics, pose)
        return Goal(goal_id, pose, img, scene, scenario, stage.stage_idx, scene_index=si)
    raise CurriculumError(f"no feasible {scenario} goal after {max_retries} retries")


def evaluate_policy(rollout: Callable[[Goal, int], float], goal: Goal, episodes: int) -> float:
    """Mean return of ``episodes`` deterministic rollouts from the home pose.

    ``rollout(goal, episode_index)`` runs one episode and returns its return.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    return float(np.mean([rollout(goal, i) for i in range(episodes)]))


@dataclass(eq=False)
class CurriculumState:
    cfg: CurriculumConfig
    stage: CurriculumStage
    current: Goal | None = None
    active_goals: list[Goal] = field(default_factory=list)
    solved_goals: list[Goal] = field(default_factory=list)
    solved_count_this_stage: int = 0
    next_goal_id: int = 0
    complete: bool = False
    trace: list[dict] = field(default_factory=list)

    def new_id(self) -> int:
        i = self.next_goal_id
        self.next_goal_id += 1
        return i

    def all_goals(self) -> list[Goal]:
        seen, out = set(), []
        for g in self.active_goals + self.solved_goals + ([self.current] if self.current else []):
            if g.goal_id not in seen:
                seen.add(g.goal_id)
                out.append(g)
        return sorted(out, key=lambda g: g.goal_id)


def init_curriculum(cfg: CurriculumConfig, ctx: GoalContext, rng: np.random.Generator) -> CurriculumState:
    """Stage 0 with a random first goal (not evaluated)."""
    state = CurriculumState(cfg, stage_params(cfg, 0))
    goal = _fresh(state, ctx, rng)
    state.active_goals.append(goal)
    state.current = goal
    state.trace.append({"event": "goal", "goal_id": goal.goal_id, "stage": 0, "source": "init"})
    return state


def _fresh(state: CurriculumState, ctx: GoalContext, rng: np.random.Generator) -> Goal:
    scenario = ctx.scenarios[int(rng.integers(len(ctx.scenarios)))]
    return sample_goal(state.stage, scenario, ctx, rng, goal_id=state.new_id(),
                       max_retries=state.cfg.max_sample_retries)


def _record_solved(state: CurriculumState, goal: Goal) -> None:
    """Count a newly solved goal and advance the stage after K of them."""
    if goal.solved:
        return
    goal.solved = True
    if goal in state.active_goals:
        state.active_goals.remove(goal)
    state.solved_goals.append(goal)
    state.solved_count_this_stage += 1
    cfg = state.cfg
    if state.solved_count_this_stage >= cfg.goals_per_stage:
        if state.stage.stage_idx < cfg.last_trainable_stage:
            state.stage = stage_params(cfg, state.stage.stage_idx + 1)
            state.solved_count_this_stage = 0
            state.trace.append({"event": "stage", "stage": state.stage.stage_idx})
        else:
            state.complete = True
            state.solved_count_this_stage = cfg.goals_per_stage


def update_curriculum(state: CurriculumState, current_return: float,
                      evaluate: Callable[[Goal], float], ctx: GoalContext,
                      rng: np.random.Generator) -> tuple[CurriculumState, Goal]:
    """Advance after the current goal reaches the success return.

    ``evaluate(goal)`` returns the policy's mean return on a candidate goal.
    The state is updated in place and also returned.
    """
    cfg = state.cfg
    goal = state.current
    state.trace.append({"event": "eval", "goal_id": goal.goal_id, "return": float(current_return)})
    if current_return < cfg.success_return:
        return state, goal
    _record_solved(state, goal)
    if state.solved_goals and (state.complete or rng.uniform() < cfg.p_revisit):
        pick = state.solved_goals[int(rng.integers(len(state.solved_goals)))]
        state.current = pick
        state.trace.append({"event": "goal", "goal_id": pick.goal_id,
                            "stage": state.stage.stage_idx, "source": "revisit"})
        return state, pick
    for _ in range(cfg.max_fresh_tries):
        cand = _fresh(state, ctx, rng)
        r = evaluate(cand)
        if r >= cfg.success_return:
            state.trace.append({"event": "skip", "goal_id": cand.goal_id, "return": float(r)})
            _record_solved(state, cand)
            if state.complete:
                break
            continue
        state.active_goals.append(cand)
        state.current = cand
        state.trace.append({"event": "goal", "goal_id": cand.goal_id,
                            "stage": state.stage.stage_idx, "source": "fresh", "return": float(r)})
        return state, cand
    # every candidate was already solved: keep training on a solved goal
    pick = state.solved_goals[int(rng.integers(len(state.solved_goals)))]
    state.current = pick
    state.trace.append({"event": "goal", "goal_id": pick.goal_id,
                        "stage": state.stage.stage_idx, "source": "revisit"})
    return state, pick
