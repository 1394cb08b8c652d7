"""Benchmark scenarios, evaluation reports and dataset splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import se3
from .config import HandoffConfig
from .curriculum import (LOOK_AT, SCENARIOS, CurriculumConfig, CurriculumError, CurriculumStage,
                         Goal, GoalContext, sample_goal, stage_params)
from .dvs import DvsConfig, servo
from .se3 import Pose
from .sim import CameraIntrinsics, DomainShift, PlanarScene, SimState, Workspace, home_pose
from .textures import SceneEntry, scan_directory

METHODS = ("dvs", "rl_only", "hybrid")
RL_TOL = (3.0, 2.0)  # (cm, deg): handoff region
TIGHT_TOL = (0.5, 0.5)


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = LOOK_AT
    trials: int = 100
    box: tuple[float, float, float] = (0.75, 0.75, 0.6)
    lookat_radius: float = 0.10
    roll_sigma: float = math.radians(5.0)
    screw_disp: float = 0.25
    screw_theta: float = math.radians(70.0)
    plane_perturbation: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    max_resample: int = 1000

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if min(self.box) <= 0 or self.lookat_radius <= 0 or self.screw_disp <= 0 or self.screw_theta <= 0:
            raise ValueError("scenario ranges must be positive")

    def stage(self) -> CurriculumStage:
        return CurriculumStage(-1, tuple(self.box), self.lookat_radius, self.roll_sigma,
                               self.screw_disp, self.screw_theta, 1.0)


@dataclass
class Trial:
    trial_id: int
    start: Pose
    goal: Goal


@dataclass
class ScenarioSet:
    trials: list[Trial]
    initial_errors: dict  # mean/std of cm and deg

    def __len__(self):
        return len(self.trials)


def _error_stats(errs: Sequence[tuple[float, float]]) -> dict:
    a = np.asarray(errs, dtype=float).reshape(-1, 2)
    if len(a) == 0:
        return {"trans_cm_mean": math.nan, "trans_cm_std": math.nan,
                "rot_deg_mean": math.nan, "rot_deg_std": math.nan}
    return {"trans_cm_mean": float(a[:, 0].mean()), "trans_cm_std": float(a[:, 0].std()),
            "rot_deg_mean": float(a[:, 1].mean()), "rot_deg_std": float(a[:, 1].std())}


def _draw(stages: Sequence[CurriculumStage], kind_of, n: int, ctx: GoalContext,
          rng: np.random.Generator, max_resample: int,
          exclude_region: HandoffConfig | None) -> ScenarioSet:
    trials = []
    budget = max_resample
    while len(trials) < n:
        stage = stages[int(rng.integers(len(stages)))]
        try:
            goal = sample_goal(stage, kind_of(), ctx, rng, goal_id=len(trials), max_retries=1)
        except CurriculumError:
            budget -= 1
            if budget < 0:
                raise CurriculumError("scenario resampling budget exhausted") from None
            continue
        if exclude_region is not None and _inside(ctx.home, goal.goal_pose, exclude_region):
            budget -= 1
            if budget < 0:
                raise CurriculumError("scenario resampling budget exhausted")
            continue
        trials.append(Trial(len(trials), ctx.home, goal))
    init = [se3.pose_errors(t.start, t.goal.goal_pose) for t in trials]
    return ScenarioSet(trials, _error_stats(init))


def _inside(p: Pose, g: Pose, h: HandoffConfig) -> bool:
    return se3.translation_error(p, g) < h.trans_tol and se3.rotation_angle(p.q, g.q) < h.rot_tol


def gen_scenarios(cfg: ScenarioConfig, scenes: Sequence[PlanarScene],
                  intrinsics: CameraIntrinsics | None = None, workspace: Workspace | None = None,
                  rng: np.random.Generator | None = None) -> ScenarioSet:
    """Benchmark trials from the home pose; infeasible samples are redrawn."""
    intrinsics = intrinsics or CameraIntrinsics()
    ws = workspace or Workspace(dims=tuple(cfg.box))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ctx = GoalContext(list(scenes), intrinsics, ws, home_pose(), (cfg.kind,), cfg.plane_perturbation)
    return _draw([cfg.stage()], lambda: cfg.kind, cfg.trials, ctx, rng, cfg.max_resample, None)


def curriculum_scenarios(ccfg: CurriculumConfig, stages: Sequence[int], scenes: Sequence[PlanarScene],
                         trials: int, seed: int, kinds: Sequence[str] = (LOOK_AT,),
                         intrinsics: CameraIntrinsics | None = None,
                         workspace: Workspace | None = None,
                         exclude_region: HandoffConfig | None = HandoffConfig()) -> ScenarioSet:
    """Goals drawn uniformly from the given curriculum stages.

    With ``exclude_region`` set, goals whose start already lies inside that
    region are redrawn (they would count as solved without moving).
    """
    intrinsics = intrinsics or CameraIntrinsics()
    ws = workspace or Workspace()
    rng = np.random.default_rng(seed)
    ctx = GoalContext(list(scenes), intrinsics, ws, home_pose(), tuple(kinds), ccfg.plane_perturbation)
    st = [stage_params(ccfg, i) for i in stages]
    return _draw(st, lambda: kinds[int(rng.integers(len(kinds)))], trials, ctx, rng,
                 100 * trials, exclude_region)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class TrialRecord:
    trial_id: int
    scene_id: str
    scenario: str
    success: bool
    initial_errors: list[float]
    final_errors: list[float]
    phase_boundary: int | None = None
    steps: int = 0
    reason: str = ""
    trace: list[list[float]] = field(default_factory=list)


@dataclass
class EvalReport:
    method: str
    scenario: str
    thresholds: list[float]
    success_rate: float
    trans_cm_mean: float
    trans_cm_std: float
    rot_deg_mean: float
    rot_deg_std: float
    initial: dict
    trials: list[TrialRecord]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["trials"] = [TrialRecord(**t) for t in d["trials"]]
        return cls(**d)


def _shifted(img, shift: DomainShift | None, seed) -> np.ndarray:
    if shift is None:
        return img
    return shift.apply(img, np.random.default_rng(seed))


def run_trial(trial: Trial, method: str, model=None, agent=None,
              intrinsics: CameraIntrinsics | None = None, workspace: Workspace | None = None,
              hcfg: HandoffConfig = HandoffConfig(), dcfg: DvsConfig = DvsConfig(),
              shift: DomainShift | None = None, seed: int = 0, bounds=None) -> TrialRecord:
    from .pipeline import hybrid_servo, reward_config_for, run_episode

    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method != "dvs" and (model is None or agent is None):
        raise ValueError(f"method {method!r} needs a trained checkpoint")
    intrinsics = intrinsics or CameraIntrinsics()
    ws = workspace or Workspace()
    g = trial.goal
    bounds = np.asarray(agent.cfg.bounds if agent is not None else
                        (se3.DEFAULT_ACTION_BOUNDS if bounds is None else bounds))
    sim = SimState(trial.start, g.scene, intrinsics, ws, np.random.default_rng([seed, trial.trial_id, 1]),
                   bounds=bounds, shift=shift)
    gimg = _shifted(g.goal_image, shift, [seed, trial.trial_id, 2])
    init = list(se3.pose_errors(trial.start, g.goal_pose))
    base = dict(trial_id=trial.trial_id, scene_id=g.scene.scene_id, scenario=g.scenario,
                initial_errors=init)
    if method == "dvs":
        res = servo(sim, gimg, dcfg, g.goal_pose)
        fin = list(se3.pose_errors(res.final_pose, g.goal_pose))
        trace = [list(e) for e in res.pose_error_trace] + [fin]
        return TrialRecord(success=_within(fin, TIGHT_TOL), final_errors=fin, steps=res.iters,
                           reason=res.reason, trace=trace, **base)
    if method == "rl_only":
        rcfg = reward_config_for(ws.dims, hcfg)
        res, _ = run_episode(model, agent, sim, gimg, g.goal_pose, rcfg, hcfg.max_rl_steps,
                             stop="handoff", hcfg=hcfg)
        fin = list(res.final_errors)
        return TrialRecord(success=_within(fin, RL_TOL), final_errors=fin, steps=res.steps,
                           reason="handoff" if res.reached else "step_cap",
                           trace=[list(e) for e in res.errors], **base)
    rep = hybrid_servo(sim, g, agent, model, hcfg, dcfg, goal_image=gimg)
    fin = list(rep.final_errors)
    reason = "rl_failed" if not rep.rl_success else (rep.dvs.reason if rep.dvs else "")
    return TrialRecord(success=_within(fin, TIGHT_TOL), final_errors=fin,
                       phase_boundary=rep.phase_boundary, steps=len(rep.errors) - 1,
                       reason=reason, trace=[list(e) for e in rep.errors], **base)


def _within(errs, tol) -> bool:
    return bool(errs[0] < tol[0] and errs[1] < tol[1])


def summarize(method: str, scenario: str, records: list[TrialRecord], initial: dict) -> EvalReport:
    records = sorted(records, key=lambda r: r.trial_id)
    tol = TIGHT_TOL if method in ("dvs", "hybrid") else RL_TOL
    fin = [r.final_errors for r in records]
    st = _error_stats(fin)
    rate = 100.0 * sum(r.success for r in records) / max(1, len(records))
    return EvalReport(method, scenario, list(tol), rate, st["trans_cm_mean"], st["trans_cm_std"],
                      st["rot_deg_mean"], st["rot_deg_std"], initial, records)


def run_benchmark(scenarios: ScenarioSet, method: str, model=None, agent=None,
                  intrinsics: CameraIntrinsics | None = None, workspace: Workspace | None = None,
                  hcfg: HandoffConfig = HandoffConfig(), dcfg: DvsConfig = DvsConfig(),
                  shift: DomainShift | None = None, seed: int = 0) -> EvalReport:
    """Run every trial; exceptions are recorded as failed trials."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method != "dvs" and (model is None or agent is None):
        raise ValueError(f"method {method!r} needs a trained checkpoint")
    records = []
    for tr in scenarios.trials:
        try:
            rec = run_trial(tr, method, model, agent, intrinsics, workspace, hcfg, dcfg, shift, seed)
        except Exception as exc:  # noqa: BLE001 - a failing trial must not abort the benchmark
            init = list(se3.pose_errors(tr.start, tr.goal.goal_pose))
            rec = TrialRecord(tr.trial_id, tr.goal.scene.scene_id, tr.goal.scenario, False, init,
                              init, reason=f"error: {type(exc).__name__}: {exc}")
        records.append(rec)
    kinds = sorted({t.goal.scenario for t in scenarios.trials})
    return summarize(method, "+".join(kinds), records, scenarios.initial_errors)


def median_final(report: EvalReport) -> tuple[float, float]:
    a = np.array([r.final_errors for r in report.trials], dtype=float)
    return float(np.median(a[:, 0])), float(np.median(a[:, 1]))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

CSV_FIELDS = ["trial_id", "scene_id", "scenario", "success", "init_cm", "init_deg",
              "final_cm", "final_deg", "phase_boundary", "steps", "reason"]


def plot_trace(rec: TrialRecord, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tr = np.asarray(rec.trace, dtype=float).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(5, 3))
    steps = np.arange(len(tr))
    ax.plot(steps, tr[:, 0], color="tab:blue", label="translation [cm]")
    ax.set_xlabel("step")
    ax.set_ylabel("translation error [cm]", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(steps, tr[:, 1], color="tab:red", label="rotation [deg]")
    ax2.set_ylabel("rotation error [deg]", color="tab:red")
    if rec.phase_boundary is not None:
        ax.axvline(rec.phase_boundary, color="k", ls="--", lw=1)
    ax.set_title(f"trial {rec.trial_id} ({rec.scene_id})")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def emit_report(report: EvalReport, out_dir, plots: str = "converged") -> list[Path]:
    """Write report.json, report.csv and per-trial error plots.

    ``plots``: "converged" (successful trials), "all" or "none".
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json", out / "report.csv"]
    written[0].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    with open(written[1], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in report.trials:
            w.writerow([r.trial_id, r.scene_id, r.scenario, int(r.success), *r.initial_errors,
                        *r.final_errors, "" if r.phase_boundary is None else r.phase_boundary,
                        r.steps, r.reason])
    if plots != "none":
        pdir = out / "plots"
        pdir.mkdir(exist_ok=True)
        for r in report.trials:
            if (plots == "all" or r.success) and r.trace:
                p = pdir / f"trial_{r.trial_id:04d}.png"
                plot_trace(r, p)
                written.append(p)
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[SceneEntry]
    heldout: list[SceneEntry]

    def to_dict(self) -> dict:
        return {"train": [asdict(e) for e in self.train], "heldout": [asdict(e) for e in self.heldout]}


class HygieneError(RuntimeError):
    pass


def ingest_dataset(directory, train_frac: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Seeded split of a PNG directory; files with identical content stay together.

    A manifest ``split`` field ("train" / "heldout") pins an entry.
    """
    if not (0 < train_frac < 1):
        raise ValueError("train_frac must lie in (0, 1)")
    entries = scan_directory(directory)
    groups: dict[str, list[SceneEntry]] = {}
    for e in entries:
        groups.setdefault(e.sha256, []).append(e)
    pinned_train, pinned_held, free = [], [], []
    for h in sorted(groups):
        splits = {e.split for e in groups[h]} - {None}
        if len(splits) > 1:
            raise ValueError(f"identical files pinned to different splits: {[e.path for e in groups[h]]}")
        (pinned_train if splits == {"train"} else pinned_held if splits == {"heldout"} else free).append(h)
    rng = np.random.default_rng(seed)
    order = [free[i] for i in rng.permutation(len(free))]
    n_total = len(groups)
    n_train = int(round(train_frac * n_total)) - len(pinned_train)
    if n_total >= 2:
        n_train = min(max(n_train, 0), len(order))
    train_h = set(pinned_train) | set(order[:n_train])
    held_h = set(pinned_held) | set(order[n_train:])
    split = DatasetSplit(sorted([e for h in train_h for e in groups[h]], key=lambda e: e.scene_id),
                         sorted([e for h in held_h for e in groups[h]], key=lambda e: e.scene_id))
    audit_split(split)
    return split


def audit_split(split: DatasetSplit) -> None:
    tr = {e.sha256 for e in split.train} | {e.scene_id for e in split.train}
    for e in split.heldout:
        if e.sha256 in tr or e.scene_id in tr:
            raise HygieneError(f"held-out scene {e.scene_id} overlaps the training set")


def audit_training_log(log_path, heldout_ids: Sequence[str]) -> int:
    """Raise if any held-out scene id appears in a training log; returns records checked."""
    held = set(heldout_ids)
    n = 0
    with open(log_path) as f:
        for line in f:
            rec = json.loads(line)
            n += 1
            if rec.get("scene_id") in held:
                raise HygieneError(f"held-out scene {rec['scene_id']} used in training")
    return n
