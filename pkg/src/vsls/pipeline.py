"""Training loop, rollouts, hybrid RL -> DVS servoing and single-shot transfer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ck
from . import se3
from .agent import (RewardConfig, RLInputs, ReplayBuffer, SacAgent, Transition, actor_update,
                    compute_reward, critic_update, soft_update)
from .config import HandoffConfig, TrainConfig, to_jsonable, train_config_from_dict
from .curriculum import (Goal, GoalContext, CurriculumState, evaluate_policy, init_curriculum,
                         stage_params, update_curriculum)
from .dvs import DvsConfig, DvsResult, servo
from .latent import LatentModel, elbo_loss, goal_latent, infer_posterior_sequence, reconstruct
from .se3 import Pose
from .sim import (CameraIntrinsics, DomainShift, PlanarScene, SimState, Workspace, home_pose,
                  render, step as sim_step)

torch.set_num_threads(1)

STATE_SUFFIX = ".state.npz"


class TrainingError(RuntimeError):
    pass


def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 63 - 1))


def _torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(_seed_from(rng))


def reward_config(cfg: TrainConfig) -> RewardConfig:
    return RewardConfig.for_workspace(cfg.workspace_dims, cfg.handoff.trans_tol,
                                      cfg.handoff.rot_tol, cfg.goal_bonus)


def reward_config_for(dims, hcfg: HandoffConfig, goal_bonus: float = 10.0) -> RewardConfig:
    return RewardConfig.for_workspace(dims, hcfg.trans_tol, hcfg.rot_tol, goal_bonus)


def in_handoff(pose: Pose, goal: Pose, hcfg: HandoffConfig) -> bool:
    return (se3.translation_error(pose, goal) < hcfg.trans_tol
            and se3.rotation_angle(pose.q, goal.q) < hcfg.rot_tol)


# ---------------------------------------------------------------------------
# Policy wrapper
# ---------------------------------------------------------------------------

class VisualPolicy:
    """Goal-conditioned actor with its observation/action history.

    The history is padded with the first observation and zero actions.
    """

    def __init__(self, model: LatentModel, agent: SacAgent, goal_image: np.ndarray,
                 first_obs: np.ndarray, stochastic: bool = False,
                 gen: torch.Generator | None = None):
        self.model, self.agent = model, agent
        self.stochastic, self.gen = stochastic, gen
        self.T = agent.cfg.history
        self.bounds = np.asarray(agent.cfg.bounds)
        self.goal_image = np.asarray(goal_image, dtype=np.float32)
        self.frames = [np.asarray(first_obs, dtype=np.float32)] * self.T
        self.prev_actions = [np.zeros(len(self.bounds))] * self.T

    def act(self) -> np.ndarray:
        with torch.no_grad():
            imgs = torch.from_numpy(np.stack(self.frames + [self.goal_image]))
            f = self.model.encoder(imgs)
            ef = (f[:-1] - f[-1:])[None]
            ah = torch.from_numpy(np.stack(self.prev_actions) / self.bounds).float()[None]
        return self.agent.act(ef, ah, self.stochastic, self.gen)[0]

    def push(self, action, obs) -> None:
        self.frames = self.frames[1:] + [np.asarray(obs, dtype=np.float32)]
        self.prev_actions = self.prev_actions[1:] + [np.asarray(action, dtype=np.float64)]


@dataclass
class EpisodeResult:
    ret: float
    steps: int
    reached: bool  # stop condition met
    poses: list[Pose]
    errors: list[tuple[float, float]]  # (cm, deg) after each pose, starting at the start pose
    frames: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)

    @property
    def final_errors(self) -> tuple[float, float]:
        return self.errors[-1]


def run_episode(model: LatentModel, agent: SacAgent, sim: SimState, goal_image: np.ndarray,
                goal_pose: Pose, rcfg: RewardConfig, horizon: int, stop: str = "bonus",
                hcfg: HandoffConfig | None = None, stochastic: bool = False,
                gen: torch.Generator | None = None, record: bool = False) -> tuple[EpisodeResult, SimState]:
    """Roll the policy out from ``sim``.

    ``stop="bonus"`` ends on the reward threshold (curriculum evaluation);
    ``stop="handoff"`` ends once both handoff tolerances hold.
    """
    if stop not in ("bonus", "handoff"):
        raise ValueError(f"unknown stop rule {stop!r}")
    hcfg = hcfg or HandoffConfig()
    obs = sim.observe()
    pol = VisualPolicy(model, agent, goal_image, obs, stochastic, gen)
    d_prev = se3.pose_distance(sim.camera_pose, goal_pose, rcfg.weights)
    poses = [sim.camera_pose]
    errors = [se3.pose_errors(sim.camera_pose, goal_pose)]
    frames, actions = [obs], []

    def done(pose, d):
        return d < rcfg.threshold if stop == "bonus" else in_handoff(pose, goal_pose, hcfg)

    if done(sim.camera_pose, d_prev):
        return EpisodeResult(rcfg.goal_bonus if stop == "bonus" else 0.0, 0, True, poses,
                             errors, frames if record else [], actions), sim
    ret, reached, n = 0.0, False, 0
    for n in range(1, horizon + 1):
        a = pol.act()
        sim, obs = sim_step(sim, a)
        d = se3.pose_distance(sim.camera_pose, goal_pose, rcfg.weights)
        ret += compute_reward(d_prev, d, rcfg)
        d_prev = d
        pol.push(a, obs)
        poses.append(sim.camera_pose)
        errors.append(se3.pose_errors(sim.camera_pose, goal_pose))
        if record:
            frames.append(obs)
            actions.append(a)
        if done(sim.camera_pose, d):
            reached = True
            break
    return EpisodeResult(ret, n, reached, poses, errors, frames if record else [], actions), sim


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class _Episode:
    sim: SimState
    goal: Goal
    frames: list[np.ndarray]
    prev_actions: list[np.ndarray]
    d_prev: float
    t: int = 0
    ret: float = 0.0


def tensors_of(model: LatentModel, agent: SacAgent, model_opt=None) -> dict[str, np.ndarray]:
    t = {}
    t.update(ck.module_tensors("psi", model))
    t.update(ck.module_tensors("theta", agent.actor))
    t.update(ck.module_tensors("phi", agent.critic))
    t.update(ck.module_tensors("phi_target", agent.critic_target))
    t["alpha/log_alpha"] = agent.log_alpha.detach().numpy().astype(np.float32).reshape(1)
    if model_opt is not None:
        t.update(ck.optimizer_tensors("opt/psi", model_opt))
        t.update(ck.optimizer_tensors("opt/theta", agent.actor_opt))
        t.update(ck.optimizer_tensors("opt/phi", agent.critic_opt))
        t.update(ck.optimizer_tensors("opt/alpha", agent.alpha_opt))
    return t


def build_networks(cfg: TrainConfig) -> tuple[LatentModel, SacAgent]:
    torch.manual_seed(cfg.seed)
    model = LatentModel(cfg.model)
    agent = SacAgent(cfg.agent, cfg.model.feature_dim, cfg.model.z1_dim + cfg.model.z2_dim,
                     cfg.model.action_dim)
    return model, agent


def load_networks(ckpt: ck.Checkpoint) -> tuple[TrainConfig, LatentModel, SacAgent]:
    """Rebuild the model and agent (no optimizer state) from a checkpoint."""
    cfg = train_config_from_dict(ckpt.meta["config"])
    if ck.config_hash(ckpt.meta["config"]) != ckpt.config_hash:
        raise ck.CorruptCheckpointError("config hash does not match the stored config")
    model, agent = build_networks(cfg)
    ck.load_module(model, ckpt.tensors, "psi")
    ck.load_module(agent.actor, ckpt.tensors, "theta")
    ck.load_module(agent.critic, ckpt.tensors, "phi")
    ck.load_module(agent.critic_target, ckpt.tensors, "phi_target")
    with torch.no_grad():
        agent.log_alpha.copy_(torch.from_numpy(ckpt.tensors["alpha/log_alpha"]).reshape(()))
    return cfg, model, agent


class Trainer:
    """Curriculum-driven joint training of the latent model, critics and actor.

    Every ``steps_per_iteration`` environment steps the current goal is
    evaluated and the curriculum updated. Each environment step is followed
    by ``updates_per_step`` gradient updates in the order model -> critic ->
    actor (once ``learning_starts`` steps have been collected).
    """

    def __init__(self, cfg: TrainConfig, scenes: Sequence[PlanarScene], log_path=None,
                 intrinsics: CameraIntrinsics | None = None):
        if not scenes:
            raise ValueError("training needs at least one scene")
        self.cfg = cfg
        self.scenes = list(scenes)
        self.intrinsics = intrinsics or CameraIntrinsics.square(cfg.model.image_size)
        self.workspace = Workspace(dims=cfg.workspace_dims)
        self.rcfg = reward_config(cfg)
        self.model, self.agent = build_networks(cfg)
        self.model_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_model)
        self.rng = np.random.default_rng(cfg.seed)
        self.sim_rng = np.random.default_rng([cfg.seed, 1])
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.ctx = GoalContext(self.scenes, self.intrinsics, self.workspace, home_pose(),
                               cfg.scenarios, cfg.curriculum.plane_perturbation)
        self.curriculum = init_curriculum(cfg.curriculum, self.ctx, self.rng)
        self.goals: dict[int, Goal] = {}
        self._register_goals()
        self.step = 0
        self.updates = 0
        self.episodes = 0
        self.episode: _Episode | None = None
        self.log_path = Path(log_path) if log_path else None
        self.bounds = np.asarray(cfg.agent.bounds)

    # -- logging -------------------------------------------------------------

    def log(self, rec: dict) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    def _register_goals(self) -> None:
        for g in self.curriculum.all_goals():
            self.goals.setdefault(g.goal_id, g)

    # -- environment ---------------------------------------------------------

    def _new_sim(self, goal: Goal) -> SimState:
        return SimState(home_pose(), goal.scene, self.intrinsics, self.workspace, self.sim_rng,
                        bounds=self.bounds, augment=self.cfg.train_augment)

    def _start_episode(self) -> None:
        goal = self.curriculum.current
        sim = self._new_sim(goal)
        obs = sim.observe().astype(np.float32)
        T = self.cfg.agent.history
        d0 = se3.pose_distance(sim.camera_pose, goal.goal_pose, self.rcfg.weights)
        self.episode = _Episode(sim, goal, [obs] * T, [np.zeros(6)] * T, d0)

    def _end_episode(self, reached: bool) -> None:
        ep = self.episode
        self.log({"event": "episode", "episode": self.episodes, "step": self.step,
                  "goal_id": ep.goal.goal_id, "scene_id": ep.goal.scene.scene_id,
                  "return": ep.ret, "length": ep.t, "reached": reached})
        self.episodes += 1
        self.episode = None

    def _act(self, ep: _Episode) -> np.ndarray:
        if self.step < self.cfg.learning_starts:
            return self.rng.uniform(-self.bounds, self.bounds)
        pol = VisualPolicy(self.model, self.agent, ep.goal.goal_image, ep.frames[0], True,
                           _torch_gen(self.rng))
        pol.frames, pol.prev_actions = list(ep.frames), list(ep.prev_actions)
        return pol.act()

    def env_step(self) -> None:
        if self.episode is None or self.episode.goal is not self.curriculum.current:
            if self.episode is not None:
                self._end_episode(False)
            self._start_episode()
        ep = self.episode
        a = self._act(ep)
        ep.sim, obs = sim_step(ep.sim, a)
        obs = obs.astype(np.float32)
        d = se3.pose_distance(ep.sim.camera_pose, ep.goal.goal_pose, self.rcfg.weights)
        r = compute_reward(ep.d_prev, d, self.rcfg)
        done = d < self.rcfg.threshold
        self.buffer.push(Transition(tuple(ep.frames), np.stack(ep.prev_actions), a, r, obs,
                                    ep.goal.goal_id, done))
        ep.frames = ep.frames[1:] + [obs]
        ep.prev_actions = ep.prev_actions[1:] + [a]
        ep.d_prev, ep.t, ep.ret = d, ep.t + 1, ep.ret + r
        if done or ep.t >= self.cfg.horizon:
            self._end_episode(done)

    # -- evaluation / curriculum ----------------------------------------------

    def rollout_return(self, goal: Goal, episode_index: int = 0) -> float:
        sim = SimState(home_pose(), goal.scene, self.intrinsics, self.workspace,
                       np.random.default_rng(0), bounds=self.bounds)
        res, _ = run_episode(self.model, self.agent, sim, goal.goal_image, goal.goal_pose,
                             self.rcfg, self.cfg.horizon)
        return res.ret

    def _evaluate(self, goal: Goal) -> float:
        return evaluate_policy(self.rollout_return, goal, self.cfg.curriculum.eval_episodes)

    def curriculum_step(self) -> None:
        cur = self.curriculum
        before = len(cur.trace)
        R = self._evaluate(cur.current)
        update_curriculum(cur, R, self._evaluate, self.ctx, self.rng)
        self._register_goals()
        for rec in cur.trace[before:]:
            extra = {}
            if "goal_id" in rec and rec["goal_id"] in self.goals:
                extra["scene_id"] = self.goals[rec["goal_id"]].scene.scene_id
            self.log({**rec, **extra, "step": self.step, "stage_now": cur.stage.stage_idx})

    # -- updates ---------------------------------------------------------------

    def update(self) -> dict:
        cfg = self.cfg
        batch = self.buffer.sample(cfg.agent.batch_size, self.rng)
        gen = _torch_gen(self.rng)
        imgs = torch.from_numpy(batch.frames)
        acts = torch.from_numpy(batch.actions / self.bounds.astype(np.float32)).float()
        goal_imgs = torch.from_numpy(np.stack(
            [self.goals[int(i)].goal_image for i in batch.goal_ids]).astype(np.float32))
        rec = {"event": "update", "update": self.updates, "step": self.step}
        if self.updates % cfg.model_update_every == 0:
            terms = elbo_loss(self.model, imgs, acts[:, 1:], gen)
            if not torch.isfinite(terms.loss):
                raise TrainingError(f"non-finite model loss at update {self.updates}")
            params = [p for p in self.model.parameters()]
            grads = torch.autograd.grad(terms.loss, params)
            for p, g in zip(params, grads):
                p.grad = g
            torch.nn.utils.clip_grad_norm_(params, cfg.model_grad_clip)
            self.model_opt.step()
            for p in params:
                p.grad = None
            rec.update(elbo=float(terms.loss.detach()), nll=terms.nll, kl=terms.kl,
                       recon_mse=terms.recon_mse)
        inp = self.rl_inputs(imgs, acts, goal_imgs, batch)
        rec["critic_loss"] = critic_update(self.agent, inp, gen)
        rec.update(actor_update(self.agent, inp, gen))
        soft_update(self.agent.critic_target, self.agent.critic, cfg.agent.tau)
        for k in ("critic_loss", "actor_loss"):
            if not math.isfinite(rec[k]):
                raise TrainingError(f"non-finite {k} at update {self.updates}")
        self.updates += 1
        return rec

    def rl_inputs(self, imgs, acts, goal_imgs, batch) -> RLInputs:
        """Detached latent/feature errors for a (B, T_L + 1) window batch."""
        T = self.cfg.agent.history
        with torch.no_grad():
            feats = self.model.encoder(imgs)
            seq = infer_posterior_sequence(self.model, feats, acts[:, 1:], mean=True)
            g = goal_latent(self.model, goal_imgs, mean=True)
            z = torch.cat([seq.z1, seq.z2], -1) - g.z()[:, None]
            ef = feats - g.features[:, None]
        return RLInputs(e_z=z[:, T - 1], e_z_next=z[:, T], ef_hist=ef[:, :T],
                        ef_hist_next=ef[:, 1:T + 1], act_hist=acts[:, :T],
                        act_hist_next=acts[:, 1:T + 1], action=acts[:, T],
                        reward=torch.from_numpy(batch.reward), done=torch.from_numpy(batch.done))

    def pretrain_model(self, n: int) -> None:
        for i in range(n):
            batch = self.buffer.sample(self.cfg.agent.batch_size, self.rng)
            gen = _torch_gen(self.rng)
            imgs = torch.from_numpy(batch.frames)
            acts = torch.from_numpy(batch.actions / self.bounds.astype(np.float32)).float()
            terms = elbo_loss(self.model, imgs, acts[:, 1:], gen)
            self.model_opt.zero_grad()
            terms.loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.model_grad_clip)
            self.model_opt.step()
            self.model_opt.zero_grad(set_to_none=True)
            self.log({"event": "pretrain", "i": i, "elbo": float(terms.loss.detach()),
                      "recon_mse": terms.recon_mse})

    # -- main loop -------------------------------------------------------------

    def train(self, until: int | None = None, checkpoint_path=None) -> None:
        cfg = self.cfg
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        M = cfg.steps_per_iteration
        while self.step < until:
            if self.step % M == 0:
                self.curriculum_step()
            self.env_step()
            self.step += 1
            if self.step == cfg.learning_starts and cfg.model_pretrain_updates:
                self.pretrain_model(cfg.model_pretrain_updates)
            if self.step >= cfg.learning_starts:
                for _ in range(cfg.updates_per_step):
                    rec = self.update()
                    rec["stage"] = self.curriculum.stage.stage_idx
                    self.log(rec)
            if checkpoint_path and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save(checkpoint_path)

    # -- persistence -----------------------------------------------------------

    def checkpoint(self) -> ck.Checkpoint:
        conf = to_jsonable(self.cfg)
        meta = {"config": conf, "updates": self.updates, "kind": "vsls-agent",
                "stage": self.curriculum.stage.stage_idx}
        return ck.Checkpoint(tensors_of(self.model, self.agent, self.model_opt), meta,
                             ck.config_hash(conf), self.step)

    def save(self, path) -> None:
        """Write the checkpoint plus the resume state (``<path>.state.npz``)."""
        path = Path(path)
        ck.save(path, self.checkpoint())
        save_training_state(self, Path(str(path) + STATE_SUFFIX))
        self.log({"event": "checkpoint", "step": self.step, "updates": self.updates})

    @classmethod
    def resume(cls, path, scenes: Sequence[PlanarScene], log_path=None) -> "Trainer":
        path = Path(path)
        c = ck.load(path)
        cfg = train_config_from_dict(c.meta["config"])
        t = cls(cfg, scenes, log_path=None)
        ck.load_module(t.model, c.tensors, "psi")
        ck.load_module(t.agent.actor, c.tensors, "theta")
        ck.load_module(t.agent.critic, c.tensors, "phi")
        ck.load_module(t.agent.critic_target, c.tensors, "phi_target")
        with torch.no_grad():
            t.agent.log_alpha.copy_(torch.from_numpy(c.tensors["alpha/log_alpha"]).reshape(()))
        ck.load_optimizer(t.model_opt, c.tensors, "opt/psi")
        ck.load_optimizer(t.agent.actor_opt, c.tensors, "opt/theta")
        ck.load_optimizer(t.agent.critic_opt, c.tensors, "opt/phi")
        ck.load_optimizer(t.agent.alpha_opt, c.tensors, "opt/alpha")
        load_training_state(t, Path(str(path) + STATE_SUFFIX))
        t.log_path = Path(log_path) if log_path else None
        return t


# ---------------------------------------------------------------------------
# Resume state (replay buffer, RNGs, curriculum, in-flight episode)
# ---------------------------------------------------------------------------

def _goal_record(g: Goal) -> dict:
    return {"id": g.goal_id, "pose": g.goal_pose.to_list(), "plane": g.scene.plane_pose.to_list(),
            "scene_index": g.scene_index, "scenario": g.scenario, "stage": g.stage_idx,
            "solved": g.solved}


def save_training_state(t: Trainer, path: Path) -> None:
    frames: list[np.ndarray] = []
    index: dict[int, int] = {}

    def fid(img) -> int:
        k = id(img)
        if k not in index:
            index[k] = len(frames)
            frames.append(np.asarray(img, dtype=np.float32))
        return index[k]

    items = t.buffer.items()
    T = t.cfg.agent.history
    obs_idx = np.array([[fid(f) for f in tr.obs] + [fid(tr.next_obs)] for tr in items],
                       dtype=np.int64).reshape(len(items), T + 1)
    cur = t.curriculum
    ep = t.episode
    ep_rec = None
    if ep is not None:
        ep_rec = {"goal_id": ep.goal.goal_id, "pose": ep.sim.camera_pose.to_list(),
                  "sim_steps": ep.sim.step_count, "frames": [fid(f) for f in ep.frames],
                  "prev_actions": [a.tolist() for a in ep.prev_actions], "d_prev": ep.d_prev,
                  "t": ep.t, "ret": ep.ret}
    meta = {
        "step": t.step, "updates": t.updates, "episodes": t.episodes,
        "rng": t.rng.bit_generator.state, "sim_rng": t.sim_rng.bit_generator.state,
        "goals": [_goal_record(g) for g in sorted(t.goals.values(), key=lambda g: g.goal_id)],
        "curriculum": {"stage": cur.stage.stage_idx, "current": cur.current.goal_id,
                       "active": [g.goal_id for g in cur.active_goals],
                       "solved": [g.goal_id for g in cur.solved_goals],
                       "solved_count": cur.solved_count_this_stage,
                       "next_goal_id": cur.next_goal_id, "complete": cur.complete,
                       "trace": cur.trace},
        "episode": ep_rec,
        "buffer_next": t.buffer.state()["next"],
    }
    arrays = {
        "frames": np.stack(frames) if frames else np.zeros((0, 1, 1), np.float32),
        "obs_idx": obs_idx,
        "prev_actions": np.array([tr.prev_actions for tr in items]).reshape(len(items), T, -1),
        "action": np.array([tr.action for tr in items]).reshape(len(items), -1),
        "reward": np.array([tr.reward for tr in items], dtype=np.float64),
        "goal_id": np.array([tr.goal_id for tr in items], dtype=np.int64),
        "done": np.array([tr.done for tr in items], dtype=bool),
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_training_state(t: Trainer, path: Path) -> None:
    if not path.exists():
        raise ck.CheckpointError(f"missing resume state {path}")
    z = np.load(path)
    meta = json.loads(z["meta"].tobytes().decode())
    frames = [z["frames"][i] for i in range(len(z["frames"]))]
    t.step, t.updates, t.episodes = meta["step"], meta["updates"], meta["episodes"]
    t.rng.bit_generator.state = meta["rng"]
    t.sim_rng.bit_generator.state = meta["sim_rng"]
    goals = {}
    for rec in meta["goals"]:
        base = t.scenes[rec["scene_index"]]
        scene = replace(base, plane_pose=Pose.from_list(rec["plane"], normalize=False))
        pose = Pose.from_list(rec["pose"], normalize=False)
        goals[rec["id"]] = Goal(rec["id"], pose, render(scene, t.intrinsics, pose), scene,
                                rec["scenario"], rec["stage"], rec["solved"], rec["scene_index"])
    t.goals = goals
    c = meta["curriculum"]
    cur = CurriculumState(t.cfg.curriculum, stage_params(t.cfg.curriculum, c["stage"]),
                          current=goals[c["current"]],
                          active_goals=[goals[i] for i in c["active"]],
                          solved_goals=[goals[i] for i in c["solved"]],
                          solved_count_this_stage=c["solved_count"],
                          next_goal_id=c["next_goal_id"], complete=c["complete"], trace=c["trace"])
    t.curriculum = cur
    buf = ReplayBuffer(t.cfg.replay_capacity)
    for k in range(len(z["reward"])):
        idx = z["obs_idx"][k]
        buf.push(Transition(tuple(frames[i] for i in idx[:-1]), z["prev_actions"][k],
                            z["action"][k], float(z["reward"][k]), frames[idx[-1]],
                            int(z["goal_id"][k]), bool(z["done"][k])))
    buf._next = meta["buffer_next"]
    t.buffer = buf
    ep = meta["episode"]
    if ep is None:
        t.episode = None
    else:
        goal = goals[ep["goal_id"]]
        sim = replace(t._new_sim(goal), camera_pose=Pose.from_list(ep["pose"], normalize=False),
                      step_count=ep["sim_steps"])
        t.episode = _Episode(sim, goal, [frames[i] for i in ep["frames"]],
                             [np.array(a) for a in ep["prev_actions"]], ep["d_prev"], ep["t"],
                             ep["ret"])


# ---------------------------------------------------------------------------
# Hybrid RL -> DVS servoing
# ---------------------------------------------------------------------------

TIGHT_TOL = (0.5, 0.5)  # (cm, deg) endpoint success for dvs / hybrid


@dataclass
class ServoReport:
    phase_boundary: int  # number of RL steps before DVS took over
    rl_success: bool  # handoff region reached
    success: bool  # full method within the tight end tolerance
    errors: list[tuple[float, float]]  # (cm, deg): RL trace, then DVS iterations
    rl_final_errors: tuple[float, float]
    final_errors: tuple[float, float]
    final_pose: Pose
    dvs: DvsResult | None = None

    def to_dict(self) -> dict:
        return {"phase_boundary": self.phase_boundary, "rl_success": self.rl_success,
                "success": self.success, "errors": [list(e) for e in self.errors],
                "rl_final_errors": list(self.rl_final_errors),
                "final_errors": list(self.final_errors), "final_pose": self.final_pose.to_list(),
                "dvs": None if self.dvs is None else self.dvs.to_dict()}


def within(errors: tuple[float, float], tol: tuple[float, float]) -> bool:
    return errors[0] < tol[0] and errors[1] < tol[1]


def hybrid_servo(sim: SimState, goal: Goal, agent: SacAgent, model: LatentModel,
                 hcfg: HandoffConfig = HandoffConfig(), dcfg: DvsConfig = DvsConfig(),
                 rcfg: RewardConfig | None = None, goal_image: np.ndarray | None = None,
                 tight_tol: tuple[float, float] = TIGHT_TOL) -> ServoReport:
    """Deterministic RL until both handoff tolerances hold, then DVS.

    DVS is only invoked if the handoff region was reached within
    ``hcfg.max_rl_steps``. ``goal_image`` defaults to the goal's stored image
    (pass a shifted copy when the observations are shifted too).
    """
    rcfg = rcfg or reward_config_for(sim.workspace.dims, hcfg)
    gimg = goal.goal_image if goal_image is None else goal_image
    res, sim = run_episode(model, agent, sim, gimg, goal.goal_pose, rcfg, hcfg.max_rl_steps,
                           stop="handoff", hcfg=hcfg)
    errors = list(res.errors)
    rl_final = res.final_errors
    if not res.reached:
        return ServoReport(res.steps, False, False, errors, rl_final, rl_final, sim.camera_pose)
    d = servo(sim, gimg, dcfg, goal.goal_pose)
    final_pose = d.final_pose
    final = se3.pose_errors(final_pose, goal.goal_pose)
    errors += d.pose_error_trace[1:] + [final]
    return ServoReport(res.steps, True, within(final, tight_tol), errors, rl_final, final,
                       final_pose, d)


# ---------------------------------------------------------------------------
# Single-shot domain transfer
# ---------------------------------------------------------------------------

@dataclass
class TransferResult:
    checkpoint: ck.Checkpoint
    episode: EpisodeResult
    losses: list[float]


def episode_windows(frames: Sequence[np.ndarray], actions: Sequence[np.ndarray], length: int,
                    bounds) -> tuple[torch.Tensor, torch.Tensor]:
    """All length-``length`` windows of an episode (padded at the start like training)."""
    A = len(bounds)
    pad = length - 1
    fr = [frames[0]] * pad + list(frames)
    ac = [np.zeros(A)] * pad + [np.zeros(A)] + list(actions)  # action preceding each frame
    n = len(fr) - length + 1
    imgs = np.stack([np.stack(fr[i:i + length]) for i in range(n)]).astype(np.float32)
    acts = np.stack([np.stack(ac[i + 1:i + length]) for i in range(n)]) / np.asarray(bounds)
    return torch.from_numpy(imgs), torch.from_numpy(acts.astype(np.float32))


def single_shot_transfer(ckpt: ck.Checkpoint, sim: SimState, goal: Goal, fine_tune_steps: int,
                         goal_image: np.ndarray | None = None, lr: float | None = None,
                         seed: int = 0, batch_size: int = 16) -> TransferResult:
    """Record one episode in ``sim``'s (shifted) domain and fine-tune only the latent model.

    Actor, critics and temperature tensors are copied through unchanged.
    """
    cfg, model, agent = load_networks(ckpt)
    rcfg = reward_config(cfg)
    gimg = goal.goal_image if goal_image is None else goal_image
    ep, _ = run_episode(model, agent, sim, gimg, goal.goal_pose, rcfg, cfg.horizon, record=True)
    losses: list[float] = []
    tensors = dict(ckpt.tensors)
    if fine_tune_steps > 0:
        imgs, acts = episode_windows(ep.frames, ep.actions, cfg.agent.history + 1, cfg.agent.bounds)
        opt = torch.optim.Adam(model.parameters(), lr=lr or cfg.lr_model)
        rng = np.random.default_rng(seed)
        for _ in range(fine_tune_steps):
            idx = torch.from_numpy(rng.integers(0, len(imgs), size=min(batch_size, len(imgs))))
            terms = elbo_loss(model, imgs[idx], acts[idx], _torch_gen(rng))
            opt.zero_grad()
            terms.loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.model_grad_clip)
            opt.step()
            losses.append(float(terms.loss.detach()))
        tensors.update(ck.module_tensors("psi", model))
    meta = {**ckpt.meta, "transfer": {"fine_tune_steps": fine_tune_steps,
                                      "episode_steps": ep.steps}}
    out = ck.Checkpoint(tensors, meta, ckpt.config_hash, ckpt.step, ckpt.version)
    return TransferResult(out, ep, losses)


def reconstruction_mse(model: LatentModel, frames: Sequence[np.ndarray],
                       actions: Sequence[np.ndarray], bounds) -> float:
    """Posterior-mean reconstruction error over a recorded sequence."""
    imgs = torch.from_numpy(np.stack(frames).astype(np.float32))[None]
    acts = torch.from_numpy((np.stack(actions) / np.asarray(bounds)).astype(np.float32))[None]
    if acts.shape[1] == 0:
        acts = acts.reshape(1, 0, len(bounds))
    rec = reconstruct(model, imgs, acts)
    return float(((rec - imgs) ** 2).mean())
