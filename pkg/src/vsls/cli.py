"""Command-line entry point: ``vsls <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("vsls")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise UsageError("config file must hold a JSON object")
    return d


def _out_dir(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _scenes(textures, split: str | None = None):
    from .textures import scan_directory

    if textures is None:
        raise UsageError("--textures is required")
    entries = scan_directory(textures)
    if split is not None:
        entries = [e for e in entries if e.split in (None, split)] if split == "train" else \
            [e for e in entries if e.split == split]
    if not entries:
        raise UsageError(f"no usable textures in {textures}")
    return [e.load() for e in entries]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, conf: dict) -> int:
    from .config import load_train_config, to_jsonable
    from .pipeline import Trainer

    conf = dict(conf)
    conf.pop("dvs", None)
    conf.pop("scenario", None)
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.steps is not None:
        conf["total_steps"] = args.steps
    if args.checkpoint_every is not None:
        conf["checkpoint_every"] = args.checkpoint_every
    cfg = load_train_config(overrides=conf)
    out = _out_dir(args, "run")
    scenes = _scenes(args.textures, "train")
    ckpt = out / "ckpt.bin"
    logp = out / "log.jsonl"
    if args.resume:
        t = Trainer.resume(args.resume, scenes, log_path=logp)
    else:
        if logp.exists():
            logp.unlink()
        t = Trainer(cfg, scenes, log_path=logp)
    (out / "config.json").write_text(json.dumps(to_jsonable(t.cfg), indent=1, sort_keys=True))
    t0 = time.time()
    t.train(checkpoint_path=ckpt)
    t.save(ckpt)
    summary = {"steps": t.step, "updates": t.updates, "stage": t.curriculum.stage.stage_idx,
               "solved_goals": len(t.curriculum.solved_goals), "wall_seconds": time.time() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def _dvs_cfg(conf: dict):
    from .config import dvs_config_from_dict

    return dvs_config_from_dict(conf.get("dvs"))


def cmd_eval(args, conf: dict) -> int:
    from . import checkpoint as ck
    from .config import HandoffConfig
    from .harness import ScenarioConfig, emit_report, gen_scenarios, run_benchmark
    from .pipeline import load_networks
    from .sim import CameraIntrinsics, Workspace, shift_preset

    method = {"rl": "rl_only"}.get(args.method, args.method)
    model = agent = None
    size, hcfg, dims = 64, HandoffConfig(), None
    if method != "dvs":
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for method {args.method}")
        cfg, model, agent = load_networks(ck.load(args.checkpoint))
        size, hcfg, dims = cfg.model.image_size, cfg.handoff, cfg.workspace_dims
    sc_conf = dict(conf.get("scenario", {}))
    sc_conf.update(kind=args.scenario, trials=args.trials,
                   seed=args.seed if args.seed is not None else sc_conf.get("seed", 0))
    scfg = ScenarioConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in sc_conf.items()})
    k = CameraIntrinsics.square(size)
    ws = Workspace(dims=tuple(dims or scfg.box))
    scenes = _scenes(args.textures, args.split)
    trials = gen_scenarios(scfg, scenes, k, ws)
    shift = shift_preset(args.shift) if args.shift else None
    rep = run_benchmark(trials, method, model, agent, k, ws, hcfg, _dvs_cfg(conf), shift, scfg.seed)
    out = _out_dir(args, "report")
    emit_report(rep, out, plots=args.plots)
    print(json.dumps({"method": rep.method, "success_rate": rep.success_rate,
                      "trans_cm_mean": rep.trans_cm_mean, "rot_deg_mean": rep.rot_deg_mean}))
    return 0


def cmd_dvs(args, conf: dict) -> int:
    from . import se3
    from .dvs import servo
    from .sim import CameraIntrinsics, PlanarScene, SimState, home_pose, render
    from .textures import load_texture

    scene = PlanarScene(load_texture(args.texture), scene_id=Path(args.texture).stem)
    k = CameraIntrinsics.square(args.size)
    goal = home_pose()
    rng = np.random.default_rng(args.seed or 0)
    direction = rng.normal(size=6)
    direction[:3] *= args.offset_cm / 100 / np.linalg.norm(direction[:3])
    direction[3:] *= math.radians(args.offset_deg) / np.linalg.norm(direction[3:])
    start = se3.compose(goal, se3.action_pose(direction))
    res = servo(SimState(start, scene, k), render(scene, k, goal), _dvs_cfg(conf), goal)
    out = _out_dir(args, "dvs")
    (out / "dvs_result.json").write_text(json.dumps(res.to_dict(), indent=1))
    cm, deg = se3.pose_errors(res.final_pose, goal)
    print(json.dumps({"converged": res.converged, "iters": res.iters, "reason": res.reason,
                      "final_cm": cm, "final_deg": deg}))
    return 0


def cmd_transfer(args, conf: dict) -> int:
    from . import checkpoint as ck
    from .curriculum import LOOK_AT
    from .harness import ScenarioConfig, gen_scenarios
    from .pipeline import reconstruction_mse, single_shot_transfer, load_networks
    from .sim import CameraIntrinsics, SimState, Workspace, shift_preset

    source = ck.load(args.checkpoint)
    cfg, model, agent = load_networks(source)
    shift = shift_preset(args.shift)
    k = CameraIntrinsics.square(cfg.model.image_size)
    ws = Workspace(dims=cfg.workspace_dims)
    scenes = _scenes(args.textures)
    seed = args.seed or 0
    trial = gen_scenarios(ScenarioConfig(kind=LOOK_AT, trials=1, seed=seed, box=(0.1, 0.1, 0.1),
                                         lookat_radius=0.03), scenes, k, ws).trials[0]
    sim = SimState(trial.start, trial.goal.scene, k, ws, np.random.default_rng([seed, 1]),
                   bounds=np.asarray(cfg.agent.bounds), shift=shift)
    gimg = shift.apply(trial.goal.goal_image, np.random.default_rng([seed, 2]))
    t0 = time.time()
    res = single_shot_transfer(source, sim, trial.goal, args.steps, goal_image=gimg, seed=seed)
    elapsed = time.time() - t0
    _, tuned, _ = load_networks(res.checkpoint)
    ep = res.episode
    before = reconstruction_mse(model, ep.frames, ep.actions, cfg.agent.bounds)
    after = reconstruction_mse(tuned, ep.frames, ep.actions, cfg.agent.bounds)
    out = _out_dir(args, "transfer")
    ck.save(out / "ckpt_transfer.bin", res.checkpoint)
    summary = {"shift": args.shift, "fine_tune_steps": args.steps, "episode_steps": ep.steps,
               "recon_mse_before": before, "recon_mse_after": after, "seconds": elapsed}
    (out / "transfer.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def cmd_render(args, conf: dict) -> int:
    from . import se3
    from .se3 import Pose
    from .sim import CameraIntrinsics, PlanarScene, render
    from .textures import load_texture, save_texture

    scene = PlanarScene(load_texture(args.texture))
    if args.lookat:
        x, y, z, tx, ty = args.lookat
        pose = se3.lookat_pose([x, y, z], [tx, ty, 0.0])
    elif args.pose:
        pose = Pose.from_list(args.pose)
    else:
        from .sim import home_pose
        pose = home_pose()
    img = render(scene, CameraIntrinsics.square(args.size), pose)
    out = Path(args.out or "render.png")
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "render.png"
    save_texture(out, img)
    print(str(out))
    return 0


def cmd_ingest(args, conf: dict) -> int:
    from .harness import ingest_dataset

    split = ingest_dataset(args.directory, args.train_frac,
                           args.seed if args.seed is not None else 0)
    out = _out_dir(args, ".")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=1))
    print(json.dumps({"train": [e.scene_id for e in split.train],
                      "heldout": [e.scene_id for e in split.heldout]}))
    return 0


def cmd_gen_textures(args, conf: dict) -> int:
    from .textures import write_texture_set

    out = _out_dir(args, "textures")
    paths = write_texture_set(out, args.n, args.seed or 0, args.size)
    print(json.dumps([str(p) for p in paths]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file (CLI flags override its keys)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (or file for render)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vsls", description="Latent-RL + photometric visual servoing lab",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="train an agent with the curriculum")
    s.add_argument("--textures", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="benchmark dvs / rl / hybrid")
    s.add_argument("--checkpoint")
    s.add_argument("--textures", required=True)
    s.add_argument("--split", choices=["train", "heldout"])
    s.add_argument("--scenario", choices=["look-at", "screw"], default="look-at")
    s.add_argument("--method", choices=["dvs", "rl", "rl_only", "hybrid"], default="hybrid")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--shift", help="domain-shift preset")
    s.add_argument("--plots", choices=["converged", "all", "none"], default="converged")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("dvs", parents=[common], help="one DVS run from a perturbed home pose")
    s.add_argument("--texture", required=True)
    s.add_argument("--offset-cm", type=float, default=1.0)
    s.add_argument("--offset-deg", type=float, default=1.0)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(fn=cmd_dvs)

    s = sub.add_parser("transfer", parents=[common], help="single-shot domain transfer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--shift", required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--textures", required=True)
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("render", parents=[common], help="render a texture from a camera pose")
    s.add_argument("--texture", required=True)
    s.add_argument("--pose", type=float, nargs=7, metavar=("X", "Y", "Z", "QW", "QX", "QY", "QZ"))
    s.add_argument("--lookat", type=float, nargs=5, metavar=("X", "Y", "Z", "TX", "TY"))
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("ingest", parents=[common], help="seeded train/held-out texture split")
    s.add_argument("directory")
    s.add_argument("--train-frac", type=float, default=0.8)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("gen-textures", parents=[common], help="write procedural textures")
    s.add_argument("--n", type=int, default=6)
    s.add_argument("--size", type=int, default=512)
    s.set_defaults(fn=cmd_gen_textures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("config", None), ("seed", None), ("out", None), ("verbose", False)):
            if not hasattr(args, name):
                setattr(args, name, default)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        conf = _read_config(args.config)
    except UsageError as e:
        print(f"vsls: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args, conf)
    except UsageError as e:
        print(f"vsls: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"vsls: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
