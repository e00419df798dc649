"""Command-line entry point wiring all modules into reproducible runs.

Subcommands: gen-world, build-pp, train, eval, report. Every subcommand is a
pure function of its inputs and seed, writes outputs atomically, and exits
0 on success, 1 on configuration errors, 2 on data errors, 3 on numeric
failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .agent import AgentConfig, ModelParams
from .data import (
    build_pp_dataset,
    compute_stats,
    load_pp_dataset,
    load_r2r_trajectories,
    load_scene_r2r,
    save_pp_dataset,
    stats_text,
)
from .errors import ConfigError, DataError, NumericError, PertnavError
from .evaluate import EvalProtocol, evaluation_report
from .fsio import atomic_write_text, dumps_canonical, read_json, write_json
from .graph import load_scenes, save_scenes
from .losses import LossWeights
from .train import TrainConfig, Trainer
from .world import WorldConfig, generate_scene, load_episodes, sample_episode, save_episodes


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); bad flags are config errors
        raise ConfigError(message)


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise DataError(f"input not found: {p}")


def _child_seed(root: int, stream: int, k: int = 0) -> int:
    ss = np.random.SeedSequence((root, stream, k))
    return int(ss.generate_state(1)[0])


# -- gen-world -------------------------------------------------------------------


def cmd_gen_world(args) -> int:
    out = Path(args.out)
    scenes = []
    for k in range(args.scenes):
        cfg = WorldConfig(
            n_nodes=args.nodes,
            box=args.box,
            radius=args.radius,
            n_landmarks=args.landmarks,
            hop_range=(args.hop_min, args.hop_max),
            seed=_child_seed(args.seed, 0, k),
        )
        scenes.append(generate_scene(cfg, scan=f"s{k:02d}"))
    scene_map = {s.scan: s for s in scenes}

    def sample_split(count, stream):
        episodes = []
        for i in range(count):
            scene = scenes[i % len(scenes)]
            episodes.append(
                sample_episode(
                    scene,
                    seed=_child_seed(args.seed, stream, i),
                    hop_range=(args.hop_min, args.hop_max),
                    path_id=f"{scene.scan}-{stream}{i:04d}",
                )
            )
        return episodes

    train = sample_split(args.episodes, 1)
    val = sample_split(args.val_episodes, 2)
    save_scenes(out / "scenes.json", scene_map.values())
    save_episodes(out / "train.json", train)
    save_episodes(out / "val.json", val)
    print(f"wrote {len(scenes)} scenes, {len(train)} train / {len(val)} val episodes to {out}")
    return 0


# -- build-pp --------------------------------------------------------------------


def cmd_build_pp(args) -> int:
    out = Path(args.out)
    if args.connectivity_dir:
        scans = sorted(Path(args.connectivity_dir).glob("*_connectivity.json"))
        if not scans:
            raise DataError(f"no *_connectivity.json under {args.connectivity_dir}")
        scenes = {}
        for f in scans:
            scene = load_scene_r2r(f)
            scenes[scene.scan] = scene
        episodes = load_r2r_trajectories(args.episodes)
    else:
        _require_files(args.scenes, args.episodes)
        scenes = load_scenes(args.scenes)
        episodes = load_episodes(args.episodes)
    if not episodes:
        raise DataError(f"no episodes in {args.episodes}")
    pp = build_pp_dataset(scenes, episodes, split=args.split)
    save_pp_dataset(out / f"pp_{args.split}.json", pp)
    stats = compute_stats(pp, scenes)
    write_json(out / f"stats_{args.split}.json", stats.to_dict())
    atomic_write_text(out / f"stats_{args.split}.txt", stats_text(stats))
    print(
        f"{args.split}: {stats.n_perturbable} of {stats.n_trajectories} trajectories "
        f"perturbable; deletable edges min/max/avg = "
        f"{stats.deletable_min}/{stats.deletable_max}/{stats.deletable_avg:.2f}"
    )
    return 0


# -- train ------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        _require_files(args.config)
        base = read_json(args.config)
    cfg = TrainConfig.from_dict(base) if base else TrainConfig()
    overrides = {}
    for name in ("seed", "iterations", "batch_size", "lr", "mode", "checkpoint_every", "d"):
        val = getattr(args, name)
        if val is not None:
            overrides[name] = val
    weights = cfg.weights
    wover = {}
    for flag, field_name in (
        ("lam_il", "il_weight"),
        ("lam_free", "free_weight"),
        ("lam_pert", "pert_weight"),
        ("tau", "tau"),
        ("gamma", "gamma"),
    ):
        val = getattr(args, flag)
        if val is not None:
            wover[field_name] = val
    if wover:
        weights = LossWeights(**{**weights.to_dict(), **wover})
    merged = {**cfg.to_dict(), **overrides, "weights": weights.to_dict()}
    return TrainConfig.from_dict(merged)


def cmd_train(args) -> int:
    _require_files(args.scenes, args.episodes)
    out = Path(args.out)
    scenes = load_scenes(args.scenes)
    episodes = load_episodes(args.episodes)
    if not episodes:
        raise DataError(f"no episodes in {args.episodes}")
    cfg = _train_config(args)
    trainer = Trainer(cfg, scenes, episodes)
    if args.resume:
        _require_files(args.resume)
        trainer.load_state_dict(read_json(args.resume))
    lines = []
    ckpt_dir = out / "checkpoints"

    def on_iteration(tr, report):
        lines.append(json.dumps(report, sort_keys=True, separators=(",", ":")))
        it = report["iteration"]
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it < cfg.iterations:
            write_json(ckpt_dir / f"ckpt_{it:07d}.json", tr.state_dict())

    trainer.run(on_iteration=on_iteration)
    write_json(out / "checkpoint_final.json", trainer.state_dict())
    atomic_write_text(out / "losses.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    last = trainer.state.iteration
    prop = trainer.state.pool.n_episodes / max(1, trainer.n_perturbable)
    print(
        f"trained {cfg.mode} to iteration {last}; pool {len(trainer.state.pool)} entries "
        f"({100.0 * prop:.1f}% of perturbable episodes); artifacts in {out}"
    )
    return 0


# -- eval -------------------------------------------------------------------------


def load_checkpoint_params(path) -> ModelParams:
    obj = read_json(path)
    if "params" in obj:  # full trainer checkpoint
        obj = obj["params"]
    return ModelParams.from_dict(obj)


def cmd_eval(args) -> int:
    _require_files(args.checkpoint, args.scenes, args.episodes)
    scenes = load_scenes(args.scenes)
    episodes = load_episodes(args.episodes)
    params = load_checkpoint_params(args.checkpoint)
    protocol = EvalProtocol(
        mode=args.mode,
        success_radius=args.radius,
        seed=args.seed if args.seed is not None else 0,
        max_steps=args.max_steps,
        multi_perturb=args.multi_perturb,
    )
    report = evaluation_report(params, scenes, episodes, protocol)
    write_json(args.out, report)
    m = report["metrics"]
    print(
        f"{protocol.mode}: TL {m['tl']:.2f}  NE {m['ne']:.2f}  "
        f"SR {100.0 * m['sr']:.1f}%  SPL {100.0 * m['spl']:.1f}%  ({m['n_episodes']} episodes)"
    )
    return 0


# -- report -----------------------------------------------------------------------


def cmd_report(args) -> int:
    from . import report as rpt

    out = Path(args.out)
    written = []
    if args.train_log:
        _require_files(args.train_log)
        records = rpt.read_loss_log(args.train_log)
        if not records:
            raise DataError(f"empty loss log {args.train_log}")
        written += rpt.loss_curves(records, out)
        written += rpt.pool_growth(records, out)
    if args.evals:
        pairs = []
        for item in args.evals:
            label, _, path = item.partition("=")
            if not path:
                label, path = Path(item).stem, item
            _require_files(path)
            pairs.append((label, read_json(path)))
        written += rpt.eval_bars(pairs, out)
    if args.stats:
        _require_files(args.stats)
        written += rpt.stats_figure(read_json(args.stats), out)
    if not written:
        raise ConfigError("nothing to report: pass --train-log, --eval, or --stats")
    for p in written:
        print(f"wrote {p}")
    return 0


# -- wiring -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pertnav", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-world", help="generate synthetic scenes and episodes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=10)
    g.add_argument("--nodes", type=int, default=40)
    g.add_argument("--episodes", type=int, default=200)
    g.add_argument("--val-episodes", type=int, default=50)
    g.add_argument("--landmarks", type=int, default=12)
    g.add_argument("--radius", type=float, default=7.5)
    g.add_argument("--box", type=float, default=30.0)
    g.add_argument("--hop-min", type=int, default=3)
    g.add_argument("--hop-max", type=int, default=6)
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gen_world)

    b = sub.add_parser("build-pp", help="enumerate deletable edges and detour references")
    b.add_argument("--scenes", help="scene JSON produced by gen-world")
    b.add_argument("--connectivity-dir", help="directory of R2R *_connectivity.json files")
    b.add_argument("--episodes", required=True)
    b.add_argument("--split", default="train")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_pp)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--scenes", required=True)
    t.add_argument("--episodes", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--d", type=int)
    t.add_argument("--mode", choices=["baseline", "proper", "teacher2student"])
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--lam-il", dest="lam_il", type=float)
    t.add_argument("--lam-free", dest="lam_free", type=float)
    t.add_argument("--lam-pert", dest="lam_pert", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--gamma", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--episodes", required=True)
    e.add_argument("--mode", choices=["per-free", "per-based"], default="per-free")
    e.add_argument("--radius", type=float, default=3.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-steps", dest="max_steps", type=int, default=15)
    e.add_argument("--multi-perturb", dest="multi_perturb", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render figures and CSV tables from artifacts")
    r.add_argument("--train-log", dest="train_log")
    r.add_argument("--eval", dest="evals", action="append", metavar="LABEL=REPORT.json")
    r.add_argument("--stats")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except PertnavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
