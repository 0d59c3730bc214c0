"""Command line entry point: ``sanerf {gen,match,train,render,eval,poses}``.

Training options resolve as defaults < ``--preset`` < ``--config`` JSON
file < flags. Every
scalar training option has its own flag; nested ones (``field.*``,
``posenet.*``) are set with ``--set key=value`` where the value is parsed as
JSON when possible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

log = logging.getLogger("sanerf")

SCENES = ("standard", "textured", "sphere", "box")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def _train_fields():
    from .trainer import TrainConfig

    return [f for f in dataclasses.fields(TrainConfig) if f.name not in ("field", "posenet")]


def _flag_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return _parse_value


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def _parse_set(item: str):
    if "=" not in item:
        raise argparse.ArgumentTypeError(f"--set expects key=value, got {item!r}")
    key, val = item.split("=", 1)
    return key.strip(), _parse_value(val)


def _nest(key: str, value) -> dict:
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return cfg


def effective_config(args) -> "TrainConfig":
    from .trainer import PRESETS, TrainConfig, merge_config

    cfg = TrainConfig().to_dict()
    if args.preset is not None:
        cfg = merge_config(cfg, PRESETS[args.preset])
    cfg = merge_config(cfg, load_config_file(args.config))
    for f in _train_fields():
        v = getattr(args, f"opt_{f.name}", None)
        if v is not None:
            cfg[f.name] = v
    for key, val in args.set or []:
        cfg = merge_config(cfg, _nest(key, val))
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from None


# ---------------------------------------------------------------------------
# commands


def _scene_spec(name_or_path: str, seed: int):
    from . import data

    builtin = {
        "standard": data.standard_scene_spec,
        "textured": data.textured_scene_spec,
        "sphere": data.sphere_scene_spec,
        "box": data.box_scene_spec,
    }
    if name_or_path in builtin:
        return builtin[name_or_path](seed)
    path = Path(name_or_path)
    if not path.exists():
        raise CliError(f"scene spec {name_or_path!r} is neither a file nor one of {', '.join(SCENES)}")
    spec = json.loads(path.read_text())
    spec.setdefault("seed", seed)
    return spec


def _load_dataset(args):
    from . import data

    scene = Path(args.scene)
    manifest = scene / "manifest.json" if scene.is_dir() else scene
    if not manifest.exists():
        raise CliError(f"no scene manifest at {manifest}")
    return data.load_scene(manifest, downscale=args.downscale, test_every=args.test_every)


def cmd_gen(args) -> int:
    from . import data

    seed = 0 if args.seed is None else args.seed
    spec = _scene_spec(args.spec, seed)
    scene = data.generate_scene(spec, args.out, seed=seed)
    print(f"wrote {len(scene.images)} views and {len(scene.tracks)} tracks to {args.out}")
    return 0


def cmd_match(args) -> int:
    from . import matching

    ds = _load_dataset(args)
    matcher = matching.make_matcher(args.matcher, ds)
    triples, graph, pairs = matching.build_triples(ds, matcher)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    matching.save_matches(out, ds.ids, pairs, triples, args.matcher)
    counts = graph.counts()
    print(f"{len(pairs)} pairs, {int(graph.matched.sum() // 2)} matched, {len(triples)} triples; "
          f"reference image {matching.select_reference(graph)}; per-image matches {counts}")
    return 0


def cmd_train(args) -> int:
    from . import trainer
    from .geometry import read_pose_map

    ds = _load_dataset(args)
    cfg = effective_config(args)
    frozen = None
    if args.frozen_poses:
        if args.phase != "train-only":
            raise CliError("--frozen-poses only applies to --phase train-only")
        frozen = read_pose_map(args.frozen_poses)
        missing = [i for i in ds.test_ids if i not in frozen]
        if missing:
            raise CliError(f"frozen pose file lacks held-out views {missing}")
    state = trainer.train_scene(ds, cfg, args.out, phase=args.phase, frozen_poses=frozen,
                                matches_path=args.matches, progress_every=args.progress)
    print(f"trained {state.step} steps; checkpoint {Path(args.out) / 'checkpoint.bin'}")
    return 0


def _load_state(args, ds):
    from . import trainer

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    return trainer.load_state(ckpt, ds, args.matches)


def cmd_render(args) -> int:
    from . import data, trainer
    from .renderer import render_image

    ds = _load_dataset(args)
    state = _load_state(args, ds)
    poses = trainer.estimated_poses(state)
    views = args.views if args.views else list(ds.test_ids)
    cfg = state.render_config()
    cfg.perturb = False
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in views:
        if i not in poses:
            raise CliError(f"no pose for view {i}")
        img, depth = render_image((state.coarse, state.fine), poses[i].rotation, poses[i].translation,
                                  ds.intrinsics, cfg, dtype=state.dtype)
        data.save_png(out / f"{i:03d}.png", img)
        data.write_raster(out / f"{i:03d}_depth.f32", depth)
    print(f"rendered views {views} to {out}")
    return 0


def cmd_eval(args) -> int:
    from . import evalkit

    ds = _load_dataset(args)
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    if args.ref_poses is not None and not Path(args.ref_poses).exists():
        raise CliError(f"reference pose file not found: {args.ref_poses}")
    report = evalkit.evaluate_run(args.checkpoint, ds, reference_poses=args.ref_poses, out_path=args.out,
                                  matches_path=args.matches)
    m = report["mean"]
    msg = f"mean PSNR {m['psnr']:.3f} dB, SSIM {m['ssim']:.4f}"
    if "ate" in report:
        msg += f", ATE {report['ate']:.5f}"
    print(msg)
    return 0


def cmd_poses(args) -> int:
    from . import trainer
    from .geometry import ate_rmse, write_pose_map

    ds = _load_dataset(args)
    state = _load_state(args, ds)
    poses = trainer.estimated_poses(state)
    write_pose_map(args.out, poses, comment="estimated camera-to-world poses")
    msg = f"wrote {len(poses)} poses to {args.out}"
    if ds.has_reference_poses:
        ids = [i for i in state.ids if i < len(ds.reference_poses)]
        msg += f"; ATE {ate_rmse([poses[i] for i in ids], [ds.reference_poses[i] for i in ids]):.5f}"
    print(msg)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="global random seed (overrides the config file)")
    p.add_argument("--threads", type=int, default=None, help="upper bound on compute threads")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def _scene_args(p, matches=True):
    p.add_argument("--scene", required=True, help="scene directory or manifest.json")
    p.add_argument("--downscale", type=int, default=1, help="integer image downscale factor")
    p.add_argument("--test-every", type=int, default=None, help="hold out every n-th image (default from manifest)")
    if matches:
        p.add_argument("--matches", default=None, help="match cache (JSON lines); created when absent")


def build_parser() -> argparse.ArgumentParser:
    from .trainer import PRESETS

    common = _common()
    parser = argparse.ArgumentParser(prog="sanerf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic scene")
    p.add_argument("--spec", default="standard", help=f"scene spec JSON file or one of: {', '.join(SCENES)}")
    p.add_argument("--out", required=True, help="output scene directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("match", parents=[common], help="match features and write the match cache")
    _scene_args(p, matches=False)
    p.add_argument("--matcher", default="oracle", choices=["oracle", "detector"])
    p.add_argument("--out", required=True, help="match cache path (JSON lines)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", parents=[common], help="jointly optimise field and poses")
    _scene_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS), help="named option set applied before --config")
    p.add_argument("--config", default=None, help="JSON file of training options")
    p.add_argument("--phase", default="all", choices=["all", "train-only"],
                   help="train on every image, or on the training split only")
    p.add_argument("--frozen-poses", default=None,
                   help="pose file from an all-image run; supplies held-out poses in train-only phase")
    p.add_argument("--progress", type=int, default=0, help="log progress every n steps")
    p.add_argument("--set", action="append", type=_parse_set, metavar="KEY=VALUE",
                   help="override any option, including nested ones such as field.width=128")
    for f in _train_fields():
        if f.name == "seed":  # the shared --seed flag feeds the config
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"opt_{f.name}", metavar=f.name.upper(),
                       type=_flag_type(default),
                       default=None, help=f"(default {default})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    _scene_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", type=int, nargs="*", default=None, help="image ids (default: held-out views)")
    p.add_argument("--out", required=True, help="output directory for PNG and depth rasters")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="score held-out views and trajectory")
    _scene_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref-poses", default=None, help="reference pose file (default: the scene's own)")
    p.add_argument("--out", required=True, help="report path (.json; a .csv mirror is written alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("poses", parents=[common], help="export estimated camera poses")
    _scene_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="pose file to write")
    p.set_defaults(func=cmd_poses)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be positive")
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except CliError as e:
        print(f"sanerf {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        print(f"sanerf {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
