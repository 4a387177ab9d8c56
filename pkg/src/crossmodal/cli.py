"""``crossmodal`` command line: gen-data, pretrain, train, render, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import MODALITIES, load_config
from .errors import CrossModalError, DataError, UsageError

log = logging.getLogger("crossmodal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML/JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossmodal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a procedural multi-modal dataset")
    _common(p)
    p.add_argument("--scenes", type=int)
    p.add_argument("--views", type=int)

    for name, helptext in (("pretrain", "EO-only pretraining"), ("train", "bootstrap + joint training")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", type=Path, required=True, help="dataset directory")
        p.add_argument("--steps", type=int)
        p.add_argument("--checkpoint", type=Path, help="starting checkpoint")
        p.add_argument("--s-max", type=int, dest="s_max")

    p = sub.add_parser("render", help="synthesize one target view")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--source-views", type=int, nargs="+", required=True)
    p.add_argument("--sources", nargs="+", choices=MODALITIES, required=True, help="one modality per source view")
    p.add_argument("--target-view", type=int, help="dataset view supplying the target pose and ground truth")
    p.add_argument("--target-pose", type=float, nargs=16, help="explicit row-major 4x4 target pose")
    p.add_argument("--target-modality", choices=MODALITIES, required=True)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--experiment", choices=("matrix", "fusion", "same-viewpoint"), required=True)
    p.add_argument("--tasks", type=int, default=4, help="tasks per cell/condition")
    p.add_argument("--s-max", type=int, dest="s_max", default=3, help="largest S for the fusion experiment")
    return parser


def _config(args):
    overrides = {"seed": args.seed, "threads": args.threads}
    if getattr(args, "scenes", None) is not None:
        overrides["n_scenes"] = args.scenes
    if getattr(args, "views", None) is not None:
        overrides["views_per_scene"] = args.views
    if getattr(args, "s_max", None) is not None and args.command != "eval":
        overrides["s_max"] = args.s_max
    return load_config(args.config, **overrides)


def _load_data(path, registry=None):
    from .persistence import data_hash, load_dataset

    ds = load_dataset(path)
    if registry is not None and data_hash(ds.config) != data_hash(registry.config):
        raise DataError(
            f"config hash mismatch: dataset {path} ({data_hash(ds.config)}) was generated with a "
            f"different camera/scene geometry than the checkpoint ({data_hash(registry.config)})"
        )
    return ds


def cli_gen_data(args):
    from .scenes import write_dataset

    config = _config(args)
    write_dataset(config.n_scenes, config.views_per_scene, args.out, config.seed, config)
    log.info("wrote %d scenes to %s", config.n_scenes, args.out)


def cli_pretrain(args):
    from .training import pretrain_eo
    from .persistence import load_registry

    ds = _load_data(args.data)
    config = ds.config.replace(**{k: v for k, v in _config(args).to_dict().items()
                                  if k in ("seed", "threads", "lr", "batch_size", "pretrain_steps", "s_max")})
    if args.steps is not None:
        config = config.replace(pretrain_steps=args.steps)
    registry = None
    if args.checkpoint:
        registry, _, _ = load_registry(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    pretrain_eo(registry, ds, config, checkpoint=args.out / "pretrain.ckpt", csv_path=args.out / "pretrain_loss.csv")


def cli_train(args):
    from .persistence import load_registry
    from .training import Trainer, bootstrap_from_eo, pretrain_eo, train_joint

    ds = _load_data(args.data)
    overrides = {k: v for k, v in _config(args).to_dict().items()
                 if k in ("seed", "threads", "lr", "batch_size", "joint_steps", "pretrain_steps", "s_max")}
    config = ds.config.replace(**overrides)
    if args.steps is not None:
        config = config.replace(joint_steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = args.out / "train_loss.csv"
    trainer = None
    if args.checkpoint:
        registry, header, _ = load_registry(args.checkpoint)
        _load_data(args.data, registry)
        if header.get("stage") == "joint":
            trainer = Trainer.resume(args.checkpoint, ds)
            registry = trainer.registry
    else:
        registry, _ = pretrain_eo(None, ds, config)
    if trainer is None:
        registry = bootstrap_from_eo(registry)
    train_joint(registry, ds, config, steps=config.joint_steps, checkpoint=args.out / "model.ckpt",
                csv_path=csv_path, trainer=trainer)


def _target_pose(args, ds):
    from .geometry import CameraPose

    if args.target_pose is not None:
        return CameraPose(np.array(args.target_pose).reshape(4, 4)), None
    if args.target_view is None:
        raise UsageError("give --target-view or --target-pose")
    rec = ds.record(args.scene, args.target_view, args.target_modality)
    return rec.pose, rec.image


def cli_render(args):
    from .diffusion import SampleRequest, cosine_schedule, sample_many
    from .persistence import export_feature_image, export_image, load_registry
    from .pipeline import encode_views
    from .scenes import Rig

    if len(args.sources) != len(args.source_views):
        raise UsageError("--sources needs one modality per --source-views entry")
    registry, _, _ = load_registry(args.checkpoint)
    ds = _load_data(args.data, registry)
    rig = Rig(registry.config)
    recs = [ds.record(args.scene, v, m) for v, m in zip(args.source_views, args.sources)]
    pose, truth = _target_pose(args, ds)
    with torch.no_grad():
        vols = encode_views(registry, [[(r.image, r.pose, r.modality) for r in recs]], rig)[0]
    seed = registry.config.seed if args.seed is None else args.seed
    req = SampleRequest(vols, pose, args.target_modality, np.random.default_rng(seed))
    (img,), (feat,) = sample_many(registry, [req], cosine_schedule(registry.config.timesteps), rig, return_features=True)
    args.out.mkdir(parents=True, exist_ok=True)
    export_image(args.out / "sample", img)
    export_feature_image(args.out / "features", feat)
    if truth is not None:
        export_image(args.out / "ground_truth", truth)


def cli_eval(args):
    from .metrics import eval_fusion, eval_matrix, eval_same_viewpoint, modality_subsets
    from .persistence import load_registry

    registry, _, _ = load_registry(args.checkpoint)
    ds = _load_data(args.data, registry)
    seed = registry.config.seed if args.seed is None else args.seed
    if args.experiment == "matrix":
        eval_matrix(registry, ds, n_tasks=args.tasks, seed=seed).write(args.out, "matrix")
    elif args.experiment == "fusion":
        for s in range(2, args.s_max + 1):
            eval_fusion(registry, ds, s, n_tasks=args.tasks, seed=seed).write(args.out, f"fusion_S{s}")
    else:
        for subset in modality_subsets():
            eval_same_viewpoint(registry, ds, subset, seed=seed, n_tasks=args.tasks).write(
                args.out, "same_viewpoint_" + "+".join(subset))


COMMANDS = {
    "gen-data": cli_gen_data,
    "pretrain": cli_pretrain,
    "train": cli_train,
    "render": cli_render,
    "eval": cli_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("crossmodal: error: --threads must be >= 1", file=sys.stderr)
        return 1
    torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except CrossModalError as exc:
        print(f"crossmodal: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"crossmodal: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
