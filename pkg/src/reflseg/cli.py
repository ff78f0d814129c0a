"""Command-line entry point: data generation, training, evaluation,
ablations, gradient checking, and episode visualization.

Every command echoes its effective configuration (after config-file and
flag merging) as `effective_config.txt` next to its outputs, so any run is
reproducible from that file alone.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import episodes as ep
from . import metrics as mx
from . import trainer as tr
from .episodes import load_manifest, split_folds
from .trainer import TrainConfig, apply_checkpoint, build_model, load_checkpoint


def _parse_config_file(path) -> dict:
    """Flat `key = value` text; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = body.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")
    return value == "on"


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset-dir", default="dataset")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--seed", type=int, default=0)


def _add_train_flags(p):
    p.add_argument("--fold", type=int, choices=range(4), default=0)
    p.add_argument("--k", type=int, choices=(1, 5), default=1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--grad-clip", type=float, default=25.0,
                   help="global gradient-norm clip for meta training")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--episodes-per-epoch", type=int, default=400)
    p.add_argument("--base-learner", type=_onoff, default=False,
                   metavar="{on,off}")
    p.add_argument("--sri", type=_onoff, default=True, metavar="{on,off}")
    p.add_argument("--qri", type=_onoff, default=True, metavar="{on,off}")
    p.add_argument("--share-prior-conv", action="store_true")
    p.add_argument("--flip-augment", action="store_true",
                   help="single-view baseline with random flip augmentation")


def _config_defaults(subparser, path) -> None:
    """Install config-file values as subparser defaults, so explicitly
    given CLI flags still win on the second parse."""
    values = _parse_config_file(path)
    for key, raw in values.items():
        current = subparser.get_default(key)
        if current is None and key not in [a.dest for a in subparser._actions]:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(current, bool):
            value = raw in ("on", "true", "1")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        subparser.set_defaults(**{key: value})


def _echo_config(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as f:
        for key, value in sorted(vars(args).items()):
            if key == "config":
                continue
            f.write(f"{key} = {value}\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr, grad_clip=args.grad_clip, batch=args.batch, epochs=args.epochs,
        episodes_per_epoch=args.episodes_per_epoch, momentum=args.momentum,
        seed=args.seed, fold=args.fold, k=args.k,
        base_learner=args.base_learner, sri=args.sri, qri=args.qri,
        share_prior_conv=args.share_prior_conv, flip_augment=args.flip_augment,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _echo_config(args, args.out_dir)
    manifest = ep.generate_dataset(args.n_per_class, args.seed, args.out_dir)
    print(f"wrote dataset to {args.out_dir} ({manifest})")
    return 0


def cmd_train_base(args) -> int:
    _echo_config(args, args.out_dir)
    config = _train_config(args)
    manifest = load_manifest(args.dataset_dir)
    ckpt = tr.train_base(config, manifest, args.out_dir)
    print(f"base checkpoint: {ckpt}")
    return 0


def cmd_train_meta(args) -> int:
    _echo_config(args, args.out_dir)
    config = _train_config(args)
    manifest = load_manifest(args.dataset_dir)
    ckpt = tr.train_meta(config, manifest, args.out_dir,
                         base_ckpt=args.base_ckpt)
    print(f"model checkpoint: {ckpt}")
    return 0


def _load_model(args, config: TrainConfig):
    model = build_model(config)
    if args.ckpt:
        apply_checkpoint(model, load_checkpoint(args.ckpt))
        if model.base is not None:
            model.base.frozen = True
    return model


def _report_csv_rows(report, seed):
    class_cols = ";".join(f"{c}:{iou * 100:.2f}"
                          for c, iou in sorted(report.class_ious.items()))
    return [report.fold, report.k, seed,
            f"{report.miou:.4f}", f"{report.fbiou:.4f}", class_cols]


def cmd_eval(args) -> int:
    _echo_config(args, args.out_dir)
    config = _train_config(args)
    manifest = load_manifest(args.dataset_dir)
    model = _load_model(args, config)
    split = split_folds(args.fold)
    seeds = [args.seed + i for i in range(args.seeds)]
    rows = []
    mious = []
    for seed in seeds:
        report = mx.evaluate(model, manifest, split, args.k,
                             n_episodes=args.n_episodes_eval, seed=seed)
        rows.append(_report_csv_rows(report, seed))
        mious.append(report.miou)
    path = os.path.join(args.out_dir, "eval.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fold", "shot", "seed", "miou", "fbiou", "class_ious"])
        writer.writerows(rows)
    lo, hi = min(mious), max(mious)
    print(f"fold {args.fold} {args.k}-shot: "
          f"mIoU {np.mean(mious):.2f} (range {lo:.2f}..{hi:.2f}) -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    _echo_config(args, args.out_dir)
    report = tr.grad_check(seed=args.seed)
    print(f"checked {report.n_checked} parameters; "
          f"max rel err {report.max_rel_err:.3e} at {report.worst_param}")
    for name, idx, rel in report.failures:
        print(f"FAIL {name}[{idx}]: rel err {rel:.3e}")
    print("gradcheck PASS" if report.passed else "gradcheck FAIL")
    return 0 if report.passed else 1


ABLATE_VARIANTS = (
    ("baseline", dict(sri=False, qri=False, flip_augment=False)),
    ("sri_only", dict(sri=True, qri=False, flip_augment=False)),
    ("qri_only", dict(sri=False, qri=True, flip_augment=False)),
    ("full", dict(sri=True, qri=True, flip_augment=False)),
    ("baseline_aug", dict(sri=False, qri=False, flip_augment=True)),
)


def run_ablation(args, manifest) -> dict:
    """Train and evaluate every (variant, fold, seed) cell; returns
    {variant: {(fold, seed): miou}}."""
    from dataclasses import replace

    results = {name: {} for name, _ in ABLATE_VARIANTS}
    folds = [args.fold] if args.fold is not None else list(range(4))
    for name, overrides in ABLATE_VARIANTS:
        for fold in folds:
            for i in range(args.seeds):
                seed = args.seed + i
                config = replace(_train_config(args), fold=fold, seed=seed,
                                 **overrides)
                out = os.path.join(args.out_dir, f"{name}_f{fold}_s{seed}")
                ckpt = tr.train_meta(config, manifest, out)
                model = build_model(config)
                apply_checkpoint(model, load_checkpoint(ckpt))
                report = mx.evaluate(model, manifest, split_folds(fold),
                                     args.k, n_episodes=args.n_episodes_eval,
                                     seed=seed)
                results[name][(fold, seed)] = report.miou
                print(f"{name} fold {fold} seed {seed}: mIoU {report.miou:.2f}")
    return results


def cmd_ablate(args) -> int:
    _echo_config(args, args.out_dir)
    manifest = load_manifest(args.dataset_dir)
    results = run_ablation(args, manifest)
    path = os.path.join(args.out_dir, "ablation.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "fold", "seed", "miou"])
        for name, cells in results.items():
            for (fold, seed), miou in sorted(cells.items()):
                writer.writerow([name, fold, seed, f"{miou:.4f}"])
        writer.writerow([])
        writer.writerow(["variant", "mean_miou"])
        for name, cells in results.items():
            writer.writerow([name, f"{np.mean(list(cells.values())):.4f}"])
    print(f"ablation grid -> {path}")
    for name, cells in results.items():
        print(f"  {name}: mean mIoU {np.mean(list(cells.values())):.2f}")
    return 0


def cmd_demo(args) -> int:
    _echo_config(args, args.out_dir)
    config = _train_config(args)
    manifest = load_manifest(args.dataset_dir)
    model = _load_model(args, config)
    split = split_folds(args.fold)
    rng = np.random.default_rng([args.seed, 42])
    episode = ep.sample_episode(manifest, split, "test", args.k, rng,
                                feature_stride=model.backbone.total_stride)
    result = model.forward(episode)

    def save_map(name, data, signed=False):
        # grayscale PGM; raw cosine priors in [-1, 1] get shifted to [0, 1]
        values = (data + 1.0) / 2.0 if signed else data
        img = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
        with open(os.path.join(args.out_dir, name), "wb") as f:
            h, w = img.shape
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(img.tobytes())

    save_map("prior_original.pgm", result.raw_priors["view_o.orig"].data, signed=True)
    if "view_o.refl" in result.raw_priors:
        save_map("prior_reflection.pgm", result.raw_priors["view_o.refl"].data,
                 signed=True)
    save_map("prior_fused.pgm", result.prior_o.data)
    fg_o = (result.r_o.probs.data[1] > result.r_o.probs.data[0]).astype(np.float64)
    save_map("pred_original.pgm", fg_o)
    if result.r_f is not None:
        fg_f = (result.r_f.probs.data[1] > result.r_f.probs.data[0]).astype(np.float64)
        save_map("pred_reflection.pgm", fg_f)
    fg = (result.final.probs.data[1] > result.final.probs.data[0]).astype(np.float64)
    save_map("pred_fused.pgm", fg)
    save_map("query_gt.pgm", episode.query.mask.astype(np.float64))
    print(f"demo maps for class {episode.class_id} -> {args.out_dir}")
    return 0


def build_parser() -> tuple:
    parser = argparse.ArgumentParser(
        prog="reflseg",
        description="reflection-invariance few-shot segmentation, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--n-per-class", type=int, default=50)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="phase 1: fit the base learner")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-meta", help="phase 2: meta-train the pipeline")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--base-ckpt", help="phase-1 checkpoint (required if "
                   "--base-learner on)")
    p.set_defaults(func=cmd_train_meta)

    p = sub.add_parser("eval", help="1000-episode test protocol")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--ckpt", help="model checkpoint to evaluate")
    p.add_argument("--n-episodes-eval", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=1,
                   help="number of evaluation seeds (mean and range reported)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="SRI/QRI grid plus flip-augmentation row")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--n-episodes-eval", type=int, default=200)
    # grid-friendly training defaults: 60 cells at the full training budget
    # would take hours on one core
    p.set_defaults(func=cmd_ablate, fold=None, epochs=8, batch=4)

    p = sub.add_parser("demo", help="write prior/prediction maps for one episode")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--ckpt", help="model checkpoint to visualize")
    p.set_defaults(func=cmd_demo)

    commands.update(sub.choices)
    return parser, commands


def main(argv=None) -> int:
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            # install config values as defaults, then re-parse so explicit
            # CLI flags keep priority over the file
            _config_defaults(commands[args.command], args.config)
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
