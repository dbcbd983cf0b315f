"""Command-line surface: train, eval, gradcheck, ablate, export-attn,
gen-data.

Exit codes: 0 success, 1 a verification check failed, 2 usage or config
errors. Config files are JSON in TrainConfig.to_dict() layout; --set
applies dotted-key overrides on top (values parsed as JSON when possible).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SceneDataset, generate_scene
from .errors import ConfigError, DataError, MetricError, ShapeError
from .export import (export_attention_maps, export_sample,
                     export_segmentation)
from .gradsuite import check_normalization, run_suite, threshold_for
from .tensor import Tensor
from .train import (ABLATION_VARIANTS, AdamW, TrainConfig, ablate,
                    build_model, evaluate_miou, load_checkpoint, train)

USAGE_ERROR = 2
CHECK_FAILED = 1


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_override(d: dict, key: str, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {key}: {p!r} is not a config section")
        node = nxt
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> TrainConfig:
    if path is None:
        d = TrainConfig().to_dict()
    else:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        _apply_override(d, key.strip(), _parse_value(raw.strip()))
    return TrainConfig.from_dict(d)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyrmask",
        description="multi-scale query-based segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tta", action="store_true",
                   help="multi-scale + flip aggregation")

    p = sub.add_parser("gradcheck", help="gradient + normalization suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--forwards", type=int, default=100)

    p = sub.add_parser("ablate", help="paired baseline/variant training")
    _add_config_args(p)
    p.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("export-attn",
                       help="dump attention maps for one scene")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-seed", type=int, default=0,
                   help="scene generator seed")
    p.add_argument("--out", required=True)
    p.add_argument("--no-render", action="store_true",
                   help="skip the PGM renderings")

    p = sub.add_parser("gen-data", help="write scenes to disk")
    _add_config_args(p)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--out", required=True)
    return parser


def _load_model(config: TrainConfig, checkpoint: str):
    model = build_model(config)
    optimizer = AdamW(model.store, config.weight_decay)
    load_checkpoint(checkpoint, model, optimizer, config)
    return model


def cmd_train(args) -> int:
    config = load_config(args.config, args.overrides)
    result = train(config, args.out, resume_from=args.resume,
                   quiet=args.quiet)
    print(f"final val mIoU {result.final_miou:.17g}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args.overrides)
    model = _load_model(config, args.checkpoint)
    val = SceneDataset("val", config.val_size, config.seed,
                       config.img_h, config.img_w, config.n_categories)
    score, per_class = evaluate_miou(model, val, config, tta=args.tta)
    for k, iou in enumerate(per_class):
        shown = "excluded" if np.isnan(iou) else f"{iou:.4f}"
        print(f"class {k}: {shown}")
    print(f"val mIoU {score:.17g}")
    return 0


def cmd_gradcheck(args) -> int:
    results, grads_ok = run_suite(seed=args.seed, repeats=args.repeats)
    width = max(len(n) for n in results)
    for name, err in results.items():
        bound = threshold_for(name)
        flag = "ok" if err <= bound else "FAIL"
        print(f"{name:<{width}}  max rel err {err:.3e}  (bound {bound:.0e})  {flag}")
    dev, norm_ok = check_normalization(seed=args.seed,
                                       n_forwards=args.forwards)
    flag = "ok" if norm_ok else "FAIL"
    print(f"normalization  max |sum-1| {dev:.3e}  (bound 1e-09)  {flag}")
    return 0 if grads_ok and norm_ok else CHECK_FAILED


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.overrides)
    report = ablate(config, args.variant, args.out, quiet=args.quiet)
    print(json.dumps(report, indent=2))
    return 0


def cmd_export_attn(args) -> int:
    config = load_config(args.config, args.overrides)
    model = _load_model(config, args.checkpoint)
    sample = generate_scene(args.sample_seed, config.img_h, config.img_w,
                            config.n_categories)
    out_dir = Path(args.out)
    with T.no_grad():
        outputs = model.forward(Tensor(sample.image))
    written = export_attention_maps(outputs.decoder.attn_weights, out_dir,
                                    write_renders=not args.no_render)
    pred = model.predict(sample.image,
                         prediction_average=config.prediction_average)
    export_segmentation(pred, out_dir / "prediction.pgm", config.n_categories)
    export_sample(sample, out_dir, config.n_categories)
    print(f"wrote {len(written)} attention maps to {out_dir / 'attn'}")
    return 0


def cmd_gen_data(args) -> int:
    config = load_config(args.config, args.overrides)
    ds = SceneDataset(args.split, args.count, config.seed,
                      config.img_h, config.img_w, config.n_categories)
    out_dir = Path(args.out)
    for i in range(len(ds)):
        export_sample(ds[i], out_dir, config.n_categories)
    print(f"wrote {len(ds)} samples to {out_dir}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-attn": cmd_export_attn,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError, ShapeError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
