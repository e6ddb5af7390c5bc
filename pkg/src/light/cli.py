"""Command-line entry point: ``light {datagen,train,eval,infer,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, LightError


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(what, f"cannot read {path}: {exc}") from exc


def cmd_datagen(args):
    from .synthdata import SceneSpec, write_dataset

    spec = SceneSpec.from_dict(_load_json(args.spec, "spec")) if args.spec else SceneSpec()
    manifest = write_dataset(spec, args.n, args.out, args.val_fraction)
    print(json.dumps({k: len(v) for k, v in manifest.splits.items()}))


def cmd_train(args):
    from .config import TrainConfig, load_config, with_env_seed
    from .engine import train

    cfg = load_config(args.config) if args.config else with_env_seed(TrainConfig()).validate()
    _, report = train(cfg, args.data, args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_eval(args):
    from .engine import evaluate, evaluate_predictions, write_report

    if args.pred:
        report = evaluate_predictions(args.pred, args.data, args.split, args.mode)
        meta = {"split": args.split, "predictions": str(args.pred)}
    else:
        if not args.ckpt:
            raise ConfigError("ckpt", "either --ckpt or --pred is required")
        report, meta = evaluate(args.ckpt, args.data, args.split)
    if args.out:
        write_report(args.out, report, meta)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_infer(args):
    from .engine import infer

    print(infer(args.ckpt, args.image, args.out))


def cmd_bench(args):
    from .engine import bench

    result = bench(args.ckpt, args.n)
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="light", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", help="write a synthetic dataset")
    s.add_argument("--spec", help="SceneSpec JSON")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--out", required=True)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or stored predictions")
    s.add_argument("--ckpt")
    s.add_argument("--pred", help="directory of per-sample prediction folders")
    s.add_argument("--mode", default="joint+gcti", help="which tasks --pred holds")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--out", help="report.json path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="time forward passes per mode")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except LightError as exc:
        print(f"light {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
