"""Command-line entry point ``amc``.

Exit codes: 0 success, 1 invalid input (bad data, config or checkpoint),
2 numeric failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit, selfcheck
from .checkpoint import load_checkpoint
from .errors import NumericError, ValidationError
from .groundata import generate_dataset, load_dataset, write_dataset
from .groundata.netpbm import write_pgm
from .train import heatmaps, load_config, params_from_checkpoint, train

log = logging.getLogger("amcground")


def _ratio(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("expected a value in [0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic grounding dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="hard")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--region-ratio", type=_ratio, default=0.0,
                   help="fraction of region (two-shape union) triplets")
    p.add_argument("--spatial-ratio", type=_ratio, default=None,
                   help="chance of targeting a shape whose caption needs a spatial word "
                        "(default 1 for hard, 0.5 for easy)")

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="pointing game (and Recall@k with proposals)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--proposals")
    p.add_argument("--out", required=True)
    p.add_argument("--rule", choices=("mean", "max"), default="mean",
                   help="proposal score: heatmap mean or max inside the box")
    p.add_argument("--k", default="1,5,10", help="comma-separated Recall@k cutoffs")
    p.add_argument("--center-point", action="store_true",
                   help="point with the centre of the top-ranked proposal instead of the heatmap peak")

    p = sub.add_parser("gradcam", help="export heatmaps as 16-bit PGM plus a JSONL summary")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference self-checks")
    p.add_argument("--scale", choices=tuple(selfcheck.SUITES), required=True)
    return parser


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ValidationError("--count must be positive")
    triplets = generate_dataset(args.seed, args.count, args.difficulty, args.split,
                                spatial_ratio=args.spatial_ratio, region_ratio=args.region_ratio)
    write_dataset(args.out, triplets)
    print(f"wrote {len(triplets)} triplets to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, on_step=lambda r: log.debug("step %(step)d total %(total).4f", r))
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"steps": result.state.step, "epoch": result.state.epoch,
                      "final": last, "evals": result.evals}, sort_keys=True))
    return 0


def _model(path):
    return params_from_checkpoint(load_checkpoint(path))


def normalize_heatmap(a: np.ndarray) -> np.ndarray:
    """Min-max scale to 16-bit samples; a constant map becomes all zeros."""
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint16)
    return np.rint((a - lo) / (hi - lo) * 65535.0).astype(np.uint16)


def cmd_gradcam(args) -> int:
    params = _model(args.ckpt)
    triplets = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = heatmaps(params, triplets)
    lines = []
    for t, a in zip(triplets, maps):
        row, col = evalkit.argmax_point(a)
        hit = evalkit.point_in_box(row, col, t.box)
        write_pgm(out / f"{t.id}.pgm", normalize_heatmap(a), maxval=65535)
        lines.append(json.dumps({"sample_id": t.id, "argmax": [row, col], "hit": hit}, sort_keys=True))
    (out / "heatmaps.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(f"wrote {len(lines)} heatmaps to {out}")
    return 0


def cmd_eval(args) -> int:
    params = _model(args.ckpt)
    triplets = load_dataset(args.data)
    ks = [int(k) for k in args.k.split(",") if k.strip()]
    if not ks or min(ks) < 1:
        raise ValidationError("--k needs positive integers")
    proposals = evalkit.load_proposals(args.proposals) if args.proposals else None
    if proposals is not None:
        missing = sorted(t.id for t in triplets if t.id not in proposals)
        if missing:
            raise ValidationError(f"no proposals for sample ids: {', '.join(missing)}")
    elif args.center_point:
        raise ValidationError("--center-point needs --proposals")

    maps = heatmaps(params, triplets)
    acc = evalkit.PointingAccumulator()
    ranked_all = []
    for t, a in zip(triplets, maps):
        if proposals is None:
            acc.add(a, [t.box], t.category)
            continue
        ranked = evalkit.score_proposals(a, proposals[t.id], args.rule)
        ranked_all.append(ranked)
        if args.center_point:
            acc.counts[t.category] += 1
            acc.hits[t.category] += int(evalkit.center_pointing(ranked, [t.box]))
        else:
            acc.add(a, [t.box], t.category)
    report = acc.report()
    if proposals is not None:
        report.recall = evalkit.recall_report(ranked_all, [t.box for t in triplets], ks)
    evalkit.write_report(report, args.out)
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    results = selfcheck.run(args.scale)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
