"""``advseg`` command-line entry point.

Exit status is 0 when every output was written. Failures print one line
``error: <kind>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .adversary import DiscriminatorConfig
from .despeckle import despeckle
from .errors import AdvsegError, ConfigError
from .phantom import make_dataset
from .pipeline import MODES, experiment_table, predict
from .segnet import GeneratorConfig
from .surfmetrics import METRICS, ScoreMapping, evaluate
from .trainer import TrainConfig, train
from .volume_store import load_labels, save_labels

log = logging.getLogger("advseg")


def _dims(text: str) -> tuple[int, int, int]:
    try:
        w, h, d = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxHxD, got {text!r}")
    return w, h, d


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def cmd_phantom(args) -> None:
    seed = args.seed if args.seed is not None else 0
    spacing = tuple(float(s) for s in args.spacing.split(","))
    manifest = make_dataset(args.out, args.count, seed, dims=args.dims, spacing=spacing)
    log.info("wrote %d train / %d validation cases to %s", len(manifest["train"]), len(manifest["validation"]), args.out)


def build_configs(cfg: dict, seed=None):
    cfg = dict(cfg)
    gdict = _tuple_fields(cfg.pop("generator", {}))
    ddict = _tuple_fields(cfg.pop("discriminator", {}))
    if seed is not None:
        cfg["seed"] = seed
    tcfg = TrainConfig.from_dict(cfg)
    gdict.setdefault("k", tcfg.k)
    gcfg = GeneratorConfig(**gdict)
    ddict.setdefault("k", tcfg.k)
    ddict.setdefault("input_size", gcfg.input_size)
    dcfg = DiscriminatorConfig(**ddict)
    return gcfg, dcfg, tcfg


def cmd_train(args) -> None:
    gcfg, dcfg, tcfg = build_configs(_read_config(args.config), args.seed)
    result = train(args.data, gcfg, dcfg, tcfg, out_dir=args.out, resume_from=args.resume)
    for it, voe in result.validation:
        log.info("validation VOE at iteration %d: %.2f%%", it, voe)


def cmd_predict(args) -> None:
    predict(args.checkpoint, args.volume, args.k, args.out)


def cmd_despeckle(args) -> None:
    mask = load_labels(args.input)
    conn = None
    if args.connectivity is not None:
        conn = f"{args.mode}-{args.connectivity}"
    save_labels(despeckle(mask, args.mode, conn), args.out)


def _label_files(directory: Path) -> dict[str, Path]:
    out = {}
    for sidecar in sorted(directory.glob("*.json")):
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(meta, dict) and meta.get("dtype") == "u8":
            name = sidecar.stem
            if name.endswith("_labels"):
                name = name[: -len("_labels")]
            out[name] = sidecar
    return out


def cmd_evaluate(args) -> None:
    refs = _read_config(args.refs)
    mapping = ScoreMapping(refs.get("references", refs))
    preds = _label_files(Path(args.pred))
    references = _label_files(Path(args.ref))
    cases = [c for c in preds if c in references]
    if not cases:
        raise ConfigError(f"no matching label volumes between {args.pred} and {args.ref}")
    rows = []
    for case in cases:
        rep = evaluate(load_labels(preds[case]), load_labels(references[case]), mapping=mapping)
        rows.append([case, *(rep.metrics()[m] for m in METRICS), *(rep.scores[m] for m in METRICS), rep.mean_score])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", *METRICS, *(f"score_{m}" for m in METRICS), "mean_score"])
        for r in rows:
            w.writerow([r[0], *(f"{v:.6f}" for v in r[1:])])
    log.info("mean score over %d cases: %.2f", len(rows), sum(r[-1] for r in rows) / len(rows))


def cmd_experiment(args) -> None:
    checkpoints = {}
    for item in args.checkpoint:
        k, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--checkpoint expects K=PATH, got {item!r}")
        checkpoints[int(k)] = path
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    table = experiment_table(
        args.data,
        checkpoints,
        modes,
        split=args.split,
        speckles=args.speckles,
        speckle_radius=args.speckle_radius,
        seed=args.seed if args.seed is not None else 0,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advseg", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="seed for all pseudo-random streams")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    parser.add_argument("--config", default=None, help="JSON config (train settings, score references)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--dims", type=_dims, default=(64, 64, 24))
    p.add_argument("--spacing", default="1.5,1.5,3.0", help="sx,sy,sz in mm")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="training checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one volume")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint or training output directory")
    p.add_argument("--volume", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("despeckle", help="largest connected component filter")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("2d", "3d"), required=True)
    p.add_argument("--connectivity", type=int, default=None, help="4/8 in 2d, 6/26 in 3d")
    p.set_defaults(func=cmd_despeckle)

    p = sub.add_parser("evaluate", help="five-metric evaluation report")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refs", default=None, help="JSON score references")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="mean score per (k, post-processing mode)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", required=True, metavar="K=PATH")
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--split", default="validation")
    p.add_argument("--speckles", type=int, default=0)
    p.add_argument("--speckle-radius", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "evaluate" and args.refs is None:
        args.refs = args.config
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(args.threads)
        else:
            limit = nullcontext()
        with limit:
            args.func(args)
    except AdvsegError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
