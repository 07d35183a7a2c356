"""Command-line entry point: ``train``, ``score``, ``check`` and ``ablate``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checks import format_table, run_checks
from .config import ConfigError, build_run_config, read_config, resolved_dict
from .encoder import save_checkpoint
from .episodes import DatasetError, load_csv
from .icnn import IcnnConfig, icnn_score
from .trainer import dump_embeddings, run_ablation_grid, train, write_ablation_csv

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

RUN_FILES = {
    "manifest": "manifest.json",
    "metrics": "metrics.jsonl",
    "checkpoint": "encoder.ckpt",
    "embeddings": "embeddings.csv",
}

log = logging.getLogger("icnnmetric")


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``["--seed", "7", "--icnn.p=2"]`` -> ``{"seed": "7", "icnn.p": "2"}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            value = tokens[i + 1]
            i += 2
        else:
            raise ConfigError(f"override {tok} has no value")
        out[key] = value
    return out


def _load(config_path, overrides):
    cp = read_config(config_path, overrides)
    run = build_run_config(cp)
    base = Path(config_path).parent if config_path else None
    return cp, run, base


def _write_manifest(path: Path, cp, run, ds, seed: int, outputs: dict, extra: dict) -> None:
    manifest = {
        "tool": "icnnmetric",
        "version": __version__,
        "seed": seed,
        "config": resolved_dict(cp),
        "dataset": ds.manifest(),
        "dataset_digest": ds.digest(),
        "outputs": outputs,
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(config_path, overrides: dict[str, str] | None = None) -> int:
    cp, run, base = _load(config_path, overrides)
    ds = run.dataset.load(base)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc, metrics = train(ds, run.train)
    (out / RUN_FILES["metrics"]).write_text(metrics.to_jsonl())
    save_checkpoint(enc, out / RUN_FILES["checkpoint"])
    dump_embeddings(enc, ds, run.train, out / RUN_FILES["embeddings"], run.embedding_points)
    _write_manifest(out / RUN_FILES["manifest"], cp, run, ds, run.train.seed, dict(RUN_FILES),
                    {"wall_clock_s": metrics.wall_clock_s})
    print(json.dumps(metrics.final_record(), sort_keys=True))
    return EXIT_OK


def cmd_score(csv_path, config: IcnnConfig = IcnnConfig()) -> int:
    ds = load_csv(csv_path)
    if ds.n_classes < 2:
        raise DatasetError(f"{csv_path}: a single class has no different-class neighbours to score against")
    terms, score = icnn_score(ds.features, ds.labels, config)
    points = [
        {
            "id": pid,
            "label": ds.label_names[lab],
            "lambda": float(terms.lam[i]),
            "lambda_diff": float(terms.lam_diff[i]),
            "lambda_same": float(terms.lam_same[i]),
            "omega": float(terms.omega[i]),
            "gamma": float(terms.gamma[i]),
        }
        for i, (pid, lab) in enumerate(zip(ds.ids, ds.labels))
    ]
    print(json.dumps({"score": float(score), "loss": float(terms.loss), "points": points}, indent=2))
    return EXIT_OK


def cmd_check(pattern: str | None = None) -> int:
    results = run_checks(pattern)
    if not results:
        print(f"no check matches {pattern!r}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_ablate(config_path, overrides: dict[str, str] | None = None) -> int:
    cp, run, base = _load(config_path, overrides)
    ds = run.dataset.load(base)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation_grid(ds, run.train)
    write_ablation_csv(rows, out / "ablation.csv")
    _write_manifest(out / "manifest.json", cp, run, ds, run.train.seed,
                    {"manifest": "manifest.json", "ablation": "ablation.csv"}, {})
    for r in rows:
        print(f"{r.row:<11} {r.mean_acc:.4f} +- {r.ci_half_width:.4f}  {r.status}")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icnnmetric", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("train", "train an encoder and write a run directory"),
                        ("ablate", "run the 12-row loss/mode ablation grid")):
        p = sub.add_parser(name, help=help_,
                           epilog="any config key can be overridden with --key value or --section.key value")
        p.add_argument("config", nargs="?", help="INI config file (defaults apply if omitted)")

    p = sub.add_parser("score", help="ICNN score of a labelled feature CSV, as JSON")
    p.add_argument("csv")
    defaults = IcnnConfig()
    p.add_argument("--k-neighbors", type=int, default=defaults.k_neighbors)
    p.add_argument("--p", type=float, default=defaults.p)
    p.add_argument("--q", type=float, default=defaults.q)
    p.add_argument("--r", type=float, default=defaults.r)
    p.add_argument("--lambda-variant", default=defaults.lambda_variant, choices=("split", "original"))
    p.add_argument("--variance-mode", default=defaults.variance_mode, choices=("batch", "per_point"))
    p.add_argument("--epsilon", type=float, default=defaults.epsilon)

    p = sub.add_parser("check", help="run the gradient/bounds/proposition self-tests")
    p.add_argument("--filter", default=None, help="only checks whose name contains this text")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command in ("train", "ablate"):
            overrides = parse_overrides(extra)
            fn = cmd_train if args.command == "train" else cmd_ablate
            return fn(args.config, overrides)
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "score":
            try:
                config = replace(IcnnConfig(), k_neighbors=args.k_neighbors, p=args.p, q=args.q, r=args.r,
                                 lambda_variant=args.lambda_variant, variance_mode=args.variance_mode,
                                 epsilon=args.epsilon)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            return cmd_score(args.csv, config)
        return cmd_check(args.filter)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
