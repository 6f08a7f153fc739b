"""Command-line entry point: ``srda <subcommand> [flags]``.

Every subcommand takes ``--seed`` and ``--config FILE``; the config file is a
flat JSON object whose keys are flag names (dashes or underscores).  Values
are resolved as flags > config file > defaults.  Exit codes: 0 success,
1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Sequence

if TYPE_CHECKING:
    from .trainer import AdaptConfig

log = logging.getLogger("srda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _data_default() -> str:
    return os.environ.get("SRDA_DATA_DIR", "data")


TRAIN_DEFAULTS: dict[str, Any] = dict(
    seed=0, epochs=40, lr=1e-3, batch_size=12, width=8, train_volumes=13, val_volumes=3,
    source_modality="A", target_modality="B", run_id=None,
)

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": dict(seed=0, volumes=16, depth=12, size=64, out=None),
    "train-ratio": dict(
        seed=0, data=None, out="ckpt/ratio.bin", epochs=60, lr=1e-2, momentum=0.9, batch_size=12,
        modality="A", train_volumes=13, val_volumes=3,
    ),
    "train-source": dict(TRAIN_DEFAULTS, source=None, target=None, out="runs/no_adapt"),
    "adapt": dict({k: v for k, v in TRAIN_DEFAULTS.items() if k != "source_modality"}, target=None, init=None, regressor=None, lam=1e-2, out="runs/adaent"),
    "train-adasource": dict(
        TRAIN_DEFAULTS, source=None, target=None, init=None, regressor=None, lam=1e-2, out="runs/adasource"
    ),
    "train-oracle": dict(TRAIN_DEFAULTS, target=None, init=None, out="runs/oracle"),
    "evaluate": dict(
        seed=0, checkpoint=None, data=None, modality="B", split="val", train_volumes=13, val_volumes=3,
        out=None, method=None, run_id=None,
    ),
    "report": dict(seed=0, runs="runs", out="figs"),
}

REQUIRED = {
    "adapt": ("init", "regressor"),
    "train-adasource": ("init", "regressor"),
    "evaluate": ("checkpoint",),
}


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--config", default=None, help="flat JSON file with flag values")
    p.add_argument("-v", "--verbose", action="store_true")


class _RefuseSource(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        parser.error("adaptation is source-free; --source is not accepted")


def _training(p: argparse.ArgumentParser, lam: bool = False, source: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--width", type=int, default=S)
    p.add_argument("--train-volumes", type=int, default=S)
    p.add_argument("--val-volumes", type=int, default=S)
    if source:
        p.add_argument("--source-modality", choices=("A", "B"), default=S)
    p.add_argument("--target-modality", choices=("A", "B"), default=S)
    p.add_argument("--run-id", default=S)
    p.add_argument("--out", default=S, help="run directory")
    if lam:
        p.add_argument("--lambda", dest="lam", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="srda", description="Source-relaxed domain adaptation for segmentation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic two-modality phantom dataset")
    _common(p)
    p.add_argument("--volumes", type=int, default=S)
    p.add_argument("--depth", type=int, default=S)
    p.add_argument("--size", type=int, default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("train-ratio", help="train the class-ratio regressor on labelled source slices")
    _common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--momentum", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--modality", choices=("A", "B"), default=S)
    p.add_argument("--train-volumes", type=int, default=S)
    p.add_argument("--val-volumes", type=int, default=S)

    p = sub.add_parser("train-source", help="supervised training on the source domain")
    _common(p)
    _training(p)
    p.add_argument("--source", default=S)
    p.add_argument("--target", default=S, help="optional target dataset for validation curves")

    p = sub.add_parser("adapt", help="source-relaxed adaptation (entropy + class-ratio KL)")
    _common(p)
    _training(p, lam=True, source=False)
    p.add_argument("--init", default=S)
    p.add_argument("--regressor", default=S)
    p.add_argument("--target", default=S)
    p.add_argument("--source", nargs="?", action=_RefuseSource, help=argparse.SUPPRESS)

    p = sub.add_parser("train-adasource", help="AdaSource benchmark (source CE + target class-ratio KL)")
    _common(p)
    _training(p, lam=True)
    p.add_argument("--init", default=S)
    p.add_argument("--regressor", default=S)
    p.add_argument("--source", default=S)
    p.add_argument("--target", default=S)

    p = sub.add_parser("train-oracle", help="supervised training on the labelled target domain")
    _common(p)
    _training(p)
    p.add_argument("--target", default=S)
    p.add_argument("--init", default=S)

    p = sub.add_parser("evaluate", help="score a checkpoint (Dice, Hausdorff, entropy)")
    _common(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--data", default=S)
    p.add_argument("--modality", choices=("A", "B"), default=S)
    p.add_argument("--split", choices=("train", "val", "all"), default=S)
    p.add_argument("--train-volumes", type=int, default=S)
    p.add_argument("--val-volumes", type=int, default=S)
    p.add_argument("--out", default=S, help="CSV file for per-volume rows; rows of the same run id are replaced")
    p.add_argument("--method", default=S)
    p.add_argument("--run-id", default=S)

    p = sub.add_parser("report", help="figures and tables from finished runs")
    _common(p)
    p.add_argument("--runs", default=S)
    p.add_argument("--out", default=S)
    return parser


def _read_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a flat JSON object")
    out = {}
    for k, v in raw.items():
        key = k.replace("-", "_")
        out["lam" if key == "lambda" else key] = v
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    file_values = _read_config(ns.config)
    defaults = DEFAULTS[command]
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise UsageError(f"{command}: config file has keys not accepted by this subcommand: {sorted(unknown)}")
    values = {**defaults, **file_values, **flags}
    for key in REQUIRED.get(command, ()):
        if values.get(key) is None:
            raise UsageError(f"{command}: --{key} is required")
    return values


# -- handlers ----------------------------------------------------------------


def _gen_data(v: dict) -> None:
    from .benchmark import make_data
    from .data_synth import load_phantoms, phantom_summary

    out = v["out"] or _data_default()
    make_data(out, v["seed"], v["volumes"], v["depth"], v["size"])
    print(json.dumps(phantom_summary(load_phantoms(out))))


def _train_ratio(v: dict) -> None:
    from .benchmark import fit_ratio_prior
    from .ratio_prior import RegressorConfig

    cfg = RegressorConfig(
        epochs=v["epochs"], lr=v["lr"], momentum=v["momentum"], batch_size=v["batch_size"], seed=v["seed"]
    )
    path = fit_ratio_prior(
        v["data"] or _data_default(), v["out"], seed=v["seed"], modality=v["modality"],
        train_volumes=v["train_volumes"], val_volumes=v["val_volumes"], config=cfg,
    )
    print(path)


def _adapt_config(method: str, v: dict) -> "AdaptConfig":
    from .trainer import AdaptConfig

    keys = {
        "seed", "epochs", "lr", "batch_size", "width", "train_volumes", "val_volumes", "source_modality",
        "target_modality", "run_id", "source", "target", "init", "regressor", "lam",
    }
    kwargs = {k: v[k] for k in keys if k in v}
    if method != "adaent" and "source" in kwargs and kwargs["source"] is None:
        kwargs["source"] = _data_default()
    if kwargs.get("target") is None and method != "no_adapt":
        kwargs["target"] = _data_default()
    return AdaptConfig(method=method, out_dir=v["out"], **kwargs)


def _train(method: str) -> Callable[[dict], None]:
    def handler(v: dict) -> None:
        from .trainer import run

        out = run(_adapt_config(method, v))
        rec = out.record
        last = rec.epochs[-1]
        print(
            f"{rec.method} best epoch {rec.best_epoch}, last-epoch target DSC {last.dsc:.4f}, "
            f"checkpoint {out.best_path}"
        )

    return handler


def _evaluate(v: dict) -> None:
    from .benchmark import evaluate_checkpoint
    from .data_synth import read_manifest, split
    from .metrics import upsert_metric_rows
    from .models import read_checkpoint_meta

    data = v["data"] or _data_default()
    ids = [e["id"] for e in read_manifest(data)["volumes"]]
    tr, va = split(ids, v["train_volumes"], v["val_volumes"])
    vols = {"train": tr, "val": va, "all": ids}[v["split"]]
    ev = evaluate_checkpoint(v["checkpoint"], data, v["modality"], vols)
    meta = read_checkpoint_meta(v["checkpoint"])
    method = v["method"] or meta.config.get("method", "unknown")
    run_id = v["run_id"] or meta.config.get("run_id") or Path(v["checkpoint"]).parent.name
    if v["out"]:
        upsert_metric_rows(v["out"], ev.rows(run_id, method, meta.epoch))
    print(json.dumps({
        "method": method, "dsc": ev.mean_dsc, "hd": ev.mean_hd,
        "entropy": ev.mean_entropy, "volumes": dict(zip(ev.volume_ids, ev.dsc)),
    }))


def _report(v: dict) -> None:
    from .report import make_report

    for kind, path in make_report(v["runs"], v["out"]).items():
        print(f"{kind}: {path}")


HANDLERS: dict[str, Callable[[dict], None]] = {
    "gen-data": _gen_data,
    "train-ratio": _train_ratio,
    "train-source": _train("no_adapt"),
    "adapt": _train("adaent"),
    "train-adasource": _train("adasource"),
    "train-oracle": _train("oracle"),
    "evaluate": _evaluate,
    "report": _report,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_help())
        values = resolve(ns.command, ns)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        HANDLERS[ns.command](values)
    except Exception as e:  # report, don't trace, for expected runtime failures
        log.debug("failure", exc_info=True)
        print(f"srda {ns.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
