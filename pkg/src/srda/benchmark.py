"""End-to-end phantom benchmark: data, ratio prior, the four regimes, evaluation.

Everything goes through the on-disk, config-level entry points of
:mod:`srda.trainer`, so a benchmark directory has the same layout the
command-line tools produce::

    <root>/data/                  phantom dataset
    <root>/ckpt/ratio.bin         ratio regressor (+ .json)
    <root>/runs/<method>/         best.bin, last.bin, record.csv, summary.json
    <root>/metrics.csv            per-volume target validation scores
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .data_synth import generate_phantoms, load_slices, read_manifest, save_phantoms, split
from .metrics import upsert_metric_rows
from .models import load_checkpoint
from .ratio_prior import RegressorConfig, save_regressor, train_regressor
from .trainer import AdaptConfig, EvalResult, RunRecord, evaluate, run

log = logging.getLogger(__name__)

# Desk-scale regressor schedule; the RegressorConfig default (lr 5e-6) barely
# moves a freshly initialised network within a few hundred steps.
DESK_REGRESSOR = dict(epochs=60, lr=1e-2, momentum=0.9)


@dataclass
class BenchmarkResult:
    root: Path
    scores: dict[str, EvalResult] = field(default_factory=dict)
    records: dict[str, RunRecord] = field(default_factory=dict)

    def dsc(self, name: str) -> float:
        return self.scores[name].mean_dsc

    def entropy(self, name: str) -> float:
        return self.scores[name].mean_entropy


def make_data(root: str | Path, seed: int = 0, n_volumes: int = 16, depth: int = 12, size: int = 64) -> Path:
    root = Path(root)
    save_phantoms(generate_phantoms(seed, n_volumes, depth, size, size), root, seed=seed)
    return root


def fit_ratio_prior(
    data: str | Path,
    out: str | Path,
    *,
    seed: int = 0,
    modality: str = "A",
    train_volumes: int = 13,
    val_volumes: int = 3,
    config: RegressorConfig | None = None,
) -> Path:
    """Train the ratio regressor on the labelled source training volumes and save it."""
    ids = [v["id"] for v in read_manifest(data)["volumes"]]
    tr, _ = split(ids, train_volumes, val_volumes)
    src = load_slices(data, modality, tr, with_masks=True)
    cfg = config or RegressorConfig(seed=seed, **DESK_REGRESSOR)
    reg, hist = train_regressor(src.images, src.masks, cfg, num_classes=2)
    return save_regressor(reg, out, cfg, holdout_mse=hist.holdout_mse, holdout_mse_init=hist.holdout_mse_init)


def evaluate_checkpoint(checkpoint: str | Path, data: str | Path, modality: str, volume_ids) -> EvalResult:
    model, _, _ = load_checkpoint(checkpoint)
    return evaluate(model, load_slices(data, modality, volume_ids, with_masks=True))


def run_benchmark(
    root: str | Path,
    *,
    seed: int = 0,
    epochs: int = 40,
    lam: float = 1e-2,
    n_volumes: int = 16,
    train_volumes: int = 13,
    val_volumes: int = 3,
    size: int = 64,
    depth: int = 12,
    width: int = 8,
    methods: tuple[str, ...] = ("no_adapt", "adaent", "adasource", "oracle"),
    entropy_only: bool = False,
) -> BenchmarkResult:
    """Run the phantom benchmark in ``root`` and score every method on the target validation volumes.

    With ``entropy_only`` an extra ``adaent_lam0`` run adapts with the KL
    weight set to zero.  Existing data, ratio regressor and source checkpoint
    under ``root`` are reused, so methods can be added in later calls.
    """
    root = Path(root)
    data = root / "data"
    if not (data / "manifest.json").exists():
        make_data(data, seed, n_volumes, depth, size)
    ratio = root / "ckpt" / "ratio.bin"
    needs_prior = {"adaent", "adasource"} & set(methods) or entropy_only
    if needs_prior and not ratio.exists():
        fit_ratio_prior(data, ratio, seed=seed, train_volumes=train_volumes, val_volumes=val_volumes)

    common = dict(
        seed=seed, epochs=epochs, width=width, train_volumes=train_volumes, val_volumes=val_volumes, lam=lam
    )
    src_ckpt = str(root / "runs" / "no_adapt" / "best.bin")
    plan: list[tuple[str, AdaptConfig]] = []
    if "no_adapt" in methods:
        plan.append(("no_adapt", AdaptConfig(method="no_adapt", source=str(data), target=str(data), **common)))
    if "adaent" in methods:
        plan.append(("adaent", AdaptConfig(method="adaent", target=str(data), init=src_ckpt, regressor=str(ratio), **common)))
    if entropy_only:
        plan.append(("adaent_lam0", AdaptConfig(
            method="adaent", target=str(data), init=src_ckpt, regressor=str(ratio), **{**common, "lam": 0.0}
        )))
    if "adasource" in methods:
        plan.append(("adasource", AdaptConfig(
            method="adasource", source=str(data), target=str(data), init=src_ckpt, regressor=str(ratio), **common
        )))
    if "oracle" in methods:
        plan.append(("oracle", AdaptConfig(method="oracle", target=str(data), **common)))

    ids = [v["id"] for v in read_manifest(data)["volumes"]]
    _, val_ids = split(ids, train_volumes, val_volumes)
    result = BenchmarkResult(root)
    rows = []
    for name, cfg in plan:
        cfg.out_dir = str(root / "runs" / name)
        cfg.run_id = name
        out = run(cfg)
        result.records[name] = out.record
        score = evaluate_checkpoint(out.best_path, data, cfg.target_modality, val_ids)
        result.scores[name] = score
        rows += score.rows(name, cfg.method, out.record.best_epoch)
        log.info("%s: DSC %.3f HD %.2f entropy %.4f", name, score.mean_dsc, score.mean_hd, score.mean_entropy)
    upsert_metric_rows(root / "metrics.csv", rows)
    return result
