"""Segmentation scores (Dice, Hausdorff) and prediction entropy maps."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

EPS = 1e-8

AGGREGATION_NOTE = (
    "per-slice 2D metrics over slices whose ground truth contains foreground, "
    "averaged per volume; mean +/- std reported over volumes"
)


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def argmax_mask(pred) -> np.ndarray:
    """Hard mask from a ``(K,H,W)`` (or ``(B,K,H,W)``) map; ties go to the lowest class."""
    p = _to_numpy(pred)
    return np.argmax(p, axis=-3).astype(np.int64)  # np.argmax returns first maximum


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def dice(pred, gt, cls: int = 1) -> float:
    a = _to_numpy(pred) == cls
    b = _to_numpy(gt) == cls
    _check_shapes(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # distance from every pixel to the nearest pixel of b, maximised over a
    dist_to_b = ndimage.distance_transform_edt(~b)
    return float(dist_to_b[a].max())


def hausdorff(pred, gt, cls: int = 1) -> float:
    """Symmetric Hausdorff distance (pixels) between the foreground sets of ``cls``.

    Both sets empty gives 0.  Exactly one empty gives the image diagonal,
    ``hypot(H, W)``, as a finite sentinel.
    """
    a = _to_numpy(pred) == cls
    b = _to_numpy(gt) == cls
    _check_shapes(a, b)
    if a.ndim != 2:
        raise ValueError(f"hausdorff expects 2D masks, got {a.shape}")
    na, nb = a.any(), b.any()
    if not na and not nb:
        return 0.0
    if not (na and nb):
        return float(math.hypot(*a.shape))
    return max(_directed(a, b), _directed(b, a))


def entropy_map(pred) -> np.ndarray:
    """Per-pixel entropy in nats, shape ``(H, W)`` (or ``(B, H, W)``)."""
    p = _to_numpy(pred).astype(np.float64)
    return -(p * np.log(np.clip(p, EPS, None))).sum(axis=-3)


def score_volume(pred_masks, gt_masks, cls: int = 1) -> tuple[float, float]:
    """Mean slice Dice and Hausdorff for one ``(D, H, W)`` volume.

    Only slices whose ground truth contains ``cls`` are scored.  A volume with
    no such slice returns ``(nan, nan)``.
    """
    pm = _to_numpy(pred_masks)
    gm = _to_numpy(gt_masks)
    _check_shapes(pm, gm)
    d, h = [], []
    for p, g in zip(pm, gm):
        if not (g == cls).any():
            continue
        d.append(dice(p, g, cls))
        h.append(hausdorff(p, g, cls))
    if not d:
        return float("nan"), float("nan")
    return float(np.mean(d)), float(np.mean(h))


@dataclass
class MetricRow:
    run_id: str
    method: str
    epoch: int
    volume_id: str
    dsc: float
    hd: float


def write_metric_rows(path: str | Path, rows: Iterable[MetricRow], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow([fl.name for fl in fields(MetricRow)])
        for r in rows:
            w.writerow(astuple(r))


def read_metric_rows(path: str | Path) -> list[MetricRow]:
    with Path(path).open(newline="") as f:
        return [
            MetricRow(r["run_id"], r["method"], int(r["epoch"]), r["volume_id"], float(r["dsc"]), float(r["hd"]))
            for r in csv.DictReader(f)
        ]


def upsert_metric_rows(path: str | Path, rows: Iterable[MetricRow]) -> None:
    """Write ``rows`` to ``path``, replacing earlier rows with the same run ids and keeping the rest."""
    rows = list(rows)
    ids = {r.run_id for r in rows}
    path = Path(path)
    kept = [r for r in read_metric_rows(path) if r.run_id not in ids] if path.exists() else []
    write_metric_rows(path, kept + rows)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())
