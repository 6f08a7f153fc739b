"""Figures and tables from a directory of finished runs.

Produces validation-Dice curves per method, per-subject panels of
segmentations and prediction entropy maps, and a method x (DSC, HD) table
as CSV and as plain text.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data_synth import load_slices, read_manifest, split  # noqa: E402
from .metrics import AGGREGATION_NOTE, argmax_mask, entropy_map, mean_std  # noqa: E402
from .models import load_checkpoint  # noqa: E402
from .trainer import RunRecord, evaluate, predict  # noqa: E402

log = logging.getLogger(__name__)

LABELS = {
    "no_adapt": "No Adaptation",
    "adasource": "AdaSource",
    "adaent": "AdaEnt",
    "adaent_lam0": "AdaEnt (lambda=0)",
    "oracle": "Oracle",
}
ORDER = ["no_adapt", "adaent_lam0", "adasource", "adaent", "oracle"]


def _label(name: str) -> str:
    return LABELS.get(name, name)


def find_runs(runs_dir: str | Path) -> dict[str, Path]:
    found = {p.parent.name: p.parent for p in sorted(Path(runs_dir).glob("*/summary.json"))}
    return dict(sorted(found.items(), key=lambda kv: (ORDER.index(kv[0]) if kv[0] in ORDER else len(ORDER), kv[0])))


def plot_dsc_curves(records: dict[str, RunRecord], out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rec in records.items():
        ax.plot(rec.column("epoch"), 100 * np.asarray(rec.column("dsc")), label=_label(name))
    ax.set_xlabel("epoch")
    ax.set_ylabel("target validation DSC (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_entropy_panels(models: dict, val, out: Path) -> Path:
    """One row pair per validation volume: entropy maps on top, segmentations below."""
    vols = val.volumes()
    fg = val.masks.reshape(len(val), -1).sum(1).numpy()
    picks = [int(idx[np.argmax(fg[idx])]) for idx in (val.volume_index(v) for v in vols)]
    cols = 1 + len(models)
    fig, axes = plt.subplots(2 * len(picks), cols, figsize=(1.8 * cols, 3.6 * len(picks)), squeeze=False)
    probs = {name: predict(m, val.images[picks]).numpy() for name, m in models.items()}
    for r, i in enumerate(picks):
        top, bot = axes[2 * r], axes[2 * r + 1]
        top[0].imshow(val.images[i, 0].numpy(), cmap="gray", vmin=0, vmax=1)
        top[0].set_title(f"{val.volume_ids[i]} input", fontsize=7)
        bot[0].imshow(val.masks[i].numpy(), cmap="gray", vmin=0, vmax=1)
        bot[0].set_title("ground truth", fontsize=7)
        for c, (name, p) in enumerate(probs.items(), start=1):
            top[c].imshow(entropy_map(p[r]), cmap="magma", vmin=0, vmax=np.log(p.shape[1]))
            top[c].set_title(_label(name), fontsize=7)
            bot[c].imshow(argmax_mask(p[r]), cmap="gray", vmin=0, vmax=1)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def format_table(rows: list[tuple[str, float, float, float, float]]) -> str:
    head = f"{'Method':<22}{'DSC (%)':>16}{'HD (pix)':>16}"
    lines = [head, "-" * len(head)]
    for name, dm, ds, hm, hs in rows:
        lines.append(f"{_label(name):<22}{f'{100 * dm:.1f} +/- {100 * ds:.1f}':>16}{f'{hm:.2f} +/- {hs:.2f}':>16}")
    lines.append("")
    lines.append(f"aggregation: {AGGREGATION_NOTE}")
    return "\n".join(lines)


def make_report(runs_dir: str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Write ``dsc_curves.png``, ``entropy_panels.png``, ``table.csv`` and ``table.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = find_runs(runs_dir)
    if not runs:
        raise FileNotFoundError(f"no finished runs under {runs_dir}")
    records = {name: RunRecord.load(d) for name, d in runs.items()}
    written = {"curves": plot_dsc_curves(records, out / "dsc_curves.png")}

    models, val, rows = {}, None, []
    for name, d in runs.items():
        cfg = records[name].notes.get("config", {})
        data = cfg.get("target")
        ckpt = d / "best.bin"
        if data is None or not ckpt.exists():
            log.warning("skipping %s in table: no target dataset or checkpoint recorded", name)
            continue
        ids = [v["id"] for v in read_manifest(data)["volumes"]]
        _, va = split(ids, cfg.get("train_volumes", 13), cfg.get("val_volumes", 3))
        if val is None:
            val = load_slices(data, cfg.get("target_modality", "B"), va, with_masks=True)
        model, _, _ = load_checkpoint(ckpt)
        models[name] = model
        ev = evaluate(model, val)
        rows.append((name, *mean_std(ev.dsc), *mean_std(ev.hd)))

    if rows:
        with (out / "table.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "dsc_mean", "dsc_std", "hd_mean", "hd_std"])
            w.writerows(rows)
        (out / "table.txt").write_text(format_table(rows) + "\n")
        written["table"] = out / "table.txt"
        written["panels"] = plot_entropy_panels(models, val, out / "entropy_panels.png")
    return written
