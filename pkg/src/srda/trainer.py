"""Training regimes: source pretraining, source-relaxed adaptation, AdaSource, Oracle.

The ``fit_*`` functions work on in-memory :class:`~srda.data_synth.SliceSet`
objects.  The config-level entry points (:func:`train_source`,
:func:`adapt`, :func:`train_adasource`, :func:`train_oracle`) read datasets
and checkpoints from disk, write checkpoints and run records, and enforce
which files each regime may touch.  In particular :func:`adapt` has no
access to source images or labels: it refuses configs naming a source
dataset and only opens target images, target tags, validation labels, the
initial checkpoint and the ratio regressor.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch

from . import losses
from .data_synth import SliceSet, load_slices, read_manifest, split
from .metrics import AGGREGATION_NOTE, MetricRow, argmax_mask, entropy_map, mean_std, score_volume
from .models import SegNet, build_seg_model, load_checkpoint, save_checkpoint, segment
from .ratio_prior import estimate_priors, load_regressor

log = logging.getLogger(__name__)

METHODS = ("no_adapt", "adaent", "adasource", "oracle")


class ContractError(ValueError):
    """A config asks a regime for data it must not (or cannot) use."""


@dataclass
class AdaptConfig:
    method: str = "adaent"
    lam: float = 1e-2
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 12
    seed: int = 0
    width: int = 8
    num_classes: int = 2
    source: str | None = None
    target: str | None = None
    source_modality: str = "A"
    target_modality: str = "B"
    train_volumes: int = 13
    val_volumes: int = 3
    init: str | None = None
    regressor: str | None = None
    out_dir: str | None = None
    run_id: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def name(self) -> str:
        return self.run_id or f"{self.method}_s{self.seed}"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    loss: float = float("nan")
    ce: float = float("nan")
    entropy: float = float("nan")
    kl: float = float("nan")
    select_dsc: float = float("nan")
    dsc: float = float("nan")
    hd: float = float("nan")
    val_entropy: float = float("nan")
    val_fg_ratio: float = float("nan")
    seconds: float = 0.0


@dataclass
class RunRecord:
    method: str
    run_id: str
    lam: float = 0.0
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    wall_clock: float = 0.0
    notes: dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> list[float]:
        return [getattr(e, name) for e in self.epochs]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "record.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow([fl.name for fl in fields(EpochLog)])
            for e in self.epochs:
                w.writerow([getattr(e, fl.name) for fl in fields(EpochLog)])
        summary = {k: v for k, v in asdict(self).items() if k != "epochs"}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        run_dir = Path(run_dir)
        summary = json.loads((run_dir / "summary.json").read_text())
        rec = cls(**summary)
        with (run_dir / "record.csv").open(newline="") as f:
            for row in csv.DictReader(f):
                rec.epochs.append(EpochLog(int(row["epoch"]), *[float(row[fl.name]) for fl in fields(EpochLog)[1:]]))
        return rec


@dataclass
class EvalResult:
    volume_ids: list[str]
    dsc: list[float]
    hd: list[float]
    entropy: list[float]
    fg_ratio: list[float]

    @property
    def mean_dsc(self) -> float:
        return mean_std(self.dsc)[0]

    @property
    def mean_hd(self) -> float:
        return mean_std(self.hd)[0]

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy))

    @property
    def mean_fg_ratio(self) -> float:
        return float(np.mean(self.fg_ratio))

    def rows(self, run_id: str, method: str, epoch: int) -> list[MetricRow]:
        return [MetricRow(run_id, method, epoch, v, d, h) for v, d, h in zip(self.volume_ids, self.dsc, self.hd)]


@dataclass
class RunOutput:
    model: SegNet
    record: RunRecord
    best_path: Path | None = None
    last_path: Path | None = None


# -- evaluation --------------------------------------------------------------


def predict(model: SegNet, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([segment(model, images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


def evaluate(model: SegNet | Callable[[torch.Tensor], torch.Tensor], dataset: SliceSet, fg_class: int = 1) -> EvalResult:
    """Per-volume Dice/Hausdorff, mean prediction entropy and mean soft foreground ratio.

    ``model`` may also be any callable mapping ``(B,1,H,W)`` images to
    ``(B,K,H,W)`` probabilities.
    """
    if dataset.masks is None:
        raise ValueError("evaluation needs a labelled dataset")
    if isinstance(model, SegNet):
        if model.num_classes <= fg_class:
            raise ValueError(f"model has {model.num_classes} classes, cannot score class {fg_class}")
        probs = predict(model, dataset.images)
    else:
        with torch.no_grad():
            probs = model(dataset.images)
    if probs.shape[0] != len(dataset) or probs.shape[-2:] != dataset.masks.shape[-2:]:
        raise ValueError(f"prediction shape {tuple(probs.shape)} does not match dataset")
    hard = argmax_mask(probs)
    ent = entropy_map(probs)
    res = EvalResult([], [], [], [], [])
    for vid in dataset.volumes():
        idx = dataset.volume_index(vid)
        d, h = score_volume(hard[idx], dataset.masks[idx].numpy(), fg_class)
        res.volume_ids.append(vid)
        res.dsc.append(d)
        res.hd.append(h)
        res.entropy.append(float(ent[idx].mean()))
        res.fg_ratio.append(float(probs[idx, fg_class].mean()))
    return res


# -- training loops ----------------------------------------------------------


def _batches(n: int, batch_size: int, gen: torch.Generator) -> Iterator[torch.Tensor]:
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


class _Tracker:
    """Per-epoch validation, best-state bookkeeping and record keeping."""

    def __init__(self, model, record: RunRecord, select: SliceSet | None, monitor: SliceSet | None):
        self.model = model
        self.record = record
        self.select = select
        self.monitor = monitor
        self.best_dsc = -math.inf
        self.best_state = copy.deepcopy(model.state_dict())
        self.t0 = time.perf_counter()

    def log(self, entry: EpochLog) -> None:
        if self.monitor is not None:
            ev = evaluate(self.model, self.monitor)
            entry.dsc, entry.hd = ev.mean_dsc, ev.mean_hd
            entry.val_entropy, entry.val_fg_ratio = ev.mean_entropy, ev.mean_fg_ratio
        if self.select is not None:
            entry.select_dsc = entry.dsc if self.select is self.monitor else evaluate(self.model, self.select).mean_dsc
        entry.seconds = time.perf_counter() - self.t0
        self.record.epochs.append(entry)
        if entry.epoch > 0:
            score = entry.select_dsc if self.select is not None else entry.epoch
            if score > self.best_dsc:
                self.best_dsc = score
                self.best_state = copy.deepcopy(self.model.state_dict())
                self.record.best_epoch = entry.epoch
        for name in ("loss", "ce", "entropy", "kl"):
            v = getattr(entry, name)
            if entry.epoch > 0 and not math.isnan(v) and not math.isfinite(v):
                raise FloatingPointError(f"non-finite {name} at epoch {entry.epoch}")
        log.info(
            "%s epoch %d loss %.4f dsc %.4f ent %.4f",
            self.record.method, entry.epoch, entry.loss, entry.dsc, entry.val_entropy,
        )

    def finish(self) -> None:
        self.record.wall_clock = time.perf_counter() - self.t0


def _finish(model: SegNet, tracker: _Tracker, keep_last: bool) -> tuple[SegNet, dict]:
    """Return (best model, last state)."""
    tracker.finish()
    last_state = copy.deepcopy(model.state_dict())
    if not keep_last and tracker.record.best_epoch > 0:
        model.load_state_dict(tracker.best_state)
    model.eval()
    return model, last_state


def fit_supervised(
    model: SegNet,
    train: SliceSet,
    *,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 12,
    seed: int = 0,
    select: SliceSet | None = None,
    monitor: SliceSet | None = None,
    method: str = "no_adapt",
    run_id: str = "",
) -> tuple[SegNet, RunRecord, dict]:
    """Pixel-averaged cross-entropy training; returns (best model, record, last state)."""
    if train.masks is None:
        raise ContractError("supervised training needs labels")
    rec = RunRecord(method, run_id or method)
    tracker = _Tracker(model, rec, select, monitor)
    tracker.log(EpochLog(0))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(1, epochs + 1):
        model.train()
        tot, n = 0.0, 0
        for idx in _batches(len(train), batch_size, gen):
            opt.zero_grad()
            loss = losses.cross_entropy(segment(model, train.images[idx]), train.masks[idx])
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            n += len(idx)
        tracker.log(EpochLog(epoch, loss=tot / n, ce=tot / n))
    model, last = _finish(model, tracker, keep_last=epochs == 0)
    return model, rec, last


def fit_adaent(
    model: SegNet,
    target: SliceSet,
    priors: torch.Tensor,
    *,
    lam: float = 1e-2,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 12,
    seed: int = 0,
    select: SliceSet | None = None,
    run_id: str = "",
) -> tuple[SegNet, RunRecord, dict]:
    """Minimise entropy + lam * KL(prior || predicted ratio) on unlabelled target slices.

    ``priors`` holds one fixed class-ratio prior per target slice.
    """
    if priors.shape[0] != len(target):
        raise ValueError("need exactly one prior per target image")
    rec = RunRecord("adaent", run_id or "adaent", lam=lam)
    tracker = _Tracker(model, rec, select, select)
    tracker.log(EpochLog(0))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(1, epochs + 1):
        model.train()
        sums = np.zeros(3)
        n = 0
        for idx in _batches(len(target), batch_size, gen):
            opt.zero_grad()
            terms = losses.adaptation_terms(segment(model, target.images[idx]), priors[idx], lam)
            terms.total.backward()
            opt.step()
            sums += np.array([terms.total.item(), terms.entropy.item(), terms.kl.item()]) * len(idx)
            n += len(idx)
        tot, ent, kl = sums / n
        tracker.log(EpochLog(epoch, loss=tot, entropy=ent, kl=kl))
    model, last = _finish(model, tracker, keep_last=epochs == 0)
    return model, rec, last


def adasource_pairs(n_source: int, n_target: int, batch_size: int, seed: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """One epoch of (source batch, target batch) index pairs drawn independently per domain.

    The epoch length follows the target set; the source stream cycles through
    fresh permutations as needed.
    """
    gen_t = torch.Generator().manual_seed(seed)
    gen_s = torch.Generator().manual_seed(seed + 7919)
    src_stream: list[int] = []
    for tgt in _batches(n_target, batch_size, gen_t):
        while len(src_stream) < len(tgt):
            src_stream += torch.randperm(n_source, generator=gen_s).tolist()
        src, src_stream = torch.tensor(src_stream[: len(tgt)]), src_stream[len(tgt) :]
        yield src, tgt


def fit_adasource(
    model: SegNet,
    source: SliceSet,
    target: SliceSet,
    priors: torch.Tensor,
    *,
    lam: float = 1e-2,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 12,
    seed: int = 0,
    select: SliceSet | None = None,
    run_id: str = "",
) -> tuple[SegNet, RunRecord, dict]:
    """Source cross-entropy + lam * target class-ratio KL, with non-aligned random batches."""
    if source.masks is None:
        raise ContractError("AdaSource needs labelled source data")
    if priors.shape[0] != len(target):
        raise ValueError("need exactly one prior per target image")
    rec = RunRecord("adasource", run_id or "adasource", lam=lam)
    tracker = _Tracker(model, rec, select, select)
    tracker.log(EpochLog(0))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for epoch in range(1, epochs + 1):
        model.train()
        sums = np.zeros(3)
        n = 0
        for s_idx, t_idx in adasource_pairs(len(source), len(target), batch_size, seed * 100003 + epoch):
            opt.zero_grad()
            ce = losses.cross_entropy(segment(model, source.images[s_idx]), source.masks[s_idx])
            kl = losses.kl_ratio(priors[t_idx], losses.predicted_ratio(segment(model, target.images[t_idx])))
            total = ce + lam * kl
            total.backward()
            opt.step()
            sums += np.array([total.item(), ce.item(), kl.item()]) * len(t_idx)
            n += len(t_idx)
        tot, ce_, kl_ = sums / n
        tracker.log(EpochLog(epoch, loss=tot, ce=ce_, kl=kl_))
    model, last = _finish(model, tracker, keep_last=epochs == 0)
    return model, rec, last


# -- config-level entry points -----------------------------------------------


def _volume_split(root: str, cfg: AdaptConfig) -> tuple[list[str], list[str]]:
    ids = [v["id"] for v in read_manifest(root)["volumes"]]
    return split(ids, cfg.train_volumes, cfg.val_volumes)


def _init_model(cfg: AdaptConfig, required: bool) -> SegNet:
    if cfg.init is None:
        if required:
            raise ContractError(f"{cfg.method} needs an initial checkpoint (init)")
        return build_seg_model(cfg.num_classes, cfg.width, cfg.seed)
    if not Path(cfg.init).exists():
        raise FileNotFoundError(f"initial checkpoint {cfg.init} not found")
    model, _, _ = load_checkpoint(cfg.init, num_classes=cfg.num_classes)
    return model


def _save_outputs(model: SegNet, record: RunRecord, last_state: dict, cfg: AdaptConfig, epochs_run: int) -> RunOutput:
    out = RunOutput(model, record)
    if cfg.out_dir is None:
        return out
    run_dir = Path(cfg.out_dir)
    record.notes.setdefault("config", cfg.to_dict())
    record.notes.setdefault("aggregation", AGGREGATION_NOTE)
    record.save(run_dir)
    out.best_path = save_checkpoint(model, run_dir / "best.bin", epoch=record.best_epoch, config=cfg.to_dict())
    last = copy.deepcopy(model)
    last.load_state_dict(last_state)
    out.last_path = save_checkpoint(last, run_dir / "last.bin", epoch=epochs_run, config=cfg.to_dict())
    return out


def train_source(cfg: AdaptConfig) -> RunOutput:
    """Supervised training on the labelled source domain (the no-adaptation lower bound).

    The best checkpoint is selected on source validation volumes; if
    ``cfg.target`` is set, target validation scores are recorded for curves.
    """
    if cfg.source is None:
        raise ContractError("source training needs a labelled source dataset")
    tr_ids, va_ids = _volume_split(cfg.source, cfg)
    train = load_slices(cfg.source, cfg.source_modality, tr_ids, with_masks=True)
    select = load_slices(cfg.source, cfg.source_modality, va_ids, with_masks=True) if va_ids else None
    monitor = select
    if cfg.target is not None:
        t_tr, t_va = _volume_split(cfg.target, cfg)
        monitor = load_slices(cfg.target, cfg.target_modality, t_va, with_masks=True)
    model = _init_model(cfg, required=False)
    model, rec, last = fit_supervised(
        model, train, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
        select=select, monitor=monitor, method="no_adapt", run_id=cfg.name,
    )
    return _save_outputs(model, rec, last, cfg, cfg.epochs)


def train_oracle(cfg: AdaptConfig) -> RunOutput:
    """Supervised training on labelled target data (upper bound); trains from scratch unless ``init`` is set."""
    if cfg.target is None:
        raise ContractError("oracle training needs a labelled target dataset")
    tr_ids, va_ids = _volume_split(cfg.target, cfg)
    train = load_slices(cfg.target, cfg.target_modality, tr_ids, with_masks=True)
    val = load_slices(cfg.target, cfg.target_modality, va_ids, with_masks=True) if va_ids else None
    model = _init_model(cfg, required=False)
    model, rec, last = fit_supervised(
        model, train, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
        select=val, monitor=val, method="oracle", run_id=cfg.name,
    )
    return _save_outputs(model, rec, last, cfg, cfg.epochs)


def _target_priors(cfg: AdaptConfig, target: SliceSet) -> torch.Tensor:
    if cfg.regressor is None:
        raise ContractError(f"{cfg.method} needs a ratio regressor checkpoint")
    reg = load_regressor(cfg.regressor)
    if reg.num_classes != cfg.num_classes:
        raise ContractError(f"regressor has K={reg.num_classes}, config has K={cfg.num_classes}")
    return estimate_priors(reg, target.images, target.tags)


def adapt(cfg: AdaptConfig) -> RunOutput:
    """Source-relaxed adaptation (AdaEnt) from a source-trained checkpoint.

    Opens only: the initial checkpoint, the ratio regressor, target
    training images with their image-level tags, and target validation
    images with labels.  Priors are estimated once before training.
    """
    if cfg.source is not None:
        raise ContractError("source-relaxed adaptation must not be given a source dataset")
    if cfg.target is None:
        raise ContractError("adaptation needs a target dataset")
    model = _init_model(cfg, required=True)
    tr_ids, va_ids = _volume_split(cfg.target, cfg)
    target = load_slices(cfg.target, cfg.target_modality, tr_ids, with_masks=False)
    val = load_slices(cfg.target, cfg.target_modality, va_ids, with_masks=True) if va_ids else None
    priors = _target_priors(cfg, target)
    model, rec, last = fit_adaent(
        model, target, priors, lam=cfg.lam, epochs=cfg.epochs, lr=cfg.lr,
        batch_size=cfg.batch_size, seed=cfg.seed, select=val, run_id=cfg.name,
    )
    return _save_outputs(model, rec, last, cfg, cfg.epochs)


def train_adasource(cfg: AdaptConfig) -> RunOutput:
    """AdaSource benchmark: needs concurrent access to labelled source and unlabelled target data."""
    if cfg.source is None or cfg.target is None:
        raise ContractError("AdaSource needs both a source and a target dataset")
    model = _init_model(cfg, required=True)
    s_tr, _ = _volume_split(cfg.source, cfg)
    t_tr, t_va = _volume_split(cfg.target, cfg)
    source = load_slices(cfg.source, cfg.source_modality, s_tr, with_masks=True)
    target = load_slices(cfg.target, cfg.target_modality, t_tr, with_masks=False)
    val = load_slices(cfg.target, cfg.target_modality, t_va, with_masks=True) if t_va else None
    priors = _target_priors(cfg, target)
    model, rec, last = fit_adasource(
        model, source, target, priors, lam=cfg.lam, epochs=cfg.epochs, lr=cfg.lr,
        batch_size=cfg.batch_size, seed=cfg.seed, select=val, run_id=cfg.name,
    )
    return _save_outputs(model, rec, last, cfg, cfg.epochs)


RUNNERS: dict[str, Callable[[AdaptConfig], RunOutput]] = {
    "no_adapt": train_source,
    "adaent": adapt,
    "adasource": train_adasource,
    "oracle": train_oracle,
}


def run(cfg: AdaptConfig) -> RunOutput:
    return RUNNERS[cfg.method](cfg)


def collapse_detected(initial: EvalResult, final: EvalResult, baseline_dsc: float) -> bool:
    """Degenerate-solution predicate for entropy-only adaptation.

    True when the mean predicted foreground ratio fell below half its initial
    value, or the mean validation Dice fell below the no-adaptation baseline.
    """
    return final.mean_fg_ratio < 0.5 * initial.mean_fg_ratio or final.mean_dsc < baseline_dsc
