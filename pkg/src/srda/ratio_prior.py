"""Class-ratio priors: ground-truth ratios, an auxiliary ratio regressor, and tag overrides."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)


def gt_ratio(mask, num_classes: int = 2) -> np.ndarray:
    """Exact per-class pixel fractions of a hard mask (computed from integer counts)."""
    m = mask.detach().cpu().numpy() if hasattr(mask, "detach") else np.asarray(mask)
    if m.size == 0:
        raise ValueError("cannot compute class ratio of an empty mask")
    if m.min() < 0 or m.max() >= num_classes:
        raise ValueError(f"mask has entries outside [0, {num_classes})")
    counts = np.bincount(m.ravel().astype(np.int64), minlength=num_classes)
    return counts / m.size


def project_to_simplex(raw) -> np.ndarray:
    """Clamp to [0, 1] and renormalise; an all-zero vector maps to the uniform ratio."""
    v = np.clip(np.asarray(raw, dtype=np.float64), 0.0, 1.0)
    s = v.sum(axis=-1, keepdims=True)
    k = v.shape[-1]
    return np.where(s > 0, v / np.where(s > 0, s, 1.0), 1.0 / k)


def background_only(num_classes: int = 2) -> np.ndarray:
    r = np.zeros(num_classes)
    r[0] = 1.0
    return r


class RatioRegressor(nn.Module):
    """Strided conv encoder, global average pooling and a linear head with K raw outputs."""

    def __init__(self, num_classes: int = 2, width: int = 16, input_shape: tuple[int, int] = (64, 64)):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.input_shape = tuple(input_shape)
        layers: list[nn.Module] = []
        cin = 1
        for i in range(4):
            cout = width * 2**i
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[-2:]) != self.input_shape or x.shape[1] != 1:
            raise ValueError(f"regressor expects (B,1,{self.input_shape[0]},{self.input_shape[1]}), got {tuple(x.shape)}")
        return self.head(self.features(x).mean(dim=(-2, -1)))


@dataclass
class RegressorConfig:
    epochs: int = 100
    lr: float = 5e-6
    momentum: float = 0.9
    batch_size: int = 12
    seed: int = 0
    width: int = 16
    holdout_fraction: float = 0.1


def build_regressor(num_classes: int, input_shape: tuple[int, int], width: int = 16, seed: int = 0) -> RatioRegressor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RatioRegressor(num_classes, width, input_shape)


def _targets(masks: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([gt_ratio(m, num_classes) for m in masks.numpy()])).float()


def ratio_mse(regressor: RatioRegressor, images: torch.Tensor, targets: torch.Tensor) -> float:
    regressor.eval()
    with torch.no_grad():
        return float(((regressor(images) - targets) ** 2).mean())


@dataclass
class RegressorHistory:
    train_mse: list[float] = field(default_factory=list)
    holdout_mse_init: float = float("nan")
    holdout_mse: float = float("nan")


def train_regressor(
    images: torch.Tensor,
    masks: torch.Tensor,
    config: RegressorConfig | None = None,
    num_classes: int = 2,
) -> tuple[RatioRegressor, RegressorHistory]:
    """Fit the ratio regressor to ground-truth ratios with squared error and SGD with momentum.

    ``images`` is ``(N,1,H,W)`` and ``masks`` ``(N,H,W)``.  The last
    ``holdout_fraction`` of images (by index) is held out for reporting.
    Background-only slices are kept; their target ratio is ``(1, 0, ...)``.
    """
    cfg = config or RegressorConfig()
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if masks is None or masks.shape[0] != n:
        raise ValueError("every source image needs a mask")
    targets = _targets(masks, num_classes)
    n_hold = int(round(n * cfg.holdout_fraction))
    n_fit = n - n_hold if n - n_hold > 0 else n
    fit_x, fit_y = images[:n_fit], targets[:n_fit]
    hold_x, hold_y = (images[n_fit:], targets[n_fit:]) if n_hold else (fit_x, fit_y)

    reg = build_regressor(num_classes, tuple(images.shape[-2:]), cfg.width, cfg.seed)
    hist = RegressorHistory(holdout_mse_init=ratio_mse(reg, hold_x, hold_y))
    opt = torch.optim.SGD(reg.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        reg.train()
        order = torch.randperm(n_fit, generator=gen)
        total = 0.0
        for i in range(0, n_fit, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            opt.zero_grad()
            loss = ((reg(fit_x[idx]) - fit_y[idx]) ** 2).sum(dim=1).mean()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        hist.train_mse.append(total / n_fit)
    hist.holdout_mse = ratio_mse(reg, hold_x, hold_y)
    reg.eval()
    log.info("ratio regressor: holdout mse %.3g -> %.3g", hist.holdout_mse_init, hist.holdout_mse)
    return reg, hist


class PriorModel(Protocol):
    num_classes: int

    def __call__(self, x: torch.Tensor) -> torch.Tensor: ...


def estimate_prior(regressor: PriorModel | Callable, image, has_foreground: bool) -> np.ndarray:
    """Class-ratio prior for one target image.

    Images tagged as background-only get ``(1, 0, ...)`` without consulting
    the regressor; others get the regressor output projected onto the simplex.
    """
    k = getattr(regressor, "num_classes", 2)
    if not has_foreground:
        return background_only(k)
    x = torch.as_tensor(image, dtype=torch.float32)
    if isinstance(regressor, nn.Module):
        regressor.eval()
    with torch.no_grad():
        raw = regressor(x if x.dim() == 4 else x.reshape(1, 1, *x.shape[-2:]))
    return project_to_simplex(np.asarray(raw, dtype=np.float64).reshape(-1))


def estimate_priors(regressor: PriorModel, images: torch.Tensor, tags: torch.Tensor) -> torch.Tensor:
    """Vectorised :func:`estimate_prior` over a stack of images; returns ``(N, K)``."""
    k = regressor.num_classes
    out = np.tile(background_only(k), (images.shape[0], 1))
    pos = np.flatnonzero(tags.numpy())
    if pos.size:
        if isinstance(regressor, nn.Module):
            regressor.eval()
        with torch.no_grad():
            raw = regressor(images[pos]).numpy()
        out[pos] = project_to_simplex(raw)
    return torch.from_numpy(out).float()


# -- persistence -------------------------------------------------------------


def save_regressor(reg: RatioRegressor, path: str | Path, config: RegressorConfig | None = None, **extra: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(reg.state_dict(), path)
    meta = {
        "num_classes": reg.num_classes,
        "input_shape": list(reg.input_shape),
        "width": reg.width,
        "seed": (config or RegressorConfig()).seed,
        "config": asdict(config or RegressorConfig()),
        **extra,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=str))
    return path


def load_regressor(path: str | Path) -> RatioRegressor:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise RuntimeError(f"cannot read ratio regressor {path}: {e}") from e
    reg = RatioRegressor(meta["num_classes"], meta["width"], tuple(meta["input_shape"]))
    reg.load_state_dict(state)
    reg.eval()
    return reg
