"""Compact U-shaped segmentation network and checkpoint persistence.

A checkpoint is a pair of files: ``<name>.bin`` holding the tensors
(``torch.save`` format) and ``<name>.json`` holding the metadata needed to
rebuild the network and resume training.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or version-mismatched checkpoint."""


class ConfigError(ValueError):
    """Checkpoint does not match the requested model configuration."""


NORMS = ("group", "batch")


def _norm(kind: str, c: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(c)
    if kind == "group":
        return nn.GroupNorm(min(4, c), c)
    raise ValueError(f"unknown normalisation {kind!r}; expected one of {NORMS}")


def _block(cin: int, cout: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Four-level encoder-decoder with skip connections; grayscale in, K logits out.

    Input height and width must be divisible by 8.
    """

    def __init__(self, num_classes: int = 2, width: int = 16, levels: int = 4, norm: str = "batch"):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.width = width
        self.levels = levels
        self.norm = norm
        chans = [width * 2**i for i in range(levels)]
        self.down = nn.ModuleList()
        cin = 1
        for c in chans:
            self.down.append(_block(cin, c, norm))
            cin = c
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose2d(c * 2, c, 2, stride=2))
            self.fuse.append(_block(c * 2, c, norm))
        self.head = nn.Conv2d(chans[0], num_classes, 1)

    @property
    def stride(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B,1,H,W) input, got {tuple(x.shape)}")
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.stride}")
        skips = []
        for i, blk in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = blk(x)
            skips.append(x)
        x = skips.pop()
        for up, fuse in zip(self.up, self.fuse):
            x = fuse(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def build_seg_model(num_classes: int = 2, width: int = 16, seed: int = 0, norm: str = "batch") -> SegNet:
    """Deterministically initialised network; the global RNG state is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegNet(num_classes, width, norm=norm)
    model.seed = seed
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def segment(model: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Softmax probabilities for ``(1,H,W)`` -> ``(K,H,W)`` or ``(B,1,H,W)`` -> ``(B,K,H,W)``.

    Gradients flow to the model parameters; wrap in ``torch.no_grad()`` for
    inference.  Convolution padding means a translated input only yields a
    translated output away from the image border.
    """
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    probs = torch.softmax(model(x), dim=1)
    return probs[0] if single else probs


def config_hash(config: dict[str, Any] | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CheckpointMeta:
    num_classes: int
    width: int
    seed: int
    norm: str = "batch"
    epoch: int = 0
    config_hash: str = ""
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    return path, path.with_suffix(".json")


def save_checkpoint(
    model: SegNet,
    path: str | Path,
    *,
    epoch: int = 0,
    config: dict[str, Any] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    blob_path, meta_path = _paths(path)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    meta = CheckpointMeta(
        num_classes=model.num_classes,
        width=model.width,
        norm=model.norm,
        seed=getattr(model, "seed", 0),
        epoch=epoch,
        config_hash=config_hash(config),
        config=dict(config or {}),
        extra=dict(extra or {}),
    )
    payload = {
        "version": FORMAT_VERSION,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
    }
    torch.save(payload, blob_path)
    meta_path.write_text(json.dumps(asdict(meta), indent=2, sort_keys=True, default=str))
    return blob_path


def read_checkpoint_meta(path: str | Path) -> CheckpointMeta:
    _, meta_path = _paths(path)
    try:
        raw = json.loads(meta_path.read_text())
        meta = CheckpointMeta(**raw)
    except (OSError, ValueError, TypeError) as e:
        raise CheckpointError(f"cannot read checkpoint metadata {meta_path}: {e}") from e
    if meta.version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {meta.version}, expected {FORMAT_VERSION}")
    return meta


def load_checkpoint(
    path: str | Path,
    num_classes: int | None = None,
    map_location: str | torch.device = "cpu",
) -> tuple[SegNet, CheckpointMeta, dict | None]:
    """Rebuild a network from disk.

    Returns ``(model, meta, optimizer_state)``; the model is in eval mode.
    """
    blob_path, _ = _paths(path)
    meta = read_checkpoint_meta(blob_path)
    if num_classes is not None and meta.num_classes != num_classes:
        raise ConfigError(f"checkpoint has K={meta.num_classes}, requested K={num_classes}")
    try:
        payload = torch.load(blob_path, map_location=map_location, weights_only=True)
    except Exception as e:  # torch raises a zoo of types for truncated/garbled files
        raise CheckpointError(f"cannot read checkpoint {blob_path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {blob_path} has an unsupported format")
    model = SegNet(meta.num_classes, meta.width, norm=meta.norm)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {blob_path} does not match its metadata: {e}") from e
    model.seed = meta.seed
    model.eval()
    return model, meta, payload.get("optimizer")
