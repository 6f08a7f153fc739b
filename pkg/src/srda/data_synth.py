"""Synthetic two-modality spine phantoms and slice loading.

Each phantom volume holds one anatomy (a vertical stack of elliptical discs
separated by vertebral bodies) rendered in two intensity appearances.  The
second appearance is produced by :func:`modality_transform`, so the two
modalities share the ground-truth mask exactly and differ only in intensity.

On disk a dataset is a directory with ``manifest.json`` and one
sub-directory per volume::

    vol_000/image_modA.npy   float32 (D, H, W)
    vol_000/image_modB.npy   float32 (D, H, W)
    vol_000/mask.npy         uint8   (D, H, W)
    vol_000/tags.npy         bool    (D,)   slice contains foreground

``tags.npy`` lets weakly supervised code read image-level tags without
opening any mask.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

log = logging.getLogger(__name__)

MODALITIES = ("A", "B")
FG_BAND = (0.02, 0.25)


class DataError(RuntimeError):
    """Missing, unreadable or inconsistent dataset files."""


@dataclass
class ModalityParams:
    invert: bool = False
    gamma: float = 1.0
    bias_strength: float = 0.0
    bias_scale: float = 16.0
    noise_sigma: float = 0.0


@dataclass
class Appearance:
    """Base tissue intensities before any modality transform."""

    background: float
    vertebra: float
    disc: float
    background_texture: float = 0.05
    blur: float = 0.7


# Source look: bright discs on darker vertebrae and soft tissue.
APPEARANCE_A = Appearance(background=0.15, vertebra=0.4, disc=0.85)
# Target look before inversion.  After inversion discs are dim (about 0.55)
# rather than bright, so a source-trained model under-segments them.
APPEARANCE_B = Appearance(background=0.85, vertebra=0.75, disc=0.45)


@dataclass
class PhantomConfig:
    n_discs: tuple[int, int] = (3, 7)
    disc_half_width: tuple[float, float] = (7.0, 10.0)
    disc_half_height: tuple[float, float] = (2.2, 3.4)
    disc_half_depth: tuple[float, float] = (2.5, 4.5)
    spine_jitter: float = 2.5
    source: Appearance = field(default_factory=lambda: APPEARANCE_A)
    target: Appearance = field(default_factory=lambda: APPEARANCE_B)
    source_noise: float = 0.02
    target_invert: bool = True
    target_gamma: tuple[float, float] = (1.0, 1.5)
    target_bias: tuple[float, float] = (0.25, 0.45)
    target_noise: tuple[float, float] = (0.02, 0.05)
    max_attempts: int = 50


@dataclass
class PhantomVolume:
    mask: np.ndarray
    image_modA: np.ndarray
    image_modB: np.ndarray
    volume_id: str = ""

    def image(self, modality: str) -> np.ndarray:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return self.image_modA if modality == "A" else self.image_modB

    @property
    def tags(self) -> np.ndarray:
        return self.mask.reshape(self.mask.shape[0], -1).any(axis=1)


@dataclass
class SliceSample:
    image: np.ndarray  # (1, H, W)
    mask: np.ndarray | None  # (H, W)
    has_foreground: bool
    volume_id: str
    slice_index: int


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], scale: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=scale, mode="reflect")
    f -= f.mean()
    std = f.std()
    return f / std if std > 0 else f


def modality_transform(
    image: np.ndarray,
    params: ModalityParams,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply inversion, gamma, a smooth multiplicative bias field and noise; clip to [0, 1].

    Operates slice-wise on ``(H, W)`` or ``(D, H, W)`` arrays.  With identity
    parameters the input comes back unchanged (after clipping).
    """
    x = np.asarray(image, dtype=np.float64)
    if params.invert:
        x = 1.0 - x
    if params.gamma != 1.0:
        x = np.clip(x, 0.0, None) ** params.gamma
    needs_rng = params.bias_strength > 0 or params.noise_sigma > 0
    if needs_rng and rng is None:
        rng = np.random.default_rng()
    if params.bias_strength > 0:
        plane = x.shape[-2:]
        # bias varies smoothly in-plane and is shared along depth
        bias = np.exp(params.bias_strength * _smooth_field(rng, plane, params.bias_scale))
        x = x * bias
    if params.noise_sigma > 0:
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


def _draw_anatomy(rng: np.random.Generator, cfg: PhantomConfig, D: int, H: int, W: int):
    n = int(rng.integers(cfg.n_discs[0], cfg.n_discs[1] + 1))
    cx = W / 2 + rng.uniform(-cfg.spine_jitter, cfg.spine_jitter) * 2
    margin = H * 0.1
    centers_y = np.linspace(margin, H - margin, n + 2)[1:-1]
    spacing = (H - 2 * margin) / (n + 1)
    discs = []
    for cy in centers_y:
        discs.append(
            dict(
                cy=cy + rng.uniform(-0.12, 0.12) * spacing,
                cx=cx + rng.uniform(-cfg.spine_jitter, cfg.spine_jitter),
                a=rng.uniform(*cfg.disc_half_width) * W / 64,
                b=min(rng.uniform(*cfg.disc_half_height) * H / 64, 0.3 * spacing),
                tilt=rng.uniform(-0.25, 0.25),
                cz=(D - 1) / 2 + rng.uniform(-1.0, 1.0),
                hz=rng.uniform(*cfg.disc_half_depth) * D / 12,
            )
        )
    return cx, discs, spacing


def _rasterise(cx, discs, spacing, D, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((D, H, W), dtype=np.uint8)
    vert = np.zeros((D, H, W), dtype=bool)
    body_half_w = np.mean([d["a"] for d in discs]) * 0.9
    for z in range(D):
        # vertebral column: a vertical band present in every slice
        vert[z] = np.abs(xx - cx) < body_half_w
        for d in discs:
            dz = abs(z - d["cz"])
            if dz > d["hz"]:
                continue
            s = 0.7 + 0.3 * np.sqrt(max(0.0, 1.0 - (dz / d["hz"]) ** 2))
            c, sn = np.cos(d["tilt"]), np.sin(d["tilt"])
            u = (xx - d["cx"]) * c + (yy - d["cy"]) * sn
            v = -(xx - d["cx"]) * sn + (yy - d["cy"]) * c
            inside = (u / (d["a"] * s)) ** 2 + (v / (d["b"] * s)) ** 2 <= 1.0
            mask[z][inside] = 1
    return mask, vert & (mask == 0)


def _render(mask, vert, look: Appearance, rng, noise: float) -> np.ndarray:
    D, H, W = mask.shape
    tex = _smooth_field(rng, (H, W), 6.0) * look.background_texture
    out = np.empty((D, H, W))
    for z in range(D):
        img = np.full((H, W), look.background) + tex
        img[vert[z]] = look.vertebra
        img[mask[z] == 1] = look.disc
        if look.blur > 0:
            img = ndimage.gaussian_filter(img, look.blur)
        out[z] = img
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _fg_in_band(mask: np.ndarray) -> bool:
    frac = mask.reshape(mask.shape[0], -1).mean(axis=1)
    nonempty = frac[frac > 0]
    return bool(nonempty.size) and bool(np.all((nonempty >= FG_BAND[0]) & (nonempty <= FG_BAND[1])))


def generate_phantoms(
    seed: int = 0,
    n_volumes: int = 16,
    D: int = 12,
    H: int = 64,
    W: int = 64,
    config: PhantomConfig | None = None,
) -> list[PhantomVolume]:
    """Deterministic list of phantom volumes; modality A is the clean source look."""
    if H < 16 or W < 16 or D < 1 or n_volumes < 1:
        raise ValueError(f"degenerate phantom dimensions {(n_volumes, D, H, W)}")
    cfg = config or PhantomConfig()
    rng = np.random.default_rng(seed)
    volumes = []
    for v in range(n_volumes):
        for _ in range(cfg.max_attempts):
            cx, discs, spacing = _draw_anatomy(rng, cfg, D, H, W)
            mask, vert = _rasterise(cx, discs, spacing, D, H, W)
            if _fg_in_band(mask):
                break
        else:
            raise RuntimeError(f"could not draw volume {v} with foreground ratio in {FG_BAND}")
        img_a = _render(mask, vert, cfg.source, rng, cfg.source_noise)
        base_b = _render(mask, vert, cfg.target, rng, 0.0)
        params = ModalityParams(
            invert=cfg.target_invert,
            gamma=float(rng.uniform(*cfg.target_gamma)),
            bias_strength=float(rng.uniform(*cfg.target_bias)),
            noise_sigma=float(rng.uniform(*cfg.target_noise)),
        )
        img_b = modality_transform(base_b, params, rng)
        volumes.append(
            PhantomVolume(
                mask=mask,
                image_modA=img_a.astype(np.float32),
                image_modB=img_b.astype(np.float32),
                volume_id=f"vol_{v:03d}",
            )
        )
    return volumes


def split(volumes: Sequence, train_count: int, val_count: int) -> tuple[list, list]:
    """Volume-level split: the first ``train_count`` volumes train, the next ``val_count`` validate."""
    if train_count < 0 or val_count < 0 or train_count + val_count > len(volumes):
        raise ValueError(f"cannot split {len(volumes)} volumes into {train_count}/{val_count}")
    return list(volumes[:train_count]), list(volumes[train_count : train_count + val_count])


# -- persistence -------------------------------------------------------------


def save_phantoms(volumes: Sequence[PhantomVolume], out_dir: str | Path, seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for vol in volumes:
        vdir = out / vol.volume_id
        vdir.mkdir(exist_ok=True)
        np.save(vdir / "image_modA.npy", vol.image_modA.astype(np.float32))
        np.save(vdir / "image_modB.npy", vol.image_modB.astype(np.float32))
        np.save(vdir / "mask.npy", vol.mask.astype(np.uint8))
        np.save(vdir / "tags.npy", vol.tags)
        entries.append({"id": vol.volume_id, "shape": list(vol.mask.shape)})
    manifest = {"seed": seed, "modalities": list(MODALITIES), "volumes": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read dataset manifest {path}: {e}") from e


def _load_npy(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read {path}: {e}") from e


def load_phantoms(root: str | Path) -> list[PhantomVolume]:
    root = Path(root)
    vols = []
    for entry in read_manifest(root)["volumes"]:
        vdir = root / entry["id"]
        vols.append(
            PhantomVolume(
                mask=_load_npy(vdir / "mask.npy"),
                image_modA=_load_npy(vdir / "image_modA.npy"),
                image_modB=_load_npy(vdir / "image_modB.npy"),
                volume_id=entry["id"],
            )
        )
    return vols


@dataclass
class SliceSet:
    """Stacked 2D slices ready for batching.

    ``masks`` is ``None`` when the set was loaded without labels; ``tags``
    is always present.
    """

    images: torch.Tensor  # (N, 1, H, W) float32
    masks: torch.Tensor | None  # (N, H, W) int64
    tags: torch.Tensor  # (N,) bool
    volume_ids: list[str]
    slice_indices: list[int]

    def __len__(self) -> int:
        return self.images.shape[0]

    def volumes(self) -> list[str]:
        return list(dict.fromkeys(self.volume_ids))

    def volume_index(self, vid: str) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.volume_ids) if v == vid])

    def samples(self) -> Iterable[SliceSample]:
        for i in range(len(self)):
            yield SliceSample(
                image=self.images[i].numpy(),
                mask=None if self.masks is None else self.masks[i].numpy(),
                has_foreground=bool(self.tags[i]),
                volume_id=self.volume_ids[i],
                slice_index=self.slice_indices[i],
            )


def slices_from_arrays(
    images: Sequence[np.ndarray],
    masks: Sequence[np.ndarray] | None,
    tags: Sequence[np.ndarray],
    volume_ids: Sequence[str],
) -> SliceSet:
    imgs, msks, tg, vids, sidx = [], [], [], [], []
    for k, (img, vid) in enumerate(zip(images, volume_ids)):
        imgs.append(np.asarray(img, dtype=np.float32))
        if masks is not None:
            msks.append(np.asarray(masks[k], dtype=np.int64))
        tg.append(np.asarray(tags[k], dtype=bool))
        vids += [vid] * img.shape[0]
        sidx += list(range(img.shape[0]))
    return SliceSet(
        images=torch.from_numpy(np.concatenate(imgs))[:, None],
        masks=torch.from_numpy(np.concatenate(msks)) if masks is not None else None,
        tags=torch.from_numpy(np.concatenate(tg)),
        volume_ids=vids,
        slice_indices=sidx,
    )


def volumes_to_slices(volumes: Sequence[PhantomVolume], modality: str, with_masks: bool = True) -> SliceSet:
    return slices_from_arrays(
        [v.image(modality) for v in volumes],
        [v.mask for v in volumes] if with_masks else None,
        [v.tags for v in volumes],
        [v.volume_id for v in volumes],
    )


def load_slices(
    root: str | Path,
    modality: str,
    volume_ids: Sequence[str],
    with_masks: bool = True,
) -> SliceSet:
    """Load one modality of the listed volumes from a saved dataset.

    Only ``image_mod<modality>.npy`` and either ``mask.npy`` (``with_masks``)
    or ``tags.npy`` are opened.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    root = Path(root)
    images, masks, tags = [], [], []
    for vid in volume_ids:
        vdir = root / vid
        img = _load_npy(vdir / f"image_mod{modality}.npy")
        images.append(img)
        if with_masks:
            m = _load_npy(vdir / "mask.npy")
            if m.shape != img.shape:
                raise DataError(f"{vid}: mask shape {m.shape} differs from image shape {img.shape}")
            masks.append(m)
            tags.append(m.reshape(m.shape[0], -1).any(axis=1))
        else:
            tags.append(_load_npy(vdir / "tags.npy"))
    return slices_from_arrays(images, masks if with_masks else None, tags, list(volume_ids))


# -- real data ---------------------------------------------------------------


@dataclass
class SliceLayout:
    """How to find volumes in a directory of ``.npy`` files.

    Every file matching ``image_glob`` is an image volume; its mask is the
    same name with ``image_token`` replaced by ``mask_token``.  Slices are
    taken along ``axis`` and rotated by ``rot90`` quarter turns in-plane.
    """

    image_glob: str = "*_image.npy"
    image_token: str = "_image"
    mask_token: str = "_mask"
    axis: int = 0
    rot90: int = 0


def load_real_slices(directory: str | Path, layout: SliceLayout | None = None) -> list[SliceSample]:
    layout = layout or SliceLayout()
    directory = Path(directory)
    files = sorted(directory.glob(layout.image_glob))
    if not files:
        warnings.warn(f"no image volumes matching {layout.image_glob!r} in {directory}", stacklevel=2)
        return []
    out = []
    for img_path in files:
        mask_path = img_path.with_name(img_path.name.replace(layout.image_token, layout.mask_token))
        if mask_path == img_path or not mask_path.exists():
            raise DataError(f"no mask for image volume {img_path}")
        img = _load_npy(img_path).astype(np.float64)
        mask = _load_npy(mask_path)
        if img.shape != mask.shape:
            raise DataError(f"{img_path.name}: image shape {img.shape} differs from mask shape {mask.shape}")
        if img.ndim != 3:
            raise DataError(f"{img_path.name}: expected a 3D volume, got shape {img.shape}")
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        img = np.moveaxis(img, layout.axis, 0)
        mask = np.moveaxis(mask, layout.axis, 0)
        vid = img_path.name.replace(layout.image_token, "").removesuffix(".npy")
        for z in range(img.shape[0]):
            im = np.rot90(img[z], layout.rot90).astype(np.float32)
            mk = np.rot90(mask[z], layout.rot90).astype(np.int64)
            out.append(SliceSample(im[None].copy(), mk.copy(), bool(mk.any()), vid, z))
    return out


def phantom_summary(volumes: Sequence[PhantomVolume]) -> dict:
    masks = np.concatenate([v.mask for v in volumes])
    frac = masks.reshape(masks.shape[0], -1).mean(axis=1)
    return {
        "volumes": len(volumes),
        "slices": int(masks.shape[0]),
        "background_only_fraction": float((frac == 0).mean()),
        "fg_ratio_min": float(frac[frac > 0].min()) if (frac > 0).any() else 0.0,
        "fg_ratio_max": float(frac.max()),
    }
