"""Synthetic multi-site segmentation benchmark with controllable appearance shift.

Every site shares one shape distribution (random ellipses on a dark/bright
base rendering) while appearance is site-specific: an intensity gain/bias
pair, a diagonal sine texture, and pixel noise.  Gain/bias pairs are chosen
so that the pixel-value regions of different sites conflict, which is what
makes sequential fine-tuning forget and joint training succeed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, LayoutError, ValidationError
from .tensor_core import Rng, Tensor

# Base shape rendering levels before any site styling is applied.
FG_LEVEL = 0.5
BG_LEVEL = -0.5

DATA_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SiteStyle:
    """Appearance parameters of one site.

    The rendered image is
    ``clamp(gain * (base + texture_amp * sin(pattern)) + bias + noise, -1, 1)``
    where ``base`` is :data:`FG_LEVEL` inside the mask and :data:`BG_LEVEL`
    outside, and the sine pattern runs along the image diagonal at
    ``texture_freq`` cycles.
    """

    site_id: int
    intensity_gain: float
    intensity_bias: float
    noise_sigma: float
    texture_freq: float
    texture_amp: float = 0.1

    def validate(self) -> None:
        vals = (
            self.intensity_gain,
            self.intensity_bias,
            self.noise_sigma,
            self.texture_freq,
            self.texture_amp,
        )
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite style parameter: {self}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")

    def foreground_level(self) -> float:
        """Mean intensity of foreground pixels, ignoring texture and noise."""
        return self.intensity_gain * FG_LEVEL + self.intensity_bias

    def background_level(self) -> float:
        return self.intensity_gain * BG_LEVEL + self.intensity_bias

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "intensity_gain": self.intensity_gain,
            "intensity_bias": self.intensity_bias,
            "noise_sigma": self.noise_sigma,
            "texture_freq": self.texture_freq,
            "texture_amp": self.texture_amp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SiteStyle":
        return cls(**d)


# Default 4-site training sequence plus one held-out site.  Foreground /
# background levels (gain * base + bias) per site:
#   site 0: ( 0.65,  0.05)   site 1: (-0.65,  0.15)
#   site 2: (-0.15, -0.85)   site 3: ( 0.35,  0.95)
#   unseen: ( 0.50,  0.10)
# Consecutive sites invert or displace the value->label rule, so a model
# fine-tuned on one site misclassifies the previous ones; still, opposite
# class levels stay >= 4 sigma apart, so one consistent rule covering all
# sites exists and joint training can be near perfect.  Both unseen levels
# interpolate between two same-class training levels, so generalizing there
# rewards smooth, site-invariant decision bands.
DEFAULT_SEQUENCE_STYLES = (
    SiteStyle(site_id=0, intensity_gain=0.6, intensity_bias=0.35, noise_sigma=0.05, texture_freq=2.0, texture_amp=0.06),
    SiteStyle(site_id=1, intensity_gain=-0.8, intensity_bias=-0.25, noise_sigma=0.05, texture_freq=3.0, texture_amp=0.06),
    SiteStyle(site_id=2, intensity_gain=0.7, intensity_bias=-0.5, noise_sigma=0.05, texture_freq=5.0, texture_amp=0.06),
    SiteStyle(site_id=3, intensity_gain=-0.6, intensity_bias=0.65, noise_sigma=0.05, texture_freq=7.0, texture_amp=0.06),
)
DEFAULT_UNSEEN_STYLES = (
    SiteStyle(site_id=4, intensity_gain=0.4, intensity_bias=0.3, noise_sigma=0.05, texture_freq=4.0, texture_amp=0.06),
)


@dataclass
class SiteDataset:
    """Index-aligned image/mask pairs from a single site.

    ``images`` and ``masks`` are stacked ``(N, H, W)`` float64 arrays; masks
    hold exactly {0.0, 1.0}.
    """

    site_id: int
    images: Tensor
    masks: Tensor
    split: str = "full"
    style: SiteStyle | None = None
    seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.images.shape != self.masks.shape or self.images.ndim != 3:
            raise LayoutError(
                f"images {self.images.shape} and masks {self.masks.shape} "
                "must be index-aligned (N, H, W)"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def validate(self) -> None:
        if np.min(self.images) < -1.0 or np.max(self.images) > 1.0:
            raise ValidationError("image intensities must lie in [-1, 1]")
        if not np.all(np.isin(self.masks, (0.0, 1.0))):
            raise ValidationError("mask entries must be exactly binary")
        if np.any(self.masks.sum(axis=(1, 2)) < 1):
            raise ValidationError("every mask needs at least one foreground pixel")

    def subset(self, idx, split: str | None = None) -> "SiteDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SiteDataset(
            site_id=self.site_id,
            images=self.images[idx].copy(),
            masks=self.masks[idx].copy(),
            split=split or self.split,
            style=self.style,
            seed=self.seed,
        )


@dataclass
class Batch:
    """A training minibatch; ``site_ids`` records each sample's source site."""

    images: Tensor
    masks: Tensor
    site_ids: Tensor

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.site_ids = np.asarray(self.site_ids, dtype=np.int64)
        if self.images.shape != self.masks.shape:
            raise LayoutError("batch images and masks must share a shape")
        if self.site_ids.shape != (self.images.shape[0],):
            raise LayoutError("site_ids must have one entry per sample")

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def concat(cls, parts) -> "Batch":
        parts = [p for p in parts if p is not None and len(p) > 0]
        if not parts:
            raise DegenerateInputError("cannot concatenate zero batches")
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.masks for p in parts]),
            np.concatenate([p.site_ids for p in parts]),
        )

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.images[idx], self.masks[idx], self.site_ids[idx])


def _diag_texture(h: int, w: int, freq: float) -> Tensor:
    r = np.arange(h, dtype=np.float64)[:, None]
    c = np.arange(w, dtype=np.float64)[None, :]
    return np.sin(2.0 * np.pi * freq * (r + c) / (h + w))


def _random_ellipse_mask(h: int, w: int, rng: Rng) -> Tensor:
    """Binary ellipse indicator with at least one foreground pixel."""
    lo = min(h, w)
    for _ in range(100):
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        a = rng.uniform(0.15 * lo, 0.35 * lo)
        b = rng.uniform(0.15 * lo, 0.35 * lo)
        theta = rng.uniform(0.0, np.pi)
        yy = np.arange(h, dtype=np.float64)[:, None] - cy
        xx = np.arange(w, dtype=np.float64)[None, :] - cx
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)
        if mask.sum() >= 1:
            return mask
    raise ValidationError("failed to render a non-empty ellipse mask")


def make_site(style: SiteStyle, n_samples: int, hw: tuple[int, int], rng: Rng) -> SiteDataset:
    """Render ``n_samples`` image/mask pairs in ``style``.

    Deterministic in (style, rng identity): per-sample child streams are
    derived by index, so the same seed always yields bit-identical data.
    """
    style.validate()
    h, w = int(hw[0]), int(hw[1])
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if h < 8 or w < 8:
        raise ValidationError("images must be at least 8x8")

    texture = style.texture_amp * _diag_texture(h, w, style.texture_freq)
    images = np.empty((n_samples, h, w), dtype=np.float64)
    masks = np.empty((n_samples, h, w), dtype=np.float64)
    for i in range(n_samples):
        s_rng = rng.split("sample", i)
        mask = _random_ellipse_mask(h, w, s_rng)
        base = np.where(mask > 0, FG_LEVEL, BG_LEVEL)
        img = style.intensity_gain * (base + texture) + style.intensity_bias
        if style.noise_sigma > 0:
            img = img + style.noise_sigma * s_rng.standard_normal((h, w))
        images[i] = np.clip(img, -1.0, 1.0)
        masks[i] = mask
    ds = SiteDataset(style.site_id, images, masks, split="full", style=style, seed=rng.seed)
    ds.validate()
    return ds


def _largest_remainder_sizes(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    sizes = [int(math.floor(x)) for x in raw]
    short = n - sum(sizes)
    remainders = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in remainders[:short]:
        sizes[i] += 1
    return sizes


def split_dataset(
    d: SiteDataset,
    fractions: tuple[float, float, float] = (0.6, 0.15, 0.25),
    rng: Rng | None = None,
) -> tuple[SiteDataset, SiteDataset, SiteDataset]:
    """Disjoint train/val/test partition, sizes by the largest-remainder rule."""
    if len(d) < 3:
        raise ValidationError("dataset must hold at least 3 samples to split")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValidationError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {sum(fractions)}")
    order = rng.permutation(len(d)) if rng is not None else np.arange(len(d))
    sizes = _largest_remainder_sizes(len(d), fractions)
    a, b = sizes[0], sizes[0] + sizes[1]
    return (
        d.subset(order[:a], split="train"),
        d.subset(order[a:b], split="val"),
        d.subset(order[b:], split="test"),
    )


def virtual_split(
    incoming_batch: Batch | None,
    replay_batch: Batch | None,
    rng: Rng,
    stratify_by_site: bool = False,
) -> tuple[Batch, Batch]:
    """Random disjoint bipartition of the union of the two batches.

    The union is resplit independently on every call (each mini-batch gets a
    fresh draw).  With ``stratify_by_site`` every source site contributes
    half of its samples to each side instead of splitting the raw union.
    """
    parts = [b for b in (incoming_batch, replay_batch) if b is not None and len(b) > 0]
    if not parts:
        raise DegenerateInputError("virtual split needs at least one sample")
    union = Batch.concat(parts)
    n = len(union)
    if n < 2:
        raise DegenerateInputError("virtual split needs at least 2 samples")

    if stratify_by_site:
        tr_idx, te_idx = [], []
        for sid in np.unique(union.site_ids):
            members = np.flatnonzero(union.site_ids == sid)
            local = members[rng.permutation(len(members))]
            half = len(local) // 2
            tr_idx.append(local[:half])
            te_idx.append(local[half:])
        tr = np.concatenate(tr_idx)
        te = np.concatenate(te_idx)
        if len(tr) == 0 or len(te) == 0:  # all-singleton sites
            return virtual_split(incoming_batch, replay_batch, rng, stratify_by_site=False)
    else:
        order = rng.permutation(n)
        half = n // 2
        tr, te = order[:half], order[half:]
    return union.take(tr), union.take(te)


@dataclass
class SiteBundle:
    """One site's train/val/test splits."""

    site_id: int
    style: SiteStyle
    train: SiteDataset
    val: SiteDataset
    test: SiteDataset


@dataclass
class SiteStream:
    """An ordered training sequence of sites plus held-out unseen sites."""

    sequence: list[SiteBundle]
    unseen: list[SiteBundle] = field(default_factory=list)

    def __post_init__(self):
        ids = [b.site_id for b in self.sequence] + [b.site_id for b in self.unseen]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"site ids must be unique across the stream: {ids}")

    @property
    def n_rounds(self) -> int:
        return len(self.sequence)


def make_stream(
    sequence_styles,
    unseen_styles,
    n_samples: int,
    hw: tuple[int, int],
    rng: Rng,
    fractions: tuple[float, float, float] = (0.6, 0.15, 0.25),
) -> SiteStream:
    """Generate and split every site of a stream from one root stream."""

    def bundle(style: SiteStyle) -> SiteBundle:
        full = make_site(style, n_samples, hw, rng.split("site", style.site_id))
        tr, va, te = split_dataset(full, fractions, rng.split("split", style.site_id))
        return SiteBundle(style.site_id, style, tr, va, te)

    return SiteStream(
        sequence=[bundle(s) for s in sequence_styles],
        unseen=[bundle(s) for s in unseen_styles],
    )


# ---------------------------------------------------------------------------
# Disk container: raw float64 buffer + JSON sidecar, replayable bit-exactly.

def save_site_dataset(ds: SiteDataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    blob = ds.images.tobytes() + ds.masks.tobytes()
    with open(os.path.join(directory, "data.bin"), "wb") as f:
        f.write(blob)
    meta = {
        "format_version": DATA_FORMAT_VERSION,
        "site_id": ds.site_id,
        "split": ds.split,
        "n": int(len(ds)),
        "h": int(ds.hw[0]),
        "w": int(ds.hw[1]),
        "dtype": "float64",
        "order": ["images", "masks"],
        "style": ds.style.to_dict() if ds.style else None,
        "seed": ds.seed,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_site_dataset(directory: str) -> SiteDataset:
    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    with open(os.path.join(directory, "data.bin"), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ValidationError(f"corrupt dataset container in {directory}")
    n, h, w = meta["n"], meta["h"], meta["w"]
    flat = np.frombuffer(blob, dtype=np.float64)
    images = flat[: n * h * w].reshape(n, h, w).copy()
    masks = flat[n * h * w :].reshape(n, h, w).copy()
    style = SiteStyle.from_dict(meta["style"]) if meta.get("style") else None
    return SiteDataset(meta["site_id"], images, masks, meta["split"], style, meta.get("seed"))


def save_stream(stream: SiteStream, directory: str) -> None:
    """One folder per site (splits nested inside) plus a stream manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"format_version": DATA_FORMAT_VERSION, "sequence": [], "unseen": []}
    for role, bundles in (("sequence", stream.sequence), ("unseen", stream.unseen)):
        for b in bundles:
            site_dir = os.path.join(directory, f"site_{b.site_id:02d}")
            for split_name, ds in (("train", b.train), ("val", b.val), ("test", b.test)):
                save_site_dataset(ds, os.path.join(site_dir, split_name))
            manifest[role].append(
                {"site_id": b.site_id, "dir": os.path.basename(site_dir), "style": b.style.to_dict()}
            )
    with open(os.path.join(directory, "stream.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_stream(directory: str) -> SiteStream:
    with open(os.path.join(directory, "stream.json")) as f:
        manifest = json.load(f)

    def bundle(entry) -> SiteBundle:
        site_dir = os.path.join(directory, entry["dir"])
        parts = {s: load_site_dataset(os.path.join(site_dir, s)) for s in ("train", "val", "test")}
        return SiteBundle(entry["site_id"], SiteStyle.from_dict(entry["style"]), **parts)

    return SiteStream(
        sequence=[bundle(e) for e in manifest["sequence"]],
        unseen=[bundle(e) for e in manifest["unseen"]],
    )
