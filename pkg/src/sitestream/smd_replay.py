"""Mask- and prompt-conditioned diffusion replay.

A single denoiser serves every site; a small learnable embedding per site
(the prompt) steers generation toward that site's appearance.  After each
training round the prompts learned so far are kept, and at the start of the
next round they regenerate past-site lookalikes conditioned on the incoming
site's masks -- no raw data from earlier sites is ever read again.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .model_zoo import DenoiserConfig, DenoiserModel
from .synth_sites import Batch
from .tensor_core import AdamState, ParamVector, Rng, Tensor

PROMPT_STORE_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance increments and their cumulative noise levels.

    ``alpha_bars[k]`` is the cumulative product of (1 - beta) through step k,
    with ``alpha_bars[0] == 1``; it decreases strictly to a small positive
    value at k = K.
    """

    timesteps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        k = self.timesteps
        if self.betas.shape != (k,) or self.alpha_bars.shape != (k + 1,):
            raise ValidationError("schedule arrays sized inconsistently with K")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValidationError("every beta must lie in (0, 1)")
        if self.alpha_bars[0] != 1.0 or np.any(np.diff(self.alpha_bars) >= 0):
            raise ValidationError("alpha_bar must start at 1 and decrease strictly")
        if not (0.0 < self.alpha_bars[-1] < 1.0):
            raise ValidationError("alpha_bar at K must lie in (0, 1)")

    @classmethod
    def linear(cls, timesteps: int = 50, beta_start: float = 1e-4,
               beta_end: float = 2e-2, reference_steps: int = 1000) -> "NoiseSchedule":
        """Linear beta ramp rescaled so the K-step endpoint noise level
        matches the ``reference_steps``-step ramp."""
        scale = reference_steps / timesteps
        betas = np.linspace(beta_start * scale, beta_end * scale, timesteps)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(timesteps, betas, alpha_bars)


@dataclass
class PromptEmbedding:
    """Per-site steering vector; dimension equals the time-embedding width."""

    site_id: int
    vector: Tensor
    frozen: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).ravel()

    def copy(self) -> "PromptEmbedding":
        return PromptEmbedding(self.site_id, self.vector.copy(), self.frozen)


def new_prompt(site_id: int, dim: int, rng: Rng, scale: float = 0.1) -> PromptEmbedding:
    """Fresh trainable prompt with small random entries."""
    return PromptEmbedding(site_id, scale * rng.standard_normal(dim), frozen=False)


def fixed_prompt_baseline(site_id: int, dim: int = 16, rng: Rng | None = None) -> PromptEmbedding:
    """Frozen stand-in for an external prompt extractor.

    Deterministic in (site_id, seed): the vector comes from a stream derived
    only from those, so the same site always maps to the same embedding and
    training never updates it.
    """
    base_seed = rng.seed if rng is not None else 0
    stream = Rng(base_seed).split("fixed-prompt", site_id)
    return PromptEmbedding(site_id, stream.standard_normal(dim), frozen=True)


@dataclass
class ReplayBuffer:
    """Generated image/mask pairs standing in for past sites.

    ``entries`` maps site_id -> (images, masks); masks are drawn from the
    incoming site's pool, so pairs are (past-site appearance, current masks).
    """

    entries: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def sites(self) -> list[int]:
        return sorted(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def n_total(self) -> int:
        return sum(imgs.shape[0] for imgs, _ in self.entries.values())

    def add(self, site_id: int, images: Tensor, masks: Tensor) -> None:
        images = np.asarray(images, dtype=np.float64)
        masks = np.asarray(masks, dtype=np.float64)
        if images.shape != masks.shape:
            raise ValidationError("buffer images and masks must share a shape")
        self.entries[site_id] = (images, masks)

    def as_batch(self) -> Batch:
        parts = [
            Batch(imgs, msks, np.full(imgs.shape[0], sid, dtype=np.int64))
            for sid, (imgs, msks) in sorted(self.entries.items())
        ]
        return Batch.concat(parts)

    def sample_batch(self, batch_size: int, rng: Rng) -> Batch:
        """Uniform sample over all stored pairs, with their source site ids."""
        pool = self.as_batch()
        idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        return pool.take(idx)


def forward_diffuse(image: Tensor, k: int, schedule: NoiseSchedule, rng: Rng) -> tuple[Tensor, Tensor]:
    """Noise an image to level k: sqrt(abar_k) * I0 + sqrt(1 - abar_k) * eps.

    Returns the noised image together with the drawn standard-normal eps.
    At k = 0 the noise weight is exactly zero and the image passes through
    unchanged.  Only the image is noised; masks are never touched.
    """
    image = np.asarray(image, dtype=np.float64)
    if not (0 <= k <= schedule.timesteps):
        raise ValidationError(f"timestep {k} outside [0, {schedule.timesteps}]")
    eps = rng.standard_normal(image.shape)
    abar = schedule.alpha_bars[k]
    noisy = np.sqrt(abar) * image + np.sqrt(1.0 - abar) * eps
    return noisy, eps


def _forward_diffuse_batch(images: Tensor, ks: np.ndarray, schedule: NoiseSchedule, rng: Rng):
    eps = rng.standard_normal(images.shape)
    abar = schedule.alpha_bars[ks][:, None, None]
    return np.sqrt(abar) * images + np.sqrt(1.0 - abar) * eps, eps


@dataclass
class DiffusionConfig:
    """Desk-scale training and sampling settings for the replay denoiser."""

    timesteps: int = 50
    time_dim: int = 16
    hidden: tuple[int, int] = (64, 64)
    iters: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    prompt_lr: float = 3e-2
    n_per_site: int = 60
    prompt_scale: float = 0.1

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps)

    def denoiser_config(self, hw: tuple[int, int]) -> DenoiserConfig:
        return DenoiserConfig(height=hw[0], width=hw[1], time_dim=self.time_dim,
                              hidden=self.hidden)

    def to_dict(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "time_dim": self.time_dim,
            "hidden": list(self.hidden),
            "iters": self.iters,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "prompt_lr": self.prompt_lr,
            "n_per_site": self.n_per_site,
            "prompt_scale": self.prompt_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64, 64)))
        return cls(**d)


@dataclass
class SmdTrainResult:
    denoiser: DenoiserModel
    prompts: list[PromptEmbedding]
    loss_history: list[float]


def train_smd(
    incoming: Batch,
    buffer: ReplayBuffer | None,
    prompts: list[PromptEmbedding],
    denoiser: DenoiserModel,
    cfg: DiffusionConfig,
    rng: Rng,
) -> SmdTrainResult:
    """Jointly fit the denoiser and all trainable prompts.

    The training pool is the incoming site's raw pairs plus the generated
    buffer pairs -- nothing else is read.  Every sample trains with its own
    site's prompt; frozen prompts contribute conditioning but receive no
    updates.  Optimization is Adam on the flat parameter buffer and on each
    prompt vector.
    """
    prompt_by_site = {p.site_id: p for p in prompts}
    pool_sites = set(np.unique(incoming.site_ids).tolist())
    if buffer is not None and not buffer.is_empty():
        pool = Batch.concat([incoming, buffer.as_batch()])
        pool_sites |= set(buffer.sites())
    else:
        pool = incoming
    if pool_sites != set(prompt_by_site):
        raise ValidationError(
            f"need exactly one prompt per training site: data sites {sorted(pool_sites)} "
            f"vs prompts {sorted(prompt_by_site)}"
        )

    schedule = cfg.schedule()
    prompts = [p.copy() for p in prompts]
    prompt_by_site = {p.site_id: p for p in prompts}
    site_order = sorted(prompt_by_site)
    site_row = {sid: i for i, sid in enumerate(site_order)}
    prompt_matrix = np.stack([prompt_by_site[sid].vector for sid in site_order])

    params = denoiser.params.copy()
    adam = AdamState(params.size)
    prompt_adam = {sid: AdamState(prompt_matrix.shape[1]) for sid in site_order}
    history: list[float] = []

    n = len(pool)
    for it in range(cfg.iters):
        it_rng = rng.split("iter", it)
        idx = it_rng.integers(0, n, size=min(cfg.batch_size, n))
        images = pool.images[idx]
        masks = pool.masks[idx]
        rows = np.array([site_row[int(s)] for s in pool.site_ids[idx]])
        ks = it_rng.integers(1, schedule.timesteps + 1, size=len(idx))
        noisy, eps = _forward_diffuse_batch(images, ks, schedule, it_rng)

        loss, grad, g_prompt_rows = denoiser.loss_and_grads(
            noisy, masks, ks, prompt_matrix[rows], eps, params=params
        )
        history.append(loss.value)
        params = ParamVector(params.data + adam.step(grad.data, cfg.lr), params.layout)
        for sid in site_order:
            p = prompt_by_site[sid]
            if p.frozen:
                continue
            sel = rows == site_row[sid]
            if not np.any(sel):
                continue
            g = g_prompt_rows[sel].sum(axis=0)
            p.vector = p.vector + prompt_adam[sid].step(g, cfg.prompt_lr)
            prompt_matrix[site_row[sid]] = p.vector

    return SmdTrainResult(DenoiserModel(denoiser.cfg, params), prompts, history)


def _sample_batch(
    denoiser: DenoiserModel,
    prompt_rows: Tensor,
    masks: Tensor,
    schedule: NoiseSchedule,
    rng: Rng,
) -> Tensor:
    """Ancestral sampling for a batch of masks with per-sample prompts."""
    b = masks.shape[0]
    x = rng.standard_normal(masks.shape)
    alphas = 1.0 - schedule.betas
    for k in range(schedule.timesteps, 0, -1):
        eps_hat = denoiser.forward(x, masks, np.full(b, k), prompt_rows)
        abar_k = schedule.alpha_bars[k]
        abar_prev = schedule.alpha_bars[k - 1]
        beta_k = schedule.betas[k - 1]
        mean = (x - beta_k / np.sqrt(1.0 - abar_k) * eps_hat) / np.sqrt(alphas[k - 1])
        if k > 1:
            sigma = np.sqrt(beta_k * (1.0 - abar_prev) / (1.0 - abar_k))
            x = mean + sigma * rng.standard_normal(masks.shape)
        else:
            x = mean
    return np.clip(x, -1.0, 1.0)


def sample_replay(
    denoiser: DenoiserModel,
    prompt: PromptEmbedding,
    mask: Tensor,
    schedule: NoiseSchedule,
    rng: Rng,
) -> Tensor:
    """Generate one image from pure noise, conditioned on (mask, prompt)."""
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all(np.isin(mask, (0.0, 1.0))):
        raise ValidationError("conditioning mask must be binary")
    out = _sample_batch(denoiser, prompt.vector[None, :], mask[None], schedule, rng)
    return out[0]


def build_buffer(
    denoiser: DenoiserModel,
    prompts: list[PromptEmbedding],
    incoming_masks: Tensor,
    n_per_site: int,
    schedule: NoiseSchedule,
    rng: Rng,
) -> ReplayBuffer:
    """Regenerate every past site from its stored prompt.

    For each prompt, ``n_per_site`` masks are drawn from the incoming site's
    pool and each generated image is paired with the mask that conditioned
    it.  With no prompts (first round) the result is an empty buffer.
    """
    buffer = ReplayBuffer()
    if not prompts:
        return buffer
    incoming_masks = np.asarray(incoming_masks, dtype=np.float64)
    n_pool = incoming_masks.shape[0]
    for prompt in prompts:
        site_rng = rng.split("site", prompt.site_id)
        idx = site_rng.choice(n_pool, size=n_per_site, replace=n_per_site > n_pool)
        masks = incoming_masks[idx]
        rows = np.tile(prompt.vector, (n_per_site, 1))
        images = _sample_batch(denoiser, rows, masks, schedule, site_rng.split("noise"))
        buffer.add(prompt.site_id, images, masks)
    return buffer


# ---------------------------------------------------------------------------
# Prompt store: one small record per site.


def save_prompts(prompts: list[PromptEmbedding], path: str) -> None:
    records = []
    for p in sorted(prompts, key=lambda q: q.site_id):
        blob = p.vector.tobytes()
        records.append({
            "site_id": p.site_id,
            "dim": int(p.vector.size),
            "values": [repr(float(v)) for v in p.vector],
            "frozen": bool(p.frozen),
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump({"format_version": PROMPT_STORE_VERSION, "prompts": records}, f,
                  indent=2, sort_keys=True)


def load_prompts(path: str) -> list[PromptEmbedding]:
    with open(path) as f:
        store = json.load(f)
    if store.get("format_version") != PROMPT_STORE_VERSION:
        raise ValidationError(f"unsupported prompt store version in {path}")
    prompts = []
    for rec in store["prompts"]:
        vector = np.array([float(v) for v in rec["values"]], dtype=np.float64)
        if hashlib.sha256(vector.tobytes()).hexdigest() != rec["sha256"]:
            raise ValidationError(f"corrupt prompt record for site {rec['site_id']}")
        if vector.size != rec["dim"]:
            raise ValidationError("prompt dimension mismatch")
        prompts.append(PromptEmbedding(rec["site_id"], vector, rec["frozen"]))
    return prompts
