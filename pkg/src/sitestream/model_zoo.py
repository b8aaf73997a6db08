"""Small differentiable models with hand-derived backward passes.

Two model families, both plain tanh MLPs over float64 arrays so that every
gradient can be checked against central finite differences:

* :class:`SegModel` -- a per-pixel segmentation classifier reading a k x k
  neighborhood patch and emitting one logit per pixel.
* :class:`DenoiserModel` -- a pixel-shared conditional noise predictor for
  the diffusion replay module.  Each pixel's features are the channel-wise
  concatenation of its noisy-image value and mask value plus fixed positional
  encodings; a (time embedding + prompt embedding) vector conditions the
  first hidden layer additively, and the prediction has the shape of the
  image.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass

import numpy as np

from .errors import LayoutError, ValidationError
from .tensor_core import GradVector, ParamVector, Rng, Tensor

CHECKPOINT_FORMAT_VERSION = 1

PROMPT_LAYOUT_NAME = "prompt"


@dataclass
class LossValue:
    """Scalar loss with its per-sample components; value == mean(per_sample)."""

    value: float
    per_sample: np.ndarray

    def __post_init__(self):
        self.per_sample = np.asarray(self.per_sample, dtype=np.float64)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Element-wise binary cross entropy on logits, numerically stable."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: Tensor) -> Tensor:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def time_embedding(ks, dim: int) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape (len(ks), dim)."""
    if dim % 2 != 0:
        raise ValidationError("time embedding dimension must be even")
    ks = np.atleast_1d(np.asarray(ks, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ks[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _check_batch(images: Tensor, masks: Tensor) -> tuple[Tensor, Tensor]:
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
        masks = masks[None]
    if images.shape != masks.shape or images.ndim != 3:
        raise LayoutError(f"image batch {images.shape} vs mask batch {masks.shape}")
    if images.shape[0] == 0:
        raise ValidationError("batch must be non-empty")
    if not np.all(np.isin(masks, (0.0, 1.0))):
        raise ValidationError("masks must be exactly binary")
    return images, masks


# ---------------------------------------------------------------------------
# Segmentation model


@dataclass(frozen=True)
class SegConfig:
    patch_size: int = 3
    hidden: tuple[int, ...] = (16, 16)

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValidationError("patch_size must be a positive odd integer")
        if not self.hidden:
            raise ValidationError("need at least one hidden layer")

    @property
    def in_dim(self) -> int:
        return self.patch_size * self.patch_size


def _extract_patches(images: Tensor, k: int) -> Tensor:
    """(B, H, W) -> (B*H*W, k*k) neighborhoods with edge padding."""
    pad = k // 2
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    b, h, w = images.shape
    return np.ascontiguousarray(windows).reshape(b * h * w, k * k)


class SegModel:
    """Per-pixel patch classifier: tanh MLP, one logit per pixel."""

    def __init__(self, cfg: SegConfig, params: ParamVector):
        self.cfg = cfg
        self.params = params

    @staticmethod
    def layer_dims(cfg: SegConfig) -> list[tuple[int, int]]:
        dims = [cfg.in_dim, *cfg.hidden, 1]
        return list(zip(dims[:-1], dims[1:]))

    @classmethod
    def init(cls, cfg: SegConfig, rng: Rng) -> "SegModel":
        segs = []
        for i, (fan_in, fan_out) in enumerate(cls.layer_dims(cfg)):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            segs.append((f"w{i}", w))
            segs.append((f"b{i}", np.zeros(fan_out)))
        return cls(cfg, ParamVector.from_segments(segs))

    def _forward_trace(self, params: ParamVector, images: Tensor):
        x = _extract_patches(images, self.cfg.patch_size)
        acts = [x]
        n_layers = len(self.layer_dims(self.cfg))
        for i in range(n_layers):
            z = acts[-1] @ params.segment(f"w{i}") + params.segment(f"b{i}")
            acts.append(np.tanh(z) if i < n_layers - 1 else z)
        return acts

    def forward(self, images: Tensor, params: ParamVector | None = None) -> Tensor:
        """Per-pixel logits, shape (B, H, W)."""
        images = np.asarray(images, dtype=np.float64)
        squeeze = images.ndim == 2
        if squeeze:
            images = images[None]
        params = params if params is not None else self.params
        logits = self._forward_trace(params, images)[-1][:, 0].reshape(images.shape)
        return logits[0] if squeeze else logits

    def loss_and_grad(self, params: ParamVector, batch) -> tuple[LossValue, GradVector]:
        """Mean per-pixel BCE on logits plus its exact gradient."""
        images, masks = _check_batch(batch.images, batch.masks)
        b, h, w = images.shape
        acts = self._forward_trace(params, images)
        logits = acts[-1][:, 0]
        y = masks.reshape(-1)
        pixel_loss = bce_with_logits(logits, y)
        per_sample = pixel_loss.reshape(b, h * w).mean(axis=1)
        loss = LossValue(float(pixel_loss.mean()), per_sample)

        n = logits.size
        delta = ((sigmoid(logits) - y) / n)[:, None]
        grads: dict[str, np.ndarray] = {}
        n_layers = len(self.layer_dims(self.cfg))
        for i in reversed(range(n_layers)):
            a_prev = acts[i]
            grads[f"w{i}"] = a_prev.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ params.segment(f"w{i}").T) * (1.0 - acts[i] ** 2)
        flat = GradVector.from_segments([(name, grads[name]) for name, _ in params.layout])
        return loss, flat


def seg_loss_and_grad(model: SegModel, batch, params: ParamVector | None = None):
    """Loss and exact gradient of the segmentation model on a batch."""
    return model.loss_and_grad(params if params is not None else model.params, batch)


def predict_masks(model: SegModel, images: Tensor, params: ParamVector | None = None) -> Tensor:
    """Threshold logits at zero; deterministic and scale-invariant."""
    logits = model.forward(images, params)
    return (logits > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# Conditional denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    height: int = 16
    width: int = 16
    time_dim: int = 16
    hidden: tuple[int, int] = (64, 64)
    pos_freqs: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0)

    @property
    def in_dim(self) -> int:
        # noisy value, mask value, row/col coords, sin/cos diagonal harmonics
        return 4 + 2 * len(self.pos_freqs)


def _position_features(cfg: DenoiserConfig) -> Tensor:
    h, w = cfg.height, cfg.width
    r = np.repeat(np.arange(h, dtype=np.float64), w)
    c = np.tile(np.arange(w, dtype=np.float64), h)
    cols = [r / max(h - 1, 1), c / max(w - 1, 1)]
    for f in cfg.pos_freqs:
        phase = 2.0 * np.pi * f * (r + c) / (h + w)
        cols.append(np.sin(phase))
        cols.append(np.cos(phase))
    return np.stack(cols, axis=1)  # (H*W, 2 + 2*len(freqs))


class _Workspace(threading.local):
    """Per-thread reusable buffers for the denoiser's hot path.

    Fresh multi-megabyte temporaries get mmap'd and page-faulted on every
    call, which costs an order of magnitude more than the arithmetic at this
    scale; reusing buffers keeps the training loop compute-bound.
    """

    def __init__(self):
        self.buffers: dict[tuple, np.ndarray] = {}

    def get(self, name: str, shape: tuple) -> np.ndarray:
        key = (name, shape)
        buf = self.buffers.get(key)
        if buf is None:
            buf = np.empty(shape)
            self.buffers[key] = buf
        return buf


class DenoiserModel:
    """Pixel-shared conditional noise predictor.

    Per pixel the network sees [noisy value, mask value, positional features];
    the conditioning vector (time embedding + prompt) is projected into the
    first hidden layer.  A learned scalar skip from the noisy value to the
    output gives the near-identity component of noise prediction a direct
    path.  Weights are shared across pixels, so the model generalizes to
    masks it has never seen.
    """

    def __init__(self, cfg: DenoiserConfig, params: ParamVector):
        self.cfg = cfg
        self.params = params
        self._pos = _position_features(cfg)
        self._ws = _Workspace()

    @classmethod
    def init(cls, cfg: DenoiserConfig, rng: Rng) -> "DenoiserModel":
        h0, h1 = cfg.hidden
        segs = [
            ("w0", rng.standard_normal((cfg.in_dim, h0)) / np.sqrt(cfg.in_dim)),
            ("b0", np.zeros(h0)),
            ("wc", rng.standard_normal((cfg.time_dim, h0)) / np.sqrt(cfg.time_dim)),
            ("w1", rng.standard_normal((h0, h1)) / np.sqrt(h0)),
            ("b1", np.zeros(h1)),
            ("w2", rng.standard_normal((h1, 1)) / np.sqrt(h1)),
            ("b2", np.zeros(1)),
            ("skip", np.ones(1)),
        ]
        return cls(cfg, ParamVector.from_segments(segs))

    def _check_cond(self, prompts: Tensor) -> Tensor:
        prompts = np.asarray(prompts, dtype=np.float64)
        if prompts.shape[-1] != self.cfg.time_dim:
            raise LayoutError(
                f"prompt dimension {prompts.shape[-1]} must equal the time "
                f"embedding dimension {self.cfg.time_dim}"
            )
        return prompts

    def _features(self, noisy: Tensor, masks: Tensor) -> Tensor:
        b = noisy.shape[0]
        p = self.cfg.height * self.cfg.width
        x = self._ws.get("x", (b * p, self.cfg.in_dim))
        x[:, 0] = noisy.reshape(b * p)
        x[:, 1] = masks.reshape(b * p)
        pos_key = ("pos_filled", b)
        if self._ws.buffers.get(pos_key) is None:
            x[:, 2:] = np.tile(self._pos, (b, 1))
            self._ws.buffers[pos_key] = x  # positions are static per batch size
        return x

    def forward(
        self,
        noisy: Tensor,
        masks: Tensor,
        ks,
        prompts: Tensor,
        params: ParamVector | None = None,
    ) -> Tensor:
        """Predicted noise, shape (B, H, W) (or (H, W) for single inputs)."""
        out, _ = self._forward_trace(noisy, masks, ks, prompts, params)
        return out

    def _forward_trace(self, noisy, masks, ks, prompts, params=None):
        params = params if params is not None else self.params
        noisy = np.asarray(noisy, dtype=np.float64)
        masks = np.asarray(masks, dtype=np.float64)
        squeeze = noisy.ndim == 2
        if squeeze:
            noisy, masks = noisy[None], masks[None]
        if noisy.shape[1:] != (self.cfg.height, self.cfg.width):
            raise LayoutError(f"expected {(self.cfg.height, self.cfg.width)} images, got {noisy.shape[1:]}")
        if noisy.shape != masks.shape:
            raise LayoutError("noisy images and masks must share a shape")
        prompts = self._check_cond(prompts)
        if prompts.ndim == 1:
            prompts = np.tile(prompts, (noisy.shape[0], 1))
        b = noisy.shape[0]
        p = self.cfg.height * self.cfg.width

        cond = time_embedding(ks, self.cfg.time_dim)
        if cond.shape[0] == 1 and b > 1:
            cond = np.tile(cond, (b, 1))
        cond = cond + prompts  # prompt is additive in the time-embedding path

        h0, h1 = self.cfg.hidden
        x = self._features(noisy, masks)
        cond_rows = self._ws.get("cond_rows", (b * p, self.cfg.time_dim))
        cond_rows.reshape(b, p, self.cfg.time_dim)[:] = cond[:, None, :]
        a0 = self._ws.get("a0", (b * p, h0))
        t0 = self._ws.get("t0", (b * p, h0))
        np.matmul(x, params.segment("w0"), out=a0)
        np.matmul(cond_rows, params.segment("wc"), out=t0)
        a0 += t0
        a0 += params.segment("b0")
        np.tanh(a0, out=a0)
        a1 = self._ws.get("a1", (b * p, h1))
        np.matmul(a0, params.segment("w1"), out=a1)
        a1 += params.segment("b1")
        np.tanh(a1, out=a1)
        out_flat = a1 @ params.segment("w2")[:, 0]
        out_flat += params.segment("b2")[0]
        out_flat += params.segment("skip")[0] * x[:, 0]
        out = out_flat.reshape(noisy.shape)
        trace = (params, x, cond_rows, a0, a1, noisy.shape, squeeze)
        return (out[0] if squeeze else out), trace

    def loss_and_grads(
        self,
        noisy: Tensor,
        masks: Tensor,
        ks,
        prompts: Tensor,
        eps: Tensor,
        params: ParamVector | None = None,
    ) -> tuple[LossValue, GradVector, Tensor]:
        """Squared-error denoising loss with gradients.

        Returns the loss, the gradient w.r.t. network parameters, and the
        per-sample gradient w.r.t. the conditioning prompt rows, shape
        (B, time_dim).  The loss is mean((eps - prediction)^2) over every
        pixel of the batch.
        """
        pred, trace = self._forward_trace(noisy, masks, ks, prompts, params)
        params, x, cond_rows, a0, a1, shape, squeeze = trace
        eps = np.asarray(eps, dtype=np.float64)
        if squeeze and eps.ndim == 2:
            eps = eps[None]
        pred_b = pred[None] if squeeze else pred
        if eps.shape != pred_b.shape:
            raise LayoutError(f"eps shape {eps.shape} must match prediction {pred_b.shape}")
        b = shape[0]
        p = self.cfg.height * self.cfg.width

        resid = (pred_b - eps).reshape(b * p)
        per_sample = (resid.reshape(b, p) ** 2).mean(axis=1)
        loss = LossValue(float((resid**2).mean()), per_sample)

        dz = 2.0 * resid / resid.size  # d loss / d out_flat, shape (B*P,)
        g_skip = np.array([float(dz @ x[:, 0])])
        g_w2 = (dz @ a1)[:, None]
        g_b2 = np.array([dz.sum()])
        # da1 = outer(dz, w2) * (1 - a1^2), built in place in a workspace buffer
        t1 = self._ws.get("bk1", a1.shape)
        np.multiply(a1, a1, out=t1)
        np.subtract(1.0, t1, out=t1)
        t1 *= dz[:, None]
        t1 *= params.segment("w2")[:, 0][None, :]
        g_w1 = a0.T @ t1
        g_b1 = t1.sum(axis=0)
        # da0 = (da1 @ w1.T) * (1 - a0^2); a0 is consumed here
        t0 = self._ws.get("bk0", a0.shape)
        np.matmul(t1, params.segment("w1").T, out=t0)
        np.multiply(a0, a0, out=a0)
        np.subtract(1.0, a0, out=a0)
        t0 *= a0
        g_w0 = x.T @ t0
        g_b0 = t0.sum(axis=0)
        g_wc = cond_rows.T @ t0
        tc = self._ws.get("bkc", cond_rows.shape)
        np.matmul(t0, params.segment("wc").T, out=tc)
        g_cond = tc.reshape(b, p, self.cfg.time_dim).sum(axis=1)

        named = {
            "w0": g_w0, "b0": g_b0, "wc": g_wc,
            "w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "skip": g_skip,
        }
        grad = GradVector.from_segments([(name, named[name]) for name, _ in params.layout])
        return loss, grad, g_cond


def denoiser_loss_and_grads(
    model: DenoiserModel,
    image: Tensor,
    mask: Tensor,
    k: int,
    prompt: Tensor,
    eps: Tensor,
) -> tuple[LossValue, GradVector, GradVector]:
    """Denoising loss on one noisy image with parameter and prompt gradients.

    ``image`` is the already-noised input at timestep ``k``; ``eps`` is the
    noise target.  The prompt gradient comes back as a GradVector with a
    single ``prompt`` segment of the time-embedding dimension.
    """
    loss, grad, g_cond = model.loss_and_grads(image, mask, [k], prompt, eps)
    prompt_grad = GradVector.from_segments([(PROMPT_LAYOUT_NAME, g_cond[0])])
    return loss, grad, prompt_grad


# ---------------------------------------------------------------------------
# Checkpoints: layout descriptor JSON next to the raw scalar buffer.


def save_params(params: ParamVector, path_prefix: str, extra: dict | None = None) -> None:
    os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
    blob = params.data.tobytes()
    desc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "dtype": "float64",
        "size": params.size,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        desc["extra"] = extra
    with open(path_prefix + ".json", "w") as f:
        json.dump(desc, f, indent=2, sort_keys=True)
    with open(path_prefix + ".bin", "wb") as f:
        f.write(blob)


def load_params(path_prefix: str) -> ParamVector:
    with open(path_prefix + ".json") as f:
        desc = json.load(f)
    if desc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version in {path_prefix}")
    with open(path_prefix + ".bin", "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != desc["sha256"]:
        raise ValidationError(f"corrupt checkpoint buffer at {path_prefix}")
    layout = tuple((name, tuple(shape)) for name, shape in desc["layout"])
    return ParamVector(np.frombuffer(blob, dtype=np.float64).copy(), layout)
