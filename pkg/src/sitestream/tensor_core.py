"""Numeric substrate: flat parameter/gradient vectors and seeded random streams.

Dense arrays are plain ``numpy`` ``float64`` ndarrays in row-major order
(aliased as :data:`Tensor`).  Trainable state lives in flat vectors carrying a
named segment layout so that optimizer arithmetic is a single vectorized
operation regardless of model architecture.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, LayoutError, ValidationError

# Row-major float64 ndarray; every array handed between modules is one of these.
Tensor = np.ndarray

# Ordered (name, shape) segments; extents partition the flat buffer exactly.
Layout = tuple[tuple[str, tuple[int, ...]], ...]


def make_layout(segments) -> Layout:
    """Normalize and validate a sequence of (name, shape) pairs."""
    out = []
    seen = set()
    for name, shape in segments:
        shape = tuple(int(d) for d in shape)
        if not name or name in seen:
            raise LayoutError(f"segment name missing or duplicated: {name!r}")
        if any(d <= 0 for d in shape):
            raise LayoutError(f"segment {name!r} has non-positive dim: {shape}")
        seen.add(name)
        out.append((str(name), shape))
    return tuple(out)


def layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in layout))


def _offsets(layout: Layout) -> dict[str, tuple[int, int, tuple[int, ...]]]:
    table = {}
    pos = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        table[name] = (pos, pos + n, shape)
        pos += n
    return table


@dataclass
class FlatVector:
    """Flat float64 buffer partitioned into named segments.

    Values are treated as immutable after construction: operations return new
    vectors and never write through the shared buffer.
    """

    data: np.ndarray
    layout: Layout
    _table: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        self.layout = make_layout(self.layout)
        if self.data.size != layout_size(self.layout):
            raise LayoutError(
                f"buffer size {self.data.size} does not match layout size "
                f"{layout_size(self.layout)}"
            )
        self._table = _offsets(self.layout)

    def segment(self, name: str) -> np.ndarray:
        """View of one named segment, reshaped to its declared shape."""
        try:
            lo, hi, shape = self._table[name]
        except KeyError:
            raise LayoutError(f"no segment named {name!r}") from None
        return self.data[lo:hi].reshape(shape)

    def segment_names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def copy(self):
        return type(self)(self.data.copy(), self.layout)

    def zeros_like(self):
        return type(self)(np.zeros_like(self.data), self.layout)

    @classmethod
    def from_segments(cls, named_arrays):
        """Build a vector by concatenating (name, array) pairs in order."""
        layout = make_layout([(n, np.asarray(a).shape) for n, a in named_arrays])
        data = np.concatenate(
            [np.asarray(a, dtype=np.float64).ravel() for _, a in named_arrays]
        )
        return cls(data, layout)

    @property
    def size(self) -> int:
        return self.data.size


class ParamVector(FlatVector):
    """Ordered buffer of all trainable scalars of a model."""


class GradVector(FlatVector):
    """Gradient of a scalar loss with respect to a :class:`ParamVector`.

    Always carries the layout of the vector it differentiates.
    """


def _check_layouts(a: FlatVector, b: FlatVector) -> None:
    if a.layout != b.layout:
        raise LayoutError(
            f"layout mismatch: {a.segment_names()} vs {b.segment_names()}"
        )


def dot(a: FlatVector, b: FlatVector) -> float:
    """Inner product sum_i a_i b_i over identically laid-out vectors."""
    _check_layouts(a, b)
    return float(np.dot(a.data, b.data))


def axpy(alpha: float, x: FlatVector, y: ParamVector) -> ParamVector:
    """Return y + alpha * x without modifying either input."""
    _check_layouts(x, y)
    return ParamVector(y.data + float(alpha) * x.data, y.layout)


def norm(a: FlatVector) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(a.data))


def cosine(a: FlatVector, b: FlatVector) -> float:
    """Normalized inner product, clipped into [-1, 1]."""
    _check_layouts(a, b)
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a.data, b.data) / (na * nb), -1.0, 1.0))


def _key_word(key) -> int:
    """Map a split key to a stable non-negative integer."""
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValidationError(f"split key must be non-negative, got {key}")
        return int(key)
    raise ValidationError(f"split key must be int or str, got {type(key).__name__}")


class Rng:
    """Deterministic random stream backed by the counter-based Philox engine.

    A stream is identified by ``(seed, path)`` where ``path`` is the tuple of
    split keys that produced it.  Identical identity means a bit-identical
    sequence of draws across runs and platforms; there is no global state.
    Child streams from :meth:`split` are statistically independent of the
    parent and of each other.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)):
            raise ValidationError("seed must be an integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in _path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys) -> "Rng":
        """Derive an independent child stream, e.g. rng.split('site', 3)."""
        if not keys:
            raise ValidationError("split requires at least one key")
        return Rng(self.seed, self.path + tuple(_key_word(k) for k in keys))

    # Draw helpers; all return float64 / int64 arrays.
    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


class AdamState:
    """Adam moment accumulators for one flat parameter buffer."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Parameter delta for this gradient (add it to the parameters)."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)
