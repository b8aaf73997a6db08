"""Gradient-alignment optimizers for sequential multi-site training.

One step works with up to four loss terms: the incoming-site batch, a replay
batch standing in for past sites, and a random virtual train/test bipartition
of their union.  Three step families share this structure:

* ``naive_dual`` descends the plain sum of the four losses.
* ``pga_exact`` additionally descends the two alignment penalties
  ``-gamma * g_dt . g_p`` and ``-beta * g_vtr . g_vte``; their exact gradient
  needs Hessian-vector products, obtained here by central differences of the
  first-order gradient.
* ``dual_meta`` approximates the same objective to first order: the replay
  gradient is evaluated after a look-ahead step along the incoming gradient
  (and the virtual-test gradient after a look-ahead along virtual-train), and
  the combined update is applied at the original parameters.  No second-order
  quantities are computed.

``orientational_only`` / ``arbitrary_only`` are ``dual_meta`` with one of the
two look-aheads disabled; ``finetune`` descends the incoming loss alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, NumericError, ValidationError
from .model_zoo import SegModel
from .synth_sites import Batch, virtual_split
from .tensor_core import GradVector, ParamVector, axpy, cosine, dot, norm

MODES = (
    "finetune",
    "naive_dual",
    "pga_exact",
    "dual_meta",
    "orientational_only",
    "arbitrary_only",
)


@dataclass
class AlignConfig:
    """Step hyperparameters.

    ``gamma`` weights the incoming/replay alignment (and is the look-ahead
    rate of the first meta objective); ``beta`` plays the same double role for
    the virtual split.  ``hvp_epsilon`` is the central-difference step for
    exact Hessian-vector products.
    """

    gamma: float = 5e-5
    beta: float = 5e-4
    base_lr: float = 5e-4
    hvp_epsilon: float = 1e-4
    mode: str = "dual_meta"
    optimizer: str = "sgd"  # "sgd" (default) or "adam" for the outer update
    stratify_virtual: bool = False

    def validate(self) -> None:
        if min(self.gamma, self.beta, self.base_lr, self.hvp_epsilon) <= 0:
            raise ValidationError("gamma, beta, base_lr, hvp_epsilon must be > 0")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; one of {MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "base_lr": self.base_lr,
            "hvp_epsilon": self.hvp_epsilon,
            "mode": self.mode,
            "optimizer": self.optimizer,
            "stratify_virtual": self.stratify_virtual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlignConfig":
        return cls(**d)


@dataclass
class StepDiagnostics:
    """Per-step observables, all evaluated at the step's starting parameters.

    Replay-dependent fields are None on rounds without a replay batch.
    """

    mode: str
    loss_dt: float
    loss_p: float | None
    loss_vtr: float
    loss_vte: float
    ip_dt_p: float | None
    ip_vtr_vte: float
    cos_dt_p: float | None
    cos_vtr_vte: float
    norm_g_dt: float
    norm_g_p: float | None
    norm_g_vtr: float
    norm_g_vte: float
    step: int = 0
    round: int = 0
    epoch: int = 0

    FIELDS = (
        "step", "round", "epoch", "mode",
        "loss_dt", "loss_p", "loss_vtr", "loss_vte",
        "ip_dt_p", "ip_vtr_vte", "cos_dt_p", "cos_vtr_vte",
        "norm_g_dt", "norm_g_p", "norm_g_vtr", "norm_g_vte",
    )

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def finite(self) -> bool:
        vals = [getattr(self, n) for n in self.FIELDS if n not in ("mode",)]
        return all(v is None or np.isfinite(v) for v in vals)


def hvp(model, batch, v: GradVector, epsilon: float, params: ParamVector | None = None) -> GradVector:
    """Hessian-vector product by central differences of the gradient.

    ``model`` is anything exposing ``loss_and_grad(params, batch)``.  Computes
    (g(p + e*u) - g(p - e*u)) / (2e) * ||v|| with u = v / ||v||, which equals
    H v up to O(e^2) truncation (exactly, for quadratic losses).
    """
    params = params if params is not None else model.params
    nv = norm(v)
    if nv == 0.0:
        raise DegenerateInputError("Hessian-vector product of the zero vector")
    u = GradVector(v.data / nv, v.layout)
    _, g_plus = model.loss_and_grad(axpy(epsilon, u, params), batch)
    _, g_minus = model.loss_and_grad(axpy(-epsilon, u, params), batch)
    return GradVector((g_plus.data - g_minus.data) * (nv / (2.0 * epsilon)), v.layout)


def _sum_terms(g_dt, g_p, g_vtr, g_vte) -> GradVector:
    # One fixed association order so step families agree bit-for-bit when
    # their extra terms vanish.
    total = g_dt.data.copy()
    if g_p is not None:
        total += g_p.data
    total += g_vtr.data
    total += g_vte.data
    return GradVector(total, g_dt.layout)


def aligned_gradient(
    model,
    params: ParamVector,
    batch_dt: Batch,
    batch_p: Batch | None,
    batch_vtr: Batch,
    batch_vte: Batch,
    gamma: float,
    beta: float,
    hvp_epsilon: float,
):
    """Exact gradient of the alignment objective on fixed batches.

    The objective is the sum of the four batch losses minus
    ``gamma * g_dt . g_p`` and ``beta * g_vtr . g_vte``; its gradient adds the
    cross Hessian-vector corrections to the plain sum.  With gamma = beta = 0
    this reduces to the naive dual gradient, term for term.
    """
    loss_dt, g_dt = model.loss_and_grad(params, batch_dt)
    if batch_p is not None:
        loss_p, g_p = model.loss_and_grad(params, batch_p)
    else:
        loss_p, g_p = None, None
    loss_vtr, g_vtr = model.loss_and_grad(params, batch_vtr)
    loss_vte, g_vte = model.loss_and_grad(params, batch_vte)

    total = _sum_terms(g_dt, g_p, g_vtr, g_vte)
    if gamma != 0.0 and g_p is not None:
        corr = hvp(model, batch_dt, g_p, hvp_epsilon, params).data
        corr = corr + hvp(model, batch_p, g_dt, hvp_epsilon, params).data
        total = GradVector(total.data - gamma * corr, total.layout)
    if beta != 0.0:
        corr = hvp(model, batch_vtr, g_vte, hvp_epsilon, params).data
        corr = corr + hvp(model, batch_vte, g_vtr, hvp_epsilon, params).data
        total = GradVector(total.data - beta * corr, total.layout)

    losses = (loss_dt, loss_p, loss_vtr, loss_vte)
    grads = (g_dt, g_p, g_vtr, g_vte)
    return total, losses, grads


def dual_meta_gradient(
    model,
    params: ParamVector,
    batch_dt: Batch,
    batch_p: Batch | None,
    batch_vtr: Batch,
    batch_vte: Batch,
    gamma: float,
    beta: float,
):
    """First-order meta gradient: look-ahead evaluation, no second derivatives.

    The replay gradient is taken at ``params - gamma * g_dt`` and the
    virtual-test gradient at ``params - beta * g_vtr``; look-ahead steps are
    treated as constants, so only first-order gradient evaluations occur.
    """
    loss_dt, g_dt = model.loss_and_grad(params, batch_dt)
    if batch_p is not None:
        inner_dt = axpy(-gamma, g_dt, params) if gamma != 0.0 else params
        loss_p, g_p = model.loss_and_grad(inner_dt, batch_p)
    else:
        loss_p, g_p = None, None
    loss_vtr, g_vtr = model.loss_and_grad(params, batch_vtr)
    inner_vtr = axpy(-beta, g_vtr, params) if beta != 0.0 else params
    loss_vte, g_vte = model.loss_and_grad(inner_vtr, batch_vte)

    total = _sum_terms(g_dt, g_p, g_vtr, g_vte)
    losses = (loss_dt, loss_p, loss_vtr, loss_vte)
    grads = (g_dt, g_p, g_vtr, g_vte)
    return total, losses, grads


def _loss_scalar(loss) -> float:
    return float(loss.value) if loss is not None else None


def _diagnostics(model, params, mode, losses, grads, batch_p, need_exact) -> StepDiagnostics:
    """Observables at the starting parameters.

    ``need_exact`` re-evaluates replay / virtual-test gradients at ``params``
    for step families whose update used look-ahead points, so the logged
    quantities mean the same thing in every mode.
    """
    loss_dt, loss_p, loss_vtr, loss_vte = losses
    g_dt, g_p, g_vtr, g_vte = grads
    if need_exact:
        if batch_p is not None:
            loss_p, g_p = model.loss_and_grad(params, batch_p)
    has_replay = g_p is not None

    def safe_cos(a, b):
        try:
            return cosine(a, b)
        except DegenerateInputError:
            return 0.0

    return StepDiagnostics(
        mode=mode,
        loss_dt=_loss_scalar(loss_dt),
        loss_p=_loss_scalar(loss_p),
        loss_vtr=_loss_scalar(loss_vtr),
        loss_vte=_loss_scalar(loss_vte),
        ip_dt_p=dot(g_dt, g_p) if has_replay else None,
        ip_vtr_vte=dot(g_vtr, g_vte),
        cos_dt_p=safe_cos(g_dt, g_p) if has_replay else None,
        cos_vtr_vte=safe_cos(g_vtr, g_vte),
        norm_g_dt=norm(g_dt),
        norm_g_p=norm(g_p) if has_replay else None,
        norm_g_vtr=norm(g_vtr),
        norm_g_vte=norm(g_vte),
    )


def alignment_gradient(
    model,
    batch_dt: Batch,
    batch_p: Batch | None,
    cfg: AlignConfig,
    rng,
    params: ParamVector | None = None,
    mode: str | None = None,
    collect_diagnostics: bool = True,
):
    """Mode-dispatched update gradient plus diagnostics.

    Draws the virtual train/test split from ``rng`` (every mode consumes the
    same draw so runs stay paired across modes under a shared stream), then
    computes the gradient the chosen mode would descend.
    """
    params = params if params is not None else model.params
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    batch_p = batch_p if (batch_p is not None and len(batch_p) > 0) else None
    batch_vtr, batch_vte = virtual_split(
        batch_dt, batch_p, rng, stratify_by_site=cfg.stratify_virtual
    )

    if mode == "finetune":
        loss_dt, g_dt = model.loss_and_grad(params, batch_dt)
        total = g_dt
        losses, grads = (loss_dt, None, None, None), (g_dt, None, None, None)
        diag = None
        if collect_diagnostics:
            if batch_p is not None:
                loss_p, g_p = model.loss_and_grad(params, batch_p)
            else:
                loss_p, g_p = None, None
            loss_vtr, g_vtr = model.loss_and_grad(params, batch_vtr)
            loss_vte, g_vte = model.loss_and_grad(params, batch_vte)
            diag = _diagnostics(
                model, params, mode,
                (loss_dt, loss_p, loss_vtr, loss_vte),
                (g_dt, g_p, g_vtr, g_vte),
                batch_p, need_exact=False,
            )
    elif mode in ("naive_dual", "pga_exact"):
        gamma = cfg.gamma if mode == "pga_exact" else 0.0
        beta = cfg.beta if mode == "pga_exact" else 0.0
        total, losses, grads = aligned_gradient(
            model, params, batch_dt, batch_p, batch_vtr, batch_vte,
            gamma, beta, cfg.hvp_epsilon,
        )
        diag = (
            _diagnostics(model, params, mode, losses, grads, batch_p, need_exact=False)
            if collect_diagnostics else None
        )
    else:
        gamma = 0.0 if mode == "arbitrary_only" else cfg.gamma
        beta = 0.0 if mode == "orientational_only" else cfg.beta
        total, losses, grads = dual_meta_gradient(
            model, params, batch_dt, batch_p, batch_vtr, batch_vte, gamma, beta,
        )
        diag = (
            _diagnostics(model, params, mode, losses, grads, batch_p,
                         need_exact=gamma != 0.0)
            if collect_diagnostics else None
        )

    finite_losses = all(
        l is None or np.isfinite(l.value) for l in losses
    )
    if not finite_losses or not np.all(np.isfinite(total.data)):
        raise NumericError(f"non-finite loss or gradient in mode {mode!r}; step refused")
    return total, diag


def _apply_sgd(params: ParamVector, grad: GradVector, lr: float) -> ParamVector:
    return axpy(-lr, grad, params)


def _step(model, batch_dt, batch_p, cfg, rng, mode, params=None, collect_diagnostics=True):
    params = params if params is not None else model.params
    grad, diag = alignment_gradient(
        model, batch_dt, batch_p, cfg, rng,
        params=params, mode=mode, collect_diagnostics=collect_diagnostics,
    )
    return _apply_sgd(params, grad, cfg.base_lr), diag


def naive_dual_step(model, batch_dt, batch_p, cfg: AlignConfig, rng, params=None):
    """One descent step on the plain sum of the four losses."""
    return _step(model, batch_dt, batch_p, cfg, rng, "naive_dual", params)


def pga_exact_step(model, batch_dt, batch_p, cfg: AlignConfig, rng, params=None):
    """One descent step on the alignment objective with exact cross terms."""
    return _step(model, batch_dt, batch_p, cfg, rng, "pga_exact", params)


def dual_meta_step(model, batch_dt, batch_p, cfg: AlignConfig, rng, params=None):
    """One first-order meta step (look-ahead replay / virtual-test gradients)."""
    return _step(model, batch_dt, batch_p, cfg, rng, "dual_meta", params)


def ablation_step(model, batch_dt, batch_p, cfg: AlignConfig, rng, variant: str, params=None):
    """``orientational_only`` or ``arbitrary_only`` variant of the meta step."""
    if variant not in ("orientational_only", "arbitrary_only"):
        raise ValidationError(f"unknown ablation variant {variant!r}")
    return _step(model, batch_dt, batch_p, cfg, rng, variant, params)


def finetune_step(model, batch_dt, cfg: AlignConfig, rng, params=None,
                  batch_p=None, collect_diagnostics=True):
    """Plain descent on the incoming batch; replay only feeds the diagnostics."""
    return _step(model, batch_dt, batch_p, cfg, rng, "finetune", params,
                 collect_diagnostics=collect_diagnostics)


def alignment_objective_value(
    model,
    params: ParamVector,
    batch_dt: Batch,
    batch_p: Batch | None,
    batch_vtr: Batch,
    batch_vte: Batch,
    gamma: float,
    beta: float,
) -> float:
    """Scalar value of the exact alignment objective on fixed batches.

    Finite differences of this scalar are the oracle for
    :func:`aligned_gradient`.
    """
    loss_dt, g_dt = model.loss_and_grad(params, batch_dt)
    total = loss_dt.value
    if batch_p is not None:
        loss_p, g_p = model.loss_and_grad(params, batch_p)
        total += loss_p.value - gamma * dot(g_dt, g_p)
    loss_vtr, g_vtr = model.loss_and_grad(params, batch_vtr)
    loss_vte, g_vte = model.loss_and_grad(params, batch_vte)
    total += loss_vtr.value + loss_vte.value - beta * dot(g_vtr, g_vte)
    return float(total)
