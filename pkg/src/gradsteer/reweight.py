"""Softmax gradient reweighting.

A weighting mode maps per-unit losses (and classes) to logits ``F``; the
softmax of ``F`` over the batch is the pmf ``p`` that replaces the uniform
``1/B`` in the mini-batch gradient average::

    delta = sum_i p_i * grad L_i

The pmf is always treated as a constant during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
import torch

PER_EXAMPLE = "example"
PER_SOURCE = "source"


class ReweightError(ValueError):
    pass


class MissingClassWeight(ReweightError):
    pass


class EmptyBatch(ReweightError):
    pass


class DimensionMismatch(ReweightError):
    pass


@dataclass(frozen=True)
class Uniform:
    units = PER_EXAMPLE


@dataclass(frozen=True)
class Robust:
    """Up-weights high-loss units: ``F = alpha * L``."""

    alpha: float = 0.0
    units = PER_EXAMPLE

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ReweightError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class Curriculum:
    """Up-weights low-loss units early: ``F = beta * L`` with ``beta = -1 / (a + b * t)``.

    ``t`` is the epoch index, or the optimizer step when ``per_step`` is set.
    """

    a: float = 10.0
    b: float = 0.5
    per_step: bool = False
    units = PER_EXAMPLE

    def __post_init__(self):
        if not (self.a > 0 and self.b >= 0):
            raise ReweightError(f"need a > 0 and b >= 0, got a={self.a}, b={self.b}")

    def beta(self, clock: "EpochClock") -> float:
        t = clock.step if self.per_step else clock.epoch
        return -1.0 / (self.a + self.b * t)


@dataclass(frozen=True)
class ClassBias:
    """Fixed per-class logits ``F = gamma[c]``.

    With ``granularity="source"`` each (example, source) pair is a unit
    carrying the class of that source; with ``"example"`` an example takes the
    class of its first source.
    """

    gamma: Mapping[int, float] = field(default_factory=dict)
    granularity: str = PER_SOURCE

    def __post_init__(self):
        if self.granularity not in (PER_EXAMPLE, PER_SOURCE):
            raise ReweightError(f"unknown granularity {self.granularity!r}")
        object.__setattr__(self, "gamma", {int(k): float(v) for k, v in dict(self.gamma).items()})

    @property
    def units(self) -> str:
        return self.granularity

    def __hash__(self):
        return hash((tuple(sorted(self.gamma.items())), self.granularity))


WeightingMode = Union[Uniform, Robust, Curriculum, ClassBias]


@dataclass
class EpochClock:
    epoch: int = 0
    step: int = 0

    def tick(self) -> None:
        self.step += 1

    def next_epoch(self) -> None:
        self.epoch += 1


@dataclass(frozen=True)
class BatchPMF:
    weights: np.ndarray
    units: str = PER_EXAMPLE
    entropy: float = 0.0
    max_weight: float = 0.0
    min_logit: float = 0.0
    max_logit: float = 0.0

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, n: int, units: str = PER_EXAMPLE) -> "BatchPMF":
        return softmax_pmf(np.zeros(n), units=units)

    @classmethod
    def one_hot(cls, n: int, index: int, units: str = PER_EXAMPLE) -> "BatchPMF":
        w = np.zeros(n)
        w[index] = 1.0
        return cls(w, units, 0.0, 1.0, 0.0, 0.0)


def weighting_values(mode: WeightingMode, losses, classes=None, clock: EpochClock | None = None) -> np.ndarray:
    """Softmax logits ``F`` for each unit under ``mode``."""
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ReweightError("losses must be finite")
    clock = clock or EpochClock()
    if isinstance(mode, Uniform):
        return np.zeros_like(losses)
    if isinstance(mode, Robust):
        return mode.alpha * losses
    if isinstance(mode, Curriculum):
        return mode.beta(clock) * losses
    if isinstance(mode, ClassBias):
        if classes is None:
            raise MissingClassWeight("ClassBias needs per-unit classes")
        classes = np.asarray(classes)
        if classes.shape != losses.shape:
            raise DimensionMismatch(f"{classes.shape} classes for {losses.shape} losses")
        missing = set(classes.ravel().tolist()) - set(mode.gamma)
        if missing:
            raise MissingClassWeight(f"no gamma for classes {sorted(missing)}")
        return np.vectorize(mode.gamma.__getitem__, otypes=[np.float64])(classes)
    raise TypeError(f"unknown weighting mode {mode!r}")


def softmax_pmf(logits, mask=None, units: str = PER_EXAMPLE) -> BatchPMF:
    """Numerically stable softmax over units; masked-out units get weight 0."""
    f = np.asarray(logits, dtype=np.float64).ravel()
    if f.size == 0:
        raise EmptyBatch("cannot build a pmf over zero units")
    if not np.all(np.isfinite(f)):
        raise ReweightError("logits must be finite")
    keep = np.ones(f.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if not keep.any():
        raise EmptyBatch("every unit is masked")
    shifted = np.where(keep, f - f[keep].max(), -np.inf)
    e = np.exp(shifted)
    p = e / e.sum()
    nz = p[p > 0]
    return BatchPMF(
        weights=p,
        units=units,
        entropy=float(-(nz * np.log(nz)).sum()),
        max_weight=float(p.max()),
        min_logit=float(f[keep].min()),
        max_logit=float(f[keep].max()),
    )


def mode_pmf(mode: WeightingMode, losses, classes=None, clock: EpochClock | None = None, mask=None) -> BatchPMF:
    return softmax_pmf(weighting_values(mode, losses, classes, clock), mask=mask, units=mode.units)


def biased_update(per_unit_gradients, pmf: BatchPMF):
    """``sum_i p_i g_i`` over the leading (unit) axis."""
    w = np.asarray(pmf.weights if isinstance(pmf, BatchPMF) else pmf, dtype=np.float64)
    if isinstance(per_unit_gradients, torch.Tensor):
        g = per_unit_gradients
        if g.shape[0] != w.shape[0]:
            raise DimensionMismatch(f"{g.shape[0]} gradients for {w.shape[0]} weights")
        return torch.tensordot(torch.as_tensor(w, dtype=g.dtype), g, dims=1)
    g = np.asarray(per_unit_gradients, dtype=np.float64)
    if g.shape[0] != w.shape[0]:
        raise DimensionMismatch(f"{g.shape[0]} gradients for {w.shape[0]} weights")
    return np.tensordot(w, g, axes=1)


def weighted_objective(per_unit_losses: torch.Tensor, pmf: BatchPMF) -> torch.Tensor:
    """``sum_i p_i L_i`` with ``p`` as constants; its gradient is :func:`biased_update`."""
    losses = per_unit_losses.reshape(-1)
    w = torch.as_tensor(np.asarray(pmf.weights), dtype=losses.dtype)
    if w.shape != losses.shape:
        raise DimensionMismatch(f"{w.shape[0]} weights for {losses.shape[0]} losses")
    # Masked units may carry placeholder losses; keep them out of the sum entirely.
    return torch.where(w > 0, w * losses, torch.zeros_like(losses)).sum()
