"""Flat parameter storage, Adam, cosine annealing and a central-difference oracle.

Everything here works in float64. Trainers hold a single ``ParamVector`` whose
named segments are numpy views into one contiguous buffer, so optimizer state
and gradient checks can treat the whole model as one vector.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, LayoutError, NumericError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ParamVector:
    """A flat float64 vector partitioned into named, shaped segments."""

    def __init__(self, layout: Iterable[tuple[str, Sequence[int]]], values: np.ndarray | None = None):
        self.layout: Layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in layout)
        self._slices: dict[str, slice] = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._slices:
                raise LayoutError(f"duplicate segment name {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset
        if values is None:
            self.values = np.zeros(offset, dtype=np.float64)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (offset,):
                raise LayoutError(f"values have shape {values.shape}, layout needs ({offset},)")
            self.values = values

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def shape_of(self, name: str) -> tuple[int, ...]:
        return dict(self.layout)[name]

    def segment_slice(self, name: str) -> slice:
        try:
            return self._slices[name]
        except KeyError:
            raise LayoutError(f"unknown segment {name!r}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped."""
        return self.values[self.segment_slice(name)].reshape(self.shape_of(name))

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def segment_names(self, prefix: str) -> list[str]:
        """Segments named ``prefix`` exactly or ``prefix.<anything>``."""
        return [n for n in self.names if n == prefix or n.startswith(prefix + ".")]

    def mask(self, names: Iterable[str]) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for name in names:
            m[self.segment_slice(name)] = True
        return m

    def copy(self) -> ParamVector:
        return ParamVector(self.layout, self.values.copy())

    def zeros_like(self) -> ParamVector:
        return ParamVector(self.layout)

    def same_layout(self, other: ParamVector) -> bool:
        return self.layout == other.layout

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ParamVector(size={self.size}, segments={self.names})"


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamVector, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(np.zeros(params.size), np.zeros(params.size), 0, beta1, beta2, eps)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update.

    Coordinates whose gradient is exactly zero are skipped: neither the
    parameter nor its moments change. This makes frozen segments (whose
    gradient is zeroed by the trainer) bit-identical across steps regardless
    of accumulated momentum.
    """
    if not params.same_layout(grads) or state.first_moment.shape != (params.size,):
        raise LayoutError("params, grads and optimizer state do not share a layout")
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    g = grads.values
    if not np.all(np.isfinite(g)):
        bad = [n for n in grads.names if not np.all(np.isfinite(grads[n]))]
        raise NumericError(f"non-finite gradient in segment(s) {', '.join(bad)}")

    t = state.step_count + 1
    m = state.first_moment.copy()
    v = state.second_moment.copy()
    active = g != 0.0
    ga = g[active]
    m[active] = state.beta1 * m[active] + (1.0 - state.beta1) * ga
    v[active] = state.beta2 * v[active] + (1.0 - state.beta2) * ga * ga
    m_hat = m[active] / (1.0 - state.beta1**t)
    v_hat = v[active] / (1.0 - state.beta2**t)
    new = params.values.copy()
    new[active] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.eps)
    return ParamVector(params.layout, new), new_state


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float
    total_steps: int
    kind: str = "cosine"
    min_factor: float = 1e-6

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise DomainError("initial_lr must be positive")
        if self.total_steps < 1:
            raise DomainError("total_steps must be a positive integer")
        if self.kind != "cosine":
            raise DomainError(f"unsupported schedule kind {self.kind!r}")


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise DomainError(f"step {step} outside [0, {schedule.total_steps}]")
    lr = schedule.initial_lr * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    return max(lr, schedule.min_factor * schedule.initial_lr)


@dataclass
class GradCheckReport:
    tol: float
    h: float
    errors: dict[str, float] = field(default_factory=dict)
    evaluations: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.errors.values())

    def summary(self) -> str:
        parts = ", ".join(f"{name}={err:.2e}" for name, err in self.errors.items())
        return f"{'PASS' if self.passed else 'FAIL'} max={self.max_error:.2e} tol={self.tol:.0e} [{parts}]"


def numeric_gradient(
    loss: Callable[[ParamVector], float],
    params: ParamVector,
    h: float = 1e-5,
    segments: Iterable[str] | None = None,
) -> ParamVector:
    """Central-difference gradient of ``loss`` over the chosen segments."""
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    names = params.names if segments is None else list(segments)
    out = params.zeros_like()
    probe = params.copy()
    for name in names:
        sl = params.segment_slice(name)
        for idx in range(sl.start, sl.stop):
            orig = probe.values[idx]
            probe.values[idx] = orig + h
            f_plus = loss(probe)
            probe.values[idx] = orig - h
            f_minus = loss(probe)
            probe.values[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"loss is non-finite at coordinate {idx} (segment {name})")
            out.values[idx] = (f_plus - f_minus) / (2.0 * h)
    return out


def finite_diff_check(
    loss: Callable[[ParamVector], float],
    params: ParamVector,
    analytic: ParamVector,
    h: float = 1e-5,
    tol: float = 1e-5,
    segments: Iterable[str] | None = None,
    scale_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences segment by segment.

    The error for a segment is ``max_i |a_i - n_i| / max(max_i |n_i|, scale_floor)``:
    the worst coordinate, measured relative to the segment's gradient scale.
    Empty segments pass vacuously.
    """
    if not params.same_layout(analytic):
        raise LayoutError("analytic gradient layout differs from params")
    names = params.names if segments is None else list(segments)
    numeric = numeric_gradient(loss, params, h, names)
    report = GradCheckReport(tol=tol, h=h)
    for name in names:
        a = analytic[name].ravel()
        n = numeric[name].ravel()
        report.evaluations += 2 * n.size
        if n.size == 0:
            report.errors[name] = 0.0
            continue
        scale = max(float(np.max(np.abs(n))), scale_floor)
        report.errors[name] = float(np.max(np.abs(a - n))) / scale
    return report
