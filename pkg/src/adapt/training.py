"""Bits shared by the three trainers: reports, mini-batching, masked updates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .model import ModelState
from .numerics import AdamState, LrSchedule, ParamVector, adam_step, cosine_lr


@dataclass
class TrainReport:
    stage: int
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    best_epoch: int | None = None
    summary: dict = field(default_factory=dict)

    def log(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        writer = csv.DictWriter(buf, fieldnames=self.columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in self.columns})
        return buf.getvalue()


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Optimizer:
    """Adam over the chosen segments of a model's parameter vector with a cosine schedule.

    ``initial_lr == 0`` turns every step into a no-op.
    """

    def __init__(self, params: ParamVector, trainable: list[str], initial_lr: float, total_steps: int):
        self.mask = params.mask(trainable)
        self.state = AdamState.fresh(params)
        self.schedule = LrSchedule(initial_lr, max(1, total_steps)) if initial_lr > 0 else None
        self.step_index = 0

    def step(self, model: ModelState, grads: ParamVector) -> ModelState:
        if self.schedule is None:
            return model
        grads.values[~self.mask] = 0.0
        lr = cosine_lr(min(self.step_index, self.schedule.total_steps), self.schedule)
        self.step_index += 1
        params, self.state = adam_step(model.params, grads, self.state, lr)
        return model.with_params(params)


def check_finite(loss: float, model: ModelState, what: str) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"{what} became non-finite", last_good=model.copy())
