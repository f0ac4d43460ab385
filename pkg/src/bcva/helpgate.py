"""Ask-for-help gate and offline threshold sweeping.

The runtime rule fires when the gate signal stays at or below a threshold
epsilon for nu consecutive frames. Offline, recorded episodes are replayed
against a grid of (epsilon, nu) pairs and scored with an episode-level
confusion matrix: a failure episode counts as a true positive when the gate
would have fired anywhere in its trace.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence


class GateError(ValueError):
    """Invalid gate configuration or sweep input."""


@dataclass(frozen=True)
class GateConfig:
    """Fire when the signal is <= epsilon for nu consecutive frames."""

    epsilon: float
    nu: int
    signal: str = "value"  # "value" or "classifier"

    def __post_init__(self):
        if self.nu < 1:
            raise GateError(f"nu must be >= 1, got {self.nu}")
        if self.signal not in ("value", "classifier"):
            raise GateError(f"unknown gate signal {self.signal!r}")


@dataclass(frozen=True)
class GateState:
    consecutive_below: int = 0


def gate_update(
    state: GateState, value: float, config: GateConfig
) -> tuple[GateState, bool]:
    """Advance the streaming gate by one frame.

    The below-threshold counter saturates at nu; `fire` is True exactly on
    the frame where it reaches nu.
    """
    if value <= config.epsilon:
        count = min(state.consecutive_below + 1, config.nu)
        fired = count == config.nu and state.consecutive_below == config.nu - 1
        return GateState(consecutive_below=count), fired
    return GateState(consecutive_below=0), False


def evaluate_episode(
    values: Sequence[float], config: GateConfig
) -> tuple[bool, Optional[int]]:
    """Replay the streaming gate over a completed trace.

    Returns whether it ever fires and the first firing frame index.
    """
    if len(values) == 0:
        raise GateError("cannot evaluate an empty value trace")
    state = GateState()
    for i, v in enumerate(values):
        state, fired = gate_update(state, float(v), config)
        if fired:
            return True, i
    return False, None


@dataclass(frozen=True)
class ConfusionMatrix:
    """Episode counts; failure episodes are the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise GateError("confusion counts must be >= 0")

    @property
    def precision(self) -> Optional[float]:
        denom = self.tp + self.fp
        return self.tp / denom if denom else None

    @property
    def recall(self) -> Optional[float]:
        denom = self.tp + self.fn
        return self.tp / denom if denom else None

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0.0:
            return None
        return 2.0 * p * r / (p + r)

    @property
    def accuracy(self) -> Optional[float]:
        total = self.tp + self.fp + self.tn + self.fn
        return (self.tp + self.tn) / total if total else None


@dataclass(frozen=True)
class SweepCell:
    epsilon: float
    nu: int
    matrix: ConfusionMatrix


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[SweepCell, ...]
    best: Optional[SweepCell]  # argmax by F1; ties prefer smaller nu, larger epsilon

    def cell(self, epsilon: float, nu: int) -> SweepCell:
        for c in self.cells:
            if c.epsilon == epsilon and c.nu == nu:
                return c
        raise KeyError((epsilon, nu))

    @property
    def best_f1(self) -> float:
        """Best cell's F1, or 0.0 when no cell had a defined F1."""
        if self.best is None or self.best.matrix.f1 is None:
            return 0.0
        return self.best.matrix.f1


def sweep(
    episodes: Sequence[tuple[Sequence[float], bool]],
    epsilons: Sequence[float],
    nus: Sequence[int],
) -> SweepResult:
    """Episode-level confusion matrices over an (epsilon, nu) grid.

    `episodes` pairs each value trace with its ground truth (True = failure).
    Cells with undefined F1 are kept in the grid but excluded from the argmax.
    """
    if len(epsilons) == 0 or len(nus) == 0:
        raise GateError("sweep grids must be non-empty")
    if len(episodes) == 0:
        raise GateError("sweep needs at least one episode")

    # longest run of frames at or below each epsilon decides every nu at once
    runs_by_eps: dict[float, list[int]] = {}
    labels = [bool(is_failure) for _, is_failure in episodes]
    for eps in epsilons:
        runs = []
        for values, _ in episodes:
            if len(values) == 0:
                raise GateError("cannot sweep an empty value trace")
            best_run = run = 0
            for v in values:
                run = run + 1 if float(v) <= eps else 0
                best_run = max(best_run, run)
            runs.append(best_run)
        runs_by_eps[eps] = runs

    cells = []
    for eps in epsilons:
        for nu in nus:
            if nu < 1:
                raise GateError(f"nu must be >= 1, got {nu}")
            tp = fp = tn = fn = 0
            for longest, is_failure in zip(runs_by_eps[eps], labels):
                fired = longest >= nu
                if is_failure and fired:
                    tp += 1
                elif is_failure:
                    fn += 1
                elif fired:
                    fp += 1
                else:
                    tn += 1
            cells.append(SweepCell(eps, nu, ConfusionMatrix(tp, fp, tn, fn)))

    best = None
    for cell in cells:
        f1 = cell.matrix.f1
        if f1 is None:
            continue
        if best is None or f1 > best.matrix.f1 or (
            f1 == best.matrix.f1
            and (cell.nu, -cell.epsilon) < (best.nu, -best.epsilon)
        ):
            best = cell
    return SweepResult(cells=tuple(cells), best=best)


def default_epsilons() -> list[float]:
    return [round(-0.40 + 0.05 * i, 2) for i in range(8)]  # -0.40 .. -0.05


def default_nus() -> list[int]:
    return [5, 10, 15, 20, 25, 30]  # 0.5 s .. 3.0 s at 10 Hz


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def export_heatmap(result: SweepResult, path: str | os.PathLike) -> None:
    """CSV of every grid cell, with the best cell marked in its own column."""
    lines = ["epsilon,nu,tp,fp,tn,fn,precision,recall,f1,accuracy,best"]
    for cell in result.cells:
        m = cell.matrix
        is_best = result.best is not None and cell == result.best
        lines.append(
            f"{cell.epsilon!r},{cell.nu},{m.tp},{m.fp},{m.tn},{m.fn},"
            f"{_fmt(m.precision)},{_fmt(m.recall)},{_fmt(m.f1)},{_fmt(m.accuracy)},"
            f"{'*' if is_best else ''}"
        )
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
