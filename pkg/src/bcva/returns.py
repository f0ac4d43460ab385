"""Offline policy evaluation: per-step discounted returns under three metrics.

Every labeled step gets G(s_j) = gamma^(Delta_j) * r, where r is the terminal
reward (+1 success, -1 failure) and Delta_j is the accumulated step distance
from s_j to the final recorded state. The step distance is 1 (time metric), a
normalized pixel-difference sum, or a normalized kinematic-difference sum.
Normalization statistics are fit once on the training split and frozen so
validation labeling reuses them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .trajlog import (
    Dataset,
    DatasetError,
    Observation,
    Trajectory,
    UnlabeledOutcomeError,
    terminal_reward,
)


class DistanceMetric(str, Enum):
    TIME = "time"
    PIXEL = "pixel"
    KINEMATIC = "kinematic"

    @classmethod
    def from_name(cls, name: str) -> "DistanceMetric":
        """Parse a metric name; accepts "movement" as an alias for kinematic."""
        key = name.strip().lower()
        if key == "movement":
            return cls.KINEMATIC
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown distance metric {name!r}; expected time, pixel, "
                "or movement/kinematic"
            ) from None


@dataclass(frozen=True)
class DistanceStats:
    """Mean/std of raw per-step difference sums, used to normalize distances."""

    mu_pixel: float
    sigma_pixel: float
    mu_joint: float
    sigma_joint: float
    mu_xyz: float
    sigma_xyz: float

    def __post_init__(self):
        for name in ("sigma_pixel", "sigma_joint", "sigma_xyz"):
            if getattr(self, name) <= 0.0:
                raise DatasetError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class ReturnConfig:
    gamma: float = 0.99
    metric: DistanceMetric = DistanceMetric.PIXEL
    clamp_delta_at_zero: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise DatasetError(f"gamma must be in (0, 1), got {self.gamma}")


@dataclass(frozen=True)
class LabeledTrajectory:
    """A trajectory plus its per-step discounted returns."""

    trajectory: Trajectory
    returns: tuple[float, ...]
    metric: DistanceMetric
    stats: Optional[DistanceStats]

    def __post_init__(self):
        if len(self.returns) != len(self.trajectory.steps):
            raise DatasetError(
                f"{len(self.returns)} returns for {len(self.trajectory.steps)} steps"
            )


def raw_pixel_diff(s_a: Observation, s_b: Observation) -> float:
    """Un-normalized sum of absolute pixel differences between two frames."""
    if s_a.pixels.shape != s_b.pixels.shape:
        raise DatasetError(
            f"pixel shape mismatch: {s_a.pixels.shape} vs {s_b.pixels.shape}"
        )
    return float(np.abs(s_b.pixels - s_a.pixels).sum())


def raw_kinematic_diff(s_a: Observation, s_b: Observation) -> tuple[float, float]:
    """Un-normalized (joint, base) absolute-difference sums.

    The base part uses planar position displacement (x, y); heading is not a
    Cartesian coordinate and joint angles already cover articulation.
    """
    ka, kb = s_a.kinematics, s_b.kinematics
    if len(ka.joint_angles) != len(kb.joint_angles):
        raise DatasetError(
            f"joint count mismatch: {len(ka.joint_angles)} vs {len(kb.joint_angles)}"
        )
    joint_part = float(
        sum(abs(b - a) for a, b in zip(ka.joint_angles, kb.joint_angles))
    )
    base_part = float(
        abs(kb.base_pose[0] - ka.base_pose[0]) + abs(kb.base_pose[1] - ka.base_pose[1])
    )
    return joint_part, base_part


def _consecutive_raw_diffs(trajectories: Iterable[Trajectory]):
    """Raw diffs over all consecutive step pairs, in trajectory-then-step order."""
    pixel, joint, base = [], [], []
    for traj in trajectories:
        obs = [s.observation for s in traj.steps]
        for a, b in zip(obs, obs[1:]):
            pixel.append(raw_pixel_diff(a, b))
            jp, bp = raw_kinematic_diff(a, b)
            joint.append(jp)
            base.append(bp)
    return pixel, joint, base


def stats_from_raw_diffs(
    pixel: Sequence[float], joint: Sequence[float], base: Sequence[float]
) -> DistanceStats:
    """Population mean/std of raw diff channels; zero std is replaced by 1."""

    def mean_std(values: Sequence[float], channel: str) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        mu = float(arr.mean())
        sigma = float(arr.std())  # population (N) denominator
        if sigma == 0.0:
            warnings.warn(
                f"{channel} raw diffs have zero spread; using sigma=1", stacklevel=3
            )
            sigma = 1.0
        return mu, sigma

    mu_p, sd_p = mean_std(pixel, "pixel")
    mu_j, sd_j = mean_std(joint, "joint")
    mu_x, sd_x = mean_std(base, "base")
    return DistanceStats(
        mu_pixel=mu_p,
        sigma_pixel=sd_p,
        mu_joint=mu_j,
        sigma_joint=sd_j,
        mu_xyz=mu_x,
        sigma_xyz=sd_x,
    )


def fit_distance_stats(dataset: Dataset) -> DistanceStats:
    """Fit normalization stats over all consecutive step pairs of a dataset."""
    pixel, joint, base = _consecutive_raw_diffs(dataset.trajectories)
    if not pixel:
        raise DatasetError(
            "cannot fit distance stats: dataset has no consecutive step pairs"
        )
    return stats_from_raw_diffs(pixel, joint, base)


def step_distance(
    s_a: Observation,
    s_b: Observation,
    metric: DistanceMetric,
    stats: Optional[DistanceStats],
    clamp: bool = True,
) -> float:
    """Normalized per-step distance; the time metric is exactly 1."""
    if metric is DistanceMetric.TIME:
        return 1.0
    if stats is None:
        raise DatasetError(f"{metric.value} metric requires fitted distance stats")
    if metric is DistanceMetric.PIXEL:
        d = (raw_pixel_diff(s_a, s_b) - stats.mu_pixel) / stats.sigma_pixel + 0.5
    else:
        jp, bp = raw_kinematic_diff(s_a, s_b)
        d = (
            (jp - stats.mu_joint) / (2.0 * stats.sigma_joint)
            + (bp - stats.mu_xyz) / (2.0 * stats.sigma_xyz)
            + 0.5
        )
    if clamp:
        d = max(d, 0.0)
    return d


def accumulated_distances(
    trajectory: Trajectory, config: ReturnConfig, stats: Optional[DistanceStats]
) -> list[float]:
    """Suffix sums Delta_j of per-step distances; the final step gets 0."""
    obs = [s.observation for s in trajectory.steps]
    deltas = [
        step_distance(a, b, config.metric, stats, config.clamp_delta_at_zero)
        for a, b in zip(obs, obs[1:])
    ]
    acc = [0.0] * len(obs)
    for j in range(len(obs) - 2, -1, -1):
        acc[j] = acc[j + 1] + deltas[j]
    return acc


def discounted_returns(
    trajectory: Trajectory, config: ReturnConfig, stats: Optional[DistanceStats]
) -> LabeledTrajectory:
    """Label every step with G(s_j) = gamma^Delta_j * r."""
    if not trajectory.outcome.is_labelable:
        raise UnlabeledOutcomeError(
            f"trajectory {trajectory.episode_id!r} ended with asked_for_help and "
            "cannot be labeled"
        )
    r = terminal_reward(trajectory.outcome)
    acc = accumulated_distances(trajectory, config, stats)
    return LabeledTrajectory(
        trajectory=trajectory,
        returns=tuple(config.gamma**d * r for d in acc),
        metric=config.metric,
        stats=stats,
    )


def label_dataset(
    dataset: Dataset,
    config: ReturnConfig,
    stats: Optional[DistanceStats] = None,
) -> list[LabeledTrajectory]:
    """Label every success/failure trajectory in a dataset.

    Stats are taken from the argument, then the dataset header, then fit on
    the dataset itself (time metric needs none). Help-request trajectories
    are skipped: they carry no terminal reward.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot label an empty dataset")
    if stats is None:
        stats = dataset.distance_stats
    if stats is None and config.metric is not DistanceMetric.TIME:
        stats = fit_distance_stats(dataset)
    return [
        discounted_returns(traj, config, stats)
        for traj in dataset.trajectories
        if traj.outcome.is_labelable
    ]
