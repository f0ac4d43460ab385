"""Shared builders for synthetic trajectories and datasets."""

from __future__ import annotations

import numpy as np

from bcva.trajlog import (
    Action,
    Dataset,
    FailureMode,
    KinematicState,
    Observation,
    ObservationSpec,
    Outcome,
    Provenance,
    Step,
    Trajectory,
)

SMALL_SPEC = ObservationSpec(width=4, height=4, channels=1)


def quantized_pixels(rng: np.random.Generator, spec: ObservationSpec) -> np.ndarray:
    return rng.integers(0, 256, size=spec.size).astype(np.float64) / 255.0


def random_observation(rng: np.random.Generator, spec: ObservationSpec = SMALL_SPEC,
                       n_joints: int = 1) -> Observation:
    kin = KinematicState(
        joint_angles=tuple(float(v) for v in rng.uniform(-1.5, 1.5, n_joints)),
        base_pose=tuple(float(v) for v in rng.uniform(-2.0, 2.0, 3)),
    )
    return Observation(pixels=quantized_pixels(rng, spec), kinematics=kin)


def random_action(rng: np.random.Generator) -> Action:
    return Action(
        base_forward=float(rng.uniform(-0.5, 0.5)),
        base_turn=float(rng.uniform(-1.5, 1.5)),
        wrist_rate=float(rng.uniform(-2.0, 2.0)),
        terminate=float(rng.uniform(0.0, 1.0)),
    )


def random_outcome(rng: np.random.Generator, *, labelable_only: bool = True) -> Outcome:
    roll = rng.random()
    if roll < 0.5:
        return Outcome.success()
    if labelable_only or roll < 0.9:
        mode = list(FailureMode)[int(rng.integers(0, len(FailureMode)))]
        return Outcome.failure(mode)
    return Outcome.asked_for_help()


def make_trajectory(
    rng: np.random.Generator,
    episode_id: str,
    *,
    length: int | None = None,
    outcome: Outcome | None = None,
    provenance: Provenance | None = None,
    spec: ObservationSpec = SMALL_SPEC,
) -> Trajectory:
    if length is None:
        length = int(rng.integers(1, 12))
    if outcome is None:
        outcome = random_outcome(rng)
    if provenance is None:
        if outcome.is_success and rng.random() < 0.3:
            provenance = Provenance.expert()
        else:
            provenance = Provenance.rollout("policy-0")
    if provenance.is_expert:
        outcome = Outcome.success()
    steps = tuple(
        Step(index=i, observation=random_observation(rng, spec), action=random_action(rng))
        for i in range(length)
    )
    return Trajectory(
        episode_id=episode_id,
        seed=int(rng.integers(0, 2**31)),
        provenance=provenance,
        steps=steps,
        outcome=outcome,
    )


def make_dataset(
    rng: np.random.Generator,
    n_trajectories: int,
    *,
    spec: ObservationSpec = SMALL_SPEC,
    max_length: int = 12,
    labelable_only: bool = True,
) -> Dataset:
    trajectories = tuple(
        make_trajectory(
            rng,
            f"ep-{i:04d}",
            length=int(rng.integers(1, max_length + 1)),
            outcome=random_outcome(rng, labelable_only=labelable_only),
            spec=spec,
        )
        for i in range(n_trajectories)
    )
    return Dataset(spec=spec, trajectories=trajectories)
