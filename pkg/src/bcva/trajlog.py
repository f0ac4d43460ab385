"""Trajectory data model, on-disk dataset format, and deterministic splitting.

The dataset file is line-delimited JSON: the first line is a header record
(format id, version, observation spec, optional distance stats and label
config), every following line is one complete trajectory. Pixels are stored
as 8-bit quantized levels (value = level/255); all other numbers are plain
decimal JSON. The format is append-friendly so datasets can grow
incrementally across collection rounds.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

FORMAT_ID = "bcva-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Invalid in-memory dataset construction."""


class DatasetFormatError(DatasetError):
    """Malformed dataset file; message names the line and field."""

    def __init__(self, line_no: int, field_name: str, message: str):
        super().__init__(f"line {line_no}: {field_name}: {message}")
        self.line_no = line_no
        self.field_name = field_name


class UnlabeledOutcomeError(DatasetError):
    """Raised when an outcome carries no terminal reward."""


@dataclass(frozen=True)
class ObservationSpec:
    """Fixed image geometry for every observation in a dataset."""

    width: int
    height: int
    channels: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise DatasetError(f"observation spec dimensions must be >= 1, got {self}")

    @property
    def size(self) -> int:
        return self.width * self.height * self.channels


@dataclass(frozen=True)
class KinematicState:
    """Joint angles plus base pose (x, y, heading)."""

    joint_angles: tuple[float, ...]
    base_pose: tuple[float, float, float]

    def __post_init__(self):
        values = list(self.joint_angles) + list(self.base_pose)
        if len(self.base_pose) != 3:
            raise DatasetError("base_pose must be (x, y, heading)")
        if not all(math.isfinite(v) for v in values):
            raise DatasetError(f"non-finite kinematic value in {values}")


@dataclass(frozen=True, eq=False)
class Observation:
    """Flat pixel vector in [0, 1] plus the kinematic state."""

    pixels: np.ndarray
    kinematics: KinematicState

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1)
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.pixels, other.pixels)
            and self.kinematics == other.kinematics
        )

    def __hash__(self):
        return hash((self.pixels.tobytes(), self.kinematics))


@dataclass(frozen=True)
class Action:
    """Base velocity command, wrist rate, and termination signal."""

    base_forward: float
    base_turn: float
    wrist_rate: float
    terminate: float

    def __post_init__(self):
        for name in ("base_forward", "base_turn", "wrist_rate", "terminate"):
            if not math.isfinite(getattr(self, name)):
                raise DatasetError(f"action field {name} is not finite")
        if not 0.0 <= self.terminate <= 1.0:
            raise DatasetError(f"terminate must be in [0, 1], got {self.terminate}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.base_forward, self.base_turn, self.wrist_rate, self.terminate]
        )


@dataclass(frozen=True)
class Step:
    index: int
    observation: Observation
    action: Action


class FailureMode(str, Enum):
    COLLISION = "collision"
    GRASP_MISS = "grasp_miss"
    TIMEOUT = "timeout"
    PUSH_WHILE_LATCHED = "push_while_latched"


@dataclass(frozen=True)
class Outcome:
    """Terminal result of an episode: success, a failure mode, or a help request."""

    kind: str
    failure_mode: Optional[FailureMode] = None

    _KINDS = ("success", "failure", "asked_for_help")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise DatasetError(f"unknown outcome kind {self.kind!r}")
        if self.kind == "failure" and self.failure_mode is None:
            raise DatasetError("failure outcome requires a mode")
        if self.kind != "failure" and self.failure_mode is not None:
            raise DatasetError(f"{self.kind} outcome cannot carry a failure mode")

    @classmethod
    def success(cls) -> "Outcome":
        return cls("success")

    @classmethod
    def failure(cls, mode: FailureMode) -> "Outcome":
        return cls("failure", FailureMode(mode))

    @classmethod
    def asked_for_help(cls) -> "Outcome":
        return cls("asked_for_help")

    @property
    def is_success(self) -> bool:
        return self.kind == "success"

    @property
    def is_failure(self) -> bool:
        return self.kind == "failure"

    @property
    def is_asked_for_help(self) -> bool:
        return self.kind == "asked_for_help"

    @property
    def is_labelable(self) -> bool:
        """True when the episode carries a terminal reward (success or failure)."""
        return self.kind != "asked_for_help"


@dataclass(frozen=True)
class Provenance:
    """Where a trajectory came from: expert demo or a policy rollout."""

    kind: str
    policy_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("expert", "rollout"):
            raise DatasetError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "rollout" and not self.policy_id:
            raise DatasetError("rollout provenance requires a policy_id")
        if self.kind == "expert" and self.policy_id is not None:
            raise DatasetError("expert provenance carries no policy_id")

    @classmethod
    def expert(cls) -> "Provenance":
        return cls("expert")

    @classmethod
    def rollout(cls, policy_id: str) -> "Provenance":
        return cls("rollout", policy_id)

    @property
    def is_expert(self) -> bool:
        return self.kind == "expert"


@dataclass(frozen=True)
class Trajectory:
    """One complete episode: ordered steps plus outcome and provenance."""

    episode_id: str
    seed: int
    provenance: Provenance
    steps: tuple[Step, ...]
    outcome: Outcome

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 1:
            raise DatasetError(f"trajectory {self.episode_id!r} has no steps")
        indices = [s.index for s in self.steps]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DatasetError(
                f"trajectory {self.episode_id!r}: step indices must strictly increase"
            )
        # Expert demonstrations are success cases by definition.
        if self.provenance.is_expert and not self.outcome.is_success:
            raise DatasetError(
                f"trajectory {self.episode_id!r}: expert demo with non-success outcome"
            )

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class Dataset:
    """A collection of trajectories sharing one observation spec."""

    spec: ObservationSpec
    trajectories: tuple[Trajectory, ...]
    distance_stats: "Optional[DistanceStats]" = None  # noqa: F821

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        seen: set[str] = set()
        joint_count: Optional[int] = None
        for traj in self.trajectories:
            if traj.episode_id in seen:
                raise DatasetError(f"duplicate episode_id {traj.episode_id!r}")
            seen.add(traj.episode_id)
            for step in traj.steps:
                if step.observation.pixels.size != self.spec.size:
                    raise DatasetError(
                        f"trajectory {traj.episode_id!r} step {step.index}: "
                        f"pixel length {step.observation.pixels.size} does not "
                        f"match spec size {self.spec.size}"
                    )
                n_joints = len(step.observation.kinematics.joint_angles)
                if joint_count is None:
                    joint_count = n_joints
                elif n_joints != joint_count:
                    raise DatasetError(
                        f"trajectory {traj.episode_id!r} step {step.index}: "
                        f"joint count {n_joints} differs from {joint_count}"
                    )

    def __len__(self) -> int:
        return len(self.trajectories)

    def episode_ids(self) -> list[str]:
        return [t.episode_id for t in self.trajectories]


def terminal_reward(outcome: Outcome) -> float:
    """Terminal reward: +1 for success, -1 for failure.

    Help-request episodes carry no reward and are rejected.
    """
    if outcome.is_success:
        return 1.0
    if outcome.is_failure:
        return -1.0
    raise UnlabeledOutcomeError(
        "asked_for_help is an unlabeled outcome with no terminal reward"
    )


# ---------------------------------------------------------------------------
# serialization


def _quantize_pixels(pixels: np.ndarray, line_ctx: str) -> list[int]:
    levels = pixels * 255.0
    rounded = np.rint(levels)
    if not np.allclose(levels, rounded, atol=1e-9, rtol=0.0):
        raise DatasetError(
            f"{line_ctx}: pixels are not 8-bit quantized (multiples of 1/255); "
            "quantize at render time before writing"
        )
    return [int(v) for v in rounded]


def _trajectory_record(traj: Trajectory, returns: Optional[Sequence[float]]) -> dict:
    steps = []
    for i, step in enumerate(traj.steps):
        rec = {
            "index": step.index,
            "pixels": _quantize_pixels(
                step.observation.pixels, f"episode {traj.episode_id!r} step {i}"
            ),
            "kinematics": {
                "joint_angles": list(step.observation.kinematics.joint_angles),
                "base_pose": list(step.observation.kinematics.base_pose),
            },
            "action": {
                "base_forward": step.action.base_forward,
                "base_turn": step.action.base_turn,
                "wrist_rate": step.action.wrist_rate,
                "terminate": step.action.terminate,
            },
        }
        if returns is not None:
            rec["return"] = float(returns[i])
        steps.append(rec)
    record = {
        "episode_id": traj.episode_id,
        "seed": traj.seed,
        "provenance": {"kind": traj.provenance.kind},
        "outcome": {"kind": traj.outcome.kind},
        "steps": steps,
    }
    if traj.provenance.policy_id is not None:
        record["provenance"]["policy_id"] = traj.provenance.policy_id
    if traj.outcome.failure_mode is not None:
        record["outcome"]["mode"] = traj.outcome.failure_mode.value
    return record


def _header_record(dataset: Dataset, label_meta: Optional[Mapping]) -> dict:
    header: dict = {
        "format": FORMAT_ID,
        "version": FORMAT_VERSION,
        "observation": {
            "width": dataset.spec.width,
            "height": dataset.spec.height,
            "channels": dataset.spec.channels,
        },
        "distance_stats": None,
        "label": dict(label_meta) if label_meta else None,
    }
    if dataset.distance_stats is not None:
        s = dataset.distance_stats
        header["distance_stats"] = {
            "mu_pixel": s.mu_pixel,
            "sigma_pixel": s.sigma_pixel,
            "mu_joint": s.mu_joint,
            "sigma_joint": s.sigma_joint,
            "mu_xyz": s.mu_xyz,
            "sigma_xyz": s.sigma_xyz,
        }
    return header


def write_dataset(
    dataset: Dataset,
    path: str | os.PathLike,
    *,
    returns: Optional[Mapping[str, Sequence[float]]] = None,
    label_meta: Optional[Mapping] = None,
) -> None:
    """Write a dataset file atomically (temp file + rename).

    `returns` optionally maps episode_id to per-step discounted returns,
    appended as a `return` field on each step record.
    """
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header_record(dataset, label_meta)) + "\n")
        for traj in dataset.trajectories:
            rets = returns.get(traj.episode_id) if returns is not None else None
            if returns is not None and rets is not None and len(rets) != len(traj):
                raise DatasetError(
                    f"episode {traj.episode_id!r}: {len(rets)} returns for "
                    f"{len(traj)} steps"
                )
            fh.write(json.dumps(_trajectory_record(traj, rets)) + "\n")
    os.replace(tmp, path)


def append_trajectories(
    path: str | os.PathLike, trajectories: Sequence[Trajectory], spec: ObservationSpec
) -> None:
    """Append trajectory records to an existing dataset file (single writer)."""
    header = read_header(path)
    if (header["observation"]["width"], header["observation"]["height"],
            header["observation"]["channels"]) != (spec.width, spec.height, spec.channels):
        raise DatasetError("appending trajectories with a different observation spec")
    with open(path, "a", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(_trajectory_record(traj, None)) + "\n")


def _require(record: Mapping, key: str, line_no: int, ctx: str = ""):
    if key not in record:
        raise DatasetFormatError(line_no, f"{ctx}{key}", "missing field")
    return record[key]


def _parse_header(line: str, line_no: int) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(line_no, "header", f"invalid JSON: {exc}") from exc
    if header.get("format") != FORMAT_ID:
        raise DatasetFormatError(line_no, "format", f"expected {FORMAT_ID!r}")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            line_no, "version", f"unsupported version {header.get('version')!r}"
        )
    obs = _require(header, "observation", line_no)
    for key in ("width", "height", "channels"):
        _require(obs, key, line_no, "observation.")
    return header


def _parse_trajectory(record: Mapping, spec: ObservationSpec, line_no: int) -> tuple[Trajectory, Optional[list[float]]]:
    episode_id = _require(record, "episode_id", line_no)
    seed = _require(record, "seed", line_no)
    prov_rec = _require(record, "provenance", line_no)
    out_rec = _require(record, "outcome", line_no)
    steps_rec = _require(record, "steps", line_no)

    try:
        if prov_rec["kind"] == "expert":
            provenance = Provenance.expert()
        else:
            provenance = Provenance.rollout(
                _require(prov_rec, "policy_id", line_no, "provenance.")
            )
        if out_rec["kind"] == "failure":
            outcome = Outcome.failure(
                FailureMode(_require(out_rec, "mode", line_no, "outcome."))
            )
        else:
            outcome = Outcome(out_rec["kind"])
    except (DatasetFormatError,):
        raise
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(line_no, "provenance/outcome", str(exc)) from exc

    steps: list[Step] = []
    returns: Optional[list[float]] = None
    for i, step_rec in enumerate(steps_rec):
        ctx = f"steps[{i}]."
        levels = _require(step_rec, "pixels", line_no, ctx)
        if len(levels) != spec.size:
            raise DatasetFormatError(
                line_no, f"{ctx}pixels", f"length {len(levels)} != spec size {spec.size}"
            )
        for j, lv in enumerate(levels):
            if not isinstance(lv, int) or isinstance(lv, bool) or not 0 <= lv <= 255:
                raise DatasetFormatError(
                    line_no,
                    f"{ctx}pixels[{j}]",
                    f"value {lv!r} is not an integer level in 0..255",
                )
        pixels = np.asarray(levels, dtype=np.float64) / 255.0
        kin_rec = _require(step_rec, "kinematics", line_no, ctx)
        act_rec = _require(step_rec, "action", line_no, ctx)
        try:
            kinematics = KinematicState(
                joint_angles=tuple(float(v) for v in kin_rec["joint_angles"]),
                base_pose=tuple(float(v) for v in kin_rec["base_pose"]),
            )
            action = Action(
                base_forward=float(act_rec["base_forward"]),
                base_turn=float(act_rec["base_turn"]),
                wrist_rate=float(act_rec["wrist_rate"]),
                terminate=float(act_rec["terminate"]),
            )
            steps.append(
                Step(
                    index=int(_require(step_rec, "index", line_no, ctx)),
                    observation=Observation(pixels=pixels, kinematics=kinematics),
                    action=action,
                )
            )
        except DatasetFormatError:
            raise
        except (DatasetError, ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(line_no, f"{ctx.rstrip('.')}", str(exc)) from exc
        if "return" in step_rec:
            if returns is None:
                returns = []
            returns.append(float(step_rec["return"]))
    if returns is not None and len(returns) != len(steps):
        raise DatasetFormatError(
            line_no, "steps.return", "return present on some steps but not all"
        )

    try:
        traj = Trajectory(
            episode_id=str(episode_id),
            seed=int(seed),
            provenance=provenance,
            steps=tuple(steps),
            outcome=outcome,
        )
    except DatasetError as exc:
        raise DatasetFormatError(line_no, "trajectory", str(exc)) from exc
    return traj, returns


def read_header(path: str | os.PathLike) -> dict:
    """Read and validate just the header record of a dataset file."""
    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline()
        if not line:
            raise DatasetFormatError(1, "header", "empty file")
        return _parse_header(line, 1)


def _header_spec_and_stats(header: Mapping):
    obs = header["observation"]
    spec = ObservationSpec(
        width=int(obs["width"]), height=int(obs["height"]), channels=int(obs["channels"])
    )
    stats = None
    if header.get("distance_stats") is not None:
        from .returns import DistanceStats  # deferred: returns imports trajlog

        s = header["distance_stats"]
        stats = DistanceStats(
            mu_pixel=float(s["mu_pixel"]),
            sigma_pixel=float(s["sigma_pixel"]),
            mu_joint=float(s["mu_joint"]),
            sigma_joint=float(s["sigma_joint"]),
            mu_xyz=float(s["mu_xyz"]),
            sigma_xyz=float(s["sigma_xyz"]),
        )
    return spec, stats


def iter_trajectories(
    path: str | os.PathLike, *, with_returns: bool = False
) -> Iterator:
    """Stream trajectories from a dataset file one at a time.

    Yields Trajectory, or (Trajectory, returns-or-None) with `with_returns`.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DatasetFormatError(1, "header", "empty file")
        header = _parse_header(header_line, 1)
        spec, _ = _header_spec_and_stats(header)
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(line_no, "record", f"invalid JSON: {exc}") from exc
            traj, rets = _parse_trajectory(record, spec, line_no)
            yield (traj, rets) if with_returns else traj


def read_dataset(path: str | os.PathLike, *, with_returns: bool = False):
    """Read a whole dataset file.

    Returns Dataset, or (Dataset, {episode_id: returns}) with `with_returns`.
    """
    header = read_header(path)
    spec, stats = _header_spec_and_stats(header)
    trajectories: list[Trajectory] = []
    returns_map: dict[str, list[float]] = {}
    for traj, rets in iter_trajectories(path, with_returns=True):
        trajectories.append(traj)
        if rets is not None:
            returns_map[traj.episode_id] = rets
    dataset = Dataset(spec=spec, trajectories=tuple(trajectories), distance_stats=stats)
    if with_returns:
        return dataset, returns_map
    return dataset


# ---------------------------------------------------------------------------
# splitting


def split_hash(episode_id: str, salt: int) -> float:
    """Stable split coordinate in [0, 1).

    Rule: sha256 of "<episode_id>|<salt>", first 8 bytes big-endian as an
    unsigned integer, divided by 2^64. An episode goes to validation when
    this value is strictly below the validation fraction.
    """
    digest = hashlib.sha256(f"{episode_id}|{salt}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def split_dataset(
    dataset: Dataset,
    validation_fraction: float,
    salt: int,
    *,
    expert_to_train: bool = True,
) -> tuple[Dataset, Dataset]:
    """Deterministic per-episode train/validation split by stable hash.

    Episodes never migrate between splits as the dataset grows. With
    `expert_to_train`, expert demonstrations always land in train.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise DatasetError(
            f"validation_fraction must be in (0, 1), got {validation_fraction}"
        )
    train, val = [], []
    for traj in dataset.trajectories:
        if expert_to_train and traj.provenance.is_expert:
            train.append(traj)
        elif split_hash(traj.episode_id, salt) < validation_fraction:
            val.append(traj)
        else:
            train.append(traj)
    make = lambda ts: Dataset(
        spec=dataset.spec, trajectories=tuple(ts), distance_stats=dataset.distance_stats
    )
    return make(train), make(val)
