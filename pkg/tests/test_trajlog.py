import json
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcva.trajlog import (
    Action,
    Dataset,
    DatasetError,
    DatasetFormatError,
    FailureMode,
    KinematicState,
    Observation,
    ObservationSpec,
    Outcome,
    Provenance,
    Step,
    Trajectory,
    UnlabeledOutcomeError,
    append_trajectories,
    read_dataset,
    split_dataset,
    split_hash,
    terminal_reward,
    write_dataset,
)

from helpers import SMALL_SPEC, make_dataset, make_trajectory


class TestTerminalReward:
    def test_success_is_plus_one(self):
        assert terminal_reward(Outcome.success()) == 1.0

    @pytest.mark.parametrize("mode", list(FailureMode))
    def test_failure_is_minus_one(self, mode):
        assert terminal_reward(Outcome.failure(mode)) == -1.0

    def test_asked_for_help_is_unlabeled(self):
        with pytest.raises(UnlabeledOutcomeError, match="unlabeled"):
            terminal_reward(Outcome.asked_for_help())


class TestConstruction:
    def test_expert_demo_must_be_success(self):
        rng = np.random.default_rng(0)
        traj = make_trajectory(rng, "ok", outcome=Outcome.success())
        with pytest.raises(DatasetError, match="expert demo"):
            Trajectory(
                episode_id="bad",
                seed=1,
                provenance=Provenance.expert(),
                steps=traj.steps,
                outcome=Outcome.failure(FailureMode.TIMEOUT),
            )

    def test_step_indices_strictly_increasing(self):
        rng = np.random.default_rng(1)
        traj = make_trajectory(rng, "a", length=3)
        steps = (traj.steps[0], traj.steps[2], traj.steps[1])
        with pytest.raises(DatasetError, match="strictly increase"):
            Trajectory("a", 0, traj.provenance, steps, traj.outcome)

    def test_duplicate_episode_ids_rejected(self):
        rng = np.random.default_rng(2)
        t = make_trajectory(rng, "dup")
        with pytest.raises(DatasetError, match="duplicate"):
            Dataset(spec=SMALL_SPEC, trajectories=(t, t))

    def test_pixel_range_enforced(self):
        rng = np.random.default_rng(3)
        kin = KinematicState(joint_angles=(0.0,), base_pose=(0.0, 0.0, 0.0))
        with pytest.raises(DatasetError, match="pixel"):
            Observation(pixels=np.full(16, 1.5), kinematics=kin)

    def test_terminate_range_enforced(self):
        with pytest.raises(DatasetError, match="terminate"):
            Action(base_forward=0.0, base_turn=0.0, wrist_rate=0.0, terminate=1.5)

    def test_spec_conformance_checked(self):
        rng = np.random.default_rng(4)
        traj = make_trajectory(rng, "a", spec=SMALL_SPEC)
        with pytest.raises(DatasetError, match="pixel length"):
            Dataset(spec=ObservationSpec(8, 8, 1), trajectories=(traj,))


class TestRoundTrip:
    def test_empty_dataset_is_header_only(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_dataset(Dataset(spec=SMALL_SPEC, trajectories=()), path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1
        header = json.loads(lines[0])
        assert header["format"] == "bcva-dataset"
        assert read_dataset(path) == Dataset(spec=SMALL_SPEC, trajectories=())

    def test_single_trajectory_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        ds = make_dataset(rng, 1)
        path = tmp_path / "one.jsonl"
        write_dataset(ds, path)
        assert read_dataset(path) == ds

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 6))
    def test_round_trip_property(self, seed, n):
        rng = np.random.default_rng(seed)
        ds = make_dataset(rng, n, labelable_only=False)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ds.jsonl"
            write_dataset(ds, path)
            back = read_dataset(path)
        assert back == ds

    def test_returns_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        ds = make_dataset(rng, 3)
        rets = {
            t.episode_id: [float(v) for v in rng.uniform(-1, 1, len(t.steps))]
            for t in ds.trajectories
        }
        path = tmp_path / "labeled.jsonl"
        write_dataset(ds, path, returns=rets, label_meta={"metric": "pixel"})
        back, back_rets = read_dataset(path, with_returns=True)
        assert back == ds
        assert back_rets == rets

    def test_unquantized_pixels_rejected_at_write(self, tmp_path):
        kin = KinematicState(joint_angles=(0.0,), base_pose=(0.0, 0.0, 0.0))
        obs = Observation(pixels=np.full(16, 0.5), kinematics=kin)
        act = Action(0.0, 0.0, 0.0, 0.0)
        traj = Trajectory(
            "q", 0, Provenance.rollout("p"), (Step(0, obs, act),), Outcome.success()
        )
        ds = Dataset(spec=SMALL_SPEC, trajectories=(traj,))
        with pytest.raises(DatasetError, match="quantized"):
            write_dataset(ds, tmp_path / "bad.jsonl")

    def test_append_then_read(self, tmp_path):
        rng = np.random.default_rng(7)
        ds = make_dataset(rng, 2)
        extra = make_trajectory(rng, "ep-extra")
        path = tmp_path / "grow.jsonl"
        write_dataset(ds, path)
        append_trajectories(path, [extra], SMALL_SPEC)
        back = read_dataset(path)
        assert back.episode_ids() == ds.episode_ids() + ["ep-extra"]


def _write_raw(tmp_path, header, records):
    path = tmp_path / "crafted.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def _valid_header():
    return {
        "format": "bcva-dataset",
        "version": 1,
        "observation": {"width": 2, "height": 2, "channels": 1},
        "distance_stats": None,
        "label": None,
    }


def _valid_record(pixels):
    return {
        "episode_id": "ep-0",
        "seed": 3,
        "provenance": {"kind": "rollout", "policy_id": "p"},
        "outcome": {"kind": "success"},
        "steps": [
            {
                "index": 0,
                "pixels": pixels,
                "kinematics": {"joint_angles": [0.1], "base_pose": [0.0, 0.0, 0.0]},
                "action": {
                    "base_forward": 0.1,
                    "base_turn": 0.0,
                    "wrist_rate": 0.0,
                    "terminate": 0.0,
                },
            }
        ],
    }


class TestMalformedFiles:
    def test_out_of_range_pixel_level(self, tmp_path):
        # stored level 400 would decode to a pixel value well above 1
        path = _write_raw(tmp_path, _valid_header(), [_valid_record([0, 12, 400, 3])])
        with pytest.raises(DatasetFormatError, match=r"line 2: steps\[0\].pixels\[2\]"):
            read_dataset(path)

    def test_fractional_pixel_level(self, tmp_path):
        path = _write_raw(tmp_path, _valid_header(), [_valid_record([0, 12, 382.5, 3])])
        with pytest.raises(DatasetFormatError, match=r"pixels\[2\]"):
            read_dataset(path)

    def test_wrong_pixel_count(self, tmp_path):
        path = _write_raw(tmp_path, _valid_header(), [_valid_record([0, 12])])
        with pytest.raises(DatasetFormatError, match="length 2"):
            read_dataset(path)

    def test_bad_json_line_number(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        with open(path, "w") as fh:
            fh.write(json.dumps(_valid_header()) + "\n")
            fh.write(json.dumps(_valid_record([0, 1, 2, 3])) + "\n")
            fh.write("{not json\n")
        with pytest.raises(DatasetFormatError, match="line 3"):
            read_dataset(path)

    def test_version_mismatch(self, tmp_path):
        header = _valid_header()
        header["version"] = 99
        path = _write_raw(tmp_path, header, [])
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(path)

    def test_expert_failure_rejected_at_load(self, tmp_path):
        rec = _valid_record([0, 1, 2, 3])
        rec["provenance"] = {"kind": "expert"}
        rec["outcome"] = {"kind": "failure", "mode": "collision"}
        path = _write_raw(tmp_path, _valid_header(), [rec])
        with pytest.raises(DatasetFormatError, match="expert demo"):
            read_dataset(path)


class TestSplit:
    def test_partition(self):
        rng = np.random.default_rng(8)
        ds = make_dataset(rng, 40)
        train, val = split_dataset(ds, 0.25, salt=7)
        train_ids = set(train.episode_ids())
        val_ids = set(val.episode_ids())
        assert train_ids | val_ids == set(ds.episode_ids())
        assert train_ids & val_ids == set()

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(9)
        ds = make_dataset(rng, 30)
        a = split_dataset(ds, 0.25, salt=3)
        b = split_dataset(ds, 0.25, salt=3)
        assert a[0].episode_ids() == b[0].episode_ids()
        assert a[1].episode_ids() == b[1].episode_ids()

    def test_membership_stable_under_growth(self):
        rng = np.random.default_rng(10)
        ds = make_dataset(rng, 20)
        grown = make_dataset(np.random.default_rng(10), 20)
        extra = make_trajectory(rng, "ep-new")
        grown = Dataset(spec=grown.spec, trajectories=grown.trajectories + (extra,))
        _, val_small = split_dataset(ds, 0.3, salt=1, expert_to_train=False)
        _, val_big = split_dataset(grown, 0.3, salt=1, expert_to_train=False)
        assert set(val_small.episode_ids()) <= set(val_big.episode_ids())

    def test_expert_forced_to_train(self):
        rng = np.random.default_rng(11)
        ds = make_dataset(rng, 60)
        _, val = split_dataset(ds, 0.9, salt=2, expert_to_train=True)
        assert all(not t.provenance.is_expert for t in val.trajectories)

    def test_rollout_fraction_roughly_respected(self):
        rng = np.random.default_rng(12)
        trajectories = tuple(
            make_trajectory(rng, f"r-{i}", outcome=Outcome.success(),
                            provenance=Provenance.rollout("p"), length=1)
            for i in range(1000)
        )
        ds = Dataset(spec=SMALL_SPEC, trajectories=trajectories)
        _, val = split_dataset(ds, 0.25, salt=0)
        assert 200 <= len(val) <= 300
        again = split_dataset(ds, 0.25, salt=0)[1]
        assert val.episode_ids() == again.episode_ids()

    def test_four_episode_membership_matches_hash_rule(self):
        # Brute-force the documented rule over the four hash values; with this
        # salt exactly one of them falls below 0.25.
        rng = np.random.default_rng(13)
        ids = ["ep-0000", "ep-0001", "ep-0002", "ep-0003"]
        salt = 0
        expected_val = {eid for eid in ids if split_hash(eid, salt) < 0.25}
        assert len(expected_val) == 1
        trajectories = tuple(
            make_trajectory(rng, eid, outcome=Outcome.success(),
                            provenance=Provenance.rollout("p"))
            for eid in ids
        )
        ds = Dataset(spec=SMALL_SPEC, trajectories=trajectories)
        _, val = split_dataset(ds, 0.25, salt=salt)
        assert set(val.episode_ids()) == expected_val

    def test_bad_fraction_rejected(self):
        rng = np.random.default_rng(14)
        ds = make_dataset(rng, 2)
        with pytest.raises(DatasetError):
            split_dataset(ds, 0.0, salt=0)
        with pytest.raises(DatasetError):
            split_dataset(ds, 1.0, salt=0)
