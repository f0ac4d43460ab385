"""Deterministic 2D latched-door environment with a scripted expert.

The robot is a disk that must drive to the door handle, rotate the latch past
its release angle with the wrist, push the door open, and drive through the
doorway gap. Geometry is segment/disk intersection only; one tick integrates
velocities for 0.1 s. Everything is a pure function of (state, action,
config), and all randomness is counter-based from explicit seeds, so
rollouts are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .helpgate import GateConfig, GateState, gate_update
from .trajlog import (
    Action,
    FailureMode,
    KinematicState,
    Observation,
    ObservationSpec,
    Outcome,
    Provenance,
    Step,
    Trajectory,
)


class SimError(ValueError):
    """Invalid world configuration or infeasible scenario randomization."""


@dataclass(frozen=True)
class DoorWorldConfig:
    """Arena geometry, actuator limits, and per-episode randomization ranges."""

    arena_size: float = 4.0
    wall_x: float = 2.0
    gap_lo: float = 1.5
    gap_hi: float = 2.5
    door_length: float = 0.95
    door_max_angle: float = 2.2
    handle_offset: float = 0.72
    latch_release_angle: float = 1.0
    latch_max_angle: float = 1.6
    reach_radius: float = 0.15
    robot_radius: float = 0.22
    gripper_offset: float = 0.30
    max_forward: float = 0.5
    max_turn: float = 1.8
    max_wrist_rate: float = 2.5
    push_gain: float = 4.0           # door radians per meter of attempted push
    push_force_threshold: float = 0.12  # m/s against a latched door
    tick: float = 0.1
    max_steps: int = 170
    # randomization half-ranges
    wall_x_range: float = 0.15
    handle_offset_range: float = 0.06
    start_x: float = 0.8
    start_y: float = 2.0
    start_heading: float = 0.0
    start_x_range: float = 0.2
    start_y_range: float = 0.3
    start_heading_range: float = 0.5

    def __post_init__(self):
        if self.gap_hi - self.gap_lo <= 2.0 * self.robot_radius:
            raise SimError("doorway must be wider than the robot diameter")
        if self.max_steps < 1:
            raise SimError("max_steps must be >= 1")
        if self.tick <= 0:
            raise SimError("tick must be positive")


@dataclass(frozen=True)
class ExpertConfig:
    """Controller gains and failure-injection knobs for the scripted expert."""

    turn_gain: float = 3.0
    forward_gain: float = 1.5
    waypoint_tol: float = 0.08
    door_clear_angle: float = 1.5
    noise_std: float = 0.0        # relative to each actuator limit
    perturb_prob: float = 0.0     # chance of one scripted sabotage per episode

    def __post_init__(self):
        if self.noise_std < 0.0:
            raise SimError("noise_std must be >= 0")
        if not 0.0 <= self.perturb_prob <= 1.0:
            raise SimError("perturb_prob must be in [0, 1]")


@dataclass(frozen=True)
class WorldState:
    """Complete simulation state; scenario constants are drawn at reset."""

    x: float
    y: float
    heading: float
    wrist: float
    latch: float
    door_angle: float
    step_count: int
    seed: int
    wall_x: float
    handle_offset: float
    engaged_ever: bool = False

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


def _wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def _door_direction(state: WorldState) -> tuple[float, float]:
    # closed door lies in the wall plane pointing +y; opening swings toward +x
    return (math.sin(state.door_angle), math.cos(state.door_angle))


def _door_segment(state: WorldState, config: DoorWorldConfig):
    dx, dy = _door_direction(state)
    hinge = (state.wall_x, config.gap_lo)
    end = (hinge[0] + config.door_length * dx, hinge[1] + config.door_length * dy)
    return hinge, end

def handle_position(state: WorldState, config: DoorWorldConfig) -> tuple[float, float]:
    dx, dy = _door_direction(state)
    return (
        state.wall_x + state.handle_offset * dx,
        config.gap_lo + state.handle_offset * dy,
    )


def gripper_position(state: WorldState, config: DoorWorldConfig) -> tuple[float, float]:
    return (
        state.x + config.gripper_offset * math.cos(state.heading),
        state.y + config.gripper_offset * math.sin(state.heading),
    )


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    seg_len2 = vx * vx + vy * vy
    t = 0.0 if seg_len2 == 0.0 else max(0.0, min(1.0, (wx * vx + wy * vy) / seg_len2))
    cx, cy = ax + t * vx, ay + t * vy
    return math.hypot(px - cx, py - cy)


def _wall_segments(wall_x: float, config: DoorWorldConfig):
    return (
        (wall_x, 0.0, wall_x, config.gap_lo),
        (wall_x, config.gap_hi, wall_x, config.arena_size),
    )


def _hits_wall(x: float, y: float, wall_x: float, config: DoorWorldConfig) -> bool:
    r = config.robot_radius
    if not (r <= x <= config.arena_size - r and r <= y <= config.arena_size - r):
        return True
    return any(
        _point_segment_distance(x, y, ax, ay, bx, by) < r
        for ax, ay, bx, by in _wall_segments(wall_x, config)
    )


def _hits_door(x: float, y: float, state: WorldState, config: DoorWorldConfig) -> bool:
    (ax, ay), (bx, by) = _door_segment(state, config)
    return _point_segment_distance(x, y, ax, ay, bx, by) < config.robot_radius


def kinematic_state(state: WorldState) -> KinematicState:
    return KinematicState(joint_angles=(state.wrist,), base_pose=state.pose)


def reset(config: DoorWorldConfig, seed: int) -> WorldState:
    """Seeded scenario draw: wall position, handle offset, and start pose."""
    rng = np.random.Generator(np.random.Philox(seed))
    wall_x = config.wall_x + float(rng.uniform(-1, 1)) * config.wall_x_range
    handle_offset = (
        config.handle_offset + float(rng.uniform(-1, 1)) * config.handle_offset_range
    )
    x = config.start_x + float(rng.uniform(-1, 1)) * config.start_x_range
    y = config.start_y + float(rng.uniform(-1, 1)) * config.start_y_range
    heading = config.start_heading + float(rng.uniform(-1, 1)) * config.start_heading_range
    if not 0.0 < handle_offset <= config.door_length:
        raise SimError("handle offset randomization left the door")
    state = WorldState(
        x=x, y=y, heading=heading, wrist=0.0, latch=0.0, door_angle=0.0,
        step_count=0, seed=seed, wall_x=wall_x, handle_offset=handle_offset,
    )
    if _hits_wall(x, y, wall_x, config) or _hits_door(x, y, state, config):
        raise SimError(f"infeasible start pose for seed {seed}")
    return state


def clamp_action(action: Action, config: DoorWorldConfig) -> Action:
    return Action(
        base_forward=float(np.clip(action.base_forward, -config.max_forward, config.max_forward)),
        base_turn=float(np.clip(action.base_turn, -config.max_turn, config.max_turn)),
        wrist_rate=float(np.clip(action.wrist_rate, -config.max_wrist_rate, config.max_wrist_rate)),
        terminate=float(np.clip(action.terminate, 0.0, 1.0)),
    )


def step(
    state: WorldState, action: Action, config: DoorWorldConfig
) -> tuple[WorldState, Optional[Outcome]]:
    """One 0.1 s tick; returns the successor state and a terminal outcome if any.

    The door opens only while the robot presses it with the latch released;
    pressing a latched door faster than the force threshold is a failure. A
    move that would penetrate geometry is not applied: the robot is never
    inside a wall in any returned state.
    """
    action = clamp_action(action, config)
    dt = config.tick

    crossed_before = state.x >= state.wall_x
    if action.terminate >= 0.5 and not crossed_before:
        mode = FailureMode.TIMEOUT if state.engaged_ever else FailureMode.GRASP_MISS
        return replace(state, step_count=state.step_count + 1), Outcome.failure(mode)

    wrist = float(np.clip(state.wrist + action.wrist_rate * dt, -0.8, 1.8))
    latch = state.latch
    engaged_ever = state.engaged_ever
    gx, gy = gripper_position(state, config)
    hx, hy = handle_position(state, config)
    if math.hypot(gx - hx, gy - hy) <= config.reach_radius:
        engaged_ever = True
        latch = float(
            np.clip(latch + action.wrist_rate * dt, 0.0, config.latch_max_angle)
        )

    heading = _wrap_angle(state.heading + action.base_turn * dt)
    new_x = state.x + action.base_forward * dt * math.cos(heading)
    new_y = state.y + action.base_forward * dt * math.sin(heading)

    door_angle = state.door_angle
    outcome: Optional[Outcome] = None
    x, y = state.x, state.y
    probe = replace(state, latch=latch, door_angle=door_angle)
    if _hits_wall(new_x, new_y, state.wall_x, config):
        outcome = Outcome.failure(FailureMode.COLLISION)
    elif _hits_door(new_x, new_y, probe, config):
        if latch >= config.latch_release_angle:
            # pressing an unlatched door swings it open; the push consumes motion
            door_angle = min(
                door_angle + config.push_gain * max(action.base_forward, 0.0) * dt,
                config.door_max_angle,
            )
        elif action.base_forward > config.push_force_threshold:
            outcome = Outcome.failure(FailureMode.PUSH_WHILE_LATCHED)
        # else: blocked in place against the latched door
    else:
        x, y = new_x, new_y

    next_state = replace(
        state,
        x=x, y=y, heading=heading, wrist=wrist, latch=latch,
        door_angle=door_angle, step_count=state.step_count + 1,
        engaged_ever=engaged_ever,
    )

    if outcome is None:
        crossed_now = x >= state.wall_x and config.gap_lo < y < config.gap_hi
        if crossed_now and not crossed_before:
            outcome = Outcome.success()
        elif next_state.step_count >= config.max_steps:
            mode = FailureMode.TIMEOUT if engaged_ever else FailureMode.GRASP_MISS
            outcome = Outcome.failure(mode)
    return next_state, outcome


# ---------------------------------------------------------------------------
# rendering

_WALL_LEVEL = 1.0
_DOOR_LEVEL = 0.55
_LEVER_LEVEL = 0.85
_ROBOT_LEVEL = 0.40
_GRIPPER_LEVEL = 0.70


@lru_cache(maxsize=64)
def _pixel_grid(width: int, height: int, arena: float):
    xs = (np.arange(width) + 0.5) * (arena / width)
    ys = arena - (np.arange(height) + 0.5) * (arena / height)  # row 0 at the top
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


def _paint_segment(canvas, gx, gy, ax, ay, bx, by, half_width, level):
    vx, vy = bx - ax, by - ay
    seg_len2 = vx * vx + vy * vy
    wx, wy = gx - ax, gy - ay
    if seg_len2 == 0.0:
        dist = np.hypot(wx, wy)
    else:
        t = np.clip((wx * vx + wy * vy) / seg_len2, 0.0, 1.0)
        dist = np.hypot(wx - t * vx, wy - t * vy)
    np.maximum(canvas, np.where(dist <= half_width, level, 0.0), out=canvas)


def _paint_disk(canvas, gx, gy, cx, cy, radius, level):
    dist = np.hypot(gx - cx, gy - cy)
    np.maximum(canvas, np.where(dist <= radius, level, 0.0), out=canvas)


@lru_cache(maxsize=64)
def _static_layer(width, height, arena, wall_x, gap_lo, gap_hi):
    gx, gy = _pixel_grid(width, height, arena)
    canvas = np.zeros((height, width))
    _paint_segment(canvas, gx, gy, wall_x, 0.0, wall_x, gap_lo, 0.07, _WALL_LEVEL)
    _paint_segment(canvas, gx, gy, wall_x, gap_hi, wall_x, arena, 0.07, _WALL_LEVEL)
    canvas.setflags(write=False)
    return canvas


def render(state: WorldState, spec: ObservationSpec, config: DoorWorldConfig) -> np.ndarray:
    """Top-down grayscale rasterization, quantized to 8-bit levels."""
    if spec.channels != 1:
        raise SimError("renderer produces single-channel images")
    gx, gy = _pixel_grid(spec.width, spec.height, config.arena_size)
    canvas = _static_layer(
        spec.width, spec.height, config.arena_size, state.wall_x,
        config.gap_lo, config.gap_hi,
    ).copy()

    (ax, ay), (bx, by) = _door_segment(state, config)
    _paint_segment(canvas, gx, gy, ax, ay, bx, by, 0.06, _DOOR_LEVEL)

    # latch lever: anchored at the handle, rotates with the latch angle
    hx, hy = handle_position(state, config)
    ddx, ddy = _door_direction(state)
    perp = (-ddy, ddx)  # toward the approach side when the door is closed
    c, s = math.cos(-state.latch), math.sin(-state.latch)
    lx = c * perp[0] - s * perp[1]
    ly = s * perp[0] + c * perp[1]
    _paint_segment(canvas, gx, gy, hx, hy, hx + 0.28 * lx, hy + 0.28 * ly, 0.05,
                   _LEVER_LEVEL)

    _paint_disk(canvas, gx, gy, state.x, state.y, config.robot_radius, _ROBOT_LEVEL)
    gpx, gpy = gripper_position(state, config)
    _paint_disk(canvas, gx, gy, gpx, gpy, 0.07, _GRIPPER_LEVEL)

    levels = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0)
    return (levels / 255.0).reshape(-1)


def observe(state: WorldState, spec: ObservationSpec, config: DoorWorldConfig) -> Observation:
    return Observation(pixels=render(state, spec, config), kinematics=kinematic_state(state))


# ---------------------------------------------------------------------------
# scripted expert

def _drive_towards(state, tx, ty, expert: ExpertConfig, config: DoorWorldConfig,
                   speed_cap: Optional[float] = None) -> tuple[float, float]:
    err = _wrap_angle(math.atan2(ty - state.y, tx - state.x) - state.heading)
    turn = float(np.clip(expert.turn_gain * err, -config.max_turn, config.max_turn))
    dist = math.hypot(tx - state.x, ty - state.y)
    forward = expert.forward_gain * dist
    if speed_cap is not None:
        forward = min(forward, speed_cap)
    forward = float(np.clip(forward, 0.0, config.max_forward))
    if abs(err) > math.pi / 3.0:
        forward = 0.0
    else:
        forward *= math.cos(err)
    return forward, turn


def scripted_expert(
    state: WorldState, config: DoorWorldConfig, expert: ExpertConfig = ExpertConfig()
) -> Action:
    """Phase controller: approach the handle, rotate the latch, push, drive through."""
    gap_center = 0.5 * (config.gap_lo + config.gap_hi)
    hx, hy = handle_position(state, config)
    gx, gy = gripper_position(state, config)
    released = state.latch >= config.latch_release_angle

    if state.x > state.wall_x:  # through the doorway: signal task completion
        return Action(0.0, 0.0, 0.0, 1.0)
    if released and state.door_angle >= expert.door_clear_angle:
        fwd, turn = _drive_towards(state, state.wall_x + 0.8, gap_center, expert, config)
        return Action(fwd, turn, 0.0, 0.0)
    if released:
        fwd, turn = _drive_towards(state, state.wall_x + 0.5, gap_center, expert, config)
        return Action(fwd, turn, 0.0, 0.0)
    if math.hypot(gx - hx, gy - hy) <= config.reach_radius:
        return Action(0.0, 0.0, config.max_wrist_rate, 0.0)
    pregrasp = (hx - 0.7, hy)
    if math.hypot(state.x - pregrasp[0], state.y - pregrasp[1]) > expert.waypoint_tol and \
            math.hypot(state.x - hx, state.y - hy) > 0.75:
        fwd, turn = _drive_towards(state, *pregrasp, expert, config)
        return Action(fwd, turn, 0.0, 0.0)
    # creep at the handle so the gripper engages before the body meets the door
    grip_dist = math.hypot(gx - hx, gy - hy)
    fwd, turn = _drive_towards(state, hx, hy, expert, config, speed_cap=1.2 * grip_dist)
    return Action(fwd, turn, 0.0, 0.0)


# ---------------------------------------------------------------------------
# policies and rollout

Policy = Callable[[WorldState, Observation], Action]

_SABOTAGES = ("aim_offset", "skip_latch", "drift", "stall")
_SABOTAGE_WEIGHTS = (0.3, 0.3, 0.3, 0.1)


def expert_policy(config: DoorWorldConfig, expert: ExpertConfig = ExpertConfig()) -> Policy:
    def act(state: WorldState, obs: Observation) -> Action:
        return scripted_expert(state, config, expert)

    return act


def noisy_expert_policy(
    config: DoorWorldConfig, expert: ExpertConfig, seed: int
) -> Policy:
    """Expert plus per-step Gaussian noise and an optional scripted sabotage.

    The sabotage mode (mis-aimed grasp, skipped latch, heading drift, or a
    mid-episode stall) is drawn once per policy instance, which stands in for
    the weak behavior policies that generate failure data. Noise perturbs the
    motion channels only; the termination channel stays clean.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    sabotage = None
    if float(rng.uniform()) < expert.perturb_prob:
        sabotage = _SABOTAGES[
            int(rng.choice(len(_SABOTAGES), p=np.asarray(_SABOTAGE_WEIGHTS)))
        ]
    aim_dy = float(rng.choice([-1.0, 1.0])) * float(rng.uniform(0.35, 0.5))
    drift_bias = float(rng.choice([-1.0, 1.0])) * float(rng.uniform(0.9, 1.5))
    stall_start = int(rng.integers(10, 40))

    def act(state: WorldState, obs: Observation) -> Action:
        if sabotage == "stall" and state.step_count >= stall_start:
            return Action(0.0, 0.0, 0.0, 0.0)
        if sabotage == "aim_offset":
            # believing itself offset in y, the expert grasps beside the handle
            base = scripted_expert(replace(state, y=state.y - aim_dy), config)
        elif sabotage == "skip_latch":
            # never touches the latch: creeps against the door until a noise
            # spike exceeds the push-force threshold
            dist_to_wall = state.wall_x - state.x
            if dist_to_wall > 0.9 and state.latch < config.latch_release_angle:
                base = scripted_expert(state, config)
            else:
                gap_center = 0.5 * (config.gap_lo + config.gap_hi)
                fwd, turn = _drive_towards(
                    state, state.wall_x, gap_center, expert, config,
                    speed_cap=max(0.06, 0.6 * (dist_to_wall - 0.3)),
                )
                base = Action(fwd, turn, 0.0, 0.0)
        else:
            base = scripted_expert(state, config)
        turn = base.base_turn + (drift_bias if sabotage == "drift" else 0.0)
        std = expert.noise_std
        noise = rng.standard_normal(3)
        return Action(
            base_forward=base.base_forward + std * config.max_forward * float(noise[0]),
            base_turn=turn + std * config.max_turn * float(noise[1]),
            wrist_rate=base.wrist_rate + std * config.max_wrist_rate * float(noise[2]),
            terminate=base.terminate,
        )

    return act


def model_policy(model) -> Policy:
    from .bcva_net import predict  # deferred: doorsim is otherwise model-free

    def act(state: WorldState, obs: Observation) -> Action:
        action, _, _ = predict(model, obs)
        return action

    return act


def rollout(
    policy: Policy,
    config: DoorWorldConfig,
    spec: ObservationSpec,
    seed: int,
    *,
    episode_id: Optional[str] = None,
    provenance: Provenance = Provenance.expert(),
    gate: Optional[GateConfig] = None,
    gate_model=None,
) -> Trajectory:
    """Run one episode; with a gate and model, truncate on an ask-for-help.

    The gate evaluates the model's signal on each frame before the action
    executes, so a fired gate yields a trajectory whose final step carries the
    proposed (not executed) action and an AskedForHelp outcome.
    """
    if gate is not None and gate_model is None:
        raise SimError("a gate needs a model to produce its signal")
    from .bcva_net import predict  # local import keeps doorsim importable alone

    state = reset(config, seed)
    gate_state = GateState()
    steps: list[Step] = []
    outcome: Optional[Outcome] = None
    for t in range(config.max_steps):
        obs = observe(state, spec, config)
        action = policy(state, obs)
        if gate is not None:
            _, value, p_fail = predict(gate_model, obs)
            signal = value if gate.signal == "value" else -p_fail
            gate_state, fired = gate_update(gate_state, signal, gate)
            if fired:
                steps.append(Step(index=t, observation=obs, action=clamp_action(action, config)))
                outcome = Outcome.asked_for_help()
                break
        steps.append(Step(index=t, observation=obs, action=clamp_action(action, config)))
        state, outcome = step(state, action, config)
        if outcome is not None:
            break
    if outcome is None:
        # defensive: max_steps in step() fires first
        outcome = Outcome.failure(
            FailureMode.TIMEOUT if state.engaged_ever else FailureMode.GRASP_MISS
        )
    return Trajectory(
        episode_id=episode_id or f"ep-{seed:010d}",
        seed=seed,
        provenance=provenance,
        steps=tuple(steps),
        outcome=outcome,
    )
