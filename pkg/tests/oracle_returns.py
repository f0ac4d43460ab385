"""Straight-line reference labeler, kept independent of bcva.returns.

Everything here is plain Python loops over raw values: it recomputes the
distance normalization, suffix accumulation, and discounting from scratch so
the production implementation can be checked against it.
"""

from __future__ import annotations

import math


def oracle_fit_stats(trajectories):
    """Population mean/std of raw diffs over all consecutive pairs."""
    pixel, joint, base = [], [], []
    for traj in trajectories:
        for a, b in zip(traj.steps, traj.steps[1:]):
            pa, pb = a.observation.pixels, b.observation.pixels
            pixel.append(sum(abs(float(y) - float(x)) for x, y in zip(pa, pb)))
            ja = a.observation.kinematics.joint_angles
            jb = b.observation.kinematics.joint_angles
            joint.append(sum(abs(y - x) for x, y in zip(ja, jb)))
            (xa, ya, _), (xb, yb, _) = (
                a.observation.kinematics.base_pose,
                b.observation.kinematics.base_pose,
            )
            base.append(abs(xb - xa) + abs(yb - ya))

    def mean_std(vals):
        n = len(vals)
        mu = sum(vals) / n
        var = sum((v - mu) ** 2 for v in vals) / n
        sd = math.sqrt(var)
        return mu, (sd if sd > 0.0 else 1.0)

    return mean_std(pixel), mean_std(joint), mean_std(base)


def oracle_label(traj, metric, gamma, pixel_stats, joint_stats, base_stats, clamp=True):
    """Per-step returns for one trajectory; metric in {time, pixel, kinematic}."""
    assert traj.outcome.kind in ("success", "failure")
    r = 1.0 if traj.outcome.kind == "success" else -1.0
    n = len(traj.steps)
    deltas = []
    for a, b in zip(traj.steps, traj.steps[1:]):
        if metric == "time":
            d = 1.0
        elif metric == "pixel":
            raw = sum(
                abs(float(y) - float(x))
                for x, y in zip(a.observation.pixels, b.observation.pixels)
            )
            d = (raw - pixel_stats[0]) / pixel_stats[1] + 0.5
        else:
            jraw = sum(
                abs(y - x)
                for x, y in zip(
                    a.observation.kinematics.joint_angles,
                    b.observation.kinematics.joint_angles,
                )
            )
            (xa, ya, _), (xb, yb, _) = (
                a.observation.kinematics.base_pose,
                b.observation.kinematics.base_pose,
            )
            braw = abs(xb - xa) + abs(yb - ya)
            d = (
                (jraw - joint_stats[0]) / (2.0 * joint_stats[1])
                + (braw - base_stats[0]) / (2.0 * base_stats[1])
                + 0.5
            )
        if clamp and d < 0.0:
            d = 0.0
        deltas.append(d)
    returns = []
    for j in range(n):
        acc = 0.0
        for t in range(n - 2, j - 1, -1):
            acc += deltas[t]
        returns.append(gamma**acc * r)
    return returns
