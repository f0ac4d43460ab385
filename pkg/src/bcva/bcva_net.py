"""Joint policy/value network over a stochastic latent bottleneck.

A dense encoder maps the flattened observation to a diagonal-Gaussian latent
posterior. Decoders share that latent: an action head (behavioral cloning),
a stochastic value head regressing discounted returns, and a classifier head
used by the frame-labeling baseline. The posterior is pulled toward a learned
Gaussian-mixture prior by a sampled KL penalty. Training is plain minibatch
Adam on the weighted sum of those losses; inference is deterministic through
the posterior mean.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import grad as G
from .grad import GradError, ParamStore, Tape, adam_step
from .returns import LabeledTrajectory
from .trajlog import Action, Dataset, DatasetError, Observation, Trajectory

CHECKPOINT_FORMAT = "bcva-checkpoint"
CHECKPOINT_VERSION = 1
LOG_STD_MIN = -6.0
LOG_STD_MAX = 2.0


class ModelError(ValueError):
    """Configuration, batch, or checkpoint misuse."""


@dataclass(frozen=True)
class ModelConfig:
    """Network sizes and loss weights."""

    input_dim: int
    action_dim: int = 4
    latent_dim: int = 16
    encoder_hidden: tuple[int, ...] = (128, 64)
    action_hidden: tuple[int, int] = (64, 32)
    value_hidden: tuple[int, int, int] = (64, 64, 32)
    classifier_hidden: tuple[int, ...] = (64, 32)
    prior_components: int = 8
    mc_samples: int = 4
    value_weight: float = 0.5
    kl_weight: float = 1e-6

    def __post_init__(self):
        for name in ("encoder_hidden", "action_hidden", "value_hidden",
                     "classifier_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        sizes = (
            (self.input_dim, self.action_dim, self.latent_dim, self.prior_components,
             self.mc_samples)
            + self.encoder_hidden
            + self.action_hidden
            + self.value_hidden
            + self.classifier_hidden
        )
        if any(int(s) < 1 for s in sizes):
            raise ModelError(f"all sizes must be >= 1: {self}")
        if self.value_weight < 0.0 or self.kl_weight < 0.0:
            raise ModelError("loss weights must be >= 0")
        if len(self.action_hidden) != 2 or len(self.value_hidden) != 3:
            raise ModelError("action head takes 2 hidden sizes, value head takes 3")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "action_hidden": list(self.action_hidden),
            "value_hidden": list(self.value_hidden),
            "classifier_hidden": list(self.classifier_hidden),
            "prior_components": self.prior_components,
            "mc_samples": self.mc_samples,
            "value_weight": self.value_weight,
            "kl_weight": self.kl_weight,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "ModelConfig":
        return cls(
            input_dim=int(rec["input_dim"]),
            action_dim=int(rec["action_dim"]),
            latent_dim=int(rec["latent_dim"]),
            encoder_hidden=tuple(rec["encoder_hidden"]),
            action_hidden=tuple(rec["action_hidden"]),
            value_hidden=tuple(rec["value_hidden"]),
            classifier_hidden=tuple(rec["classifier_hidden"]),
            prior_components=int(rec["prior_components"]),
            mc_samples=int(rec["mc_samples"]),
            value_weight=float(rec["value_weight"]),
            kl_weight=float(rec["kl_weight"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # None: one pass over the labeled pool

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ModelError(f"invalid train config: {self}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ModelError("steps_per_epoch must be >= 1 when given")


@dataclass
class Model:
    """Parameter store plus the config that fixes its shapes."""

    config: ModelConfig
    store: ParamStore
    step_count: int = 0
    stats_meta: Optional[dict] = None  # labeling stats/config the model was trained on


def observation_vector(obs: Observation) -> np.ndarray:
    """Flattened model input: pixels, then joint angles, then base pose."""
    kin = obs.kinematics
    return np.concatenate(
        [obs.pixels, np.asarray(kin.joint_angles, dtype=np.float64),
         np.asarray(kin.base_pose, dtype=np.float64)]
    )


def input_dim_for(dataset_spec, n_joints: int) -> int:
    return dataset_spec.size + n_joints + 3


def _dense_init(rng: np.random.Generator, store: ParamStore, prefix: str,
                n_in: int, n_out: int, bias: float = 0.0) -> None:
    store.add(f"{prefix}.w", rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))
    store.add(f"{prefix}.b", np.full(n_out, bias))


def init_model(config: ModelConfig, seed: int) -> Model:
    """Seeded parameter initialization (counter-based generator)."""
    rng = np.random.Generator(np.random.Philox(seed))
    store = ParamStore()
    d = config.input_dim
    for i, h in enumerate(config.encoder_hidden):
        _dense_init(rng, store, f"enc.h{i}", d, h)
        d = h
    _dense_init(rng, store, "enc.mean", d, config.latent_dim)
    _dense_init(rng, store, "enc.log_std", d, config.latent_dim, bias=-1.0)

    d = config.latent_dim
    for i, h in enumerate(config.action_hidden):
        _dense_init(rng, store, f"act.h{i}", d, h)
        d = h
    _dense_init(rng, store, "act.out", d, config.action_dim)

    d = config.latent_dim
    for i, h in enumerate(config.value_hidden):
        _dense_init(rng, store, f"val.h{i}", d, h)
        d = h
    _dense_init(rng, store, "val.mean", d, 1)
    _dense_init(rng, store, "val.log_std", d, 1, bias=-1.0)

    d = config.latent_dim
    for i, h in enumerate(config.classifier_hidden):
        _dense_init(rng, store, f"cls.h{i}", d, h)
        d = h
    _dense_init(rng, store, "cls.out", d, 1)

    store.add("prior.logits", np.zeros(config.prior_components))
    store.add(
        "prior.means",
        0.5 * rng.standard_normal((config.prior_components, config.latent_dim)),
    )
    store.add("prior.log_stds", np.zeros((config.prior_components, config.latent_dim)))
    return Model(config=config, store=store)


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class FrameBatch:
    """A batch of frames: model inputs plus per-frame supervision."""

    inputs: np.ndarray                       # (B, input_dim)
    actions: np.ndarray                      # (B, action_dim)
    is_expert: np.ndarray                    # (B,) bool
    returns: Optional[np.ndarray] = None     # (B,) discounted-return targets
    outcome_labels: Optional[np.ndarray] = None  # (B,) 1.0 failure / 0.0 success

    def __post_init__(self):
        b = self.inputs.shape[0]
        for name in ("actions", "is_expert", "returns", "outcome_labels"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != b:
                raise ModelError(f"batch field {name} has {arr.shape[0]} rows, expected {b}")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def batch_from_labeled(
    labeled: Sequence[LabeledTrajectory], *, expert_only: bool = False
) -> FrameBatch:
    """Flatten labeled trajectories into one frame batch."""
    inputs, actions, is_expert, returns, outcomes = [], [], [], [], []
    for lt in labeled:
        traj = lt.trajectory
        if expert_only and not traj.provenance.is_expert:
            continue
        fail = 1.0 if traj.outcome.is_failure else 0.0
        for step, g in zip(traj.steps, lt.returns):
            inputs.append(observation_vector(step.observation))
            actions.append(step.action.as_array())
            is_expert.append(traj.provenance.is_expert)
            returns.append(g)
            outcomes.append(fail)
    if not inputs:
        raise ModelError("no frames matched the batch filter")
    return FrameBatch(
        inputs=np.asarray(inputs),
        actions=np.asarray(actions),
        is_expert=np.asarray(is_expert, dtype=bool),
        returns=np.asarray(returns),
        outcome_labels=np.asarray(outcomes),
    )


# ---------------------------------------------------------------------------
# forward graphs (training)


def _dense_graph(bound, prefix, x, n_layers):
    for i in range(n_layers):
        x = G.tanh(G.add(G.matmul(x, bound[f"{prefix}.h{i}.w"]), bound[f"{prefix}.h{i}.b"]))
    return x


def _encoder_graph(bound, config, x):
    h = _dense_graph(bound, "enc", x, len(config.encoder_hidden))
    mean = G.add(G.matmul(h, bound["enc.mean.w"]), bound["enc.mean.b"])
    log_std = G.clamp(
        G.add(G.matmul(h, bound["enc.log_std.w"]), bound["enc.log_std.b"]),
        LOG_STD_MIN,
        LOG_STD_MAX,
    )
    return mean, log_std


def _sample_latents(tape, bound, config, inputs, rng):
    """Encode a batch and draw mc_samples latents per frame.

    Returns (z, mean_rep, log_std_rep) with rows ordered sample-major:
    the first B rows are sample 0, the next B are sample 1, ...
    """
    s = config.mc_samples
    b = inputs.shape[0]
    mean, log_std = _encoder_graph(bound, config, tape.constant(inputs))
    mean_rep = G.tile_rows(mean, s)
    log_std_rep = G.tile_rows(log_std, s)
    noise = rng.standard_normal((s * b, config.latent_dim))
    z = G.gaussian_reparam_sample(mean_rep, log_std_rep, noise)
    return z, mean_rep, log_std_rep


def _action_graph(bound, config, z):
    h = _dense_graph(bound, "act", z, len(config.action_hidden))
    return G.add(G.matmul(h, bound["act.out.w"]), bound["act.out.b"])


def _value_graph(bound, config, z):
    h = _dense_graph(bound, "val", z, len(config.value_hidden))
    v_mean = G.add(G.matmul(h, bound["val.mean.w"]), bound["val.mean.b"])
    v_log_std = G.clamp(
        G.add(G.matmul(h, bound["val.log_std.w"]), bound["val.log_std.b"]),
        LOG_STD_MIN,
        LOG_STD_MAX,
    )
    return v_mean, v_log_std


def _classifier_graph(bound, config, z):
    h = _dense_graph(bound, "cls", z, len(config.classifier_hidden))
    return G.add(G.matmul(h, bound["cls.out.w"]), bound["cls.out.b"])


def _log_prior_graph(bound, config, z):
    """log r(z) under the learned mixture, via log-sum-exp over components."""
    logits = bound["prior.logits"]
    log_weights = G.sub(logits, G.log_sum_exp(logits, axis=-1))
    comps = [
        G.diag_gaussian_log_prob(
            z,
            G.select_row(bound["prior.means"], k),
            G.select_row(bound["prior.log_stds"], k),
        )
        for k in range(config.prior_components)
    ]
    return G.log_sum_exp(G.add(G.column_stack(comps), log_weights), axis=1)


def _kl_sum_graph(tape, bound, config, z, mean_rep, log_std_rep):
    """Sum over (sample, frame) of log q(z|s) - log r(z)."""
    log_q = G.diag_gaussian_log_prob(z, mean_rep, log_std_rep)
    log_r = _log_prior_graph(bound, config, z)
    return G.sum(G.sub(log_q, log_r))


def _bc_term(tape, bound, config, batch: FrameBatch, rng):
    z, mean_rep, log_std_rep = _sample_latents(tape, bound, config, batch.inputs, rng)
    a_hat = _action_graph(bound, config, z)
    target = np.tile(batch.actions, (config.mc_samples, 1))
    residual = G.add_const(a_hat, -target)
    n = z.shape[0]
    bc = G.scale(G.sum(G.huber(residual, 1.0)), 1.0 / n)
    return bc, (z, mean_rep, log_std_rep, n)


def _value_term(tape, bound, config, batch: FrameBatch, rng):
    if batch.returns is None or not np.all(np.isfinite(batch.returns)):
        raise ModelError("value loss requires finite return targets on every frame")
    z, mean_rep, log_std_rep = _sample_latents(tape, bound, config, batch.inputs, rng)
    v_mean, v_log_std = _value_graph(bound, config, z)
    n = z.shape[0]
    v_noise = rng.standard_normal((n, 1))
    v_hat = G.gaussian_reparam_sample(v_mean, v_log_std, v_noise)
    target = np.tile(batch.returns.reshape(-1, 1), (config.mc_samples, 1))
    residual = G.add_const(v_hat, -target)
    value = G.scale(G.sum(G.huber(residual, 1.0)), 1.0 / n)
    return value, (z, mean_rep, log_std_rep, n)


def _classifier_term(tape, bound, config, batch: FrameBatch, rng):
    if batch.outcome_labels is None:
        raise ModelError("classifier loss requires outcome labels on every frame")
    z, mean_rep, log_std_rep = _sample_latents(tape, bound, config, batch.inputs, rng)
    logit = _classifier_graph(bound, config, z)
    n = z.shape[0]
    labels = np.tile(batch.outcome_labels.reshape(-1, 1), (config.mc_samples, 1))
    # stable binary cross-entropy: softplus(l) - l * y
    bce = G.sub(G.softplus(logit), G.mul_const(logit, labels))
    cls = G.scale(G.sum(bce), 1.0 / n)
    return cls, (z, mean_rep, log_std_rep, n)


def combined_loss_graph(
    tape: Tape,
    bound: dict,
    config: ModelConfig,
    expert_batch: FrameBatch,
    labeled_batch: FrameBatch,
    rng: np.random.Generator,
    mode: str = "bcva",
) -> dict:
    """Build the full training loss on one tape; returns component tensors.

    The KL term is averaged over the union of both batches so the bottleneck
    constrains the shared representation wherever it is used.
    """
    if not bool(np.all(expert_batch.is_expert)):
        raise ModelError("behavioral-cloning batch contains policy-rollout frames")
    if mode not in ("bcva", "classifier"):
        raise ModelError(f"unknown training mode {mode!r}")

    bc, (z_e, mean_e, log_std_e, n_e) = _bc_term(tape, bound, config, expert_batch, rng)
    if mode == "bcva":
        head, (z_l, mean_l, log_std_l, n_l) = _value_term(
            tape, bound, config, labeled_batch, rng
        )
    else:
        head, (z_l, mean_l, log_std_l, n_l) = _classifier_term(
            tape, bound, config, labeled_batch, rng
        )
    kl_sum_e = _kl_sum_graph(tape, bound, config, z_e, mean_e, log_std_e)
    kl_sum_l = _kl_sum_graph(tape, bound, config, z_l, mean_l, log_std_l)
    kl = G.scale(G.add(kl_sum_e, kl_sum_l), 1.0 / (n_e + n_l))

    total = G.add(
        G.add(bc, G.scale(head, config.value_weight)), G.scale(kl, config.kl_weight)
    )
    out = {"bc": bc, "kl": kl, "total": total}
    out["value" if mode == "bcva" else "classifier"] = head
    return out


def combine_losses(bc: float, value: float, kl: float, config: ModelConfig) -> float:
    """Scalar form of the combined objective."""
    return bc + config.value_weight * value + config.kl_weight * kl


# ---------------------------------------------------------------------------
# public scalar losses


def _scalar(model: Model, builder) -> float:
    tape = Tape()
    bound = model.store.bind(tape)
    return builder(tape, bound).item()


def loss_bc(model: Model, batch: FrameBatch, rng: np.random.Generator) -> float:
    """Monte-Carlo Huber imitation loss; expert frames only."""
    if not bool(np.all(batch.is_expert)):
        raise ModelError("behavioral-cloning batch contains policy-rollout frames")
    return _scalar(
        model, lambda t, b: _bc_term(t, b, model.config, batch, rng)[0]
    )


def loss_value(model: Model, batch: FrameBatch, rng: np.random.Generator) -> float:
    """Monte-Carlo Huber loss between sampled value predictions and returns."""
    return _scalar(
        model, lambda t, b: _value_term(t, b, model.config, batch, rng)[0]
    )


def loss_classifier(model: Model, batch: FrameBatch, rng: np.random.Generator) -> float:
    """Binary cross-entropy of the failure classifier over the shared latent."""
    return _scalar(
        model, lambda t, b: _classifier_term(t, b, model.config, batch, rng)[0]
    )


def loss_kl(model: Model, batch: FrameBatch, rng: np.random.Generator) -> float:
    """Sampled KL estimate between the posterior and the learned mixture prior."""

    def build(tape, bound):
        z, mean_rep, log_std_rep = _sample_latents(
            tape, bound, model.config, batch.inputs, rng
        )
        total = _kl_sum_graph(tape, bound, model.config, z, mean_rep, log_std_rep)
        return G.scale(total, 1.0 / z.shape[0])

    return _scalar(model, build)


def loss_combined(
    model: Model,
    expert_batch: FrameBatch,
    labeled_batch: FrameBatch,
    rng: np.random.Generator,
    mode: str = "bcva",
) -> float:
    tape = Tape()
    bound = model.store.bind(tape)
    return combined_loss_graph(
        tape, bound, model.config, expert_batch, labeled_batch, rng, mode
    )["total"].item()


# ---------------------------------------------------------------------------
# inference (plain numpy, deterministic)


def _dense_forward(store, prefix, x, n_layers):
    for i in range(n_layers):
        x = np.tanh(x @ store[f"{prefix}.h{i}.w"] + store[f"{prefix}.h{i}.b"])
    return x


def _encode_forward(store, config, x):
    h = _dense_forward(store, "enc", x, len(config.encoder_hidden))
    mean = h @ store["enc.mean.w"] + store["enc.mean.b"]
    log_std = np.clip(
        h @ store["enc.log_std.w"] + store["enc.log_std.b"], LOG_STD_MIN, LOG_STD_MAX
    )
    return mean, log_std


def encode(model: Model, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
    """Posterior parameters (mean, log_std) for one observation."""
    x = observation_vector(obs).reshape(1, -1)
    if x.shape[1] != model.config.input_dim:
        raise ModelError(
            f"observation vector has dim {x.shape[1]}, model expects "
            f"{model.config.input_dim}"
        )
    mean, log_std = _encode_forward(model.store, model.config, x)
    return mean[0], log_std[0]


def _heads_forward(store, config, x):
    mean, _ = _encode_forward(store, config, x)
    a = _dense_forward(store, "act", mean, len(config.action_hidden))
    actions = a @ store["act.out.w"] + store["act.out.b"]
    v = _dense_forward(store, "val", mean, len(config.value_hidden))
    values = np.clip((v @ store["val.mean.w"] + store["val.mean.b"])[:, 0], -1.0, 1.0)
    c = _dense_forward(store, "cls", mean, len(config.classifier_hidden))
    logits = (c @ store["cls.out.w"] + store["cls.out.b"])[:, 0]
    probs = np.where(
        logits >= 0, 1.0 / (1.0 + np.exp(-logits)), np.exp(logits) / (1.0 + np.exp(logits))
    )
    return actions, values, probs


def predict(model: Model, obs: Observation) -> tuple[Action, float, float]:
    """Deterministic inference through the posterior mean.

    Returns the policy action, the value estimate clamped to [-1, 1], and the
    classifier's failure probability.
    """
    if model.config.action_dim != 4:
        raise ModelError("predict requires the 4-field task action head")
    x = observation_vector(obs).reshape(1, -1)
    if x.shape[1] != model.config.input_dim:
        raise ModelError(
            f"observation vector has dim {x.shape[1]}, model expects "
            f"{model.config.input_dim}"
        )
    actions, values, probs = _heads_forward(model.store, model.config, x)
    a = actions[0]
    action = Action(
        base_forward=float(a[0]),
        base_turn=float(a[1]),
        wrist_rate=float(a[2]),
        terminate=float(np.clip(a[3], 0.0, 1.0)),
    )
    return action, float(values[0]), float(probs[0])


def value_trace(model: Model, trajectory: Trajectory, signal: str = "value") -> np.ndarray:
    """Per-frame gate signal for an episode, batched through the network.

    `signal` is "value" (clamped value head) or "classifier" (negated failure
    probability, so lower still means worse).
    """
    x = np.stack([observation_vector(s.observation) for s in trajectory.steps])
    _, values, probs = _heads_forward(model.store, model.config, x)
    if signal == "value":
        return values
    if signal == "classifier":
        return -probs
    raise ModelError(f"unknown gate signal {signal!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainData:
    """Compact frame store shared by training runs.

    Pixels are kept as uint8 levels; batches are assembled as float64 on
    demand, so a large corpus stays memory-friendly.
    """

    pixel_levels: np.ndarray        # (N, pixels) uint8
    kinematics: np.ndarray          # (N, joints + 3)
    actions: np.ndarray             # (N, action_dim)
    returns: np.ndarray             # (N,)
    outcome_labels: np.ndarray      # (N,)
    is_expert: np.ndarray           # (N,) bool
    episode_ids: list[str] = field(default_factory=list)  # per frame

    def __post_init__(self):
        n = self.pixel_levels.shape[0]
        arrays = (self.kinematics, self.actions, self.returns,
                  self.outcome_labels, self.is_expert)
        if any(a.shape[0] != n for a in arrays):
            raise ModelError("training arrays disagree on frame count")

    def __len__(self) -> int:
        return self.pixel_levels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.pixel_levels.shape[1] + self.kinematics.shape[1]

    @classmethod
    def from_labeled(cls, labeled: Sequence[LabeledTrajectory]) -> "TrainData":
        pixels, kins, acts, rets, outs, experts, eids = [], [], [], [], [], [], []
        for lt in labeled:
            traj = lt.trajectory
            fail = 1.0 if traj.outcome.is_failure else 0.0
            for step, g in zip(traj.steps, lt.returns):
                obs = step.observation
                pixels.append(np.rint(obs.pixels * 255.0).astype(np.uint8))
                kins.append(
                    np.concatenate(
                        [obs.kinematics.joint_angles, obs.kinematics.base_pose]
                    )
                )
                acts.append(step.action.as_array())
                rets.append(g)
                outs.append(fail)
                experts.append(traj.provenance.is_expert)
                eids.append(traj.episode_id)
        if not pixels:
            raise ModelError("no labeled frames to train on")
        return cls(
            pixel_levels=np.stack(pixels),
            kinematics=np.asarray(kins),
            actions=np.asarray(acts),
            returns=np.asarray(rets),
            outcome_labels=np.asarray(outs),
            is_expert=np.asarray(experts, dtype=bool),
            episode_ids=eids,
        )

    def gather(self, idx: np.ndarray) -> FrameBatch:
        inputs = np.empty((len(idx), self.input_dim))
        inputs[:, : self.pixel_levels.shape[1]] = self.pixel_levels[idx] / 255.0
        inputs[:, self.pixel_levels.shape[1]:] = self.kinematics[idx]
        return FrameBatch(
            inputs=inputs,
            actions=self.actions[idx],
            is_expert=self.is_expert[idx],
            returns=self.returns[idx],
            outcome_labels=self.outcome_labels[idx],
        )


def train(
    data: TrainData,
    model_config: ModelConfig,
    train_config: TrainConfig,
    mode: str = "bcva",
) -> tuple[Model, list[dict]]:
    """Minibatch Adam on the combined loss; deterministic given the seed.

    Returns the trained model and one loss record per epoch.
    """
    if mode not in ("bcva", "classifier"):
        raise ModelError(f"unknown training mode {mode!r}")
    if data.input_dim != model_config.input_dim:
        raise ModelError(
            f"data input dim {data.input_dim} != model input dim "
            f"{model_config.input_dim}"
        )
    expert_idx = np.flatnonzero(data.is_expert)
    if expert_idx.size == 0:
        raise ModelError("training data contains no expert frames")
    n = len(data)

    model = init_model(model_config, train_config.seed)
    rng = np.random.Generator(np.random.Philox(train_config.seed + 1))
    head_key = "value" if mode == "bcva" else "classifier"
    steps = train_config.steps_per_epoch
    if steps is None:
        steps = max(1, int(np.ceil(n / train_config.batch_size)))

    curve: list[dict] = []
    for epoch in range(1, train_config.epochs + 1):
        sums = {"bc": 0.0, head_key: 0.0, "kl": 0.0, "total": 0.0}
        for _ in range(steps):
            e_idx = expert_idx[rng.integers(0, expert_idx.size, train_config.batch_size)]
            l_idx = rng.integers(0, n, train_config.batch_size)
            expert_batch = data.gather(e_idx)
            labeled_batch = data.gather(l_idx)
            tape = Tape()
            bound = model.store.bind(tape)
            losses = combined_loss_graph(
                tape, bound, model_config, expert_batch, labeled_batch, rng, mode
            )
            tape.backward(losses["total"])
            model.store.harvest(bound)
            adam_step(model.store, lr=train_config.lr)
            model.step_count += 1
            for key in sums:
                sums[key] += losses[key].item()
        record = {"epoch": epoch, "steps": steps}
        record.update(
            {f"loss_{key}": sums[key] / steps for key in ("bc", head_key, "kl", "total")}
        )
        curve.append(record)
    return model, curve


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(model: Model, path: str | os.PathLike) -> None:
    """Binary checkpoint: JSON header line + little-endian float64 payload."""
    names = model.store.names()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step_count": model.step_count,
        "stats": model.stats_meta,
        "params": [
            {"name": name, "shape": list(model.store[name].shape)} for name in names
        ],
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(model.store[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(
    path: str | os.PathLike, expect_config: Optional[ModelConfig] = None
) -> Model:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"not a checkpoint file: {path}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ModelError(
                f"checkpoint version {header.get('version')!r} is not supported"
            )
        config = ModelConfig.from_dict(header["config"])
        if expect_config is not None and config != expect_config:
            raise ModelError("checkpoint config does not match the expected config")
        store = ParamStore()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ModelError(f"truncated checkpoint: {path}")
            store.add(entry["name"], np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        if fh.read(1):
            raise ModelError(f"trailing bytes in checkpoint: {path}")
    return Model(
        config=config,
        store=store,
        step_count=int(header["step_count"]),
        stats_meta=header.get("stats"),
    )
