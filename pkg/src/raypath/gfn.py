"""GFlowNet path-candidate sampler.

The scene is encoded once per forward pass: a shared object MLP maps each
facet's invariant features to a ``d``-vector, and a scene MLP maps their mean
to the scene vector. Sampling then walks the search tree: at every state a
shared flow head scores each facet from (scene vector, facet vector, hidden
state), the facet visited last is masked to an exact zero, and the next facet
is drawn with probability proportional to its flow. A tanh cell folds each
chosen facet into the hidden state, so visit order matters.

Training minimises the squared flow-conservation residual at every state of
the sampled trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import neural as nn
from .geometry import F_RAW, G_RAW, InvariantFeatures, Scene
from .neural import Mlp, ParamSpec, Tensor
from .tracer import PathCandidate, trace_and_validate

REWARD_MODES = ("binary", "inverse_length")
LOSS_VARIANTS = ("raw", "log")
LOG_EPS = 1e-20


class AllMaskedError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GfnConfig:
    d: int = 100
    flow_hidden: int = 500
    encoder_activation: str = "relu"
    flow_activation: str = "relu"
    logit_clamp: float = 30.0
    in_features: int = F_RAW + G_RAW

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GfnConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def param_specs(cfg: GfnConfig) -> list[ParamSpec]:
    d, h = cfg.d, cfg.flow_hidden
    specs = nn.mlp_specs("object_encoder", [cfg.in_features, d, d, d], cfg.encoder_activation)
    specs += nn.mlp_specs("scene_encoder", [d, d, d, d], cfg.encoder_activation)
    specs += [
        ParamSpec("cell.w_hidden", (d, d), "glorot"),
        ParamSpec("cell.w_input", (d, d), "glorot"),
        ParamSpec("cell.bias", (d,), "zeros"),
    ]
    specs += nn.mlp_specs("flow_head", [3 * d, h, h, 1], cfg.flow_activation)
    return specs


@dataclass
class GfnParams:
    config: GfnConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        for spec in param_specs(self.config):
            arr = self.arrays.get(spec.name)
            if arr is None:
                raise nn.ShapeError(f"missing parameter {spec.name!r}")
            if tuple(np.shape(arr)) != spec.shape:
                raise nn.ShapeError(f"{spec.name}: shape {np.shape(arr)} != {spec.shape}")

    @classmethod
    def init(cls, config: GfnConfig, seed) -> "GfnParams":
        return cls(config, nn.init_params(param_specs(config), seed))

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor.leaf(v) for k, v in self.arrays.items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "GfnParams":
        return GfnParams(self.config, dict(arrays))

    def copy(self) -> "GfnParams":
        return GfnParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays.items()}

    @classmethod
    def from_dict(cls, config: GfnConfig, d: Mapping) -> "GfnParams":
        return cls(config, {k: np.array(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class SceneEncoding:
    scene_vec: np.ndarray  # (d,)
    obj_vecs: np.ndarray  # (N, d)

    @property
    def n(self) -> int:
        return self.obj_vecs.shape[0]


@dataclass
class SamplerState:
    visited: tuple[int, ...]
    hidden: np.ndarray

    @classmethod
    def initial(cls, d: int) -> "SamplerState":
        return cls((), np.zeros(d))


@dataclass
class Trajectory:
    flows: np.ndarray  # (K, N): flow vector at each visited non-terminal state
    choices: tuple[int, ...]
    reward: float = 0.0

    @property
    def candidate(self) -> PathCandidate:
        return PathCandidate(self.choices)

    def child_flows(self, t: int) -> np.ndarray | None:
        """Flow vector of the state reached at step ``t``, or None if it is terminal."""
        return self.flows[t + 1] if t + 1 < len(self.choices) else None


# ------------------------------------------------------------ tensor-level model


def _encode(x: np.ndarray, w: Mapping, cfg: GfnConfig) -> tuple[Tensor, Tensor]:
    obj = nn.mlp_apply(Mlp.from_params(w, "object_encoder", cfg.encoder_activation), x)
    scene = nn.mlp_apply(Mlp.from_params(w, "scene_encoder", cfg.encoder_activation), nn.mean(obj, axis=0))
    return scene, obj


def _cell(hidden, obj_rows, w: Mapping) -> Tensor:
    return nn.tanh(nn.matmul_t(hidden, w["cell.w_hidden"]) + nn.matmul_t(obj_rows, w["cell.w_input"]) + w["cell.bias"])


def _flow_block(scene_vec, obj_vecs, hidden, last: np.ndarray, w: Mapping, cfg: GfnConfig) -> Tensor:
    """Masked flows for ``L`` states at once, shape (L, N).

    ``hidden`` is (L, d); ``last[l]`` is the facet visited last by state
    ``l`` or -1 for the initial state.
    """
    d = cfg.d
    n = obj_vecs.shape[0]
    n_states = hidden.shape[0]
    w0 = w["flow_head.0.weight"]
    # First layer on concat(scene, object, hidden), evaluated blockwise.
    pre = (
        nn.reshape(nn.matmul_t(hidden, nn.getitem(w0, (slice(None), slice(2 * d, 3 * d)))), (n_states, 1, -1))
        + nn.matmul_t(obj_vecs, nn.getitem(w0, (slice(None), slice(d, 2 * d))))
        + nn.matmul_t(scene_vec, nn.getitem(w0, (slice(None), slice(0, d))))
        + w["flow_head.0.bias"]
    )
    h = nn.activate(pre, cfg.flow_activation)
    head = Mlp.from_params(w, "flow_head", cfg.flow_activation)
    for i, layer in enumerate(head.layers[1:], start=1):
        h = nn.dense(h, layer.weight, layer.bias)
        if i < len(head.layers) - 1:
            h = nn.activate(h, cfg.flow_activation)
    logits = nn.reshape(h, (n_states, n))
    mask = np.ones((n_states, n))
    rows = np.nonzero(last >= 0)[0]
    mask[rows, last[rows]] = 0.0
    flows = nn.exp(nn.clamp(logits, -cfg.logit_clamp, cfg.logit_clamp)) * mask
    if np.any(flows.data.max(axis=1) <= 0.0):
        raise AllMaskedError("every child of a state is masked")
    return flows


def _draw(flow_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One index per row, with probability proportional to the row's entries."""
    cum = np.cumsum(flow_rows, axis=1)
    total = cum[:, -1]
    u = rng.random(len(flow_rows)) * total
    idx = (cum <= u[:, None]).sum(axis=1)
    last_pos = flow_rows.shape[1] - 1 - np.argmax(flow_rows[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last_pos)


@dataclass
class _Rollout:
    flows: Tensor  # (P, N), every expanded state stacked level by level
    parent_rows: np.ndarray  # (B, K): row of ``flows`` for the state each choice was made from
    choices: np.ndarray  # (B, K)

    def trajectories(self, rewards: Sequence[float] | None = None) -> list[Trajectory]:
        data = self.flows.data
        out = []
        for b in range(len(self.choices)):
            r = 0.0 if rewards is None else float(rewards[b])
            out.append(Trajectory(data[self.parent_rows[b]].copy(), tuple(self.choices[b].tolist()), r))
        return out


def _rollout(scene_vec, obj_vecs, k: int, w: Mapping, cfg: GfnConfig, rng=None, batch: int = 1, choices=None) -> _Rollout:
    """Walk the search tree for a batch of trajectories, sampling or replaying ``choices``.

    States shared by several trajectories are expanded once.
    """
    if choices is not None:
        choices = np.asarray(choices, dtype=np.int64).reshape(-1, k)
        batch = len(choices)
    out_choices = np.empty((batch, k), dtype=np.int64)
    parent_rows = np.empty((batch, k), dtype=np.int64)
    level_last = np.array([-1])
    hidden = Tensor(np.zeros((1, cfg.d)), requires_grad=False)
    local = np.zeros(batch, dtype=np.int64)
    offset = 0
    blocks = []
    for depth in range(k):
        flows = _flow_block(scene_vec, obj_vecs, hidden, level_last, w, cfg)
        blocks.append(flows)
        if choices is None:
            chosen = _draw(flows.data[local], rng)
        else:
            chosen = choices[:, depth]
            if np.any(flows.data[local, chosen] <= 0.0):
                raise ValueError("replayed choice has zero flow (consecutive repeat)")
        out_choices[:, depth] = chosen
        parent_rows[:, depth] = offset + local
        offset += len(level_last)
        if depth == k - 1:
            break
        children: dict[tuple[int, int], int] = {}
        local = np.array([children.setdefault(key, len(children)) for key in zip(local.tolist(), chosen.tolist())])
        parents = np.array([p for p, _ in children], dtype=np.int64)
        level_last = np.array([c for _, c in children], dtype=np.int64)
        hidden = _cell(nn.take_rows(hidden, parents), nn.take_rows(obj_vecs, level_last), w)
    stacked = blocks[0] if len(blocks) == 1 else nn.concat(blocks, axis=0)
    return _Rollout(stacked, parent_rows, out_choices)


def _loss_from_rollout(ro: _Rollout, rewards: np.ndarray, variant: str = "raw") -> Tensor:
    batch, k = ro.choices.shape
    edge = nn.reshape(nn.getitem(ro.flows, (ro.parent_rows.ravel(), ro.choices.ravel())), (batch, k))
    rewards = np.asarray(rewards, dtype=np.float64).reshape(batch, 1)
    if k > 1:
        outflow = nn.sum(ro.flows, axis=1)
        child_out = nn.reshape(nn.take_rows(outflow, ro.parent_rows[:, 1:].ravel()), (batch, k - 1))
        target = nn.concat([child_out, rewards], axis=1)
    else:
        target = Tensor(rewards, requires_grad=False)
    if variant == "raw":
        resid = edge - target
    elif variant == "log":
        resid = nn.log(edge, LOG_EPS) - nn.log(target, LOG_EPS)
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return nn.mean(nn.square(resid))


# ------------------------------------------------------------------- public API


def _weights(p: GfnParams, leaves: Mapping[str, Tensor] | None) -> Mapping:
    return p.arrays if leaves is None else leaves


def encode_scene(feat: InvariantFeatures, p: GfnParams) -> SceneEncoding:
    scene, obj = _encode(feat.object_inputs(), p.arrays, p.config)
    return SceneEncoding(scene.data, obj.data)


def cell_update(state: SamplerState, chosen: int, enc: SceneEncoding, p: GfnParams) -> SamplerState:
    if state.visited and state.visited[-1] == chosen:
        raise ValueError(f"facet {chosen} repeats the previous interaction")
    if not 0 <= chosen < enc.n:
        raise ValueError(f"facet {chosen} out of range")
    h = _cell(state.hidden[None], enc.obj_vecs[[chosen]], p.arrays)
    return SamplerState(state.visited + (int(chosen),), h.data[0])


def flows(state: SamplerState, enc: SceneEncoding, p: GfnParams) -> np.ndarray:
    """Flow from ``state`` to each facet; the last visited facet gets exactly 0."""
    last = np.array([state.visited[-1] if state.visited else -1])
    return _flow_block(enc.scene_vec, enc.obj_vecs, state.hidden[None], last, p.arrays, p.config).data[0]


def sample_step(flowvec, rng) -> int:
    """Draw an index with probability proportional to ``flowvec``."""
    rng = np.random.default_rng(rng)
    f = np.asarray(flowvec, dtype=np.float64)
    if not np.any(f > 0):
        raise AllMaskedError("no positive flow to sample from")
    return int(_draw(f[None], rng)[0])


def sample_trajectories(enc: SceneEncoding, k: int, p: GfnParams, rng, batch: int) -> list[Trajectory]:
    rng = np.random.default_rng(rng)
    ro = _rollout(enc.scene_vec, enc.obj_vecs, k, p.arrays, p.config, rng, batch)
    return ro.trajectories()


def sample_trajectory(enc: SceneEncoding, k: int, p: GfnParams, rng) -> Trajectory:
    return sample_trajectories(enc, k, p, rng, 1)[0]


def reward(scene: Scene, cand, mode: str = "binary") -> float:
    """1 for a valid path (binary) or the inverse normalized path length; 0 if invalid."""
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {mode!r}")
    path, report = trace_and_validate(scene, cand)
    if not report.valid:
        return 0.0
    if mode == "binary":
        return 1.0
    return scene.length_scale / path.length()


def flow_matching_term(in_flow: float, out_flow: float = 0.0, reward_value: float = 0.0) -> float:
    """Squared residual of flow conservation at one state."""
    return (in_flow - reward_value - out_flow) ** 2


def flow_matching_loss(
    trajectories: Sequence[Trajectory],
    feat: InvariantFeatures,
    p: GfnParams,
    leaves: Mapping[str, Tensor] | None = None,
    variant: str = "raw",
) -> Tensor:
    """Mean squared conservation residual over every visited non-initial state.

    Flows are recomputed on the tape from ``p`` (or from ``leaves`` when
    gradients are wanted), replaying each trajectory's choices.
    """
    if not trajectories:
        raise ValueError("empty batch")
    k = len(trajectories[0].choices)
    w = _weights(p, leaves)
    scene_vec, obj_vecs = _encode(feat.object_inputs(), w, p.config)
    ro = _rollout(scene_vec, obj_vecs, k, w, p.config, choices=[t.choices for t in trajectories])
    loss = _loss_from_rollout(ro, np.array([t.reward for t in trajectories]), variant)
    if not np.isfinite(loss.data):
        raise NonFiniteLossError(f"flow-matching loss is {loss.item()}")
    return loss


def loss_and_grad(trajectories, feat, p: GfnParams, variant: str = "raw") -> tuple[float, dict[str, np.ndarray]]:
    leaves = p.leaves()
    loss = flow_matching_loss(trajectories, feat, p, leaves, variant)
    return loss.item(), nn.backward(loss, leaves)


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    trajectories: list[Trajectory] = field(repr=False)


def sample_and_grad(feat: InvariantFeatures, k: int, p: GfnParams, rng, batch: int, reward_fn, variant: str = "raw") -> StepResult:
    """Sample a batch on-policy, score it and differentiate the loss in one pass.

    ``reward_fn(candidate) -> float`` is called once per distinct candidate.
    """
    leaves = p.leaves()
    scene_vec, obj_vecs = _encode(feat.object_inputs(), leaves, p.config)
    ro = _rollout(scene_vec, obj_vecs, k, leaves, p.config, rng, batch)
    cache: dict[tuple[int, ...], float] = {}
    rewards = np.empty(batch)
    for b, row in enumerate(ro.choices.tolist()):
        key = tuple(row)
        if key not in cache:
            cache[key] = float(reward_fn(PathCandidate(key)))
        rewards[b] = cache[key]
    loss = _loss_from_rollout(ro, rewards, variant)
    if not np.isfinite(loss.data):
        raise NonFiniteLossError(f"flow-matching loss is {loss.item()}")
    return StepResult(loss.item(), nn.backward(loss, leaves), ro.trajectories(rewards))
