"""Training loop, checkpoints, curriculum initialization and the metrics log.

Random streams are derived from ``SeedSequence`` entropy tuples so that
training scenes, on-policy sampling, parameter init and held-out scenes never
share a stream:

    (seed, 0)          parameter initialization
    (seed, 1, step)    training scene of each step
    (seed, 2)          trajectory sampling during training
    (eval_seed, 3, i)  i-th held-out scene
    (eval_seed, 4, s)  sampling for the evaluation at step s
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..geometry import Scene, scene_features
from ..gfn import LOSS_VARIANTS, REWARD_MODES, GfnConfig, GfnParams, NonFiniteLossError, reward, sample_and_grad
from ..neural import AdamState, NonFiniteGradientError, adam_step
from ..tracer import K_MAX, PathCandidate
from .canyon import CanyonParams, generate_canyon_scene
from .metrics import EvalMetrics, evaluate, oracle_sets

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "loss", "accuracy", "hit_rate")


class ConfigError(ValueError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    k: int = 1
    d: int = 100
    flow_hidden: int = 500
    steps: int = 500_000
    batch: int = 50
    lr: float = 3e-5
    reward: str = "binary"
    loss: str = "raw"
    eval_every: int = 1000
    eval_scenes: int = 100
    eval_samples: int = 10
    seed: int = 0
    eval_seed: int = 1
    encoder_activation: str = "relu"
    flow_activation: str = "relu"
    scene: CanyonParams = field(default_factory=CanyonParams)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.k <= K_MAX:
            raise ConfigError(f"k must be in [1, {K_MAX}], got {self.k}")
        for name in ("d", "flow_hidden", "batch", "eval_every", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.steps < 0 or self.eval_scenes < 0:
            raise ConfigError("steps and eval_scenes must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.reward not in REWARD_MODES:
            raise ConfigError(f"reward must be one of {REWARD_MODES}")
        if self.loss not in LOSS_VARIANTS:
            raise ConfigError(f"loss must be one of {LOSS_VARIANTS}")
        if not isinstance(self.scene, CanyonParams):
            raise ConfigError("scene must be CanyonParams")

    def model_config(self) -> GfnConfig:
        return GfnConfig(
            d=self.d,
            flow_hidden=self.flow_hidden,
            encoder_activation=self.encoder_activation,
            flow_activation=self.flow_activation,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "scene" in kw:
                kw["scene"] = CanyonParams.from_dict(kw["scene"])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        preset = data.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            base = PRESETS[preset].to_dict()
            base.update(data)
            data = base
        return cls.from_dict(data)


DESK_SCENE = CanyonParams(buildings_per_side=(1, 1), r_max=4)

PRESETS: dict[str, TrainConfig] = {
    "paper": TrainConfig(),
    "paper-k2": TrainConfig(k=2),
    "desk-k1": TrainConfig(k=1, d=32, steps=20_000, eval_every=2000, eval_scenes=30, scene=DESK_SCENE),
    "desk-k2": TrainConfig(k=2, d=32, steps=10_000, eval_every=1000, eval_scenes=30, scene=DESK_SCENE),
}


# ------------------------------------------------------------------ checkpoints


def make_checkpoint(cfg: TrainConfig, params: GfnParams, adam: AdamState, step: int) -> dict:
    return {"config": cfg.to_dict(), "params": params.to_dict(), "adam": adam.to_dict(), "step": step}


def save_checkpoint(ckpt: Mapping, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())


def checkpoint_params(ckpt: Mapping) -> GfnParams:
    cfg = TrainConfig.from_dict(ckpt["config"])
    return GfnParams.from_dict(cfg.model_config(), ckpt["params"])


def _check_architecture(src: GfnConfig, dst: GfnConfig) -> None:
    if src != dst:
        raise ArchitectureMismatchError(f"checkpoint architecture {src} does not match {dst}")


def curriculum_init(ckpt, cfg: TrainConfig) -> GfnParams:
    """Copy every weight of a trained model into a model for ``cfg`` (typically a larger K).

    The architecture does not depend on K, so nothing is reshaped.
    """
    if not isinstance(ckpt, Mapping):
        ckpt = load_checkpoint(ckpt)
    src = checkpoint_params(ckpt)
    _check_architecture(src.config, cfg.model_config())
    return src.copy()


# ------------------------------------------------------------------ metrics log


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss: float
    accuracy: float
    hit_rate: float

    def csv_fields(self) -> list[str]:
        return [str(self.step), repr(float(self.loss)), repr(float(self.accuracy)), repr(float(self.hit_rate))]


def format_metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"expected columns {METRICS_COLUMNS}, got {reader.fieldnames}")
        return [
            MetricsRow(int(r["step"]), float(r["loss"]), float(r["accuracy"]), float(r["hit_rate"]))
            for r in reader
        ]


class _MetricsLog:
    """Append-only CSV writer; a no-op sink when no path is given."""

    def __init__(self, path: Path | None):
        self.rows: list[MetricsRow] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(METRICS_COLUMNS)
            self._fh.flush()

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("metrics log steps must increase")
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row.csv_fields())
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


# ------------------------------------------------------------------- training


def eval_scene_set(cfg: TrainConfig, count: int | None = None) -> list[Scene]:
    count = cfg.eval_scenes if count is None else count
    return [generate_canyon_scene(np.random.SeedSequence((cfg.eval_seed, 3, i)), cfg.scene) for i in range(count)]


def training_scene(cfg: TrainConfig, step: int) -> Scene:
    return generate_canyon_scene(np.random.SeedSequence((cfg.seed, 1, step)), cfg.scene)


@dataclass
class TrainResult:
    checkpoint: dict
    metrics: list[MetricsRow]
    params: GfnParams


def _initial_state(cfg: TrainConfig, init) -> tuple[GfnParams, AdamState]:
    model_cfg = cfg.model_config()
    if init is None:
        params = GfnParams.init(model_cfg, np.random.SeedSequence((cfg.seed, 0)))
        return params, AdamState.for_params(params.arrays, lr=cfg.lr)
    if isinstance(init, GfnParams):
        _check_architecture(init.config, model_cfg)
        return init.copy(), AdamState.for_params(init.arrays, lr=cfg.lr)
    if not isinstance(init, Mapping):
        init = load_checkpoint(init)
    params = checkpoint_params(init)
    _check_architecture(params.config, model_cfg)
    if "adam" in init:
        adam = AdamState.from_dict(init["adam"])
        adam.lr = cfg.lr
    else:
        adam = AdamState.for_params(params.arrays, lr=cfg.lr)
    return params, adam


def train(
    cfg: TrainConfig,
    init=None,
    out_dir=None,
    scene_fn: Callable[[int], Scene] | None = None,
    reward_fn: Callable[[Scene, PathCandidate], float] | None = None,
    eval_scenes: Sequence[Scene] | None = None,
    eval_oracles: Sequence[frozenset] | None = None,
) -> TrainResult:
    """Run on-policy flow-matching training.

    Every ``eval_every`` steps (and at step 0 and the last step) the model is
    scored on the held-out scenes, a row is appended to ``metrics.csv`` and
    ``checkpoint.json`` is rewritten. ``scene_fn`` and ``reward_fn`` override
    the canyon generator and the tracer reward, for toy problems.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    params, adam = _initial_state(cfg, init)
    if eval_scenes is None:
        eval_scenes = eval_scene_set(cfg)
    if eval_oracles is None and eval_scenes:
        eval_oracles = oracle_sets(eval_scenes, cfg.k)
    scene_fn = scene_fn or (lambda step: training_scene(cfg, step))
    reward_fn = reward_fn or (lambda scene, cand: reward(scene, cand, cfg.reward))
    sample_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))

    mlog = _MetricsLog(out / "metrics.csv" if out is not None else None)
    pending_losses: list[float] = []

    def checkpoint(step: int) -> dict:
        return make_checkpoint(cfg, params, adam, step)

    def record(step: int) -> None:
        loss = float(np.mean(pending_losses)) if pending_losses else math.nan
        pending_losses.clear()
        if eval_scenes:
            m = evaluate(params, eval_scenes, cfg.k, cfg.eval_samples, np.random.SeedSequence((cfg.eval_seed, 4, step)), eval_oracles)
        else:
            m = EvalMetrics(math.nan, math.nan)
        mlog.append(MetricsRow(step, loss, m.accuracy, m.hit_rate))
        log.info("step %d loss %.6g accuracy %.4f hit_rate %.4f", step, loss, m.accuracy, m.hit_rate)
        if out is not None:
            save_checkpoint(checkpoint(step), out / "checkpoint.json")

    try:
        record(0)
        for step in range(1, cfg.steps + 1):
            scene = scene_fn(step)
            feat = scene_features(scene)
            try:
                res = sample_and_grad(
                    feat, cfg.k, params, sample_rng, cfg.batch, lambda c: reward_fn(scene, c), cfg.loss
                )
                new_arrays, adam = adam_step(adam, params.arrays, res.grads)
            except (NonFiniteLossError, NonFiniteGradientError) as exc:
                path = None
                if out is not None:
                    path = out / "checkpoint_abort.json"
                    save_checkpoint(checkpoint(step - 1), path)
                raise TrainingAborted(f"step {step}: {exc}", path) from exc
            params = params.replace(new_arrays)
            pending_losses.append(res.loss)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                record(step)
    finally:
        mlog.close()
    return TrainResult(checkpoint(cfg.steps), mlog.rows, params)
