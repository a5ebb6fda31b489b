"""SGD with momentum and the joint classification + domain training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import layers as L
from . import model as M
from .data import N_CLASSES, BalancedBatchSampler
from .exceptions import CheckpointError, ConfigError, NumericError, TrainingDiverged, UsageError
from .tensorio import load_tensors, save_tensors

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "loss", "loss_cls", "loss_dom", "batch_acc")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.25
    lam: float = 0.5
    batch_size: int = 250
    iterations: int = 10000
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_gamma: float = 0.001
    lr_power: float = 0.75
    decay_biases: bool = True
    data_seed: int = 0
    init_seed: int = 0
    switch_seed: int = 0
    log_interval: int = 100
    # architecture (class/domain counts come from the episode)
    conv1: int = 20
    conv2: int = 50
    fc1: int = 500
    head_scope: str = "classifier"
    branch_convs: str = "shared"
    head_init: str = "glorot"
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError("lam", f"must be >= 0, got {self.lam}")
        for key in ("batch_size", "log_interval", "conv1", "conv2", "fc1"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.iterations < 0:
            raise ConfigError("iterations", f"must be >= 0, got {self.iterations}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr", f"must be > 0, got {self.base_lr}")
        for key in ("momentum", "weight_decay", "lr_gamma", "lr_power"):
            if getattr(self, key) < 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        if self.head_scope not in M.HEAD_SCOPES:
            raise ConfigError("head_scope", f"must be one of {M.HEAD_SCOPES}")
        if self.branch_convs not in M.BRANCH_CONVS:
            raise ConfigError("branch_convs", f"must be one of {M.BRANCH_CONVS}")
        if self.head_init not in ("glorot", "zeros"):
            raise ConfigError("head_init", "must be glorot or zeros")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype", "must be float64 or float32")

    def architecture(self, n_domains, n_classes, image_size=28):
        return M.Architecture(
            n_domains=n_domains, n_classes=n_classes, image_size=image_size,
            conv1=self.conv1, conv2=self.conv2, fc1=self.fc1,
            head_scope=self.head_scope, branch_convs=self.branch_convs, dtype=self.dtype,
        )

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def lr_at(t, config):
    """Inverse decay ``base_lr * (1 + gamma * t) ** -power``."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    return config.base_lr * (1.0 + config.lr_gamma * t) ** (-config.lr_power)


# ----------------------------------------------------------------------- SGD

@dataclass
class SgdState:
    velocity: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, arrays):
        return cls({k: np.zeros_like(v) for k, v in arrays.items()})


def sgd_step(params, grads, state, lr, momentum, weight_decay, decay_biases=True):
    """In-place ``v <- mu v - lr (g + wd theta); theta <- theta + v``.

    ``params``, ``grads`` and ``state.velocity`` are dicts keyed alike.
    """
    for name, theta in params.items():
        g = grads[name]
        v = state.velocity.setdefault(name, np.zeros_like(theta))
        if g.shape != theta.shape or v.shape != theta.shape:
            raise UsageError(f"{name}: grad {g.shape} / velocity {v.shape} vs param {theta.shape}")
        wd = weight_decay if (decay_biases or not name.endswith(".bias")) else 0.0
        v *= momentum
        v -= lr * (g + wd * theta)
        theta += v
    return params, state


# ------------------------------------------------------------------- training

@dataclass
class LogRecord:
    iteration: int
    lr: float
    loss: float
    loss_cls: float
    loss_dom: float
    batch_acc: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise UsageError("log iterations must be strictly increasing")
        self.records.append(rec)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.iteration] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                log.append(LogRecord(int(row["iteration"]), *(float(row[c]) for c in LOG_COLUMNS[1:])))
        return log


@dataclass
class TrainResult:
    params: M.ModelParams
    state: SgdState
    log: TrainLog
    iteration: int  # number of completed iterations


def switch_draws(config, t, batch_size):
    """Per-sample uniform-mode flags for iteration ``t`` (stateless in ``t``)."""
    rng = np.random.default_rng([config.switch_seed, t])
    return M.draw_switches(rng, batch_size, config.alpha)


def initial_params(config, episode, n_classes=N_CLASSES):
    arch = config.architecture(len(episode.sources), n_classes, episode.sources[0].images.shape[-1])
    return M.init_params(arch, config.init_seed, head_init=config.head_init)


def train(config, episode, params=None, state=None, start=0, n_classes=N_CLASSES):
    """Run iterations ``start .. config.iterations - 1``.

    Every random draw is keyed by ``(seed, iteration)``, so resuming from a
    checkpoint taken at iteration ``t`` reproduces the uninterrupted run.
    """
    if params is None:
        params = initial_params(config, episode, n_classes)
    else:
        params = params.copy()
    arch = params.arch
    if arch.n_domains != len(episode.sources):
        raise UsageError(f"params have {arch.n_domains} heads but the episode has {len(episode.sources)} sources")
    state = SgdState.zeros_like(params.arrays) if state is None else SgdState(
        {k: v.astype(arch.dtype, copy=True) for k, v in state.velocity.items()}
    )
    sampler = BalancedBatchSampler(episode, config.batch_size, config.data_seed)
    log = TrainLog()
    dtype = np.dtype(arch.dtype)

    for t in range(start, config.iterations):
        batch = sampler.batch(t)
        y = L.onehot(batch.labels, arch.n_classes).astype(dtype)
        d = M.indicator_weights(batch.domains, arch.n_domains).astype(dtype)
        switch = switch_draws(config, t, y.shape[0])
        lr = lr_at(t, config)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                parts, grads, z = M.loss_and_grads(params, batch.images, y, d, config.lam, switch)
        except NumericError as exc:
            nan = float("nan")
            raise TrainingDiverged(
                {"iteration": t, "lr": lr, "loss": nan, "loss_cls": nan, "loss_dom": nan}, str(exc)
            ) from exc
        if not np.isfinite(parts.total):
            raise TrainingDiverged(
                {"iteration": t, "lr": lr, "loss": parts.total, "loss_cls": parts.cls, "loss_dom": parts.dom}
            )
        if t % config.log_interval == 0 or t == config.iterations - 1:
            acc = float(np.mean(np.argmax(z, axis=1) == batch.labels))
            log.append(LogRecord(t, lr, parts.total, parts.cls, parts.dom, acc))
            logger.info("iter %d lr %.5f loss %.4f (cls %.4f dom %.4f) acc %.3f",
                        t, lr, parts.total, parts.cls, parts.dom, acc)
        sgd_step(params.arrays, grads, state, lr, config.momentum, config.weight_decay, config.decay_biases)
    return TrainResult(params, state, log, max(start, config.iterations))


# ----------------------------------------------------------------- checkpoints

_ARCH_CODES = {
    "head_scope": M.HEAD_SCOPES,
    "branch_convs": M.BRANCH_CONVS,
    "dtype": ("float64", "float32"),
    "head_init": ("glorot", "zeros"),
}


def _encode_fields(prefix, obj):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name in _ARCH_CODES:
            v = _ARCH_CODES[f.name].index(v)
        out[f"{prefix}/{f.name}"] = np.asarray(float(v))
    return out


def _decode_fields(prefix, cls, tensors):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}/{f.name}"
        if key not in tensors:
            raise CheckpointError(f"missing field {key}")
        v = float(tensors[key])
        if f.name in _ARCH_CODES:
            v = _ARCH_CODES[f.name][int(v)]
        elif f.type in ("int", int):
            v = int(v)
        elif f.type in ("bool", bool):
            v = bool(v)
        kwargs[f.name] = v
    return cls(**kwargs)


@dataclass
class Checkpoint:
    params: M.ModelParams
    state: SgdState
    config: TrainConfig
    iteration: int


def save_checkpoint(path, params, state, config, iteration):
    tensors = {"meta/iteration": np.asarray(float(iteration))}
    tensors.update(_encode_fields("config", config))
    tensors.update(_encode_fields("arch", params.arch))
    for k, v in params.arrays.items():
        tensors[f"param/{k}"] = v
    for k, v in state.velocity.items():
        tensors[f"velocity/{k}"] = v
    save_tensors(path, tensors, config.digest())


def load_checkpoint(path):
    digest, tensors = load_tensors(path)
    config = _decode_fields("config", TrainConfig, tensors)
    if config.digest() != digest:
        raise CheckpointError(f"{path}: config digest does not match stored config")
    arch = _decode_fields("arch", M.Architecture, tensors)
    dtype = np.dtype(arch.dtype)
    params = {k[6:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("param/")}
    vel = {k[9:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("velocity/")}
    expected = arch.shapes()
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter names do not match the stored architecture")
    params = {k: params[k] for k in expected}
    return Checkpoint(M.ModelParams(arch, params), SgdState(vel), config, int(tensors["meta/iteration"]))

