"""Flat ``key = value`` run configuration.

Resolution order, highest first: command-line ``--set`` overrides, the
``DGMIX_DATA_ROOT`` environment variable (``data_root`` only), the config
file, built-in defaults.  Unknown keys are rejected by name.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import STANDARD_ANGLES
from .exceptions import ConfigError, DGMixError
from .train import TrainConfig

ENV_DATA_ROOT = "DGMIX_DATA_ROOT"


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str = "data"
    corpus: str = "idx"  # "idx" or "bundled"
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    mirror_url: str = ""
    n_per_class: int = 1000
    angles: tuple = STANDARD_ANGLES
    target_angle: str = "45"  # an angle or "all"
    output_dir: str = "runs"
    prepared_dir: str = ""  # defaults to <output_dir>/prepared

    def validate(self):
        if self.corpus not in ("idx", "bundled"):
            raise ConfigError("corpus", f"must be idx or bundled, got {self.corpus!r}")
        if self.n_per_class < 0:
            raise ConfigError("n_per_class", "must be >= 0")
        if len(set(self.angles)) != len(self.angles) or len(self.angles) < 2:
            raise ConfigError("angles", f"need at least two distinct angles, got {self.angles}")
        targets = self.targets()
        for t in targets:
            if t not in self.angles:
                raise ConfigError("target_angle", f"{t} is not one of the configured angles {self.angles}")
        n_sources = len(self.angles) - 1
        if self.train.batch_size % n_sources:
            raise ConfigError("batch_size", f"{self.train.batch_size} is not divisible by {n_sources} source domains")
        return self

    def targets(self):
        if str(self.target_angle).strip().lower() == "all":
            return list(self.angles)
        try:
            return [_angle(self.target_angle)]
        except ValueError:
            raise ConfigError("target_angle", f"expected an angle or 'all', got {self.target_angle!r}") from None

    @property
    def prepared_path(self):
        return Path(self.prepared_dir) if self.prepared_dir else Path(self.output_dir) / "prepared"

    def corpus_paths(self):
        root = Path(self.data_root)
        return root / self.train_images, root / self.train_labels


def _angle(text):
    v = float(text)
    return int(v) if v.is_integer() else v


def _run_keys():
    return {f.name: f for f in fields(RunConfig) if f.name != "train"}


def _train_keys():
    return {f.name: f for f in fields(TrainConfig)}


def all_keys():
    return sorted(set(_run_keys()) | set(_train_keys()))


def _coerce(key, ftype, text):
    text = text.strip()
    try:
        if ftype in ("int", int):
            return int(text)
        if ftype in ("float", float):
            return float(text)
        if ftype in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype in ("tuple", tuple):
            return tuple(_angle(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {ftype}") from None
    return text


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(file_values=None, overrides=None, environ=None):
    """Merge raw string values into a validated :class:`RunConfig`."""
    environ = os.environ if environ is None else environ
    merged = dict(file_values or {})
    if environ.get(ENV_DATA_ROOT):
        merged["data_root"] = environ[ENV_DATA_ROOT]
    merged.update(overrides or {})

    run_keys, train_keys = _run_keys(), _train_keys()
    run_kw, train_kw = {}, {}
    for key, value in merged.items():
        if key in train_keys:
            train_kw[key] = _coerce(key, train_keys[key].type, value)
        elif key in run_keys:
            run_kw[key] = _coerce(key, run_keys[key].type, value)
        else:
            raise ConfigError(key, "unknown configuration key")
    try:
        train = TrainConfig(**train_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError, DGMixError) as exc:
        raise ConfigError("train", str(exc)) from exc
    return RunConfig(train=train, **run_kw).validate()


def load_config(path=None, overrides=None, environ=None):
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        values = parse_config_text(p.read_text(), str(p))
    return build_config(values, overrides, environ)


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(config):
    """Resolved configuration as sorted ``key = value`` text."""
    items = {f.name: getattr(config.train, f.name) for f in fields(TrainConfig)}
    items.update({k: getattr(config, k) for k in _run_keys()})
    return "".join(f"{k} = {_fmt(items[k])}\n" for k in sorted(items))


def with_train(config, **kwargs):
    return replace(config, train=replace(config.train, **kwargs))
