"""Plain-text run configuration: ``key = value`` lines with ``#`` comments
and dotted section prefixes (``train.learning_rate = 0.02``)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .embeddings import SyntheticSpec, load_embeddings, synthesize
from .errors import ConfigError, DataError
from .interpreter import InterpreterConfig, load_labels
from .training import TrainConfig

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def parse_kv_file(path) -> dict[str, str]:
    """Parse the config file; every malformed line is a located error."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


class _Reader:
    def __init__(self, kv: dict[str, str], path):
        self.kv = dict(kv)
        self.path = path
        self.used: set[str] = set()

    def _raw(self, key, default):
        self.used.add(key)
        if key in self.kv:
            return self.kv[key]
        if default is _REQUIRED:
            raise ConfigError(f"{self.path}: missing required key {key!r}")
        return default

    def _convert(self, key, raw, conv):
        try:
            return conv(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.path}: key {key!r} has invalid value {raw!r}")

    def get_int(self, key, default=None):
        raw = self._raw(key, default)
        return raw if raw is None or isinstance(raw, int) else self._convert(key, raw, int)

    def get_float(self, key, default=None):
        raw = self._raw(key, default)
        return raw if raw is None or isinstance(raw, float) else self._convert(key, raw, float)

    def get_bool(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None or isinstance(raw, bool):
            return raw
        if raw.lower() not in _BOOL:
            raise ConfigError(f"{self.path}: key {key!r} must be true/false, got {raw!r}")
        return _BOOL[raw.lower()]

    def get_str(self, key, default=None):
        return self._raw(key, default)

    def reject_unknown(self):
        unknown = sorted(set(self.kv) - self.used)
        if unknown:
            raise ConfigError(f"{self.path}: unknown keys: {', '.join(unknown)}")


class _Required:
    pass


_REQUIRED = _Required()


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    prompt_length: int
    label_suffix: str | None
    plan_kind: str
    plan_ways: int | None
    plan_shots: int | None
    plan_base: int | None
    interpreter: InterpreterConfig
    weight_std: float | None
    train: TrainConfig
    data_source: str  # "synthetic" | "files"
    synthetic: SyntheticSpec | None = None
    files_train: str | None = None
    files_test: str | None = None
    files_labels: str | None = None
    config_dir: str = "."
    extras: dict = field(default_factory=dict)

    def load_data(self):
        """Materialize (train, test) datasets from the configured source."""
        if self.data_source == "synthetic":
            train, test = synthesize(self.synthetic)
        else:
            labels = load_labels(self._resolve(self.files_labels))
            train = load_embeddings(self._resolve(self.files_train), labels)
            test = load_embeddings(self._resolve(self.files_test), labels)
        for name, ds in (("train", train), ("test", test)):
            if ds.dim != self.interpreter.model_dim:
                raise DataError(
                    f"{name} embeddings have dim {ds.dim} but the interpreter expects "
                    f"dim {self.interpreter.model_dim}"
                )
        return train, test

    def _resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.config_dir, path)


def load_run_config(path) -> RunConfig:
    kv = parse_kv_file(path)
    r = _Reader(kv, path)
    seed = r.get_int("seed", 0)

    source = r.get_str("data.source", _REQUIRED)
    synthetic = None
    files_train = files_test = files_labels = None
    if source == "synthetic":
        synthetic = SyntheticSpec(
            classes=r.get_int("synthetic.classes", _REQUIRED),
            train_per_class=r.get_int("synthetic.train_per_class", _REQUIRED),
            test_per_class=r.get_int("synthetic.test_per_class", _REQUIRED),
            dim=r.get_int("synthetic.dim", _REQUIRED),
            separation=r.get_float("synthetic.separation", 1.0),
            noise=r.get_float("synthetic.noise", 0.05),
            seed=r.get_int("synthetic.seed", seed),
        )
    elif source == "files":
        files_train = r.get_str("files.train", _REQUIRED)
        files_test = r.get_str("files.test", _REQUIRED)
        files_labels = r.get_str("files.labels", _REQUIRED)
        config_dir = os.path.dirname(os.path.abspath(path))
        for key, p in (("files.train", files_train), ("files.test", files_test),
                       ("files.labels", files_labels)):
            resolved = p if os.path.isabs(p) else os.path.join(config_dir, p)
            if not os.path.exists(resolved):
                raise ConfigError(f"{path}: {key} references missing file {resolved}")
    else:
        raise ConfigError(f"{path}: data.source must be 'synthetic' or 'files', got {source!r}")

    dim = r.get_int("interpreter.dim", 512)
    interpreter = InterpreterConfig(
        model_dim=dim,
        layers=r.get_int("interpreter.layers", 2),
        heads=r.get_int("interpreter.heads", 4),
        feed_forward_dim=r.get_int("interpreter.feed_forward", None),
        vocab_size=r.get_int("interpreter.vocab", 4096),
        max_sequence_len=r.get_int("interpreter.max_seq", 64),
        seed=r.get_int("interpreter.seed", seed),
    )
    weight_std = r.get_float("interpreter.weight_std", None)
    if weight_std is not None and weight_std <= 0:
        raise ConfigError(f"{path}: interpreter.weight_std must be > 0")
    train = TrainConfig(
        learning_rate=r.get_float("train.learning_rate", 0.02),
        batch_size=r.get_int("train.batch_size", 256),
        epochs_base=r.get_int("train.epochs_base", 50),
        epochs_incremental=r.get_int("train.epochs_incremental", 100),
        alpha=r.get_float("train.alpha", 1.0),
        beta=r.get_float("train.beta", 1.0),
        normalize_gamma=r.get_bool("train.normalize_gamma", True),
        seed=seed,
    )
    prompt_length = r.get_int("prompt.length", 16)
    if prompt_length < 0:
        raise ConfigError(f"{path}: prompt.length must be >= 0")
    plan_kind = r.get_str("plan.kind", _REQUIRED)
    cfg = RunConfig(
        seed=seed,
        output_dir=r.get_str("output.dir", "out"),
        prompt_length=prompt_length,
        label_suffix=r.get_str("label.suffix", None),
        plan_kind=plan_kind,
        plan_ways=r.get_int("plan.ways", None),
        plan_shots=r.get_int("plan.shots", None),
        plan_base=r.get_int("plan.base", None),
        interpreter=interpreter,
        weight_std=weight_std,
        train=train,
        data_source=source,
        synthetic=synthetic,
        files_train=files_train,
        files_test=files_test,
        files_labels=files_labels,
        config_dir=os.path.dirname(os.path.abspath(path)),
    )
    r.reject_unknown()
    interpreter.validate(prompt_length)
    return cfg
