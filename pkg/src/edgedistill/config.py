"""Run configuration: nested dataclasses addressed by flat ``key=value`` names.

Nested sections are addressed with a dotted prefix (``teacher.patch=8``).
Config files are UTF-8, one ``key=value`` per line, ``#`` starts a comment.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


@dataclass
class TeacherConfig:
    patch: int = 4
    depth: int = 2
    heads: int = 2
    dim: int = 64
    mlp_ratio: int = 2
    pool: str = "mean"  # mean | cls
    seed: int = 1234


@dataclass
class StudentConfig:
    # One entry per stage: the stride of its first conv.
    stages: tuple[int, ...] = (2, 2, 2, 1)
    widths: tuple[int, ...] = (24, 48, 64, 96)
    tap_stage: int = 2
    head_hidden: int = 256


@dataclass
class PCAConfig:
    dim: int = 0  # query/key channels; 0 means "use the teacher head dim"
    resize: bool = True


@dataclass
class DiscConfig:
    hidden: int = 128
    normalize: bool = True


@dataclass
class AugConfig:
    crop_min: float = 0.6
    crop_max: float = 1.0
    mask_min: float = 0.0
    mask_max: float = 0.3
    jitter: float = 0.2


@dataclass
class QuantConfig:
    percentiles: tuple[float, ...] = (100.0, 99.99, 99.9)


@dataclass
class Config:
    embed_dim: int = 768
    image_size: int = 32
    channels: int = 3
    lam: float = field(default=0.1, metadata={"key": "lambda"})
    views: int = 2
    trainable_suffix: int = 6
    group_count: int = 1
    gl_projector: bool = False
    gl_on_views: bool = False
    dedup_tau: float = 0.95
    retrieve_k: int = 4
    kmeans_k: int = 1000
    optimizer: str = "sgd"  # sgd | adam
    precision: str = "fp64"  # fp64 | fp32 for training and inference tensors
    lr_student: float = 0.01
    lr_disc: float = 0.01
    momentum: float = 0.0
    disc_steps: int = 1
    batch: int = 32
    steps: int = 1500
    seed: int = 0
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    pca: PCAConfig = field(default_factory=PCAConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.teacher.patch) ** 2

    @property
    def torch_dtype(self):
        import torch

        return torch.float32 if self.precision == "fp32" else torch.float64

    @property
    def head_dim(self) -> int:
        return self.teacher.dim // self.teacher.heads

    @property
    def query_dim(self) -> int:
        return self.pca.dim or self.head_dim

    def validate(self) -> "Config":
        t, s = self.teacher, self.student
        if self.embed_dim <= 0 or self.image_size <= 0:
            raise ConfigError("embed_dim and image_size must be positive")
        if self.image_size % t.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by teacher.patch {t.patch}")
        if t.dim % t.heads:
            raise ConfigError(f"teacher.dim {t.dim} not divisible by teacher.heads {t.heads}")
        if t.pool not in ("mean", "cls"):
            raise ConfigError(f"teacher.pool must be mean or cls, got {t.pool!r}")
        if len(s.stages) != len(s.widths) or not s.stages:
            raise ConfigError("student.stages and student.widths need the same nonzero length")
        if not 0 <= s.tap_stage < len(s.stages):
            raise ConfigError(f"student.tap_stage {s.tap_stage} out of range")
        if self.group_count <= 0:
            raise ConfigError("group_count must be positive")
        if self.gl_projector and (s.widths[-1] % self.group_count or self.embed_dim % self.group_count):
            raise ConfigError(
                f"group_count {self.group_count} must divide both {s.widths[-1]} and {self.embed_dim}"
            )
        n_layers = len(s.stages) + 3
        if not 0 <= self.trainable_suffix <= n_layers:
            raise ConfigError(f"trainable_suffix must be in [0, {n_layers}]")
        for name in ("lr_student", "lr_disc"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.views < 1 or self.batch < 1 or self.steps < 0 or self.disc_steps < 1:
            raise ConfigError("views, batch and disc_steps must be >= 1, steps >= 0")
        if self.precision not in ("fp64", "fp32"):
            raise ConfigError(f"precision must be fp64 or fp32, got {self.precision!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        a = self.aug
        if not (0 < a.crop_min <= a.crop_max <= 1):
            raise ConfigError("need 0 < aug.crop_min <= aug.crop_max <= 1")
        if not (0 <= a.mask_min <= a.mask_max <= 1):
            raise ConfigError("need 0 <= aug.mask_min <= aug.mask_max <= 1")
        if not 0 < self.dedup_tau <= 1:
            raise ConfigError("dedup_tau must be in (0, 1]")
        if not self.quant.percentiles or any(not 0 < p <= 100 for p in self.quant.percentiles):
            raise ConfigError("quant.percentiles must be in (0, 100]")
        tap_stride = 1
        for st in s.stages[: s.tap_stage + 1]:
            tap_stride *= st
        side = -(-self.image_size // tap_stride)
        if side * side != self.n_tokens and not self.pca.resize:
            raise ConfigError(
                f"student tap grid {side}x{side} != teacher token count {self.n_tokens} and pca.resize=false"
            )
        return self

    # flat key access -------------------------------------------------------

    def to_dict(self) -> dict[str, str]:
        return {k: _format(v) for k, v, _ in _walk(self)}

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in self.to_dict().items()]

    def set(self, key: str, raw: str) -> None:
        for k, _, (obj, f) in _walk(self):
            if k == key:
                setattr(obj, f.name, _parse(f.type, raw.strip(), key))
                return
        raise ConfigError(f"unknown config key: {key}")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Config":
        cfg = cls()
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    def with_overrides(self, **kv: Any) -> "Config":
        """Copy with overrides; nested keys use ``__`` (``teacher__patch=4``)."""
        cfg = Config.from_lines(self.to_lines())
        for k, v in kv.items():
            cfg.set("lambda" if k == "lam" else k.replace("__", "."), _format(v))
        return cfg.validate()


def _walk(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.metadata.get("key", f.name)
        if dataclasses.is_dataclass(value):
            yield from _walk(value, key + ".")
        else:
            yield key, value, (obj, f)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse(type_: Any, raw: str, key: str):
    t = str(type_)
    try:
        if t == "bool":
            return _BOOLS[raw.lower()]
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if t == "tuple[float, ...]":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def b3_scale_config() -> Config:
    """A student sized around EfficientNet-B3 (roughly 10M parameters) at 300x300."""
    cfg = Config()
    cfg.image_size = 300
    cfg.teacher = TeacherConfig(patch=30, depth=2, heads=4, dim=128)
    cfg.student = StudentConfig(
        stages=(2, 2, 2, 2, 1),
        widths=(64, 128, 256, 512, 1024),
        tap_stage=3,
        head_hidden=1024,
    )
    return cfg.validate()
