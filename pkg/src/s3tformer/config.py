"""Dataclass configs with strict JSON loading (unknown keys are errors)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .mase import MODALITIES, stream_widths


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key (dotted)."""

    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {msg}" if path else msg)


@dataclass
class ModelConfig:
    T: int = 16
    D: int = 256
    L: int = 6
    H: int = 8
    M: int = 2
    n_classes: int = 60
    c_in: int = 3
    graph: typing.Union[str, dict] = "ntu25"
    modality: str = "joint"
    gamma: float = 0.5
    tau: float = 0.5
    u_th: float = 0.5
    surrogate_alpha: float = 2.0
    learnable_tau: bool = True
    alpha_init: float = 0.8
    use_u_readout: bool = True
    use_s3: bool = True
    use_lstr: bool = True
    use_mase: bool = True
    use_atg: bool = True
    s3_input: str = "post_buffer"
    decay_mode: str = "learnable"
    decay_fixed: float = 0.5
    tet_target: str = "potential"
    mlp_ratio: int = 4
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for k in ("T", "D", "L", "H", "n_classes", "c_in", "mlp_ratio"):
            if getattr(self, k) < 1:
                raise ConfigError(k, "must be >= 1")
        if self.M not in (1, 2):
            raise ConfigError("M", f"person slots must be 1 or 2, got {self.M}")
        if self.D % self.H:
            raise ConfigError("D", f"D={self.D} must be divisible by H={self.H}")
        if self.use_mase:
            try:
                stream_widths(self.D)
            except ValueError as e:
                raise ConfigError("D", str(e)) from None
        if self.modality not in MODALITIES:
            raise ConfigError("modality", f"expected one of {MODALITIES}")
        if self.s3_input not in ("post_buffer", "pre_buffer"):
            raise ConfigError("s3_input", "expected post_buffer or pre_buffer")
        if self.decay_mode not in ("learnable", "fixed", "linear"):
            raise ConfigError("decay_mode", "expected learnable, fixed or linear")
        if not 0 < self.decay_fixed < 1:
            raise ConfigError("decay_fixed", "must lie in (0, 1)")
        if self.tet_target not in ("potential", "current"):
            raise ConfigError("tet_target", "expected potential or current")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "expected float32 or float64")
        if not 0 < self.tau < 1:
            raise ConfigError("tau", "must lie in (0, 1)")
        if self.u_th <= 0:
            raise ConfigError("u_th", "must be > 0")
        if not 0 < self.alpha_init < 1:
            raise ConfigError("alpha_init", "must lie in (0, 1)")

    @property
    def stream_split(self) -> tuple[int, ...]:
        return stream_widths(self.D) if self.use_mase else (self.D,)

    def flags(self) -> dict[str, bool]:
        return {"ur": self.use_u_readout, "s3": self.use_s3, "ls": self.use_lstr, "ma": self.use_mase, "aq": self.use_atg}

    def with_flags(self, disabled) -> "ModelConfig":
        names = {"ur": "use_u_readout", "s3": "use_s3", "ls": "use_lstr", "ma": "use_mase", "aq": "use_atg"}
        bad = [f for f in disabled if f not in names]
        if bad:
            raise ConfigError("disable", f"unknown ablation flag {bad[0]!r}; expected one of {sorted(names)}")
        return dataclasses.replace(self, **{names[f]: False for f in disabled})

    def arch_hash(self) -> str:
        """Digest of every field that changes the computation graph (not the seed)."""
        d = dataclasses.asdict(self)
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# Progressive build-up: step -> flags that are ON (everything else off).
BUILDUP_STEPS = {
    1: (),
    2: ("ur",),
    3: ("ur", "s3"),
    4: ("ur", "s3", "ls"),
    5: ("ur", "s3", "ls", "ma"),
    6: ("ur", "s3", "ls", "ma", "aq"),
}
ALL_FLAGS = ("ur", "s3", "ls", "ma", "aq")


def buildup_config(base: ModelConfig, step: int) -> ModelConfig:
    on = BUILDUP_STEPS[step]
    return base.with_flags([f for f in ALL_FLAGS if f not in on])


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 64
    eval_batch_size: int = 64
    lr: float = 0.01
    final_lr: float = 1e-5
    warmup_epochs: int = 10
    weight_decay: float = 0.0005
    betas: typing.List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs", "must lie in [0, epochs)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas", "expected two values in [0, 1)")
        if self.lr <= 0 or self.final_lr < 0:
            raise ConfigError("lr", "learning rates must be positive")


@dataclass
class DataConfig:
    train: str = "train.skl"
    test: typing.Optional[str] = None  # None: split one file by subject parity
    split: str = "subject"  # subject | view | none


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"


# --------------------------------------------------------------------------- #
# strict loading


def _check_type(value, tp, path: str):
    origin = typing.get_origin(tp)
    if tp is typing.Any:
        return value
    if origin is typing.Union:
        for arm in typing.get_args(tp):
            try:
                return _check_type(value, arm, path)
            except ConfigError:
                continue
        raise ConfigError(path, f"value {value!r} does not match {tp}")
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (arm,) = typing.get_args(tp) or (typing.Any,)
        return [_check_type(v, arm, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is type(None):
        if value is not None:
            raise ConfigError(path, "expected null")
        return None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp in (str, dict):
        if not isinstance(value, tp):
            raise ConfigError(path, f"expected {tp.__name__}, got {type(value).__name__}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")
    kwargs = {k: _check_type(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}.{e.path}" if path else e.path, str(e).split(": ", 1)[-1]) from None


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def load_json(path: str | Path) -> dict:
    """Parse a JSON file; syntax errors surface as :class:`json.JSONDecodeError` (line/column)."""
    with open(path) as f:
        return json.load(f)


def load_run_config(path: str | Path) -> RunConfig:
    return from_dict(RunConfig, load_json(path))
