"""Model/training configuration and the flat key=value config file format.

Config files are UTF-8 text, one ``key = value`` pair per line, ``#`` starts
a comment.  Unknown keys are rejected.
"""

from dataclasses import dataclass, fields

__all__ = [
    "ModelConfig", "TrainConfig", "ConfigError",
    "parse_config_text", "apply_config", "serialize_configs", "load_config_file",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    base_dim: int = 32
    depth: int = 2          # transformer blocks per stage
    heads: tuple = (1, 2, 4, 16, 8, 4, 2)
    window: int = 16
    mlp_ratio: int = 4
    d_sem: int = 16
    tau_geo: float = 0.5
    fov_degrees: float = 60.0
    compressed_channels: int = 64
    k_lowpass: int = 5
    k_highpass: int = 3
    k_up: int = 5
    hamming: bool = False
    modulation: str = "mul"     # "mul" | "logbias"
    use_fusion: bool = True     # False = plain upsample+add decoder fusion
    use_sim: bool = True        # False = all blocks standard
    use_depth: bool = True      # False = RGB-only input
    use_normal: bool = True     # False = no geometric score modulation
    use_sem: bool = True        # False = no semantic modulation / injection
    init_std: float = 0.2

    @property
    def stage_dims(self):
        b = self.base_dim
        return (b, 2 * b, 4 * b, 8 * b, 4 * b, 2 * b, b)

    @property
    def shift(self):
        return self.window // 2

    def validate(self):
        if len(self.heads) != 7:
            raise ConfigError(f"heads must list 7 stages, got {len(self.heads)}")
        for d, h in zip(self.stage_dims, self.heads):
            if d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")
        for k in (self.k_lowpass, self.k_highpass, self.k_up):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel extents must be odd, got {k}")
        if self.modulation not in ("mul", "logbias"):
            raise ConfigError(f"modulation must be 'mul' or 'logbias', got {self.modulation!r}")
        if self.window < 1:
            raise ConfigError("window must be positive")
        return self


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    lr_min: float = 5e-5
    cycle_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch: int = 1
    epochs: int = 5
    charbonnier_eps: float = 1e-3
    seed: int = 0
    val_count: int = 16

    def validate(self):
        if not self.lr_min < self.lr0:
            raise ConfigError("lr_min must be below lr0")
        if self.cycle_epochs < 1:
            raise ConfigError("cycle_epochs must be >= 1")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0")
        return self


def _parse_bool(s):
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_tuple(s):
    return tuple(int(v.strip()) for v in s.split(","))


_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}

_PARSERS = {
    "heads": _parse_int_tuple,
}


def parse_config_text(text):
    """Parse flat key=value text into a raw {key: string} dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key, value, ftype):
    if key in _PARSERS:
        return _PARSERS[key](value)
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        return float(value)
    if ftype in ("bool", bool):
        return _parse_bool(value)
    return value


def apply_config(raw):
    """Build validated (ModelConfig, TrainConfig) from a raw string dict.

    Raises ConfigError on unknown keys or malformed values.
    """
    model_kw, train_kw = {}, {}
    for key, value in raw.items():
        try:
            if key in _MODEL_FIELDS:
                model_kw[key] = _coerce(key, value, _MODEL_FIELDS[key])
            elif key in _TRAIN_FIELDS:
                train_kw[key] = _coerce(key, value, _TRAIN_FIELDS[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return ModelConfig(**model_kw).validate(), TrainConfig(**train_kw).validate()


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return apply_config(parse_config_text(fh.read()))


def serialize_configs(mcfg, tcfg=None):
    """Round-trippable key=value text for the given configs."""
    lines = []
    for cfg in (mcfg, tcfg):
        if cfg is None:
            continue
        for f in fields(cfg):
            val = getattr(cfg, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
