"""Model / training configuration with file parsing and provenance tracking.

Config files are plain text ``key = value`` pairs with ``#`` comments. A
model-config file must spell out *every* model key (partial files risk
silently mismatching a checkpoint); training keys always have defaults and
may be overridden per key.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict


class ConfigError(ValueError):
    """Invalid, unknown or missing configuration keys (a usage error)."""


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters; every key is exposed in the config file."""

    k_window: int = 41  # sensor frames per window
    d_mix: int = 32  # common channel width of the two fused sensor streams
    c1: int = 64  # frame/clip-level channel width in the temporal pyramid
    d_t: int = 128  # pyramid output (current-frame feature) width
    d_g: int = 128  # trunk/limb group feature width; must equal d_t
    d_node: int = 64  # per-node feature width in the pose graph
    clamp: float = 5.0  # bound on exponent inputs of interactive gates
    kernel_size: int = 3  # temporal convolution kernel (odd)
    seed: int = 0  # parameter init seed
    gcn_layers: int = 3
    edge_hidden: int = 128  # hidden width of the adjacency MLPs
    leaky_slope: float = 0.2
    residual: bool = True
    recompute_edges: bool = True  # dynamic/latent edges per layer vs once from X0

    def __post_init__(self):
        for key in ("k_window", "d_mix", "c1", "d_t", "d_g", "d_node", "kernel_size", "gcn_layers", "edge_hidden"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.k_window < 2:
            raise ConfigError("k_window must be at least 2")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.clamp <= 0:
            raise ConfigError("clamp must be positive")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        if self.d_g != self.d_t:
            # The trunk feature passes through the spatial stage unchanged,
            # so no projection exists between the pyramid and the node maps.
            raise ConfigError("d_g must equal d_t")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters."""

    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 1 or self.checkpoint_every < 1:
            raise ConfigError("lr, batch_size, steps and checkpoint_every must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("optimizer moments must lie in [0, 1)")


@dataclass
class RunConfig:
    """Merged model + train view with per-key provenance (default/file/flag)."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    provenance: dict = field(default_factory=dict)


_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, text: str, typename: str):
    text = text.strip()
    try:
        if typename == "int":
            return int(text)
        if typename == "float":
            return float(text)
        if typename == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        raise AssertionError(typename)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config_file(path) -> dict:
    """Read raw key/value pairs; unknown keys are an error."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, text = (part.strip() for part in line.split("=", 1))
            if key in _MODEL_FIELDS:
                typename = _MODEL_FIELDS[key]
            elif key in _TRAIN_FIELDS:
                typename = _TRAIN_FIELDS[key]
            else:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = _coerce(key, text, typename)
    return values


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus flag overrides.

    When a file is given it must define every ModelConfig key (missing keys
    raise ConfigError naming them). Training keys are optional everywhere.
    """
    file_values = parse_config_file(path) if path is not None else {}
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")

    if path is not None:
        missing = [k for k in _MODEL_FIELDS if k not in file_values]
        if missing:
            raise ConfigError(f"{path}: missing model config key(s): {', '.join(missing)}")

    provenance = {}
    model_kwargs, train_kwargs = {}, {}
    for key in list(_MODEL_FIELDS) + list(_TRAIN_FIELDS):
        target = model_kwargs if key in _MODEL_FIELDS else train_kwargs
        if key in overrides:
            target[key] = overrides[key]
            provenance[key] = "flag"
        elif key in file_values:
            target[key] = file_values[key]
            provenance[key] = "file"
        else:
            provenance[key] = "default"
    return RunConfig(model=ModelConfig(**model_kwargs), train=TrainConfig(**train_kwargs), provenance=provenance)


def write_config_file(run: RunConfig, path) -> None:
    """Write the resolved configuration (all keys, with provenance comments)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# resolved configuration\n")
        for name, cfg in (("model", run.model), ("train", run.train)):
            fh.write(f"# {name}\n")
            for key, value in asdict(cfg).items():
                origin = run.provenance.get(key, "default")
                fh.write(f"{key} = {_format_value(value)}  # {origin}\n")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    unknown = set(d) - set(_MODEL_FIELDS)
    if unknown:
        raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
    missing = set(_MODEL_FIELDS) - set(d)
    if missing:
        raise ConfigError(f"missing model config key(s): {sorted(missing)}")
    return ModelConfig(**d)
