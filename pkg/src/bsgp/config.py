"""Flat ``key = value`` run configuration with [data]/[model]/[prior]/[sampler].

Parsing is strict: unknown sections or keys raise a ValueError listing the
valid keys.  ``echo()`` regenerates a canonical text block from which the
run is fully reconstructible.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math

MODEL_NAMES = ("bsgp", "bsgp-vfe", "svgp", "fitc-svgp", "mcmc-svgp", "sghmc-u-only")
PRIOR_NAMES = ("normal", "uniform", "dpp", "strauss")
INIT_NAMES = ("kmeans", "random_subset")

_DEFAULT_VARIANCE_LOG_MEAN = math.log(0.05)


@dataclasses.dataclass
class DataConfig:
    source: str = "toy1d:200"
    name: str = ""
    folds: int = 8
    fold: int = 0
    seed: int = 0


@dataclasses.dataclass
class ModelConfig:
    name: str = "bsgp"
    depth: int = 1
    num_inducing: int = 100
    init: str = "kmeans"
    forward_paths: int = 10


@dataclasses.dataclass
class PriorConfig:
    inducing: str = "normal"
    strauss_intensity: float = 1.0
    strauss_repulsion: float = 0.5
    strauss_radius: float = 0.5
    lengthscale_log_mean: float = 0.0
    variance_log_mean: float = _DEFAULT_VARIANCE_LOG_MEAN
    log_std: float = 1.0


@dataclasses.dataclass
class SamplerConfig:
    step_size: float = 0.01
    friction: float = -1.0  # -1 resolves to 0.05 / step_size
    noise_estimate: float = 0.0
    mass: float = 1.0
    burn_in_steps: int = 10_000
    keep_every: int = 10
    num_samples: int = 256
    num_chains: int = 1
    rng_seed: int = 0
    minibatch: int = 1000
    warm_start_steps: int = 0


@dataclasses.dataclass
class RunConfig:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    prior: PriorConfig = dataclasses.field(default_factory=PriorConfig)
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)

    def validate(self):
        if self.model.name not in MODEL_NAMES:
            raise ValueError(
                f"unknown model {self.model.name!r}; valid: {', '.join(MODEL_NAMES)}"
            )
        if self.prior.inducing not in PRIOR_NAMES:
            raise ValueError(
                f"unknown prior {self.prior.inducing!r}; valid: {', '.join(PRIOR_NAMES)}"
            )
        if self.model.init not in INIT_NAMES:
            raise ValueError(
                f"unknown init {self.model.init!r}; valid: {', '.join(INIT_NAMES)}"
            )
        if self.model.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.model.num_inducing < 1:
            raise ValueError("num_inducing must be >= 1")
        if self.data.folds < 1 or not (0 <= self.data.fold < self.data.folds):
            raise ValueError("need 0 <= fold < folds")

    def echo(self) -> str:
        """Canonical config text from which the run is reconstructible."""
        out = io.StringIO()
        for section in ("data", "model", "prior", "sampler"):
            out.write(f"[{section}]\n")
            obj = getattr(self, section)
            for field in dataclasses.fields(obj):
                out.write(f"{field.name} = {getattr(obj, field.name)}\n")
            out.write("\n")
        return out.getvalue()


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "prior": PriorConfig,
    "sampler": SamplerConfig,
}


def _coerce(value: str, target_type):
    if target_type is int:
        return int(value)
    if target_type is float:
        if value == "auto":
            return -1.0
        return float(value)
    return value


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; unknown sections/keys raise with the valid set."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"config syntax error: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(
                f"unknown config section [{section}]; valid sections: "
                f"{', '.join(_SECTIONS)}"
            )
        target = getattr(cfg, section)
        valid = {f.name: f.type for f in dataclasses.fields(target)}
        types = {f.name: type(getattr(target, f.name)) for f in dataclasses.fields(target)}
        for key, value in parser.items(section):
            if key not in valid:
                raise ValueError(
                    f"unknown key {key!r} in [{section}]; valid keys: "
                    f"{', '.join(sorted(valid))}"
                )
            try:
                setattr(target, key, _coerce(value.strip(), types[key]))
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_help() -> str:
    """All sections, keys, and defaults, for --help output."""
    out = io.StringIO()
    out.write("Configuration keys (flat `key = value` under [section]):\n\n")
    notes = {
        ("data", "source"): "csv:PATH | banana:N_PER_CLASS | toy1d:N | synthcls:N[:D]",
        ("model", "name"): " | ".join(MODEL_NAMES),
        ("model", "init"): " | ".join(INIT_NAMES),
        ("prior", "inducing"): " | ".join(PRIOR_NAMES),
        ("sampler", "friction"): "auto (= 0.05/step_size) or a positive value",
        ("sampler", "minibatch"): "capped at the training-fold size",
        ("sampler", "warm_start_steps"): (
            "Adam steps before sampling; 0 means auto "
            "(burn_in_steps for mcmc-svgp / sghmc-u-only, none otherwise)"
        ),
    }
    for section, cls in _SECTIONS.items():
        out.write(f"[{section}]\n")
        defaults = cls()
        for field in dataclasses.fields(cls):
            default = getattr(defaults, field.name)
            if (section, field.name) == ("sampler", "friction"):
                default = "auto"
            note = notes.get((section, field.name), "")
            out.write(f"  {field.name} = {default}")
            if note:
                out.write(f"   # {note}")
            out.write("\n")
        out.write("\n")
    return out.getvalue()
