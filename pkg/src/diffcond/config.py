"""Flat ``key = value`` experiment configuration with dotted namespaces."""
from __future__ import annotations

from dataclasses import dataclass, field

MODELS = ("crescent", "linear-gaussian", "joint-ou")
METHODS = ("cdsb", "dsb-prior", "fk-bootstrap", "fk-twisted", "doob", "dps", "pf", "gibbs", "hmc")


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    return parse


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


# key -> (parser, default)
SCHEMA = {
    "model": (_choice(MODELS), "crescent"),
    "method": (_choice(METHODS), "cdsb"),
    "y": (_floats, (-1.0, 2.0, 5.0)),
    "seed": (_non_negative_int, 0),
    "T": (_positive(float), 1.0),
    "steps": (_positive(int), 1000),
    "samples": (_non_negative_int, 10_000),
    "output_dir": (str, "out"),
    "checkpoint": (str, ""),
    "model.lik_var": (_positive(float), 0.5),
    "model.prior_mean": (float, 0.0),
    "model.prior_var": (_positive(float), 1.0),
    "model.coeff": (float, 1.0),
    "model.obs_var": (_positive(float), 1.0),
    "train.outer_iterations": (_positive(int), 15),
    "train.inner_iterations": (_positive(int), 2000),
    "train.iterations": (_positive(int), 6000),
    "train.batch_size": (_positive(int), 512),
    "train.learning_rate": (_positive(float), 1e-3),
    "train.n_paths": (_positive(int), 1000),
    "train.hidden": (_ints, (64, 64, 64)),
    "train.ema_decay": (float, 0.999),
    "reference.sigma": (_positive(float), 1.0),
    "forward.theta": (_positive(float), 1.0),
    "forward.sigma": (_positive(float), 2.0 ** 0.5),
    "smc.ess_threshold": (float, 0.5),
    "smc.lambda": (_choice(("constant", "linear")), "constant"),
    "smc.delta_scale": (_positive(float), 1.0),
    "smc.cov_scale": (_positive(float), 1.0),
    "hmc.step_size": (_positive(float), 0.35),
    "hmc.n_leapfrog": (_positive(int), 100),
    "hmc.burn_in": (_non_negative_int, 1000),
    "filter.particles": (_positive(int), 32),
    "gibbs.sweeps": (_non_negative_int, 10),
    "oracle.bounds": (_floats, (-5.0, 5.0, -5.0, 5.0)),
    "oracle.resolution": (_positive(int), 500),
    "evaluate.samples": (str, ""),
    "evaluate.oracle": (str, ""),
    "evaluate.bins": (_positive(int), 50),
    "evaluate.projections": (_positive(int), 200),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> str:
        """Effective configuration (defaults resolved) in the input format."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    def items(self):
        return ((k, _format(self.values[k])) for k in SCHEMA)


def parse_lines(text: str, source: str = "config") -> dict:
    raw = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {i}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def load_config(text: str = "", overrides=()) -> ExperimentConfig:
    raw = parse_lines(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None
    if len(values["oracle.bounds"]) % 2:
        raise ConfigError("oracle.bounds needs (lo, hi) pairs")
    if not 0.0 <= values["smc.ess_threshold"] <= 1.0:
        raise ConfigError("smc.ess_threshold must lie in [0, 1]")
    if not 0.0 <= values["train.ema_decay"] < 1.0:
        raise ConfigError("train.ema_decay must lie in [0, 1)")
    if len(values["train.hidden"]) != 3:
        raise ConfigError("train.hidden needs exactly three widths")
    return ExperimentConfig(values)
