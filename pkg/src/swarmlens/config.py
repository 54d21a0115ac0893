"""INI-style run configuration with typed defaults.

Five sections cover the pipeline stages. Every key has a default, so an
empty file is a valid config; unknown sections or keys are rejected to
catch typos early. Values keep Python repr formatting, which makes
parse(serialize(c)) == c hold exactly.
"""

from __future__ import annotations

import configparser
import io

from .errors import ValidationError

# section -> key -> default; the default's type pins the parse type
DEFAULTS: dict[str, dict[str, object]] = {
    "sim": {
        "n_ants": 59,
        "arena": 512,
        "duel_rate": 1.5,          # expected duels per minute (Unstable only)
        "duel_min_s": 4.0,
        "duel_max_s": 10.0,
        "frame_dt": 0.5,
        "episode_len": 600.0,
        "cricket_count": 2,
        "duel_rate_decay": 0.0,    # exponential decay of duel_rate, per second
        "exit_prob": 0.001,        # per-ant chance per second of leaving the arena
    },
    "flow": {
        "alpha": 1.0,
        "iters": 200,
        "frame_gap": 0.5,          # seconds between the two frames of one flow
        "pair_gap": 0.5,           # seconds between the two flows of one sample
        "sample_period": 120.0,    # seconds between samples
        "size": 64,
    },
    "model": {
        "conv_channels": "8,16,32,64",
        "kernel": 3,
        "dense_units": "128,32",
        "tap_stage": 4,            # conv stage whose activations the explainer reads
    },
    "train": {
        "lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-08,
        "batch": 32,
        "max_epochs": 30,
        "patience": 5,
        "train_frac": 0.6,
        "val_frac": 0.2,
    },
    "explain": {
        "top_frac": 0.05,
        "target_class": "unstable",
        "upsample": 512,
        "overlay_alpha": 0.6,
    },
}


class Config:
    """Parsed configuration: DEFAULTS overlaid with values from an INI text."""

    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self._values = {s: dict(keys) for s, keys in DEFAULTS.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self._set(section, key, value)

    def _set(self, section: str, key: str, value: object) -> None:
        if section not in self._values:
            raise ValidationError(f"unknown config section [{section}]")
        if key not in self._values[section]:
            raise ValidationError(f"unknown config key {key!r} in section [{section}]")
        default = DEFAULTS[section][key]
        kind = type(default)
        try:
            if kind is int:
                parsed: object = int(str(value))
            elif kind is float:
                parsed = float(str(value))
            else:
                parsed = str(value)
        except ValueError as exc:
            raise ValidationError(
                f"config key [{section}] {key} = {value!r} is not a valid "
                f"{kind.__name__}") from exc
        self._values[section][key] = parsed

    def get(self, section: str, key: str):
        if section not in self._values or key not in self._values[section]:
            raise ValidationError(f"unknown config key [{section}] {key}")
        return self._values[section][key]

    def section(self, name: str) -> dict[str, object]:
        if name not in self._values:
            raise ValidationError(f"unknown config section [{name}]")
        return dict(self._values[name])

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self._values == other._values

    def int_list(self, section: str, key: str) -> list[int]:
        """Parse a comma-separated value like "8,16,32,64"."""
        raw = str(self.get(section, key))
        try:
            return [int(part.strip()) for part in raw.split(",") if part.strip()]
        except ValueError as exc:
            raise ValidationError(
                f"config key [{section}] {key} = {raw!r} is not a comma-separated "
                f"integer list") from exc


def parse_config(text: str) -> Config:
    """Parse INI text; unknown sections/keys raise a validation error."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        values[section] = dict(parser.items(section))
    return Config(values)


def serialize_config(cfg: Config) -> str:
    """Render every section and key, in the canonical DEFAULTS order."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in DEFAULTS:
        parser.add_section(section)
        for key in DEFAULTS[section]:
            parser.set(section, key, repr(cfg.get(section, key))
                       if not isinstance(cfg.get(section, key), str)
                       else str(cfg.get(section, key)))
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
