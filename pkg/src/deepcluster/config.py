"""Run configuration: built-in defaults, INI files, and flag overrides.

Settings live in sections mirroring the library modules.  Precedence, last
wins: built-in defaults, then the INI file, then ``section.key=value``
override strings, then the DC_SEED environment variable for the master
seed.  Every key below has a default, so an empty config is a valid run.
"""

import configparser
import os
import re
from dataclasses import dataclass

from .audio import StftConfig
from .exceptions import ConfigError
from .network import NetworkSpec
from .nmf import NmfConfig
from .objective import LossConfig

SEED_ENV_VAR = "DC_SEED"

# section -> key -> default; the default's type decides how strings coerce
_DEFAULTS = {
    "audio": {
        "window_len_samples": 256,
        "hop_samples": 64,
        "fft_size": 256,
    },
    "network": {
        "input_dim": 129,
        "blstm_layers": 2,
        "hidden_per_direction": 64,
        "embedding_dim": 20,
        "output_activation": "tanh",
        "segment_len": 100,
    },
    "optimizer": {
        "learning_rate": 1e-5,
        "momentum": 0.9,
        "weight_noise_std": 0.7745966692414834,  # sqrt(0.6)
        "epochs": 10,
    },
    "objective": {
        "weighting": "partition_size",
        "exclude_zero_weight_elements": True,
    },
    "clustering": {
        "strategy": "global_kmeans",
        "k": 2,
        "active_threshold_db": -40.0,
    },
    "data": {
        "mix_count": 100,
        "snr_min_db": -5.0,
        "snr_max_db": 5.0,
        "three_speaker": False,
        "silence_threshold_db": -40.0,
        "silence_mode": "all_sources",
    },
    "nmf": {
        "divergence": "kl",
        "sparsity_lambda": 0.1,
        "max_iter": 200,
        "tol": 1e-5,
        "rank": 256,
        "context": 8,
    },
    "paths": {
        "manifest": "manifest.jsonl",
        "checkpoint_dir": "checkpoints",
        "output_dir": "out",
    },
    "run": {
        "seed": 0,
    },
}

_OVERRIDE_RE = re.compile(r"([A-Za-z_]+)\.([A-Za-z_]+)=(.*)", re.DOTALL)


def _coerce(section, key, raw):
    default = _DEFAULTS[section][key]
    text = str(raw).strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key} wants a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{section}.{key} wants an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{section}.{key} wants a number, got {raw!r}")
    return text


def _check_known(sections, section, key):
    if section not in sections:
        known = ", ".join(sorted(sections))
        raise ConfigError(f"unknown config section [{section}] (have {known})")
    if key not in sections[section]:
        known = ", ".join(sorted(sections[section]))
        raise ConfigError(
            f"unknown key {key!r} in [{section}] (have {known})"
        )


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one command invocation."""

    sections: dict

    def get(self, section, key):
        _check_known(self.sections, section, key)
        return self.sections[section][key]

    @property
    def seed(self):
        return self.sections["run"]["seed"]

    def stft_config(self):
        a = self.sections["audio"]
        return StftConfig(
            window_len_samples=a["window_len_samples"],
            hop_samples=a["hop_samples"],
            fft_size=a["fft_size"],
        )

    def network_spec(self):
        n = self.sections["network"]
        return NetworkSpec(
            input_dim=n["input_dim"],
            blstm_layers=n["blstm_layers"],
            hidden_per_direction=n["hidden_per_direction"],
            embedding_dim=n["embedding_dim"],
            output_activation=n["output_activation"],
            segment_len=n["segment_len"],
        )

    def loss_config(self):
        o = self.sections["objective"]
        return LossConfig(
            weighting=o["weighting"],
            exclude_zero_weight_elements=o["exclude_zero_weight_elements"],
        )

    def nmf_config(self):
        n = self.sections["nmf"]
        return NmfConfig(
            divergence=n["divergence"],
            sparsity_lambda=n["sparsity_lambda"],
            max_iter=n["max_iter"],
            tol=n["tol"],
        )


def load_run_config(path=None, overrides=(), env=None):
    """Resolve a RunConfig from an optional INI file plus override strings.

    Overrides look like ``optimizer.learning_rate=1e-3``.  Unknown sections
    or keys fail fast rather than being silently ignored.
    """
    env = os.environ if env is None else env
    sections = {name: dict(body) for name, body in _DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            loaded = parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}")
        if not loaded:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _check_known(sections, section, key)
                sections[section][key] = _coerce(section, key, raw)
    for item in overrides:
        match = _OVERRIDE_RE.fullmatch(item)
        if match is None:
            raise ConfigError(
                f"bad override {item!r}; expected section.key=value"
            )
        section, key, raw = match.groups()
        _check_known(sections, section, key)
        sections[section][key] = _coerce(section, key, raw)
    if SEED_ENV_VAR in env:
        sections["run"]["seed"] = _coerce("run", "seed", env[SEED_ENV_VAR])
    return RunConfig(sections)
