"""INI run configuration with typed defaults and strict key checking."""

from __future__ import annotations

import configparser
import hashlib
import os

from .errors import ConfigError

# section -> key -> (type, default)
SCHEMA = {
    "data": {
        "sign_train": (int, 400),
        "sign_test": (int, 100),
        "road_train": (int, 1200),
        "sequences": (int, 2),
        "frames": (int, 50),
        "near_m": (float, 5.0),
        "far_m": (float, 80.0),
    },
    "model": {
        "detector_epochs": (int, 20),
        "regressor_epochs": (int, 15),
        "lr": (float, 2e-3),
        "batch_size": (int, 32),
    },
    "attack": {
        "names": (str, "None, Gaussian, FGSM, AutoPGD, SimBA, CAP/RP2"),
        "epsilon": (float, 8 / 255),
        "alpha": (float, 2 / 255),
        "iters": (int, 10),
        "queries": (int, 200),
        "simba_epsilon": (float, 0.2),
        "sigma": (float, 0.1),
        "lambda": (float, 0.0),
        "basis": (str, "pixel"),
        "rp2_iters": (int, 50),
        "rp2_samples": (int, 4),
    },
    "defense": {
        "names": (str, "None, MedianBlur, BitDepth, Randomize, AdvTrain, Contrastive, DiffPIR"),
        "k": (int, 3),
        "bits": (int, 3),
        "inner": (str, "fgsm"),
        "inner_epsilon": (float, 8 / 255),
        "adv_epochs": (int, 20),
        "tau": (float, 0.5),
        "contrastive_epochs": (int, 2),
        "finetune_epochs": (int, 5),
        "denoiser_epochs": (int, 3),
        "denoiser_images": (int, 300),
    },
    "bench": {
        "seed": (int, 0),
        "jobs": (int, 1),
    },
}


def _convert(section, key, raw):
    typ = SCHEMA[section][key][0]
    try:
        return typ(raw.strip()) if typ is not str else raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {typ.__name__}") from exc


class RunConfig:
    """Effective configuration: schema defaults overlaid with a file, then ARW_SEED."""

    def __init__(self, values=None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, v in keys.items():
                self.set(section, key, v)
        env = os.environ.get("ARW_SEED")
        if env is not None:
            self.set("bench", "seed", env)

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        self.values[section][key] = _convert(section, key, value) if isinstance(value, str) else value

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["bench"]["seed"]

    def names(self, section):
        return [n.strip() for n in self.values[section]["names"].split(",") if n.strip()]

    def canonical(self):
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {self.values[section][key]!r}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        values = {s: dict(cp[s]) for s in cp.sections()}
        return cls(values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def example_path():
    return os.path.join(os.path.dirname(__file__), "example.cfg")
