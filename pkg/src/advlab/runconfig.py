"""Run configuration: one JSON document, validated against built-in defaults.

Sections are ``dataset``, ``target``, ``attacks``, ``augment``, ``id``, ``fr``
and ``eval``. Precedence is command-line overrides > config file > defaults.
Checkpoint paths left as ``null`` are filled in under ``out_dir`` by the
commands that produce them; relative paths resolve against ``out_dir``.
"""

import copy
import hashlib
import json
from pathlib import Path

from advlab.attacks import METHODS, AttackConfig, parse_attack_spec
from advlab.augment import AugmentConfig
from advlab.core.config import DESCRIPTORS, TrainConfig
from advlab.core.errors import ConfigError
from advlab.nets import ARCHS
from advlab.pipeline import BOXES, MODES

# ``None`` defaults accept either null or the type given in OPTIONAL.
DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "dataset": {"name": "mnist", "subset_fraction": 1.0, "data_dir": None},
    "target": {
        "arch": "small_cnn",
        "epochs": 5,
        "lr": 1e-3,
        "batch_size": 128,
        "augment": False,
        "checkpoint": None,
        "surrogate": {"arch": "resnet_mini", "seed": 1, "epochs": None, "checkpoint": None},
    },
    "attacks": {"iterations": 20, "step_size": 0.03, "confidence_margin": 0.0},
    "augment": {"rounds": 3, "sigmas": [0.01, 0.03, 0.05], "include_original": True},
    "id": {
        "epochs": 100,
        "lr": 0.01,
        "batch_size": 64,
        "width": 1.0,
        "attacks": ["fgsm:4,8,16", "bim:4,8,16", "cw:4,8,16"],
        "n_adversarial": None,
        "n_clean": None,
        "n_validation": 500,
        "checkpoint": None,
    },
    "fr": {"epochs": 80, "lr": 0.01, "batch_size": 128, "n_source": None, "checkpoint": None},
    "eval": {
        "methods": ["fgsm", "cw", "bim"],
        "epsilons_255": [4, 8, 16],
        "boxes": ["black", "white"],
        "modes": list(MODES),
        "n_examples": 1000,
        "batch_size": 250,
        "report_dir": "report",
    },
}

OPTIONAL = {
    "dataset.data_dir": str,
    "target.checkpoint": str,
    "target.surrogate.epochs": int,
    "target.surrogate.checkpoint": str,
    "id.n_adversarial": int,
    "id.n_clean": int,
    "id.checkpoint": str,
    "fr.n_source": int,
    "fr.checkpoint": str,
}


def _check_type(path, default, value):
    if default is None:
        want = OPTIONAL[path]
        if value is None:
            return value
        default = want()
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path} expects {type(default).__name__}, got {value!r}", path)
    return value


def _merge(defaults, user, prefix=""):
    if not isinstance(user, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object", prefix.rstrip(".") or "config")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = prefix + key
        if key not in defaults:
            raise ConfigError(f"unknown config key {path}", path)
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _check_type(path, defaults[key], value)
    return out


def parse_override(text):
    """``"id.epochs=3"`` -> ``("id.epochs", 3)``; values parse as JSON, else as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value", text)
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _nest(key, value):
    d = value
    for part in reversed(key.split(".")):
        d = {part: d}
    return d


def _deep_update(base, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


class RunConfig:
    def __init__(self, data, base_dir=None):
        self.data = data
        self.base_dir = (Path(base_dir) if base_dir else Path.cwd()).resolve()
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=()):
        """Build from an optional JSON file plus ``(key, value)`` overrides."""
        user = {}
        base_dir = None
        if path is not None:
            path = Path(path)
            try:
                user = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} is not valid JSON: {exc}", "config")
            base_dir = path.parent
        for key, value in overrides:
            _deep_update(user, _nest(key, value))
        return cls(_merge(DEFAULTS, user), base_dir)

    def __getitem__(self, key):
        d = self.data
        for part in key.split("."):
            d = d[part]
        return d

    def set(self, key, value):
        self.data = _merge(DEFAULTS, _deep_update(copy.deepcopy(self.data), _nest(key, value)))
        self.validate()

    @property
    def out_dir(self):
        p = Path(self.data["out_dir"])
        return (p if p.is_absolute() else self.base_dir / p).resolve()

    def resolve(self, key, default_name=None):
        """Absolute path of a path-valued key, or ``out_dir/default_name`` when unset."""
        value = self[key]
        if value is None:
            if default_name is None:
                return None
            return self.out_dir / default_name
        p = Path(value)
        return p if p.is_absolute() else self.out_dir / p

    def require(self, key):
        """Path of a prerequisite that must be configured (``ConfigError`` naming ``key`` otherwise)."""
        if self[key] is None:
            raise ConfigError(f"{key} is required for this command (pass it as a flag or in the config)", key)
        return self.resolve(key)

    def digest(self):
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    # -- derived objects ------------------------------------------------------

    def train_config(self, stage):
        seed = self["seed"]
        if stage == "target":
            t = self["target"]
            return TrainConfig(epochs_target=t["epochs"], lr_target=t["lr"], batch_size=t["batch_size"], seed=seed)
        if stage == "surrogate":
            t, s = self["target"], self["target.surrogate"]
            epochs = t["epochs"] if s["epochs"] is None else s["epochs"]
            return TrainConfig(epochs_target=epochs, lr_target=t["lr"], batch_size=t["batch_size"], seed=s["seed"])
        if stage == "id":
            i = self["id"]
            return TrainConfig(epochs_id=i["epochs"], learning_rate=i["lr"], batch_size=i["batch_size"], seed=seed)
        if stage == "fr":
            f = self["fr"]
            return TrainConfig(epochs_fr=f["epochs"], learning_rate=f["lr"], batch_size=f["batch_size"], seed=seed)
        raise ValueError(stage)

    def augment_config(self):
        a = self["augment"]
        return AugmentConfig(a["rounds"], tuple(a["sigmas"]), a["include_original"])

    def id_attacks(self):
        a = self["attacks"]
        out = []
        for spec in self["id.attacks"]:
            try:
                for cfg in parse_attack_spec(spec, step_size=a["step_size"], confidence_margin=a["confidence_margin"]):
                    its = 1 if cfg.method == "fgsm" else a["iterations"]
                    out.append(AttackConfig(cfg.method, cfg.epsilon_255, its, cfg.step_size, cfg.confidence_margin))
            except ConfigError as exc:
                raise ConfigError(str(exc), "id.attacks") from None
        if not out:
            raise ConfigError("id.attacks is empty", "id.attacks")
        return out

    def eval_grid(self):
        from advlab.pipeline import attack_grid

        a = self["attacks"]
        return attack_grid(self["eval.methods"], self["eval.epsilons_255"], a["iterations"], a["step_size"],
                           a["confidence_margin"])

    def validate(self):
        d = self.data
        if d["dataset"]["name"] not in DESCRIPTORS:
            raise ConfigError(f"unknown dataset {d['dataset']['name']!r}; expected one of {sorted(DESCRIPTORS)}",
                              "dataset.name")
        if not 0 < d["dataset"]["subset_fraction"] <= 1:
            raise ConfigError("subset_fraction must be in (0, 1]", "dataset.subset_fraction")
        for key in ("target.arch", "target.surrogate.arch"):
            if self[key] not in ARCHS:
                raise ConfigError(f"{key} must be one of {ARCHS}, got {self[key]!r}", key)
        for key in ("target.epochs", "id.epochs", "fr.epochs", "id.n_validation"):
            if self[key] < 0:
                raise ConfigError(f"{key} must be >= 0", key)
        for key in ("target.batch_size", "id.batch_size", "fr.batch_size", "eval.batch_size", "eval.n_examples",
                    "attacks.iterations"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        for key in ("target.lr", "id.lr", "fr.lr", "attacks.step_size", "id.width"):
            if not self[key] > 0:
                raise ConfigError(f"{key} must be > 0", key)
        for key in ("id.n_adversarial", "id.n_clean", "fr.n_source"):
            if self[key] is not None and self[key] < 1:
                raise ConfigError(f"{key} must be >= 1 or null", key)
        for m in self["eval.methods"]:
            if m not in METHODS + ("cw_linf",):
                raise ConfigError(f"unknown attack method {m!r}", "eval.methods")
        for e in self["eval.epsilons_255"]:
            if isinstance(e, bool) or not isinstance(e, (int, float)) or not e > 0:
                raise ConfigError(f"epsilon {e!r} must be a positive number on the 0-255 scale", "eval.epsilons_255")
        for b in self["eval.boxes"]:
            if b not in BOXES:
                raise ConfigError(f"unknown box {b!r}; expected one of {BOXES}", "eval.boxes")
        for m in self["eval.modes"]:
            if m not in MODES:
                raise ConfigError(f"unknown defense mode {m!r}; expected one of {MODES}", "eval.modes")
        # constructing these validates their fields
        self.augment_config()
        self.id_attacks()
        for stage in ("target", "surrogate", "id", "fr"):
            self.train_config(stage)
