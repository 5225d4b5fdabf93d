"""``.advckpt`` persistence for target, denoiser and restorer parameters."""

from dataclasses import dataclass, field

import numpy as np
import torch

from advlab.core import container

MAGIC = b"ADVCKPT\x00"
FORMAT_VERSION = 1
KINDS = ("target", "denoiser", "restorer")


@dataclass
class Checkpoint:
    component_kind: str
    parameters: dict  # name -> np.ndarray
    config_snapshot: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.component_kind not in KINDS:
            raise ValueError(f"component_kind must be one of {KINDS}, got {self.component_kind!r}")

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.component_kind, self.version, self.config_snapshot, self.metrics) != (
            other.component_kind, other.version, other.config_snapshot, other.metrics
        ):
            return False
        if list(self.parameters) != list(other.parameters):
            return False
        for name, a in self.parameters.items():
            b = other.parameters[name]
            if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        return True

    @classmethod
    def from_module(cls, kind, module, config_snapshot=None, metrics=None):
        params = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(kind, params, dict(config_snapshot or {}), {k: float(v) for k, v in (metrics or {}).items()})

    def load_into(self, module):
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()}
        module.load_state_dict(state)
        return module


def save_checkpoint(ckpt, path, format_version=FORMAT_VERSION):
    header = {
        "component_kind": ckpt.component_kind,
        "config_snapshot": ckpt.config_snapshot,
        "metrics": ckpt.metrics,
    }
    data = container.encode(MAGIC, format_version, header, ckpt.parameters)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    header, arrays = container.decode(data, MAGIC, FORMAT_VERSION, what=f"checkpoint {path}")
    return Checkpoint(
        component_kind=header["component_kind"],
        parameters=arrays,
        config_snapshot=header["config_snapshot"],
        metrics=header["metrics"],
        version=FORMAT_VERSION,
    )
