"""Named parameter sets and their JSON checkpoint format.

A checkpoint is a JSON object mapping stable names such as
``gcn.block1.sage.w_self`` to ``{"shape": [...], "values": [...]}`` with
values in row-major order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

Params = dict[str, Tensor]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def make_param(name: str, value) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def copy_params(params: Mapping[str, Tensor]) -> Params:
    return {k: make_param(k, v.data.copy()) for k, v in params.items()}


def params_to_json(params: Mapping[str, Tensor]) -> dict:
    return {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
            for k, v in sorted(params.items())}


def params_from_json(obj: Mapping) -> Params:
    out = {}
    for k, entry in obj.items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        out[k] = make_param(k, arr)
    return out


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)) + "\n")


def load_checkpoint(path) -> Params:
    return params_from_json(json.loads(Path(path).read_text()))


def subset(params: Mapping[str, Tensor], prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix)}
