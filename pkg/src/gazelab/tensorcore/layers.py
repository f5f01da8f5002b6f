"""Parameter initialisation and the two layer shapes used by the networks."""

from __future__ import annotations

import math

import numpy as np

from ..rng import Rng
from .params import ParamSet
from .tensor import Tensor, conv2d, matmul


def init_dense(params: ParamSet, name: str, n_in: int, n_out: int, rng: Rng, gain: float = 2.0) -> None:
    params.add(f"{name}.w", rng.normal_array((n_in, n_out), math.sqrt(gain / n_in)))
    params.add(f"{name}.b", np.zeros(n_out))


def init_conv(params: ParamSet, name: str, c_in: int, c_out: int, k: int, rng: Rng, gain: float = 2.0) -> None:
    fan_in = c_in * k * k
    params.add(f"{name}.w", rng.normal_array((c_out, c_in, k, k), math.sqrt(gain / fan_in)))
    params.add(f"{name}.b", np.zeros(c_out))


def dense(x: Tensor, params: ParamSet, name: str) -> Tensor:
    return matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def conv(x: Tensor, params: ParamSet, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)
