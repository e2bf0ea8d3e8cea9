"""Feedforward Q-value approximator in plain numpy (float64).

ReLU hidden layers, linear output, masked mean-squared error, Adam updates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import TextIO

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(FloatingPointError):
    """Loss became NaN or infinite."""


class SpecMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all layer widths must be >= 1: {self}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer."""
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def header(self) -> str:
        hidden = ",".join(str(h) for h in self.hidden) or "-"
        return f"qnet input_dim={self.input_dim} output_dim={self.output_dim} hidden={hidden}"

    @classmethod
    def from_header(cls, line: str) -> "NetworkSpec":
        parts = line.split()
        if not parts or parts[0] != "qnet":
            raise SpecMismatch(f"not a qnet checkpoint header: {line!r}")
        kv = dict(p.split("=", 1) for p in parts[1:])
        hidden = () if kv["hidden"] == "-" else tuple(int(h) for h in kv["hidden"].split(","))
        return cls(int(kv["input_dim"]), int(kv["output_dim"]), hidden)


Params = list  # [(W, b), ...], W shaped (fan_out, fan_in)


def init_params(spec: NetworkSpec, seed: int) -> Params:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        params.append((W, np.zeros(fan_out)))
    return params


def forward(params: Params, x: np.ndarray) -> np.ndarray:
    """Q-values for one observation (1-D) or a batch (2-D, one row each)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params[0][0].shape[1]:
        raise ValueError(f"input has {h.shape[1]} features, network expects {params[0][0].shape[1]}")
    last = len(params) - 1
    for k, (W, b) in enumerate(params):
        h = h @ W.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def loss_and_grads(params: Params, x, targets, mask) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Masked MSE: mean of squared errors over entries where ``mask`` is set."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    targets = np.atleast_2d(targets)
    mask = np.atleast_2d(mask).astype(np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("mask selects no outputs")

    acts = [x]
    h = x
    last = len(params) - 1
    for k, (W, b) in enumerate(params):
        h = h @ W.T + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)

    err = (acts[-1] - targets) * mask
    loss = float(np.sum(err * err) / count)

    grads = [None] * len(params)
    delta = 2.0 * err / count
    for k in range(last, -1, -1):
        W, _ = params[k]
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ W) * (acts[k] > 0)
    return loss, grads


class QNetwork:
    """Parameters plus Adam state; ``train_step`` mutates in place."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, params: Params | None = None):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        self._check_shapes()
        self._m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.params]
        self._v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.params]
        self.t = 0

    def _check_shapes(self):
        dims = self.spec.layer_dims
        if len(dims) != len(self.params):
            raise SpecMismatch("layer count differs from spec")
        for (fan_in, fan_out), (W, b) in zip(dims, self.params):
            if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise SpecMismatch(f"parameter shapes {W.shape}/{b.shape} differ from spec")

    def __call__(self, x):
        return forward(self.params, x)

    def copy(self) -> "QNetwork":
        net = QNetwork(self.spec, params=[(W.copy(), b.copy()) for W, b in self.params])
        net._m = [(a.copy(), b.copy()) for a, b in self._m]
        net._v = [(a.copy(), b.copy()) for a, b in self._v]
        net.t = self.t
        return net

    def train_step(self, x, targets, mask, learning_rate: float) -> float:
        """One Adam step on the masked MSE; returns the pre-update loss."""
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if len(np.atleast_2d(x)) == 0:
            raise ValueError("empty batch")
        loss, grads = loss_and_grads(self.params, x, targets, mask)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for k, (gW, gb) in enumerate(grads):
            new = []
            for j, g in enumerate((gW, gb)):
                m = self._m[k][j]
                v = self._v[k][j]
                m *= ADAM_BETA1
                m += (1 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1 - ADAM_BETA2) * g * g
                p = self.params[k][j] - learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
                new.append(p)
            self.params[k] = (new[0], new[1])
        return loss

    # -- checkpoints: header line, then one line per tensor (W1, b1, W2, ...)

    def save(self, sink: TextIO | str | os.PathLike) -> None:
        lines = [self.spec.header()]
        for W, b in self.params:
            lines.append(" ".join(repr(float(v)) for v in W.ravel()))
            lines.append(" ".join(repr(float(v)) for v in b))
        text = "\n".join(lines) + "\n"
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "w") as fh:
                fh.write(text)
        else:
            sink.write(text)

    @classmethod
    def load(cls, source: TextIO | str | os.PathLike, expected: NetworkSpec | None = None) -> "QNetwork":
        if isinstance(source, (str, os.PathLike)):
            with open(source) as fh:
                lines = fh.read().splitlines()
        else:
            lines = source.read().splitlines()
        spec = NetworkSpec.from_header(lines[0])
        if expected is not None and spec != expected:
            raise SpecMismatch(f"checkpoint spec {spec} does not match expected {expected}")
        dims = spec.layer_dims
        if len(lines) - 1 < 2 * len(dims):
            raise SpecMismatch("checkpoint truncated")
        params = []
        for k, (fan_in, fan_out) in enumerate(dims):
            W = np.array([float(v) for v in lines[1 + 2 * k].split()])
            b = np.array([float(v) for v in lines[2 + 2 * k].split()])
            if W.size != fan_in * fan_out or b.size != fan_out:
                raise SpecMismatch(f"tensor sizes of layer {k} do not match header")
            params.append((W.reshape(fan_out, fan_in), b))
        return cls(spec, params=params)
