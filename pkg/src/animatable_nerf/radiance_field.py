"""Canonical-space radiance field: positional encoding and a small ReLU MLP.

Parameter layout of ``FieldParams.values`` (flat, row-major):

    for each hidden layer l:   W_l (in_l, width), b_l (width)
    density head:              W_s (width, 1),   b_s (1)
    colour head:               W_c (width + dir_dim, 3), b_c (3)

``in_0`` is the encoding size (plus ``latent_dim``); the ``skip_layer`` input is
``width + in_0`` because the encoded input is concatenated back in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FieldArch:
    encoding_bands: int = 10
    hidden_width: int = 128
    hidden_depth: int = 6
    skip_layer: int = 3
    latent_dim: int = 0
    view_direction: bool = False
    direction_bands: int = 4

    def __post_init__(self) -> None:
        if self.encoding_bands < 0:
            raise ValueError(f"encoding_bands must be >= 0, got {self.encoding_bands}")
        if self.hidden_width < 1 or self.hidden_depth < 1:
            raise ValueError("hidden_width and hidden_depth must be positive")
        if not 0 < self.skip_layer < self.hidden_depth:
            raise ValueError(
                f"skip_layer must be in [1, hidden_depth), got {self.skip_layer} with depth {self.hidden_depth}"
            )
        if self.latent_dim < 0 or self.direction_bands < 0:
            raise ValueError("latent_dim and direction_bands must be >= 0")

    @property
    def encoding_size(self) -> int:
        return 3 + 6 * self.encoding_bands

    @property
    def input_size(self) -> int:
        return self.encoding_size + self.latent_dim

    @property
    def direction_size(self) -> int:
        return 3 + 6 * self.direction_bands if self.view_direction else 0

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        for layer in range(self.hidden_depth):
            fan_in = self.input_size if layer == 0 else self.hidden_width
            if layer == self.skip_layer:
                fan_in += self.input_size
            shapes.append((fan_in, self.hidden_width))
        shapes.append((self.hidden_width, 1))
        shapes.append((self.hidden_width + self.direction_size, 3))
        return shapes

    @property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes())

    def to_dict(self) -> dict[str, int]:
        return {
            "encoding_bands": self.encoding_bands,
            "hidden_width": self.hidden_width,
            "hidden_depth": self.hidden_depth,
            "skip_layer": self.skip_layer,
            "latent_dim": self.latent_dim,
            "view_direction": int(self.view_direction),
            "direction_bands": self.direction_bands,
        }

    @classmethod
    def from_dict(cls, data: dict[str, int]) -> FieldArch:
        return cls(
            encoding_bands=int(data["encoding_bands"]),
            hidden_width=int(data["hidden_width"]),
            hidden_depth=int(data["hidden_depth"]),
            skip_layer=int(data["skip_layer"]),
            latent_dim=int(data.get("latent_dim", 0)),
            view_direction=bool(data.get("view_direction", 0)),
            direction_bands=int(data.get("direction_bands", 4)),
        )


@dataclass(frozen=True, eq=False)
class FieldParams:
    arch: FieldArch
    values: np.ndarray
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 1 or values.shape[0] != self.arch.param_count:
            raise ValueError(
                f"field has {values.size} parameters, arch expects {self.arch.param_count}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field parameters contain non-finite values")
        if not self.radius > 0.0:
            raise ValueError(f"scene radius must be > 0, got {self.radius}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def with_values(self, values: np.ndarray) -> FieldParams:
        return replace(self, values=values)

    def unpack(self) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        offset = 0
        for fan_in, fan_out in self.arch.layer_shapes():
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers


@dataclass(frozen=True)
class FieldOutput:
    color: np.ndarray
    density: np.ndarray


def positional_encoding(x: np.ndarray, bands: int) -> np.ndarray:
    if bands < 0:
        raise ValueError(f"bands must be >= 0, got {bands}")
    x = np.asarray(x)
    parts = [x]
    for band in range(bands):
        scaled = (2.0**band) * np.pi * x
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def _encoding_backward(x: np.ndarray, bands: int, grad_enc: np.ndarray) -> np.ndarray:
    grad = grad_enc[..., :3].copy()
    for band in range(bands):
        freq = (2.0**band) * np.pi
        scaled = freq * x
        base = 3 + 6 * band
        grad += grad_enc[..., base : base + 3] * freq * np.cos(scaled)
        grad -= grad_enc[..., base + 3 : base + 6] * freq * np.sin(scaled)
    return grad


def init_field(
    arch: FieldArch,
    seed: int,
    *,
    center: tuple[float, float, float] = (0.0, 0.0, 0.0),
    radius: float = 1.0,
    dtype: type = np.float64,
) -> FieldParams:
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    values = np.concatenate(chunks).astype(dtype)
    return FieldParams(arch=arch, values=values, center=center, radius=radius)


@dataclass
class _Tape:
    points: np.ndarray
    encoded: np.ndarray
    activations: list[np.ndarray]
    density_pre: np.ndarray
    color_in: np.ndarray
    color: np.ndarray


def _inputs(
    params: FieldParams,
    points: np.ndarray,
    directions: np.ndarray | None,
    latent: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    arch = params.arch
    dtype = params.values.dtype
    local = ((points - np.asarray(params.center)) / params.radius).astype(dtype)
    encoded = positional_encoding(local, arch.encoding_bands)
    if arch.latent_dim:
        if latent is None:
            latent = np.zeros(arch.latent_dim)
        latent = np.broadcast_to(np.asarray(latent, dtype=dtype), (points.shape[0], arch.latent_dim))
        encoded = np.concatenate([encoded, latent], axis=1)
    dir_enc = None
    if arch.view_direction:
        if directions is None:
            raise ValueError("view-direction field needs ray directions")
        dirs = np.broadcast_to(np.asarray(directions, dtype=dtype), points.shape)
        dir_enc = positional_encoding(dirs, arch.direction_bands)
    return local, encoded, dir_enc


def _forward(
    params: FieldParams,
    points: np.ndarray,
    directions: np.ndarray | None = None,
    latent: np.ndarray | None = None,
) -> tuple[FieldOutput, _Tape]:
    arch = params.arch
    layers = params.unpack()
    local, encoded, dir_enc = _inputs(params, points, directions, latent)

    h = encoded
    activations = []
    for layer in range(arch.hidden_depth):
        if layer == arch.skip_layer:
            h = np.concatenate([h, encoded], axis=1)
        activations.append(h)
        w, b = layers[layer]
        h = np.maximum(h @ w + b, 0.0)
    activations.append(h)

    w_s, b_s = layers[arch.hidden_depth]
    density_pre = (h @ w_s + b_s)[:, 0]
    density = np.logaddexp(0.0, density_pre)

    color_in = h if dir_enc is None else np.concatenate([h, dir_enc], axis=1)
    w_c, b_c = layers[arch.hidden_depth + 1]
    color = expit(color_in @ w_c + b_c)

    tape = _Tape(local, encoded, activations, density_pre, color_in, color)
    return FieldOutput(color=color, density=density), tape


@dataclass(frozen=True)
class FieldGradients:
    params: np.ndarray
    points: np.ndarray
    latent: np.ndarray | None


def _backward(
    params: FieldParams, tape: _Tape, grad_color: np.ndarray, grad_density: np.ndarray
) -> FieldGradients:
    arch = params.arch
    layers = params.unpack()
    dtype = params.values.dtype
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]

    grad_color = np.asarray(grad_color, dtype=dtype).reshape(tape.color.shape)
    grad_density = np.asarray(grad_density, dtype=dtype).reshape(tape.density_pre.shape)

    d_color_pre = grad_color * tape.color * (1.0 - tape.color)
    w_c, _ = layers[arch.hidden_depth + 1]
    grads[arch.hidden_depth + 1] = (tape.color_in.T @ d_color_pre, d_color_pre.sum(axis=0))
    d_h = (d_color_pre @ w_c.T)[:, : arch.hidden_width]

    d_density_pre = (grad_density * expit(tape.density_pre))[:, None]
    h_last = tape.activations[-1]
    w_s, _ = layers[arch.hidden_depth]
    grads[arch.hidden_depth] = (h_last.T @ d_density_pre, d_density_pre.sum(axis=0))
    d_h = d_h + d_density_pre @ w_s.T

    d_encoded = np.zeros_like(tape.encoded)
    for layer in reversed(range(arch.hidden_depth)):
        w, _ = layers[layer]
        out = tape.activations[layer + 1][:, : arch.hidden_width]
        d_pre = d_h * (out > 0.0)
        layer_in = tape.activations[layer]
        grads[layer] = (layer_in.T @ d_pre, d_pre.sum(axis=0))
        d_in = d_pre @ w.T
        if layer == arch.skip_layer:
            d_encoded += d_in[:, arch.hidden_width :]
            d_in = d_in[:, : arch.hidden_width]
        d_h = d_in
    d_encoded += d_h

    flat = np.concatenate([np.concatenate([gw.reshape(-1), gb.reshape(-1)]) for gw, gb in grads])
    enc_size = arch.encoding_size
    d_local = _encoding_backward(tape.points, arch.encoding_bands, d_encoded[:, :enc_size])
    d_latent = d_encoded[:, enc_size:].sum(axis=0) if arch.latent_dim else None
    return FieldGradients(params=flat, points=d_local / params.radius, latent=d_latent)


def _as_batch(x0: np.ndarray) -> tuple[np.ndarray, bool]:
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    points = x0.reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("field input contains non-finite values")
    return points, single


def eval_field(
    params: FieldParams,
    x0: np.ndarray,
    *,
    directions: np.ndarray | None = None,
    latent: np.ndarray | None = None,
) -> FieldOutput:
    points, single = _as_batch(x0)
    out, _ = _forward(params, points, directions, latent)
    if single:
        return FieldOutput(color=out.color[0], density=out.density[0])
    return out


def eval_field_backward(
    params: FieldParams,
    x0: np.ndarray,
    upstream_color: np.ndarray,
    upstream_density: np.ndarray,
    *,
    directions: np.ndarray | None = None,
    latent: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    points, single = _as_batch(x0)
    upstream_color = np.asarray(upstream_color, dtype=np.float64)
    upstream_density = np.asarray(upstream_density, dtype=np.float64)
    if upstream_color.reshape(-1, 3).shape[0] != points.shape[0] or upstream_density.size != points.shape[0]:
        raise ValueError("upstream gradient shape does not match the input batch")
    _, tape = _forward(params, points, directions, latent)
    grads = _backward(params, tape, upstream_color, upstream_density)
    return grads.params, (grads.points[0] if single else grads.points)


class NeuralField:
    """Differentiable field bound to one optional latent code."""

    differentiable = True

    def __init__(self, params: FieldParams, latent: np.ndarray | None = None) -> None:
        self.params = params
        self.latent = latent

    def evaluate(self, points: np.ndarray, directions: np.ndarray | None = None) -> FieldOutput:
        out, _ = _forward(self.params, points, directions, self.latent)
        return out

    def forward(self, points: np.ndarray, directions: np.ndarray | None = None) -> tuple[FieldOutput, _Tape]:
        return _forward(self.params, points, directions, self.latent)

    def backward(self, tape: _Tape, grad_color: np.ndarray, grad_density: np.ndarray) -> FieldGradients:
        return _backward(self.params, tape, grad_color, grad_density)
