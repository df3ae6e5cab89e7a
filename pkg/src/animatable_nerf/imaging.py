from __future__ import annotations

import json
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from animatable_nerf.types import RenderSidecar

_U16_MAX = 65535


def quantize_rgb(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    iio.imwrite(path, quantize_rgb(image))


def read_rgb(path: str | Path) -> np.ndarray:
    data = iio.imread(path)
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=-1)
    return data[..., :3].astype(np.float64) / 255.0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    iio.imwrite(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    data = iio.imread(path)
    if data.ndim == 3:
        data = data[..., 0]
    return (data > 127).astype(np.uint8)


def write_gray16(path: str | Path, values: np.ndarray, scale: float | None = None) -> float:
    """Write non-negative values as 16-bit grayscale; returns the scale (value at 65535)."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    if scale is None:
        peak = float(values.max()) if values.size else 0.0
        scale = peak if peak > 0.0 else 1.0
    iio.imwrite(path, np.round(np.clip(values / scale, 0.0, 1.0) * _U16_MAX).astype(np.uint16))
    return scale


def write_render(
    directory: str | Path,
    frame_id: int,
    image: np.ndarray,
    density: np.ndarray,
    depth: np.ndarray,
    *,
    near: float,
    far: float,
) -> RenderSidecar:
    """Image, integral density and depth maps plus their JSON sidecar for one frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{frame_id:04d}"
    write_rgb(directory / f"{stem}.png", image)
    density_scale = write_gray16(directory / f"{stem}_density.png", density, scale=1.0)
    depth_scale = write_gray16(directory / f"{stem}_depth.png", depth, scale=far)
    sidecar = RenderSidecar(
        frame_id=frame_id, density_scale=density_scale, depth_scale=depth_scale, near=near, far=far
    )
    (directory / f"{stem}.json").write_text(json.dumps(sidecar.model_dump(by_alias=True), indent=2))
    return sidecar
