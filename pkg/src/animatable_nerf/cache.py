from __future__ import annotations

import logging
from dataclasses import dataclass

from animatable_nerf.body_model import PoseParams, ShapeParams, SkinnedBody
from animatable_nerf.deformation import DeformationConfig, PoseWarp

logger = logging.getLogger(__name__)


@dataclass
class CachedWarp:
    key: bytes
    warp: PoseWarp


def _key(pose: PoseParams, shape: ShapeParams) -> bytes:
    return pose.as_vector().tobytes() + shape.coefficients.tobytes()


class WarpCache:
    """Per-frame warp state, rebuilt whenever the frame's pose or shape changes."""

    def __init__(self, body: SkinnedBody, config: DeformationConfig, canonical: PoseParams) -> None:
        self._body = body
        self._config = config
        self._canonical = canonical
        self._entries: dict[int, CachedWarp] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, frame: int, pose: PoseParams, shape: ShapeParams) -> PoseWarp:
        key = _key(pose, shape)
        cached = self._entries.get(frame)
        if cached is not None and cached.key == key:
            return cached.warp
        warp = PoseWarp(self._body, pose, shape, self._config, self._canonical)
        self._entries[frame] = CachedWarp(key=key, warp=warp)
        logger.debug("Rebuilt warp for frame %d", frame)
        return warp
