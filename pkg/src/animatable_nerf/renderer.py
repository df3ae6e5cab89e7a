"""Pinhole rays, stratified/importance sampling and masked volume rendering.

Cameras sit in their own frame at the origin looking down -z with +y up; an
optional camera-to-world transform moves them. Per sample ``k``::

    tau_k = eta_k * sigma_k * delta_k
    w_k   = T_k * (1 - exp(-tau_k)),   T_k = exp(-sum_{j<k} tau_j)
    C = sum w_k c_k,  D = sum w_k,  depth = sum w_k t_k
    pixel = C + (1 - D) * background

The last sample's delta is the sentinel ``far - near``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from animatable_nerf.deformation import NeighborWeights, PoseWarp
from animatable_nerf.radiance_field import FieldGradients, FieldOutput, NeuralField

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderConfig:
    coarse_samples: int = 64
    importance_samples: int = 32
    foreground_fraction: float = 0.9
    chunk_rays: int = 1024
    near_far_margin: float = 0.1

    def __post_init__(self) -> None:
        if self.coarse_samples < 1:
            raise ValueError(f"coarse_samples must be >= 1, got {self.coarse_samples}")
        if self.importance_samples < 0:
            raise ValueError(f"importance_samples must be >= 0, got {self.importance_samples}")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ValueError(f"foreground_fraction must be in [0, 1], got {self.foreground_fraction}")
        if self.chunk_rays < 1:
            raise ValueError(f"chunk_rays must be >= 1, got {self.chunk_rays}")
        if self.near_far_margin < 0.0:
            raise ValueError(f"near_far_margin must be >= 0, got {self.near_far_margin}")


class Field(Protocol):
    def evaluate(self, points: np.ndarray, directions: np.ndarray | None = None) -> FieldOutput: ...


# --- Cameras and rays ---


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    cam_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self) -> None:
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not 0.0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be positive")
        pose = np.array(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        pose.setflags(write=False)
        object.__setattr__(self, "cam_to_world", pose)

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]


@dataclass(frozen=True)
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, sl: slice) -> Rays:
        return Rays(self.origins[sl], self.directions[sl], self.pixels[sl])


@dataclass(frozen=True)
class RaySamples:
    depths: np.ndarray
    points: np.ndarray
    deltas: np.ndarray


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray
    integral_density: np.ndarray
    depth: np.ndarray
    pixel: np.ndarray
    weights: np.ndarray
    evaluations: int = 0


@dataclass(frozen=True)
class RenderedImage:
    image: np.ndarray
    density: np.ndarray
    depth: np.ndarray


def all_pixels(camera: Camera) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)


def generate_rays(camera: Camera, pixels: np.ndarray) -> Rays:
    pixels = np.asarray(pixels).reshape(-1, 2)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if np.any(rows < 0) or np.any(rows >= camera.height) or np.any(cols < 0) or np.any(cols >= camera.width):
        bad = pixels[(rows < 0) | (rows >= camera.height) | (cols < 0) | (cols >= camera.width)][0]
        raise ValueError(
            f"pixel ({bad[0]}, {bad[1]}) outside the {camera.height}x{camera.width} image"
        )
    local = np.stack(
        [(cols - camera.cx) / camera.fx, -(rows - camera.cy) / camera.fy, -np.ones(rows.shape[0])],
        axis=1,
    )
    local /= np.linalg.norm(local, axis=1, keepdims=True)
    directions = local @ camera.cam_to_world[:3, :3].T
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, directions.shape).copy()
    return Rays(origins=origins, directions=directions, pixels=pixels.astype(np.int64))


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, true_up, back, eye
    return pose


def orbit_camera(camera: Camera, angle: float, target: np.ndarray) -> Camera:
    """Camera on a horizontal circle around ``target`` through the current eye, rotated by ``angle``."""
    target = np.asarray(target, dtype=np.float64)
    offset = camera.origin - target
    c, s = math.cos(angle), math.sin(angle)
    rotated = np.array([c * offset[0] + s * offset[2], offset[1], -s * offset[0] + c * offset[2]])
    return replace(camera, cam_to_world=look_at(target + rotated, target))


def camera_for_body(camera: Camera, posed_vertices: np.ndarray, padding: float, margin: float = 0.1) -> Camera:
    """Near/far bracketing the posed body's bounding box grown by ``padding`` plus ``margin``."""
    lo, hi = posed_vertices.min(axis=0), posed_vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + margin) + padding
    reach = float(np.linalg.norm(half))
    dist = float(np.linalg.norm(center - camera.origin))
    near = max(1e-2, dist - reach)
    far = max(near + 1e-2, dist + reach)
    return replace(camera, near=near, far=far)


# --- Sampling ---


def stratified_depths(near: np.ndarray, far: np.ndarray, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """``(R, n)`` depths, one per equal bin; bin midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    offsets = np.full((near.shape[0], n), 0.5) if rng is None else rng.random((near.shape[0], n))
    return near + (np.arange(n) + offsets) * (far - near) / n


def sample_pdf(
    edges: np.ndarray, weights: np.ndarray, n: int, rng: np.random.Generator | None
) -> np.ndarray:
    """Inverse-CDF draws from piecewise-constant bins; uniform fallback for zero mass."""
    edges = np.asarray(edges, dtype=np.float64)
    weights = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    rays, bins = weights.shape
    totals = weights.sum(axis=1, keepdims=True)
    weights = np.where(totals > 0.0, weights, 1.0)
    cdf = np.concatenate([np.zeros((rays, 1)), np.cumsum(weights, axis=1)], axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0

    u = np.broadcast_to((np.arange(n) + 0.5) / n, (rays, n)) if rng is None else rng.random((rays, n))
    idx = np.empty((rays, n), dtype=np.int64)
    for r in range(rays):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, bins - 1)

    lo = np.take_along_axis(cdf, idx, axis=1)
    hi = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = np.divide(u - lo, hi - lo, out=np.full_like(u, 0.5), where=hi > lo)
    left = np.take_along_axis(edges, idx, axis=1)
    right = np.take_along_axis(edges, idx + 1, axis=1)
    return left + frac * (right - left)


def sample_stratified(
    origin: np.ndarray,
    direction: np.ndarray,
    near: float,
    far: float,
    n: int,
    rng: np.random.Generator | None = None,
    *,
    jitter: bool = True,
) -> RaySamples:
    depths = stratified_depths(np.array([near]), np.array([far]), n, rng if jitter else None)[0]
    return make_samples(origin, direction, depths, far - near)


def sample_importance(
    coarse: RaySamples,
    coarse_weights: np.ndarray,
    n_fine: int,
    rng: np.random.Generator | None,
    *,
    near: float,
    far: float,
    origin: np.ndarray,
    direction: np.ndarray,
) -> RaySamples:
    n = coarse.depths.shape[0]
    edges = near + np.arange(n + 1) * (far - near) / n
    fine = sample_pdf(edges[None], np.asarray(coarse_weights)[None], n_fine, rng)[0]
    depths = np.sort(np.concatenate([coarse.depths, fine]))
    return make_samples(origin, direction, depths, far - near)


def make_samples(origin: np.ndarray, direction: np.ndarray, depths: np.ndarray, sentinel: float) -> RaySamples:
    depths = np.asarray(depths, dtype=np.float64)
    points = np.asarray(origin)[None] + depths[:, None] * np.asarray(direction)[None]
    deltas = np.append(np.diff(depths), sentinel)
    return RaySamples(depths=depths, points=points, deltas=deltas)


def sample_training_pixels(
    mask: np.ndarray, batch_size: int, foreground_fraction: float, rng: np.random.Generator
) -> np.ndarray:
    mask = np.asarray(mask) > 0
    fg = np.argwhere(mask)
    bg = np.argwhere(~mask)
    n_fg = math.ceil(foreground_fraction * batch_size)
    if fg.shape[0] == 0:
        n_fg = 0
    elif bg.shape[0] == 0:
        n_fg = batch_size
    n_bg = batch_size - n_fg
    picks = []
    if n_fg:
        picks.append(fg[rng.integers(0, fg.shape[0], size=n_fg)])
    if n_bg:
        picks.append(bg[rng.integers(0, bg.shape[0], size=n_bg)])
    return np.concatenate(picks, axis=0) if picks else np.zeros((0, 2), dtype=np.int64)


# --- Volume rendering ---


@dataclass
class RenderTape:
    field: NeuralField | Field
    warp: PoseWarp | None
    directions: np.ndarray
    depths: np.ndarray
    deltas: np.ndarray
    active: np.ndarray
    points: np.ndarray
    neighbors: NeighborWeights | None
    field_tape: object
    colors: np.ndarray
    transmittance: np.ndarray
    extinction: np.ndarray
    weights: np.ndarray
    background: np.ndarray


@dataclass(frozen=True)
class RenderGradients:
    field: FieldGradients | None
    pose: np.ndarray | None


def render_rays(
    field: NeuralField | Field,
    rays: Rays,
    depths: np.ndarray,
    warp: PoseWarp | None,
    background: np.ndarray,
    sentinel: np.ndarray | float,
    *,
    record: bool = False,
) -> tuple[RenderOutput, RenderTape | None]:
    """Render ``R`` rays at per-ray sorted ``depths`` ``(R, N)``.

    ``warp`` None renders in observation space without a mask.
    """
    background = np.asarray(background, dtype=np.float64)
    r, n = depths.shape
    points = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    deltas = np.concatenate([np.diff(depths, axis=1), np.broadcast_to(np.asarray(sentinel, dtype=np.float64).reshape(-1, 1), (r, 1))], axis=1)
    flat = points.reshape(-1, 3)
    flat_dirs = np.repeat(rays.directions, n, axis=0)

    neighbors = None
    if warp is None:
        active = np.ones(r * n, dtype=bool)
        query = flat
    else:
        neighbors = warp.neighbors(flat)
        active = warp.mask(flat, neighbors)
        act_idx = np.flatnonzero(active)
        neighbors = NeighborWeights(
            neighbors.indices[act_idx], neighbors.weights[act_idx], neighbors.distances[act_idx]
        )
        query = warp.warp(flat[act_idx], neighbors)

    colors = np.zeros((r * n, 3))
    sigma = np.zeros(r * n)
    field_tape = None
    evaluations = int(active.sum())
    if evaluations:
        if record:
            out, field_tape = field.forward(query, flat_dirs[active])
        else:
            out = field.evaluate(query, flat_dirs[active])
        colors[active] = out.color
        sigma[active] = out.density

    colors = colors.reshape(r, n, 3)
    tau = sigma.reshape(r, n) * deltas
    extinction = np.exp(-tau)
    transmittance = np.exp(-np.concatenate([np.zeros((r, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    weights = transmittance * (1.0 - extinction)

    color = np.einsum("rn,rnc->rc", weights, colors)
    density = weights.sum(axis=1)
    depth = np.sum(weights * depths, axis=1)
    pixel = color + (1.0 - density)[:, None] * background

    output = RenderOutput(color, density, depth, pixel, weights, evaluations)
    tape = None
    if record:
        tape = RenderTape(
            field=field,
            warp=warp,
            directions=flat_dirs,
            depths=depths,
            deltas=deltas,
            active=active,
            points=flat,
            neighbors=neighbors,
            field_tape=field_tape,
            colors=colors,
            transmittance=transmittance,
            extinction=extinction,
            weights=weights,
            background=background,
        )
    return output, tape


def render_rays_backward(
    tape: RenderTape,
    grad_pixel: np.ndarray,
    grad_density: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
    *,
    want_pose: bool = False,
) -> RenderGradients:
    r, n = tape.weights.shape
    grad_pixel = np.asarray(grad_pixel, dtype=np.float64).reshape(r, 3)
    g_density = -(grad_pixel @ tape.background)
    if grad_density is not None:
        g_density = g_density + np.asarray(grad_density, dtype=np.float64).reshape(r)

    value = np.einsum("rc,rnc->rn", grad_pixel, tape.colors) + g_density[:, None]
    if grad_depth is not None:
        value = value + np.asarray(grad_depth, dtype=np.float64).reshape(r, 1) * tape.depths

    weighted = tape.weights * value
    later = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] - weighted
    d_tau = tape.transmittance * tape.extinction * value - later
    d_sigma = (d_tau * tape.deltas).reshape(-1)
    d_color = (tape.weights[..., None] * grad_pixel[:, None, :]).reshape(-1, 3)

    if tape.field_tape is None:
        return RenderGradients(field=None, pose=None)
    active = tape.active
    field_grads = tape.field.backward(tape.field_tape, d_color[active], d_sigma[active])

    pose_grad = None
    if want_pose and tape.warp is not None:
        pose_grad = tape.warp.pose_vjp(tape.points[active], tape.neighbors, field_grads.points)
    return RenderGradients(field=field_grads, pose=pose_grad)


def render_ray(
    field: NeuralField | Field,
    origin: np.ndarray,
    direction: np.ndarray,
    samples: RaySamples,
    warp: PoseWarp | None,
    background: np.ndarray = (1.0, 1.0, 1.0),
) -> RenderOutput:
    rays = Rays(np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None], np.zeros((1, 2), dtype=np.int64))
    out, _ = render_rays(field, rays, samples.depths[None], warp, background, samples.deltas[-1])
    return RenderOutput(
        color=out.color[0],
        integral_density=float(out.integral_density[0]),
        depth=float(out.depth[0]),
        pixel=out.pixel[0],
        weights=out.weights[0],
        evaluations=out.evaluations,
    )


def hierarchical_depths(
    coarse_depths: np.ndarray, coarse_weights: np.ndarray, near: np.ndarray, far: np.ndarray,
    n_fine: int, rng: np.random.Generator | None,
) -> np.ndarray:
    """Coarse depths merged with importance draws over the stratification bins."""
    if n_fine == 0:
        return coarse_depths
    n = coarse_depths.shape[1]
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    edges = near + np.arange(n + 1) * (far - near) / n
    fine = sample_pdf(edges, coarse_weights, n_fine, rng)
    return np.sort(np.concatenate([coarse_depths, fine], axis=1), axis=1)


def render_image(
    coarse: NeuralField | Field,
    fine: NeuralField | Field | None,
    camera: Camera,
    warp: PoseWarp | None,
    config: RenderConfig,
    *,
    background: np.ndarray = (1.0, 1.0, 1.0),
    rng_seed: int | None = None,
    workers: int = 1,
) -> RenderedImage:
    """Coarse-then-fine render of every pixel; deterministic when ``rng_seed`` is None."""
    fine = fine if fine is not None else coarse
    rays = generate_rays(camera, all_pixels(camera))
    chunks = [slice(s, min(s + config.chunk_rays, len(rays))) for s in range(0, len(rays), config.chunk_rays)]

    def render_chunk(chunk_id: int) -> RenderOutput:
        sub = rays.subset(chunks[chunk_id])
        rng = None if rng_seed is None else np.random.default_rng([rng_seed, chunk_id])
        near = np.full(len(sub), camera.near)
        far = np.full(len(sub), camera.far)
        sentinel = camera.far - camera.near
        depths = stratified_depths(near, far, config.coarse_samples, rng)
        coarse_out, _ = render_rays(coarse, sub, depths, warp, background, sentinel)
        fine_depths = hierarchical_depths(depths, coarse_out.weights, near, far, config.importance_samples, rng)
        fine_out, _ = render_rays(fine, sub, fine_depths, warp, background, sentinel)
        return fine_out

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(render_chunk, range(len(chunks))))
    else:
        outputs = [render_chunk(i) for i in range(len(chunks))]

    shape = (camera.height, camera.width)
    image = np.concatenate([o.pixel for o in outputs]).reshape(shape + (3,))
    density = np.concatenate([o.integral_density for o in outputs]).reshape(shape)
    depth = np.concatenate([o.depth for o in outputs]).reshape(shape)
    return RenderedImage(image=image, density=density, depth=depth)
