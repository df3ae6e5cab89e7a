"""Image and mesh quality reports.

CSV schemas::

    metrics.csv       frame, psnr, ssim, lpips   (lpips is always empty)
    mesh_metrics.csv  mesh, p2s_cm, chamfer_cm, iso_level

The last row of ``metrics.csv`` has frame ``mean`` and holds the aggregate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.color import rgb2gray
from skimage.metrics import mean_squared_error, peak_signal_noise_ratio, structural_similarity

from animatable_nerf.geometry import Mesh, MeshConfig, chamfer, p2s, register_mesh
from animatable_nerf.imaging import read_rgb
from animatable_nerf.types import MeshMetricRow, MetricRow

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
MEAN_ROW = "mean"


def _check_pair(image_a: np.ndarray, image_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images report ``PSNR_CAP``."""
    a, b = _check_pair(image_a, image_b)
    if mean_squared_error(a, b) == 0.0:
        return PSNR_CAP
    return float(min(peak_signal_noise_ratio(a, b, data_range=1.0), PSNR_CAP))


def _luma(image: np.ndarray) -> np.ndarray:
    return rgb2gray(image) if image.ndim == 3 else image


def ssim(image_a: np.ndarray, image_b: np.ndarray) -> float:
    a, b = _check_pair(image_a, image_b)
    a, b = _luma(a), _luma(b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[0]}x{a.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(
        structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False
        )
    )


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, frame_id: str, prediction: np.ndarray, target: np.ndarray) -> MetricRow:
        row = MetricRow(frame_id=frame_id, psnr=psnr(prediction, target), ssim=ssim(prediction, target))
        self.rows.append(row)
        return row

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path: str | Path) -> None:
        rows = [*self.rows, MetricRow(frame_id=MEAN_ROW, psnr=self.mean_psnr, ssim=self.mean_ssim)]
        _write_rows(path, MetricRow, rows)


def _write_rows(path: str | Path, model: type, rows: list) -> None:
    columns = [info.alias or name for name, info in model.model_fields.items()]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            data = row.model_dump(by_alias=True)
            writer.writerow({k: ("" if v is None else v) for k, v in data.items()})


def _image_stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png")) if "_" not in p.stem}


def evaluate_directory(predicted: str | Path, target: str | Path, frame_ids: list[str] | None = None) -> MetricReport:
    """Compare same-named PNGs of two directories (side maps such as ``0001_depth.png`` skipped)."""
    predicted, target = Path(predicted), Path(target)
    for d in (predicted, target):
        if not d.is_dir():
            raise FileNotFoundError(f"no image directory at {d}")
    pred_files = _image_stems(predicted)
    target_files = _image_stems(target)
    stems = frame_ids if frame_ids is not None else sorted(pred_files)
    missing = [s for s in stems if s not in pred_files or s not in target_files]
    if missing:
        raise FileNotFoundError(f"images missing for frames: {', '.join(missing)}")
    if not stems:
        raise ValueError(f"no images to compare in {predicted}")

    report = MetricReport()
    for stem in stems:
        report.add(stem, read_rgb(pred_files[stem]), read_rgb(target_files[stem]))
    logger.info(
        "Evaluated %d frames: PSNR %.2f dB, SSIM %.4f", len(report.rows), report.mean_psnr, report.mean_ssim
    )
    return report


def mesh_metrics(name: str, predicted: Mesh, target: Mesh, config: MeshConfig) -> MeshMetricRow:
    if predicted.is_empty or target.is_empty:
        raise ValueError(f"{name}: cannot compare an empty mesh")
    aligned = register_mesh(predicted, target, config)
    return MeshMetricRow(
        name=name,
        p2s_cm=p2s(aligned, target, sample_count=config.sample_count, seed=config.sample_seed),
        chamfer_cm=chamfer(aligned, target, config.sample_count, seed=config.sample_seed),
        iso_level=config.iso_level,
    )


def write_mesh_report(path: str | Path, rows: list[MeshMetricRow]) -> None:
    _write_rows(path, MeshMetricRow, rows)
