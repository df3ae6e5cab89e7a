from __future__ import annotations

import argparse
import logging
from pathlib import Path

from animatable_nerf.cli import cli, option
from animatable_nerf.config import Config
from animatable_nerf.evalx import MetricReport, evaluate_directory, mesh_metrics, write_mesh_report
from animatable_nerf.geometry import load_obj
from animatable_nerf.synth_data import FRAMES_DIR, gt_mesh_file
from animatable_nerf.types import MeshMetricRow

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
MESH_METRICS_FILE = "mesh_metrics.csv"


def evaluate_renders(pred: str | Path, data: str | Path, out: str | Path) -> MetricReport:
    out = Path(out)
    target = Path(data) / FRAMES_DIR
    report = evaluate_directory(pred, target)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / METRICS_FILE)
    return report


def evaluate_mesh(mesh_path: str | Path, gt_path: str | Path, out: str | Path, config: Config) -> MeshMetricRow:
    for path in (Path(mesh_path), Path(gt_path)):
        if not path.is_file():
            raise FileNotFoundError(f"no mesh at {path}")
    row = mesh_metrics(Path(mesh_path).stem, load_obj(mesh_path), load_obj(gt_path), config.mesh)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh_report(out / MESH_METRICS_FILE, [row])
    logger.info("Mesh %s: P2S %.3f cm, Chamfer %.3f cm", row.name, row.p2s_cm, row.chamfer_cm)
    return row


# --- CLI command ---


@cli.command(
    name="evaluate",
    description="PSNR/SSIM of rendered views against dataset frames; optional mesh P2S/Chamfer.",
    options=[
        option("--pred", required=True, help="directory of rendered images (NNNN.png)"),
        option("--data", required=True, help="dataset directory with GT frames"),
        option("--out", required=True, help="report output directory"),
        option("--mesh", help="extracted mesh OBJ to compare against the GT mesh"),
        option("--gt-mesh", help="GT mesh OBJ (default: the dataset's mesh for the canonical preset)"),
        option("--alignment", choices=("known", "iterative"), help="mesh registration mode"),
    ],
    overrides={"alignment": "mesh.alignment"},
)
def command_evaluate(args: argparse.Namespace, config: Config) -> None:
    if args.mesh is not None:
        gt = args.gt_mesh or Path(args.data) / gt_mesh_file(config.deformation.canonical_preset)
        for path in (Path(args.mesh), Path(gt)):
            if not path.is_file():
                raise FileNotFoundError(f"no mesh at {path}")
    evaluate_renders(args.pred, args.data, args.out)
    if args.mesh is not None:
        evaluate_mesh(args.mesh, gt, args.out, config)
