import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.flow.odeint import Trajectory
from flowmorph.geometry.intersect import count_triangle_intersections
from flowmorph.geometry.mesh import Mesh, signed_volume
from flowmorph.geometry.meshio import save_mesh
from .formatters import ReportFormatter

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DataExporter:
    def __init__(self, config=None):
        self.config = config if config else DEFAULT_CONFIG
        self.formatter = ReportFormatter(config)

        self.export_settings = {
            'mesh_format': 'obj',
            'create_directories': True,
            'overwrite_existing': True,
        }

    def _prepare(self, file_path: PathLike) -> Path:
        path = Path(file_path)
        if self.export_settings['create_directories'] and path.parent != Path(""):
            os.makedirs(path.parent, exist_ok=True)
        if path.exists() and not self.export_settings['overwrite_existing']:
            raise FileExistsError(f"File {path} already exists. Set overwrite_existing=True to overwrite.")
        return path

    def _detect_format_from_path(self, file_path: PathLike) -> str:
        extension = Path(file_path).suffix.lower()

        format_map = {
            '.json': 'json',
            '.csv': 'csv',
            '.txt': 'text',
        }

        return format_map.get(extension, 'json')

    def write_text(self, file_path: PathLike, content: str) -> Path:
        path = self._prepare(file_path)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(content)
        return path

    def write_json(self, file_path: PathLike, payload: Dict[str, Any]) -> Path:
        return self.write_text(file_path, self.formatter.format_json(payload))

    def write_csv(self, file_path: PathLike, rows, fieldnames=None) -> Path:
        return self.write_text(file_path, self.formatter.format_rows(rows, fieldnames))

    def export_report(self, report, file_path: PathLike, format_type: Optional[str] = None) -> Path:
        """Write a verify report (JSON or table) or any object with ``to_dict``."""
        format_type = format_type or self._detect_format_from_path(file_path)
        if hasattr(report, "properties"):
            content = self.formatter.format_verify(report, format_type)
        else:
            content = self.formatter.format_json(report.to_dict() if hasattr(report, "to_dict") else report)
        path = self.write_text(file_path, content)
        logger.info(f"Report written to {path}")
        return path

    def export_trajectory(self, out_dir: PathLike, mesh: Mesh, trajectory: Trajectory,
                          stats: Optional[Dict[str, Any]] = None) -> Path:
        """One mesh per recorded time plus index.json with times, volumes and intersection counts."""
        out_dir = Path(out_dir)
        fmt = self.export_settings['mesh_format']
        entries = []
        for k, (t, state) in enumerate(zip(trajectory.times, trajectory.states)):
            snapshot = mesh.with_vertices(state)
            name = f"t_{k:04d}.{fmt}"
            save_mesh(snapshot, self._prepare(out_dir / name), fmt)
            entries.append({
                "file": name,
                "time": t,
                "volume": signed_volume(snapshot),
                "intersections": count_triangle_intersections(snapshot),
            })
        payload = {"snapshots": entries, "accepted_steps": trajectory.accepted_steps,
                   "rejected_steps": trajectory.rejected_steps}
        if stats:
            payload["stats"] = stats
        index = self.write_json(out_dir / "index.json", payload)
        logger.info(f"Exported {len(entries)} trajectory snapshots to {out_dir}")
        return index

    def export_animation(self, out_dir: PathLike, report) -> Path:
        """frame_%04d / baseline_%04d meshes and report.json."""
        out_dir = Path(out_dir)
        fmt = self.export_settings['mesh_format']
        for k, (frame, baseline) in enumerate(zip(report.frames, report.baseline_frames)):
            save_mesh(frame, self._prepare(out_dir / f"frame_{k:04d}.{fmt}"), fmt)
            save_mesh(baseline, self._prepare(out_dir / f"baseline_{k:04d}.{fmt}"), fmt)
        path = self.write_json(out_dir / "report.json", report.to_dict())
        logger.info(f"Exported {len(report.frames)} frames to {out_dir}")
        return path

    def export_correspondence(self, correspondence, file_path: PathLike) -> Path:
        return self.write_text(file_path, self.formatter.format_correspondence(correspondence))

    def export_code(self, code: Sequence[float], file_path: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
        payload = {"code": np.asarray(code, dtype=np.float64).tolist()}
        payload.update(extra or {})
        return self.write_json(file_path, payload)
