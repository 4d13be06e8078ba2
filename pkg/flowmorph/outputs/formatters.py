import csv
import io
import json
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.utils import format_float


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


class ReportFormatter:
    def __init__(self, config=None):
        self.config = config if config else DEFAULT_CONFIG

        self.report_settings = {
            'float_digits': 9,
            'include_config': True,
            'include_timestamp': False,
        }

        if config:
            for key, value in config.get('output', {}).items():
                if key in self.report_settings:
                    self.report_settings[key] = value

    def with_config(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        """Echo the effective configuration (and optionally a timestamp) into a report."""
        payload = _json_safe(payload)
        if self.report_settings['include_config'] and 'effective_config' not in payload:
            payload['effective_config'] = _json_safe(self.config.to_dict())
        if self.report_settings['include_timestamp']:
            payload['timestamp'] = datetime.now().isoformat()
        return payload

    def format_json(self, payload: Dict[str, Any]) -> str:
        return json.dumps(self.with_config(payload), indent=2, sort_keys=False) + "\n"

    def format_verify(self, report, format_type: str = 'json') -> str:
        format_methods = {
            'json': self._format_verify_json,
            'text': self._format_verify_table,
            'table': self._format_verify_table,
        }

        formatter = format_methods.get(format_type.lower(), self._format_verify_json)
        return formatter(report)

    def _format_verify_json(self, report) -> str:
        return self.format_json(report.to_dict())

    def _fmt(self, value: Any) -> str:
        if isinstance(value, float):
            return format_float(value, self.report_settings['float_digits'])
        if isinstance(value, dict):
            return ", ".join(f"{k}={self._fmt(v)}" for k, v in value.items())
        if isinstance(value, (list, tuple)):
            return "[" + ", ".join(self._fmt(v) for v in value) + "]"
        return str(value)

    def _format_verify_table(self, report) -> str:
        lines = []
        lines.append("FLOW VERIFICATION REPORT")
        lines.append("=" * 72)
        lines.append(f"Seed: {report.seed}")
        lines.append(f"Overall: {'PASS' if report.passed else 'FAIL'}")
        lines.append("")

        name_width = max([len(p.name) for p in report.properties] + [8])
        lines.append(f"{'property':<{name_width}}  {'result':<6}  {'value':<24}  tolerance")
        lines.append("-" * 72)
        for prop in report.properties:
            status = "pass" if prop.passed else "FAIL"
            value = self._fmt(prop.value)
            if len(value) > 24:
                value = value[:21] + "..."
            lines.append(f"{prop.name:<{name_width}}  {status:<6}  {value:<24}  {self._fmt(prop.tolerance)}")
            if "error" in prop.details:
                lines.append(f"    error: {prop.details['error']}")

        if report.timing:
            lines.append("")
            lines.append("Timing (s): " + ", ".join(f"{k}={v:.2f}" for k, v in report.timing.items()))
        return "\n".join(lines) + "\n"

    def format_rows(self, rows: Sequence[Dict[str, Any]], fieldnames: Optional[List[str]] = None) -> str:
        """CSV with floats at the configured number of significant digits."""
        if not rows:
            return ""
        fieldnames = fieldnames or list(rows[0].keys())
        out = io.StringIO()
        writer = csv.DictWriter(out, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: self._fmt(row.get(k, "")) for k in fieldnames})
        return out.getvalue()

    def format_correspondence(self, correspondence) -> str:
        rows = [{"source": s, "target": t, "distance": d} for s, t, d in correspondence.to_rows()]
        return self.format_rows(rows, ["source", "target", "distance"])

    def format_frames(self, report) -> str:
        return self.format_rows([s.to_dict() for s in report.stats])
