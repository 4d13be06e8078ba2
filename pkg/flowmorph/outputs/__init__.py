from .formatters import ReportFormatter
from .exporters import DataExporter

__all__ = ["ReportFormatter", "DataExporter"]