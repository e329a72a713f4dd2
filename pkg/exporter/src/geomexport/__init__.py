"""Estimator-to-manifest exporter for the vidgeom scoring engine."""

from .backends import BackendError, GeometryResult, load_backend
from .export import ExporterConfig, ExportError, ExportReport, ValidationError, export_clip, validate_export
from .gcr import GcrError, read_gcr, write_gcr

__version__ = "0.1.0"
