"""Keras-to-JSON exporter and fixture trainer for the caadnn analyzer."""

from .export import ExportError, ExportManifest, export_model, write_input
from .hexfmt import to_hex

__version__ = "0.1.0"
