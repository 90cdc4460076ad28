"""Adapter that turns stochastic forward passes of a torch model into
run directories readable by the probseg toolkit."""

from .dropout import dropout_groups, set_stochastic
from .export import ExportConfig, ExportError, export_run, load_image
from .models import TinyInstanceNet, load_model

__all__ = [
    "ExportConfig",
    "ExportError",
    "TinyInstanceNet",
    "dropout_groups",
    "export_run",
    "load_image",
    "load_model",
    "set_stochastic",
]
