"""Train-or-convert utility emitting concept-probe interchange artifacts."""

from .jobs import ConversionError, ExportJob, ParityReport, build_planted_fixture, convert_trained

__all__ = [
    "ConversionError",
    "ExportJob",
    "ParityReport",
    "build_planted_fixture",
    "convert_trained",
]
