"""Operator extraction and workflow search for LLM agent pipelines."""

from opflow.errors import OpflowError

__version__ = "0.1.0"

__all__ = ["OpflowError", "__version__"]
