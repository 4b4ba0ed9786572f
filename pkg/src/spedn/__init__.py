"""Semantic-block parsing, assembly, and execution for KG question answering."""

from importlib import resources


def data_path(domain: str, name: str):
    """Path to a bundled fixture file, e.g. data_path('geo', 'kg.txt')."""
    return resources.files(__package__) / "data" / domain / name


__all__ = ["data_path"]
__version__ = "0.1.0"
