"""Bundled NAL plugins; importing this package registers ``loop`` and ``tcp``."""

from . import loop, tcp  # noqa: F401
