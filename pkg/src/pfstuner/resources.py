"""Access to packaged data files (prompt texts, model definitions)."""

from __future__ import annotations

import json
from importlib import resources
from typing import Any


def prompt_text(name: str) -> str:
    """Load a prompt from ``pfstuner/data/prompts/<name>.txt``."""
    ref = resources.files("pfstuner").joinpath("data", "prompts", f"{name}.txt")
    return ref.read_text(encoding="utf-8")


def data_json(name: str) -> Any:
    """Load ``pfstuner/data/<name>.json``."""
    ref = resources.files("pfstuner").joinpath("data", f"{name}.json")
    return json.loads(ref.read_text(encoding="utf-8"))


def data_path(name: str) -> str:
    """Filesystem path of a packaged data file (for CLI defaults)."""
    return str(resources.files("pfstuner").joinpath("data", name))
