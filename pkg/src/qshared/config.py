"""YAML loading for model specs and scenarios, and paths of bundled configs."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any

import yaml


def load_yaml(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return cfg


def bundled(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"smart3.yaml"`` or
    ``"scenarios/ex3.yaml"``."""
    return Path(str(resources.files("qshared") / "configs" / name))


def bundled_scenarios() -> list[Path]:
    root = bundled("scenarios")
    return sorted(root.glob("ex*.yaml"))
