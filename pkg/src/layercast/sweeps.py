from __future__ import annotations

import json
import tomllib
from pathlib import Path

from pydantic import TypeAdapter

from layercast.log import logger
from layercast.models import SweepSpec

_PROMPTS = TypeAdapter(list[list[int]])


def load_sweep_spec(path: Path) -> SweepSpec:
    """Load a sweep from a ``.json`` or ``.toml`` file; relative prompt files resolve next to it."""
    suffix = path.suffix.lower()
    if suffix == ".toml":
        with open(path, "rb") as f:
            data = tomllib.load(f)
    elif suffix == ".json":
        data = json.loads(path.read_text())
    else:
        raise ValueError(f"Unsupported sweep file format: {path.suffix}")

    if isinstance(prompts_file := data.get("prompts"), str):
        data["prompts"] = load_prompts(path.parent / prompts_file)
    spec = SweepSpec.model_validate(data)
    logger.info(f"Loaded sweep {path.name}: {len(spec.policies)} policies")
    return spec


def load_prompts(path: Path) -> list[list[int]]:
    """Token-id prompts from JSON (a list of lists) or text (one prompt per line, ids separated by spaces)."""
    if path.suffix.lower() == ".json":
        return _PROMPTS.validate_json(path.read_bytes())

    prompts = []
    for number, line in enumerate(path.read_text().splitlines(), 1):
        if not (line := line.split("#", 1)[0].strip()):
            continue
        try:
            prompts.append([int(token) for token in line.replace(",", " ").split()])
        except ValueError as error:
            raise ValueError(f"{path}:{number}: prompt tokens must be integers") from error
    if not prompts:
        raise ValueError(f"No prompts found in {path}")
    return prompts
