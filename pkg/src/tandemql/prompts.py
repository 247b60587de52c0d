"""Prompt template assets.

Templates live under ``tandemql/prompt_assets`` and use ``$slot``
placeholders (string.Template) so literal JSON braces in the prompt
bodies need no escaping.
"""

from __future__ import annotations

import functools
import json
import string
from importlib import resources
from pathlib import Path
from typing import Any


@functools.lru_cache(maxsize=None)
def load(name: str) -> str:
    return (
        resources.files("tandemql")
        .joinpath("prompt_assets", name)
        .read_text(encoding="utf-8")
    )


def render(name: str, **slots: Any) -> str:
    return string.Template(load(name)).safe_substitute(**slots)


def judge_examples(path: str | Path | None = None) -> list[dict[str, Any]]:
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return json.loads(load("judge_examples.json"))
