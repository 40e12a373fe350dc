"""JSON configuration file with ``tokenizer``, ``detector`` and ``generator`` sections.

Example::

    {
      "tokenizer": {"mode": "whitespace", "lowercase": true},
      "detector": {"baseline_window": [1, 30], "alpha": 0.05, "z_threshold": 3.0},
      "generator": {"coupling": 0.7, "seed": 7}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .harness import GeneratorConfig
from .idt import IDTConfig
from .token_stats import TokenizerSpec

SECTIONS = ("tokenizer", "detector", "generator")


@dataclass
class Settings:
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    detector: IDTConfig = field(default_factory=IDTConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


def settings_from_dict(doc: dict) -> Settings:
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return Settings(
        tokenizer=TokenizerSpec(**doc.get("tokenizer", {})),
        detector=IDTConfig.from_dict(doc.get("detector", {})),
        generator=GeneratorConfig.from_dict(doc.get("generator", {})),
    )


def load_settings(path: str | Path | None) -> Settings:
    if path is None:
        return Settings()
    with open(path, encoding="utf-8") as fh:
        return settings_from_dict(json.load(fh))
